"""Training orchestrators for FL, SL, PSL, FSL and FRC.

All five share one data order (a per-client generator seeded from
``(seed, client)``) and one initialisation (``model.init(seed)``), so with a
single client and no averaging they walk the same weight trajectory.
Every cross-entity transfer is logged as a typed :class:`Message`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import ClientData, Dataset
from .model import (BYTES_PER_VALUE, SequentialModel, WeightVector, cut, fed_avg, get_weights, ser_avg,
                    set_weights)
from .netsim import ARCHS, ComputeModel, LinkModel, compute_delay, transmission_delay, update_delay
from .privacy import (PrivacyConfig, dc_round_step, dp_gradients, nopeek_client_backward, select_round,
                      sgd_update)
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    arch: str = "FSL"
    num_clients: int = 1
    cut_index: int = 1
    epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 0.1
    avg_every: int = 1
    averaging: bool = True
    seed: int = 0
    psl_per_batch_update: bool = False

    def __post_init__(self):
        self.arch = self.arch.upper()
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.avg_every < 1:
            raise ValueError("avg_every must be >= 1")


# -- message trace -------------------------------------------------------------
@dataclass(frozen=True)
class Message:
    time: float
    src: str
    dst: str
    kind: str
    bytes: int


WEIGHT_KINDS = ("full_weights", "client_weights", "server_weights", "global_weights")
DATA_KINDS = ("activation", "gradient", "labels", "loss")


class Network:
    """Per-entity virtual clocks driven by the link and compute cost models."""

    def __init__(self, link: LinkModel | None = None, client_compute: ComputeModel | None = None,
                 server_compute: ComputeModel | None = None):
        self.link = link or LinkModel(1.25e8, 0.0)
        self.client_compute = client_compute or ComputeModel(1e-9)
        self.server_compute = server_compute or ComputeModel(1e-10)
        self.clock: dict[str, float] = {}
        self.messages: list[Message] = []

    def _rate(self, entity: str) -> ComputeModel:
        return self.client_compute if entity.startswith("client") else self.server_compute

    def compute(self, entity: str, part: SequentialModel, batch: int, phases=("forward", "backward")) -> None:
        t = sum(compute_delay(part, batch, ph, self._rate(entity)) for ph in phases)
        self.clock[entity] = self.clock.get(entity, 0.0) + t

    def update(self, entity: str, part: SequentialModel) -> None:
        self.clock[entity] = self.clock.get(entity, 0.0) + update_delay(part, self._rate(entity))

    def send(self, src: str, dst: str, kind: str, nbytes: int) -> None:
        arrive = self.clock.get(src, 0.0) + transmission_delay(nbytes, self.link)
        self.clock[dst] = max(self.clock.get(dst, 0.0), arrive)
        self.messages.append(Message(arrive, src, dst, kind, int(nbytes)))

    def barrier(self, entities: Sequence[str]) -> None:
        t = max(self.clock.get(e, 0.0) for e in entities)
        for e in entities:
            self.clock[e] = t

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for m in self.messages:
                fh.write(json.dumps({"time": m.time, "src": m.src, "dst": m.dst, "kind": m.kind,
                                     "bytes": m.bytes}) + "\n")


def _nbytes(arr) -> int:
    return BYTES_PER_VALUE * int(np.size(arr))


# -- results -------------------------------------------------------------------
METRIC_COLUMNS = ("arch", "seed", "epoch", "pair_id", "train_acc", "test_acc", "loss")


@dataclass
class Pair:
    client: SequentialModel
    server: SequentialModel

    def predict(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.server(self.client(Tensor(x))).data.argmax(axis=1)

    def accuracy(self, data: Dataset) -> float:
        if len(data) == 0:
            return float("nan")
        return float((self.predict(data.x) == data.y).mean())

    def weights(self) -> WeightVector:
        full = SequentialModel(self.client.layers + self.server.layers, self.client.input_shape)
        return get_weights(full)


@dataclass
class TrainResult:
    arch: str
    config: TrainConfig
    pairs: list[Pair]
    metrics: list[dict] = field(default_factory=list)
    trajectories: list[list[WeightVector]] = field(default_factory=list)
    network: Network | None = None
    global_weights: WeightVector | None = None

    @property
    def messages(self) -> list[Message]:
        return self.network.messages if self.network else []

    def final_metrics(self) -> list[dict]:
        last = max(r["epoch"] for r in self.metrics)
        return [r for r in self.metrics if r["epoch"] == last]


# -- shared helpers ------------------------------------------------------------
def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _client_rngs(cfg: TrainConfig) -> list[np.random.Generator]:
    return [np.random.default_rng([cfg.seed, i]) for i in range(cfg.num_clients)]


def _noise_rngs(cfg: TrainConfig, tag: int) -> list[np.random.Generator]:
    return [np.random.default_rng([cfg.seed, i, tag]) for i in range(cfg.num_clients)]


def _check_finite(loss: float, arch: str, epoch: int, pair: int) -> None:
    if not np.isfinite(loss):
        raise TrainingDiverged(f"{arch}: non-finite loss {loss} at epoch {epoch}, pair {pair}")


def _init_model(model: SequentialModel, seed: int) -> SequentialModel:
    m = model.clone()
    m.init(seed)
    return m


class _Tracker:
    def __init__(self, cfg: TrainConfig, record: bool):
        self.cfg = cfg
        self.record = record
        self.rows: list[dict] = []
        self.traj: list[list[WeightVector]] = [[] for _ in range(cfg.num_clients)]
        self._loss = np.zeros(cfg.num_clients)
        self._correct = np.zeros(cfg.num_clients)
        self._seen = np.zeros(cfg.num_clients)
        self._steps = np.zeros(cfg.num_clients)

    def batch(self, pair: int, loss: float, logits: np.ndarray, labels: np.ndarray) -> None:
        self._loss[pair] += loss
        self._steps[pair] += 1
        self._correct[pair] += int((logits.argmax(axis=1) == labels).sum())
        self._seen[pair] += len(labels)

    def epoch_end(self, epoch: int, pairs: Sequence[Pair], clients: Sequence[ClientData]) -> None:
        for i, (pair, cd) in enumerate(zip(pairs, clients)):
            seen = self._seen[i]
            self.rows.append({
                "arch": self.cfg.arch, "seed": self.cfg.seed, "epoch": epoch, "pair_id": i,
                "train_acc": self._correct[i] / seen if seen else float("nan"),
                "test_acc": pair.accuracy(cd.test),
                "loss": self._loss[i] / self._steps[i] if self._steps[i] else float("nan"),
            })
            if self.record:
                self.traj[i].append(pair.weights())
        self._loss[:] = self._correct[:] = self._seen[:] = self._steps[:] = 0


def _averaging_epoch(cfg: TrainConfig, epoch: int) -> bool:
    return cfg.averaging and (epoch + 1) % cfg.avg_every == 0


# -- split-learning step ---------------------------------------------------------
@dataclass
class _SplitStep:
    loss: float
    logits: np.ndarray
    server_grads: list[np.ndarray]


def _split_forward_backward(client: SequentialModel, server: SequentialModel, xb: np.ndarray, yb: np.ndarray,
                            lr: float, privacy: PrivacyConfig, net: Network, cname: str, sname: str,
                            client_rng: np.random.Generator, server_rng: np.random.Generator) -> _SplitStep:
    """Client forward, server forward/backward, client backward + client update.

    Server gradients are returned, not applied, so PSL can sum them.
    """
    batch = len(yb)
    x = Tensor(xb)
    h = client(x)
    net.compute(cname, client, batch, ("forward",))
    net.send(cname, sname, "activation", _nbytes(h.data))
    net.send(cname, sname, "labels", _nbytes(yb))

    hs = Tensor(h.data.copy(), requires_grad=True)
    logits = server(hs)
    loss = T.cross_entropy(logits, yb)
    server.zero_grad()
    loss.backward()
    net.compute(sname, server, batch)
    dp = privacy.dp
    if dp is not None and dp.scope == "full_model" and server.params:
        server_grads = dp_gradients(server, hs.data, dp, server_rng, labels=yb)
    else:
        server_grads = [p.grad for p in server.params]
    boundary = hs.grad
    net.send(sname, cname, "gradient", _nbytes(boundary))

    if client.params:
        if privacy.mode == "nopeek":
            net.send(sname, cname, "loss", BYTES_PER_VALUE)
            nopeek_client_backward(client, x, h, boundary, privacy.loss_multiplier)
            grads = [p.grad for p in client.params]
        elif dp is not None:
            grads = dp_gradients(client, xb, dp, client_rng, upstream=boundary)
        else:
            client.zero_grad()
            h.backward(boundary)
            grads = [p.grad for p in client.params]
        net.compute(cname, client, batch, ("backward",))
        sgd_update(client.params, grads, lr)
        net.update(cname, client)
    return _SplitStep(loss.item(), logits.data, server_grads)


def _dc_epoch(client: SequentialModel, data: Dataset, cfg: TrainConfig, privacy: PrivacyConfig,
              rng: np.random.Generator, net: Network, cname: str) -> None:
    for idx in _batches(len(data), cfg.batch_size, rng):
        if len(idx) < 2:
            continue
        dc_round_step(client, data.x[idx], privacy.loss_multiplier, cfg.learning_rate)
        net.compute(cname, client, len(idx))


def _is_dc_epoch(privacy: PrivacyConfig, epoch: int) -> bool:
    return privacy.mode == "cpa_dc" and select_round(epoch, privacy.schedule) == "dc"


# -- FL ----------------------------------------------------------------------------
def train_fl(cfg: TrainConfig, model: SequentialModel, clients: Sequence[ClientData],
             net: Network | None = None, record_trajectory: bool = False) -> TrainResult:
    """FedAVG: full local SGD on every client, full-weight averaging at the parameter server."""
    net = net or Network()
    base = _init_model(model, cfg.seed)
    models = [base.clone() for _ in range(cfg.num_clients)]
    rngs = _client_rngs(cfg)
    tracker = _Tracker(cfg, record_trajectory)
    for epoch in range(cfg.epochs):
        for i, (m, cd) in enumerate(zip(models, clients)):
            for idx in _batches(len(cd.train), cfg.batch_size, rngs[i]):
                logits = m(Tensor(cd.train.x[idx]))
                loss = T.cross_entropy(logits, cd.train.y[idx])
                m.zero_grad()
                loss.backward()
                _check_finite(loss.item(), cfg.arch, epoch, i)
                sgd_update(m.params, [p.grad for p in m.params], cfg.learning_rate)
                net.compute(f"client{i}", m, len(idx))
                net.update(f"client{i}", m)
                tracker.batch(i, loss.item(), logits.data, cd.train.y[idx])
        if _averaging_epoch(cfg, epoch) and cfg.num_clients > 1:
            local = [get_weights(m) for m in models]
            for i, w in enumerate(local):
                net.send(f"client{i}", "ps", "full_weights", _nbytes(w.values))
            avg = fed_avg(local)
            for i, m in enumerate(models):
                set_weights(m, avg)
                net.send("ps", f"client{i}", "full_weights", _nbytes(avg.values))
        tracker.epoch_end(epoch, [_as_pair(m, cfg.cut_index) for m in models], clients)
    result = TrainResult(cfg.arch, cfg, [_as_pair(m, cfg.cut_index) for m in models], tracker.rows,
                         tracker.traj, net)
    result.global_weights = get_weights(models[0])
    return result


def _as_pair(model: SequentialModel, d: int) -> Pair:
    part = cut(model, d)
    return Pair(part.client, part.server)


# -- SL --------------------------------------------------------------------------------
def train_sl(cfg: TrainConfig, model: SequentialModel, clients: Sequence[ClientData],
             net: Network | None = None, record_trajectory: bool = False,
             privacy: PrivacyConfig | None = None, on_handoff: Callable[[int, WeightVector], None] | None = None
             ) -> TrainResult:
    """Vanilla split learning: one server, clients take turns and hand their weights on."""
    privacy = privacy or PrivacyConfig()
    net = net or Network()
    part = cut(_init_model(model, cfg.seed), cfg.cut_index)
    server = part.server
    client = part.client
    rngs = _client_rngs(cfg)
    crngs, srngs = _noise_rngs(cfg, 1), _noise_rngs(cfg, 2)
    tracker = _Tracker(cfg, record_trajectory)
    latest = [client.clone() for _ in range(cfg.num_clients)]
    for epoch in range(cfg.epochs):
        for i, cd in enumerate(clients):
            cname = f"client{i}"
            if _is_dc_epoch(privacy, epoch):
                _dc_epoch(client, cd.train, cfg, privacy, rngs[i], net, cname)
            else:
                for idx in _batches(len(cd.train), cfg.batch_size, rngs[i]):
                    step = _split_forward_backward(client, server, cd.train.x[idx], cd.train.y[idx],
                                                   cfg.learning_rate, privacy, net, cname, "server",
                                                   crngs[i], srngs[0])
                    _check_finite(step.loss, cfg.arch, epoch, i)
                    sgd_update(server.params, step.server_grads, cfg.learning_rate)
                    net.update("server", server)
                    tracker.batch(i, step.loss, step.logits, cd.train.y[idx])
            latest[i] = client.clone()
            if cfg.num_clients > 1:
                nxt = (i + 1) % cfg.num_clients
                w = get_weights(client)
                if on_handoff is not None:
                    on_handoff(nxt, w)
                net.send(cname, f"client{nxt}", "client_weights", _nbytes(w.values))
        tracker.epoch_end(epoch, [Pair(c, server) for c in latest], clients)
    return TrainResult(cfg.arch, cfg, [Pair(c, server) for c in latest], tracker.rows, tracker.traj, net)


# -- PSL ----------------------------------------------------------------------------------
def train_psl(cfg: TrainConfig, model: SequentialModel, clients: Sequence[ClientData],
              net: Network | None = None, record_trajectory: bool = False,
              privacy: PrivacyConfig | None = None,
              on_server_update: Callable[[WeightVector, list[list[np.ndarray]]], None] | None = None
              ) -> TrainResult:
    """Parallel split learning: one shared server, one summed server update per round."""
    privacy = privacy or PrivacyConfig()
    net = net or Network()
    part = cut(_init_model(model, cfg.seed), cfg.cut_index)
    server = part.server
    client_models = [part.client.clone() for _ in range(cfg.num_clients)]
    rngs = _client_rngs(cfg)
    crngs, srngs = _noise_rngs(cfg, 1), _noise_rngs(cfg, 2)
    tracker = _Tracker(cfg, record_trajectory)
    for epoch in range(cfg.epochs):
        dc = _is_dc_epoch(privacy, epoch)
        if dc:
            for i, cd in enumerate(clients):
                _dc_epoch(client_models[i], cd.train, cfg, privacy, rngs[i], net, f"client{i}")
        else:
            plans = [_batches(len(cd.train), cfg.batch_size, rngs[i]) for i, cd in enumerate(clients)]
            for r in range(max(len(p) for p in plans)):
                round_grads: list[list[np.ndarray]] = []
                for i, cd in enumerate(clients):
                    if r >= len(plans[i]):
                        continue
                    idx = plans[i][r]
                    step = _split_forward_backward(client_models[i], server, cd.train.x[idx], cd.train.y[idx],
                                                   cfg.learning_rate, privacy, net, f"client{i}", "server",
                                                   crngs[i], srngs[0])
                    _check_finite(step.loss, cfg.arch, epoch, i)
                    tracker.batch(i, step.loss, step.logits, cd.train.y[idx])
                    if cfg.psl_per_batch_update:
                        sgd_update(server.params, step.server_grads, cfg.learning_rate)
                        net.update("server", server)
                    else:
                        round_grads.append(step.server_grads)
                if round_grads:
                    before = get_weights(server)
                    summed = [np.sum([g[k] for g in round_grads], axis=0) for k in range(len(server.params))]
                    sgd_update(server.params, summed, cfg.learning_rate)
                    net.update("server", server)
                    if on_server_update is not None:
                        on_server_update(before, round_grads)
        tracker.epoch_end(epoch, [Pair(c, server) for c in client_models], clients)
    return TrainResult(cfg.arch, cfg, [Pair(c, server) for c in client_models], tracker.rows, tracker.traj, net)


# -- FSL ------------------------------------------------------------------------------------
def train_fsl(cfg: TrainConfig, model: SequentialModel, clients: Sequence[ClientData],
              net: Network | None = None, record_trajectory: bool = False,
              privacy: PrivacyConfig | None = None, max_batches: int | None = None) -> TrainResult:
    """Federated split learning: independent client/server pairs plus server-side averaging.

    ``max_batches`` truncates every epoch (used by single-step oracles).
    """
    privacy = privacy or PrivacyConfig()
    net = net or Network()
    part = cut(_init_model(model, cfg.seed), cfg.cut_index)
    pairs = [Pair(part.client.clone(), part.server.clone()) for _ in range(cfg.num_clients)]
    rngs = _client_rngs(cfg)
    crngs, srngs = _noise_rngs(cfg, 1), _noise_rngs(cfg, 2)
    tracker = _Tracker(cfg, record_trajectory)
    for epoch in range(cfg.epochs):
        dc = _is_dc_epoch(privacy, epoch)
        for i, (pair, cd) in enumerate(zip(pairs, clients)):
            cname, sname = f"client{i}", f"server{i}"
            if dc:
                _dc_epoch(pair.client, cd.train, cfg, privacy, rngs[i], net, cname)
                continue
            for b, idx in enumerate(_batches(len(cd.train), cfg.batch_size, rngs[i])):
                if max_batches is not None and b >= max_batches:
                    break
                step = _split_forward_backward(pair.client, pair.server, cd.train.x[idx], cd.train.y[idx],
                                               cfg.learning_rate, privacy, net, cname, sname, crngs[i], srngs[i])
                _check_finite(step.loss, cfg.arch, epoch, i)
                sgd_update(pair.server.params, step.server_grads, cfg.learning_rate)
                net.update(sname, pair.server)
                tracker.batch(i, step.loss, step.logits, cd.train.y[idx])
        if _averaging_epoch(cfg, epoch) and cfg.num_clients > 1:
            servers = [f"server{i}" for i in range(cfg.num_clients)]
            net.barrier(servers)
            local = [get_weights(p.server) for p in pairs]
            for s, w in zip(servers, local):
                net.send(s, "ps", "server_weights", _nbytes(w.values))
            avg = ser_avg(local)
            for s, p in zip(servers, pairs):
                set_weights(p.server, avg)
                net.send("ps", s, "server_weights", _nbytes(avg.values))
        tracker.epoch_end(epoch, pairs, clients)
    return TrainResult(cfg.arch, cfg, pairs, tracker.rows, tracker.traj, net)


# -- FRC ------------------------------------------------------------------------------------
def train_frc(cfg: TrainConfig, model: SequentialModel, clients: Sequence[ClientData],
              net: Network | None = None, record_trajectory: bool = False,
              on_pass: Callable[[str, int, SequentialModel], None] | None = None) -> TrainResult:
    """Federated reconstruction: layers [0, d) are a private local shard, [d, end) a shared global shard.

    Each epoch runs pass A (local shard trains, global frozen) then pass B
    (global trains, local frozen); global shards are averaged afterwards.
    ``on_pass(name, client, model)`` fires after each pass.
    """
    net = net or Network()
    base = _init_model(model, cfg.seed)
    models = [base.clone() for _ in range(cfg.num_clients)]
    rngs = _client_rngs(cfg)
    tracker = _Tracker(cfg, record_trajectory)
    d = cfg.cut_index
    for epoch in range(cfg.epochs):
        for i, (m, cd) in enumerate(zip(models, clients)):
            split = cut(m, d)
            for name, trained in (("A", split.client), ("B", split.server)):
                for idx in _batches(len(cd.train), cfg.batch_size, rngs[i]):
                    logits = m(Tensor(cd.train.x[idx]))
                    loss = T.cross_entropy(logits, cd.train.y[idx])
                    m.zero_grad()
                    loss.backward()
                    _check_finite(loss.item(), cfg.arch, epoch, i)
                    net.compute(f"client{i}", m, len(idx))
                    if trained.params:
                        sgd_update(trained.params, [p.grad for p in trained.params], cfg.learning_rate)
                        net.update(f"client{i}", trained)
                    if name == "B":
                        tracker.batch(i, loss.item(), logits.data, cd.train.y[idx])
                if on_pass is not None:
                    on_pass(name, i, m)
        if _averaging_epoch(cfg, epoch) and cfg.num_clients > 1:
            shards = [cut(m, d).server for m in models]
            local = [get_weights(s) for s in shards]
            for i, w in enumerate(local):
                net.send(f"client{i}", "ps", "global_weights", _nbytes(w.values))
            avg = fed_avg(local)
            for i, s in enumerate(shards):
                set_weights(s, avg)
                net.send("ps", f"client{i}", "global_weights", _nbytes(avg.values))
        tracker.epoch_end(epoch, [_as_pair(m, d) for m in models], clients)
    return TrainResult(cfg.arch, cfg, [_as_pair(m, d) for m in models], tracker.rows, tracker.traj, net)


TRAINERS = {"FL": train_fl, "SL": train_sl, "PSL": train_psl, "FSL": train_fsl, "FRC": train_frc}


def train(cfg: TrainConfig, model: SequentialModel, clients: Sequence[ClientData], net: Network | None = None,
          privacy: PrivacyConfig | None = None, record_trajectory: bool = False) -> TrainResult:
    """Dispatch on ``cfg.arch``. Privacy modes apply to the split architectures only."""
    if len(clients) != cfg.num_clients:
        raise ValueError(f"{len(clients)} client shards for num_clients={cfg.num_clients}")
    if cfg.arch in ("FL", "FRC"):
        if privacy is not None and privacy.mode != "none":
            raise ValueError(f"privacy mode {privacy.mode!r} needs a split architecture")
        return TRAINERS[cfg.arch](cfg, model, clients, net, record_trajectory)
    return TRAINERS[cfg.arch](cfg, model, clients, net, record_trajectory, privacy)
