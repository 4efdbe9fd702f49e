"""Deterministic virtual-clock timing for the five training architectures.

Time comes from two cost models: a link (latency + bytes/bandwidth) and a
per-entity compute rate applied to static flop counts. Nothing here reads
the wall clock. Events are ordered by ``(time, entity, sequence)``.
"""

from __future__ import annotations

import csv
import heapq
import itertools
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Literal

from .model import BYTES_PER_VALUE, SequentialModel
from .profiles import LayerProfile, as_profile

ARCHS = ("FL", "SL", "PSL", "FSL", "FRC")


@dataclass(frozen=True)
class LinkModel:
    bandwidth: float  # bytes / second
    latency: float = 0.0

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")


@dataclass(frozen=True)
class ComputeModel:
    seconds_per_flop: float
    backward_factor: float = 2.0

    def __post_init__(self):
        if self.seconds_per_flop <= 0:
            raise ValueError("seconds_per_flop must be positive")


def transmission_delay(nbytes: int, link: LinkModel) -> float:
    if nbytes < 0:
        raise ValueError("byte count must be non-negative")
    if nbytes == 0 and link.latency == 0:
        return 0.0
    return link.latency + nbytes / link.bandwidth


def compute_delay(part: SequentialModel | LayerProfile, batch: int,
                  phase: Literal["forward", "backward"], model: ComputeModel) -> float:
    flops = batch * as_profile(part).forward_flops()
    if phase == "backward":
        flops *= model.backward_factor
    elif phase != "forward":
        raise ValueError(f"unknown phase {phase!r}")
    return model.seconds_per_flop * flops


def update_delay(part: SequentialModel | LayerProfile, model: ComputeModel) -> float:
    """One SGD step: a multiply-add per parameter."""
    return model.seconds_per_flop * 2 * as_profile(part).param_count()


@dataclass
class TimingBreakdown:
    client_fb: float = 0.0
    server_fb: float = 0.0
    client_update: float = 0.0
    server_update: float = 0.0
    sync: float = 0.0

    @property
    def fb(self) -> float:
        return self.client_fb + self.server_fb

    @property
    def total(self) -> float:
        return self.client_fb + self.server_fb + self.client_update + self.server_update + self.sync

    def __add__(self, other: "TimingBreakdown") -> "TimingBreakdown":
        return TimingBreakdown(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- event engine ----------------------------------------------------------
@dataclass(order=True)
class SimEvent:
    time: float
    entity: int
    seq: int
    action: str = field(compare=False)
    callback: Callable[[], None] = field(compare=False, repr=False)


class VirtualClock:
    """Global event queue plus per-entity busy intervals."""

    def __init__(self):
        self.now = 0.0
        self._queue: list[SimEvent] = []
        self._seq = itertools.count()
        self._free_at: dict[str, float] = {}
        self._ids: dict[str, int] = {}
        self.intervals: list[tuple[str, str, float, float]] = []
        self.transfers: list[tuple[str, str, float, float]] = []
        self.popped: list[float] = []

    def entity_id(self, name: str) -> int:
        return self._ids.setdefault(name, len(self._ids))

    def schedule(self, time: float, entity: str, action: str, callback: Callable[[], None]) -> None:
        if time < self.now:
            raise ValueError(f"cannot schedule {action} in the past ({time} < {self.now})")
        heapq.heappush(self._queue, SimEvent(time, self.entity_id(entity), next(self._seq), action, callback))

    def run(self) -> float:
        while self._queue:
            ev = heapq.heappop(self._queue)
            self.now = ev.time
            self.popped.append(ev.time)
            ev.callback()
        return self.now

    def occupy(self, entity: str, category: str, ready: float, duration: float) -> float:
        """Run a task on ``entity`` no earlier than ``ready``; FIFO behind its earlier tasks."""
        start = max(ready, self._free_at.get(entity, 0.0))
        end = start + duration
        self._free_at[entity] = end
        self.intervals.append((entity, category, start, end))
        return end

    def wire(self, entity: str, category: str, start: float, duration: float) -> float:
        """A transmission charged to the receiving entity; does not block its compute."""
        self.intervals.append((entity, category, start, start + duration))
        self.transfers.append((entity, category, start, start + duration))
        return start + duration

    def busy(self, entity_prefix: str, category: str) -> dict[str, float]:
        out: dict[str, float] = {}
        for ent, cat, s, e in self.intervals:
            if cat == category and ent.startswith(entity_prefix):
                out[ent] = out.get(ent, 0.0) + (e - s)
        return out


@dataclass
class EpochPlan:
    """Everything the simulator needs to time one epoch of one architecture."""

    arch: str
    full: LayerProfile
    cut_index: int
    num_clients: int
    batches_per_client: int
    batch_size: int
    link: LinkModel
    client_compute: ComputeModel
    server_compute: ComputeModel
    sync_weights: bool = True  # averaging barrier at the end of the epoch (skipped for one client)
    psl_per_batch_update: bool = False

    @classmethod
    def build(cls, arch: str, model: SequentialModel | LayerProfile, cut_index: int, **kw) -> "EpochPlan":
        return cls(arch.upper(), as_profile(model), cut_index, **kw)

    @property
    def client(self) -> LayerProfile:
        return self.full.slice(0, self.cut_index)

    @property
    def server(self) -> LayerProfile:
        return self.full.slice(self.cut_index)

    @property
    def interm_bytes(self) -> int:
        if self.arch in ("FL", "FRC"):
            return 0
        return BYTES_PER_VALUE * self.batch_size * self.full.boundary_elements(self.cut_index)


@dataclass
class EpochTiming:
    breakdown: TimingBreakdown
    elapsed: float
    per_entity: dict[str, dict[str, float]]
    interm_bytes: int
    intervals: list[tuple[str, str, float, float]] = field(default_factory=list, repr=False)
    transfers: list[tuple[str, str, float, float]] = field(default_factory=list, repr=False)
    event_times: list[float] = field(default_factory=list, repr=False)


def run_epoch(plan: EpochPlan) -> EpochTiming:
    """Simulate one epoch and report busy-time components plus elapsed virtual time.

    ``client_fb`` and ``client_update`` are the busiest client's totals;
    ``server_fb``/``server_update`` are the busiest server's totals. The PSL
    and SL servers are a single entity that serves every client in FIFO
    order, so their F&B grows with the number of clients.
    """
    if plan.arch not in ARCHS:
        raise ValueError(f"unknown architecture {plan.arch!r}")
    clock = VirtualClock()
    runner = _RUNNERS[plan.arch]
    runner(plan, clock)
    clock.run()
    elapsed = max((e for *_, e in clock.intervals), default=0.0)

    per_entity: dict[str, dict[str, float]] = {}
    for cat in ("client_fb", "server_fb", "client_update", "server_update", "sync"):
        for ent, t in clock.busy("", cat).items():
            per_entity.setdefault(ent, {})[cat] = t

    def worst(prefix: str, cat: str) -> float:
        vals = [v.get(cat, 0.0) for k, v in per_entity.items() if k.startswith(prefix)]
        return max(vals) if vals else 0.0

    bd = TimingBreakdown(
        client_fb=worst("client", "client_fb"),
        server_fb=worst("server", "server_fb"),
        client_update=worst("client", "client_update"),
        server_update=worst("server", "server_update"),
        sync=max((v.get("sync", 0.0) for v in per_entity.values()), default=0.0),
    )
    return EpochTiming(bd, elapsed, per_entity, plan.interm_bytes, clock.intervals, clock.transfers, clock.popped)


def _costs(plan: EpochPlan):
    b = plan.batch_size
    cc, sc = plan.client_compute, plan.server_compute
    return dict(
        cf=compute_delay(plan.client, b, "forward", cc),
        cb=compute_delay(plan.client, b, "backward", cc),
        sf=compute_delay(plan.server, b, "forward", sc),
        sb=compute_delay(plan.server, b, "backward", sc),
        ff=compute_delay(plan.full, b, "forward", cc),
        fb=compute_delay(plan.full, b, "backward", cc),
        t_act=transmission_delay(plan.interm_bytes, plan.link),
        cu=update_delay(plan.client, cc),
        su=update_delay(plan.server, sc),
        fu=update_delay(plan.full, cc),
    )


def _split_runner(plan: EpochPlan, clock: VirtualClock) -> None:
    """FSL (one server per client), PSL (one shared server) and SL (shared server, clients in turn)."""
    c = _costs(plan)
    arch, n = plan.arch, plan.num_clients
    shared = arch in ("PSL", "SL")
    sequential = arch == "SL"
    pending = {"round": 0, "left": n}

    def server_of(i: int) -> str:
        return "server" if shared else f"server{i}"

    def start_batch(i: int, k: int, t: float) -> None:
        cname = f"client{i:03d}"
        end_f = clock.occupy(cname, "client_fb", t, c["cf"])
        arrive = clock.wire(server_of(i), "server_fb", end_f, c["t_act"])
        clock.schedule(arrive, server_of(i), "activation", lambda: serve(i, k, arrive))

    def serve(i: int, k: int, arrive: float) -> None:
        sname = server_of(i)
        done = clock.occupy(sname, "server_fb", arrive, c["sf"] + c["sb"])
        if arch != "PSL" or plan.psl_per_batch_update:
            done = clock.occupy(sname, "server_update", done, c["su"])
        else:
            pending["left"] -= 1
            if pending["left"] == 0:
                # one summed update once every client's batch of the round is in
                done = clock.occupy(sname, "server_update", done, c["su"])
                pending["left"] = n
        back = clock.wire(f"client{i:03d}", "client_fb", done, c["t_act"])
        clock.schedule(back, f"client{i:03d}", "gradient", lambda: finish(i, k, back))

    def finish(i: int, k: int, t: float) -> None:
        cname = f"client{i:03d}"
        end_b = clock.occupy(cname, "client_fb", t, c["cb"])
        end_u = clock.occupy(cname, "client_update", end_b, c["cu"])
        if k + 1 < plan.batches_per_client:
            clock.schedule(end_u, cname, "forward", lambda: start_batch(i, k + 1, end_u))
        elif sequential and i + 1 < n:
            # hand the client weights to the next client in line
            hand = transmission_delay(BYTES_PER_VALUE * plan.client.param_count(), plan.link)
            nxt = f"client{i + 1:03d}"
            arrive = clock.occupy(nxt, "sync", end_u, hand)
            clock.schedule(arrive, nxt, "forward", lambda: start_batch(i + 1, 0, arrive))
        elif not sequential:
            done_clients.append(end_u)
            if len(done_clients) == n and plan.sync_weights and arch == "FSL" and n > 1:
                barrier = max(done_clients)
                nbytes = BYTES_PER_VALUE * plan.server.param_count()
                for j in range(n):
                    clock.occupy(f"server{j}", "sync", barrier, 2 * transmission_delay(nbytes, plan.link))

    done_clients: list[float] = []
    if sequential:
        clock.schedule(0.0, "client000", "forward", lambda: start_batch(0, 0, 0.0))
    else:
        for i in range(n):
            clock.schedule(0.0, f"client{i:03d}", "forward", lambda i=i: start_batch(i, 0, 0.0))


def _local_runner(plan: EpochPlan, clock: VirtualClock) -> None:
    """FL and FRC: the whole model runs on every client; FRC does two passes."""
    c = _costs(plan)
    passes = 2 if plan.arch == "FRC" else 1
    n = plan.num_clients
    ends: list[float] = []

    def run_client(i: int) -> None:
        cname = f"client{i:03d}"
        t = 0.0
        for _ in range(passes):
            for _ in range(plan.batches_per_client):
                t = clock.occupy(cname, "client_fb", t, c["ff"] + c["fb"])
                # each FRC pass updates only its shard; the two passes together touch every weight once
                t = clock.occupy(cname, "client_update", t, c["fu"] / passes)
        ends.append(t)
        if len(ends) == n and plan.sync_weights and n > 1:
            barrier = max(ends)
            shared = plan.full if plan.arch == "FL" else plan.server
            nbytes = BYTES_PER_VALUE * shared.param_count()
            clock.schedule(barrier, "ps", "average",
                           lambda: clock.occupy("ps", "sync", barrier, 2 * transmission_delay(nbytes, plan.link)))

    for i in range(n):
        clock.schedule(0.0, f"client{i:03d}", "start", lambda i=i: run_client(i))


_RUNNERS = {"FSL": _split_runner, "PSL": _split_runner, "SL": _split_runner,
            "FL": _local_runner, "FRC": _local_runner}


# -- CSV -----------------------------------------------------------------------
TIMING_COLUMNS = ("arch", "cut_index", "epoch", "client_fb", "server_fb", "client_update",
                  "server_update", "interm_bytes")


def timing_rows(arch: str, cut_index: int, epochs: Iterable[tuple[int, EpochTiming]]) -> list[dict]:
    rows = []
    for epoch, t in epochs:
        bd = t.breakdown
        rows.append({"arch": arch, "cut_index": cut_index, "epoch": epoch,
                     "client_fb": repr(bd.client_fb), "server_fb": repr(bd.server_fb),
                     "client_update": repr(bd.client_update), "server_update": repr(bd.server_update),
                     "interm_bytes": t.interm_bytes})
    return rows


def write_timing_csv(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TIMING_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
