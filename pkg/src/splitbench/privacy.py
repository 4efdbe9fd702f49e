"""Privacy mechanisms that live on the client side of the split.

* CPA-DC: epochs alternate between regular rounds and distance-correlation
  rounds in which only the client trains, pushing ``dCor(x, f(x))`` down.
* CPA-DP: client gradients are built from clipped per-sample gradients
  plus Gaussian noise.
* NoPeek: cross-entropy and ``m * dCor`` in one joint backward pass.
* Full-model DP: the CPA-DP recipe applied on the server as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .model import SequentialModel
from .tensor import Tensor

PrivacyMode = Literal["none", "nopeek", "cpa_dc", "cpa_dp", "dp_full"]
PRIVACY_MODES = ("none", "nopeek", "cpa_dc", "cpa_dp", "dp_full")


@dataclass(frozen=True)
class CpaDcSchedule:
    dc_frequency: int = 0
    loss_multiplier: float = 0.0

    def __post_init__(self):
        if self.dc_frequency < 0:
            raise ValueError("dc_frequency must be >= 0")
        if self.loss_multiplier < 0:
            raise ValueError("loss_multiplier must be >= 0")


@dataclass(frozen=True)
class DpConfig:
    noise_multiplier: float = 0.0
    max_grad_norm: float = 1.0
    scope: Literal["client_only", "full_model"] = "client_only"

    def __post_init__(self):
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")

    @property
    def noise_std(self) -> float:
        return self.noise_multiplier * self.max_grad_norm


@dataclass(frozen=True)
class PrivacyConfig:
    mode: PrivacyMode = "none"
    dc_frequency: int = 0
    loss_multiplier: float = 0.0
    noise_multiplier: float = 0.0
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if self.mode not in PRIVACY_MODES:
            raise ValueError(f"unknown privacy mode {self.mode!r}")

    @property
    def schedule(self) -> CpaDcSchedule:
        return CpaDcSchedule(self.dc_frequency, self.loss_multiplier)

    @property
    def dp(self) -> DpConfig | None:
        if self.mode == "cpa_dp":
            return DpConfig(self.noise_multiplier, self.max_grad_norm, "client_only")
        if self.mode == "dp_full":
            return DpConfig(self.noise_multiplier, self.max_grad_norm, "full_model")
        return None


def select_round(epoch: int, schedule: CpaDcSchedule) -> Literal["regular", "dc"]:
    """Period ``F + 1``: one regular epoch, then ``F`` distance-correlation epochs."""
    f = schedule.dc_frequency
    if f == 0:
        return "regular"
    return "regular" if epoch % (f + 1) == 0 else "dc"


def dc_loss(x: Tensor, h: Tensor, multiplier: float) -> Tensor:
    n = x.shape[0]
    return T.distance_correlation(T.reshape(x, (n, -1)), T.reshape(h, (n, -1))) * multiplier


def dc_round_step(client: SequentialModel, xb: np.ndarray, multiplier: float, lr: float) -> float:
    """One client-only step on ``m * dCor(x, f(x))``. Returns the loss value.

    Nothing leaves the client and the server is never touched.
    """
    if multiplier == 0.0 or not client.params:
        return 0.0
    x = Tensor(xb)
    loss = dc_loss(x, client(x), multiplier)
    client.zero_grad()
    loss.backward()
    sgd_update(client.params, [p.grad for p in client.params], lr)
    return loss.item()


def nopeek_client_backward(client: SequentialModel, x: Tensor, h: Tensor, boundary_grad: np.ndarray,
                           multiplier: float) -> None:
    """Backward of ``CE + m * dCor(x, f(x))`` through the client in a single pass.

    The cross-entropy part enters as the boundary gradient returned by the
    server; ``sum(h * boundary)`` has exactly that gradient w.r.t. ``h``.
    """
    client.zero_grad()
    joint = T.tsum(h * Tensor(boundary_grad))
    if multiplier != 0.0:
        joint = joint + dc_loss(x, h, multiplier)
    joint.backward()


def dp_clip_and_noise(per_sample_grads: np.ndarray, cfg: DpConfig, rng: np.random.Generator) -> np.ndarray:
    """Clip each row to ``max_grad_norm``, average, and add ``N(0, (nm*C)^2) / batch`` noise."""
    if cfg.max_grad_norm <= 0:
        raise ValueError("max_grad_norm must be positive")
    g = np.asarray(per_sample_grads, dtype=np.float64)
    batch = g.shape[0]
    norms = np.sqrt((g * g).sum(axis=1))
    factor = np.minimum(1.0, cfg.max_grad_norm / np.maximum(norms, np.finfo(float).tiny))
    out = np.mean(g * factor[:, None], axis=0)
    if cfg.noise_multiplier > 0:
        out = out + rng.normal(0.0, cfg.noise_std, size=out.shape) / batch
    return out


def flatten_grads(params: list[Tensor]) -> np.ndarray:
    return np.concatenate([np.zeros(p.size) if p.grad is None else p.grad.ravel() for p in params])


def unflatten_like(flat: np.ndarray, params: list[Tensor]) -> list[np.ndarray]:
    out, pos = [], 0
    for p in params:
        out.append(flat[pos:pos + p.size].reshape(p.shape))
        pos += p.size
    return out


def per_sample_grads(part: SequentialModel, inputs: np.ndarray, upstream: np.ndarray | None = None,
                     labels: np.ndarray | None = None) -> np.ndarray:
    """Row ``j`` is the gradient of sample ``j``'s own loss w.r.t. ``part``'s parameters.

    Either ``upstream`` (mean-loss gradient at the part's output, as sent
    back across the split) or ``labels`` (cross-entropy at the part's
    output) must be given.
    """
    batch = inputs.shape[0]
    rows = []
    for j in range(batch):
        part.zero_grad()
        out = part(Tensor(inputs[j:j + 1]))
        if labels is not None:
            T.cross_entropy(out, labels[j:j + 1]).backward()
        else:
            out.backward(upstream[j:j + 1] * batch)
        rows.append(flatten_grads(part.params))
    part.zero_grad()
    return np.stack(rows)


def dp_gradients(part: SequentialModel, inputs: np.ndarray, cfg: DpConfig, rng: np.random.Generator,
                 upstream: np.ndarray | None = None, labels: np.ndarray | None = None) -> list[np.ndarray]:
    rows = per_sample_grads(part, inputs, upstream=upstream, labels=labels)
    return unflatten_like(dp_clip_and_noise(rows, cfg, rng), part.params)


def sgd_update(params: list[Tensor], grads: list[np.ndarray], lr: float) -> None:
    for p, g in zip(params, grads):
        p.data = p.data - lr * g


def dp_full_model_divergence_check(model: SequentialModel, clients, train_cfg, noise_multiplier: float,
                                   max_grad_norm: float = 1.0) -> dict:
    """Train FSL with client-only DP and with full-model DP at the same noise level.

    Returns final mean test accuracy for both, plus the privacy-oblivious
    baseline. ``train_cfg`` must describe an FSL run.
    """
    from .protocols import train

    if train_cfg.arch != "FSL":
        raise ValueError("the full-model DP comparison is defined for FSL")
    out = {"noise_multiplier": noise_multiplier, "max_grad_norm": max_grad_norm}
    for key, mode in (("oblivious", "none"), ("client_only", "cpa_dp"), ("full_model", "dp_full")):
        cfg = PrivacyConfig(mode, noise_multiplier=noise_multiplier, max_grad_norm=max_grad_norm)
        result = train(train_cfg, model, clients, privacy=cfg)
        out[f"{key}_accuracy"] = float(np.mean([r["test_acc"] for r in result.final_metrics()]))
    return out
