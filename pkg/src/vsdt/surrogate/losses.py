"""Training losses: plain MSE plus the gated volume-preservation term.

The combined objective is

    loss = L_MSE + lambda * L_volume (+ optional alignment term)

where ``L_MSE`` averages squared displacement error over every node,
component and sample, and ``L_volume`` averages, over the predicted
fields in the batch, the squared deviation of the deformed body volume
from the rest volume - but only for predictions whose deviation exceeds
a gate (by default 7% of the rest volume; an absolute mm^3 threshold
can override the fraction).  Inside the gate the term contributes
exactly zero, so well-behaved predictions see a pure MSE objective.

With ``lam == 0`` the volume branch is skipped entirely: the evaluated
floating-point operations are identical to a plain MSE loss, which makes
the lambda = 0 run of the physics-guided trainer bit-identical to the
generic one.

The optional alignment term penalizes ``relu(1 - cos theta)`` between
the applied nodal force and the predicted displacement, averaged over
force-bearing nodes (nodes with zero force or zero predicted motion are
skipped).  It is disabled by default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .. import meshkit, tensorad as ta
from ..tensorad import Tensor


class LossConfigError(ValueError):
    """Inconsistent loss configuration."""


@dataclass(frozen=True)
class LossConfig:
    """Weights and gates of the physics-guided objective."""

    v_origin: float  # rest volume of the body, mm^3
    lam: float = 0.1
    volume_gate_fraction: float = 0.07
    volume_gate_absolute: float | None = None  # mm^3, overrides the fraction
    cosine_weight: float = 0.0

    def __post_init__(self):
        if self.v_origin <= 0.0:
            raise LossConfigError(f"v_origin must be positive, got {self.v_origin}")
        if self.lam < 0.0:
            raise LossConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.volume_gate_fraction < 0.0:
            raise LossConfigError("volume gate fraction must be >= 0")
        if self.volume_gate_absolute is not None and self.volume_gate_absolute < 0.0:
            raise LossConfigError("absolute volume gate must be >= 0")
        if self.cosine_weight < 0.0:
            raise LossConfigError("cosine weight must be >= 0")

    @property
    def gate_threshold(self) -> float:
        """Volume deviation (mm^3) beyond which the penalty opens."""
        if self.volume_gate_absolute is not None:
            return self.volume_gate_absolute
        return self.volume_gate_fraction * self.v_origin

    def to_dict(self) -> dict:
        return {
            "v_origin": self.v_origin,
            "lam": self.lam,
            "volume_gate_fraction": self.volume_gate_fraction,
            "volume_gate_absolute": self.volume_gate_absolute,
            "cosine_weight": self.cosine_weight,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossConfig":
        return cls(
            v_origin=float(d["v_origin"]),
            lam=float(d.get("lam", 0.1)),
            volume_gate_fraction=float(d.get("volume_gate_fraction", 0.07)),
            volume_gate_absolute=(
                None
                if d.get("volume_gate_absolute") is None
                else float(d["volume_gate_absolute"])
            ),
            cosine_weight=float(d.get("cosine_weight", 0.0)),
        )


def _as_batch(pred) -> tuple[Tensor, int]:
    if not isinstance(pred, Tensor):
        pred = Tensor(np.asarray(pred, dtype=np.float32))
    if pred.ndim == 4:
        pred = pred.reshape((1,) + pred.shape)
    if pred.ndim != 5 or pred.shape[-1] != 3:
        raise LossConfigError(
            f"predictions must be (batch, nx, ny, nz, 3), got {pred.shape}"
        )
    return pred, pred.shape[0]


def mse_loss(pred, target) -> Tensor:
    """Plain mean-squared displacement error (the generic objective)."""
    pred_t, _ = _as_batch(pred)
    target_arr = np.asarray(
        target.data if isinstance(target, Tensor) else target, dtype=pred_t.dtype
    )
    target_arr = target_arr.reshape(pred_t.shape)
    diff = pred_t - Tensor(target_arr)
    return ta.mean(diff * diff)


def physics_loss(
    pred,
    target,
    mesh: meshkit.GridMesh,
    cfg: LossConfig,
    force=None,
) -> Tensor:
    """Differentiable physics-guided loss over a batch of predictions.

    ``pred`` stays on the autodiff tape; ``target`` (and ``force`` when
    the alignment term is enabled) are treated as constants.  The MSE
    term is built by :func:`mse_loss`, so with ``lam == 0`` and the
    cosine term disabled the recorded graph is identical to the generic
    objective.
    """
    pred_t, _ = _as_batch(pred)
    loss = mse_loss(pred_t, target)

    if cfg.lam > 0.0:
        vols = meshkit.total_volume(mesh, pred_t)  # (batch,)
        dv = vols - float(cfg.v_origin)
        gate = (np.abs(dv.data) > cfg.gate_threshold).astype(dv.dtype)
        if np.any(gate):
            gated = dv * Tensor(gate)
            loss = loss + cfg.lam * ta.mean(gated * gated)
        # All gates closed contributes an exact zero: loss stays L_MSE.

    if cfg.cosine_weight > 0.0:
        if force is None:
            raise LossConfigError(
                "cosine_weight > 0 requires the applied force field"
            )
        force_arr = np.asarray(
            force.data if isinstance(force, Tensor) else force, dtype=pred_t.dtype
        ).reshape(pred_t.shape)
        loss = loss + cfg.cosine_weight * _alignment_term(pred_t, force_arr)

    return loss


def _alignment_term(pred_t: Tensor, force_arr: np.ndarray) -> Tensor:
    """Mean relu(1 - cos theta) over force-bearing nodes."""
    f_norm = np.linalg.norm(force_arr, axis=-1)
    u_norm_now = np.linalg.norm(pred_t.data, axis=-1)
    mask = (f_norm > 0.0) & (u_norm_now > 0.0)
    count = int(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=pred_t.dtype))
    dot = ta.sum(pred_t * Tensor(force_arr), axis=-1)
    # Tiny floor keeps masked-off zero-motion nodes finite on the tape.
    u_norm = ta.sqrt(ta.sum(pred_t * pred_t, axis=-1) + 1e-24)
    cos = dot / (u_norm * Tensor(f_norm + (~mask).astype(pred_t.data.dtype)))
    penal = ta.relu(1.0 - cos) * Tensor(mask.astype(pred_t.data.dtype))
    return ta.sum(penal) / count


def loss_components(
    pred: np.ndarray,
    target: np.ndarray,
    mesh: meshkit.GridMesh,
    cfg: LossConfig,
) -> dict[str, float]:
    """Tape-free breakdown of the loss for logging and evaluation."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.ndim == 4:
        p = p[None]
        t = t[None]
    mse = float(np.mean((p - t) ** 2))
    vols = meshkit.deformed_volumes(mesh, p)
    dv = vols - cfg.v_origin
    open_gate = np.abs(dv) > cfg.gate_threshold
    vol_term = float(np.mean(np.where(open_gate, dv, 0.0) ** 2))
    return {
        "mse": mse,
        "volume_term": vol_term,
        "gated_fraction": float(open_gate.mean()),
        "mean_abs_dv": float(np.abs(dv).mean()),
        "max_abs_dv": float(np.abs(dv).max()),
        "total": mse + cfg.lam * vol_term,
    }
