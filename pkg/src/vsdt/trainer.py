"""Mini-batch Adam training for the displacement surrogates.

The loop trains on sliding force windows assembled from simulated
sequences, validates once per epoch, keeps the best-validation snapshot
(parameters *and* optimizer moments, so a resumed run replays the next
epoch bit-for-bit), and stops early when validation stalls.

Determinism contract: the epoch-``e`` batch order is drawn from
``SeedSequence([seed, e])``, so it depends only on the configured seed
and the absolute epoch index — never on how many epochs ran before in
this process.  Parameter updates always *replace* the underlying arrays
(see the caching note in ``surrogate.fastpath``).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence as TSequence

import numpy as np

from . import meshkit, surrogate as sg, tensorad as ta
from .femsim.datasets import SequenceDataset
from .surrogate import LossConfig, ModelInstance
from .tensorad import Tensor

__all__ = [
    "TrainerError",
    "TrainConfig",
    "Checkpoint",
    "TABLE_CONFIGS",
    "split_dataset",
    "assemble_windows",
    "adam_step",
    "train",
    "evaluate_loss",
    "run_sweep",
]


class TrainerError(RuntimeError):
    """Configuration or runtime failure in the training loop."""


# The published LSTM sweep: (hidden size, window length) pairs.
TABLE_CONFIGS = ((64, 2), (128, 2), (256, 2), (512, 2), (1024, 2), (512, 3), (512, 4))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 300
    patience: int = 30
    seed: int = 0
    split: tuple[float, ...] = (0.8, 0.2, 0.0)

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise TrainerError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise TrainerError("Adam betas must lie in [0, 1)")
        if self.eps <= 0.0:
            raise TrainerError("Adam epsilon must be positive")
        if self.batch_size < 1:
            raise TrainerError("batch size must be at least 1")
        if self.max_epochs < 1:
            raise TrainerError("max_epochs must be at least 1")
        if self.patience < 1:
            raise TrainerError("patience must be at least 1")
        if any(f < 0.0 for f in self.split) or sum(self.split) > 1.0 + 1e-9:
            raise TrainerError(f"split fractions {self.split} must be >= 0, sum <= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "split": list(self.split),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        kw = dict(d)
        if "split" in kw:
            kw["split"] = tuple(float(f) for f in kw["split"])
        return cls(**kw)


# ----------------------------------------------------------------------
# dataset splitting and window assembly
# ----------------------------------------------------------------------


def _subset(dataset: SequenceDataset, indices: Iterable[int]) -> SequenceDataset:
    return SequenceDataset(
        sequences=[dataset.sequences[i] for i in indices],
        mesh=dataset.mesh,
        material=dataset.material,
        config=dataset.config,
        seed=dataset.seed,
    )


def split_dataset(
    dataset: SequenceDataset,
    fractions: TSequence[float] = (0.8, 0.2, 0.0),
    seed: int = 0,
) -> tuple[SequenceDataset, SequenceDataset, SequenceDataset]:
    """Deterministic sequence-level split into (train, val, test).

    Whole sequences are assigned to one split each, so no window of a
    validation sequence ever leaks into training.  Counts are rounded
    from the fractions; whatever remains after train and val lands in
    the test split.
    """
    if len(fractions) == 2:
        fractions = (*fractions, 0.0)
    if len(fractions) != 3:
        raise TrainerError("fractions must be (train, val) or (train, val, test)")
    if any(f < 0.0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
        raise TrainerError(f"invalid split fractions {fractions}")
    n = len(dataset)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n_train + n_val > n:
        n_val = n - n_train
    if n_train == 0 or n_val == 0:
        raise TrainerError(
            f"split of {n} sequences with fractions {fractions} leaves an "
            f"empty train or validation set"
        )
    order = np.random.default_rng(np.random.SeedSequence([seed])).permutation(n)
    train_idx = order[:n_train]
    val_idx = order[n_train : n_train + n_val]
    test_idx = order[n_train + n_val :]
    return _subset(dataset, train_idx), _subset(dataset, val_idx), _subset(dataset, test_idx)


def assemble_windows(dataset: SequenceDataset, n_t: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack every frame of every sequence into (windows, targets)."""
    if len(dataset) == 0:
        raise TrainerError("cannot assemble windows from an empty dataset")
    xs, ys = [], []
    for seq in dataset.sequences:
        xs.append(sg.window_stack(seq.forces, n_t))
        ys.append(seq.displacements)
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)


def _fit_norm(dataset: SequenceDataset) -> sg.NormStats:
    forces = np.concatenate([s.forces for s in dataset.sequences], axis=0)
    disps = np.concatenate([s.displacements for s in dataset.sequences], axis=0)
    return sg.NormStats.fit(forces, disps)


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------


def init_adam_state(model: ModelInstance) -> dict[str, np.ndarray]:
    state: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        state[f"m/{name}"] = np.zeros_like(p.data, dtype=np.float32)
        state[f"v/{name}"] = np.zeros_like(p.data, dtype=np.float32)
    return state


def adam_step(
    model: ModelInstance,
    state: dict[str, np.ndarray],
    step: int,
    cfg: TrainConfig,
) -> None:
    """One Adam update from the gradients currently on the parameters.

    ``step`` is the 1-based update count.  Parameters and moments are
    replaced, never mutated in place.
    """
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1**step
    bias2 = 1.0 - b2**step
    for name, p in model.params.items():
        if p.grad is None:
            raise TrainerError(f"parameter {name!r} received no gradient")
        g = p.grad.astype(np.float32, copy=False)
        m = b1 * state[f"m/{name}"] + (1.0 - b1) * g
        v = b2 * state[f"v/{name}"] + (1.0 - b2) * (g * g)
        state[f"m/{name}"] = m
        state[f"v/{name}"] = v
        update = (cfg.learning_rate / bias1) * m / (np.sqrt(v / bias2) + cfg.eps)
        model.params[name] = Tensor(
            (p.data - update).astype(np.float32, copy=False), requires_grad=True
        )


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Best-validation snapshot plus the run's bookkeeping.

    ``model`` and ``optimizer_state`` are captured at ``epoch`` (the
    best-validation epoch); resuming replays epoch ``epoch + 1`` of the
    original run bit-for-bit.  Histories cover every epoch that ran,
    through ``stopped_epoch``.
    """

    model: ModelInstance
    optimizer_state: dict[str, np.ndarray]
    epoch: int
    step: int
    train_history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    dv_history: list[float] = field(default_factory=list)
    best_val: float = math.inf
    stopped_epoch: int = -1
    aborted: str | None = None
    loss_config: LossConfig | None = None
    train_config: TrainConfig | None = None

    def save(self, path) -> None:
        meta = {
            "epoch": self.epoch,
            "step": self.step,
            "train_history": self.train_history,
            "val_history": self.val_history,
            "dv_history": self.dv_history,
            "best_val": self.best_val,
            "stopped_epoch": self.stopped_epoch,
            "aborted": self.aborted,
            "train_config": None if self.train_config is None else self.train_config.to_dict(),
        }
        sg.save_checkpoint(
            path, self.model, self.loss_config, self.optimizer_state, meta
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        model, loss_cfg, opt_state, extra = sg.load_checkpoint(path)
        tc = extra.get("train_config")
        return cls(
            model=model,
            optimizer_state=opt_state,
            epoch=int(extra.get("epoch", -1)),
            step=int(extra.get("step", 0)),
            train_history=[float(x) for x in extra.get("train_history", [])],
            val_history=[float(x) for x in extra.get("val_history", [])],
            dv_history=[float(x) for x in extra.get("dv_history", [])],
            best_val=float(extra.get("best_val", math.inf)),
            stopped_epoch=int(extra.get("stopped_epoch", -1)),
            aborted=extra.get("aborted"),
            loss_config=loss_cfg,
            train_config=None if tc is None else TrainConfig.from_dict(tc),
        )


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------


def _log_line(epoch: int, tl: float, vl: float, dv: float) -> str:
    return (
        f"epoch {epoch:04d} train_loss {tl:.9e} val_loss {vl:.9e} "
        f"mean_abs_dv {dv:.9e}"
    )


def _batch_objective(model, x, y, mesh, loss_cfg):
    pred = sg.forward(model, Tensor(x))
    if loss_cfg is None:
        return sg.mse_loss(pred, y)
    return sg.physics_loss(pred, y, mesh, loss_cfg)


def _validate(model, x_val, y_val, mesh, loss_cfg, log_cfg, batch_size):
    """No-tape validation pass; returns (val_loss, components dict)."""
    preds = np.empty_like(y_val)
    with ta.no_grad():
        for s in range(0, len(x_val), batch_size):
            out = sg.forward(model, x_val[s : s + batch_size])
            preds[s : s + len(out.data)] = out.data
    comp = sg.loss_components(preds, y_val, mesh, log_cfg)
    val = comp["mse"] if loss_cfg is None else comp["total"]
    return float(val), comp


def train(
    model: ModelInstance,
    train_set: SequenceDataset,
    val_set: SequenceDataset,
    cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    *,
    resume: Checkpoint | None = None,
    log: Callable[[str], None] | None = None,
) -> Checkpoint:
    """Train ``model`` and return the best-validation checkpoint.

    ``loss_cfg=None`` trains the generic (pure MSE) objective; a
    ``LossConfig`` switches to the physics-guided loss.  The passed
    ``model`` is left at its *last* epoch state; the returned
    checkpoint's model is an independent best-epoch copy.  A NaN or Inf
    loss aborts the run and returns the last good snapshot with the
    diagnostic recorded in ``aborted``.
    """
    if log is None:
        log = lambda line: print(line, flush=True)  # noqa: E731
    mesh = train_set.mesh
    if model.spec.dims != mesh.dims:
        raise TrainerError(
            f"model dims {model.spec.dims} do not match dataset mesh {mesh.dims}"
        )
    x_tr, y_tr = assemble_windows(train_set, model.spec.n_t)
    x_va, y_va = assemble_windows(val_set, model.spec.n_t)
    # Gate/volume numbers in the log always refer to the same mesh, even
    # for the generic objective where they do not enter the gradient.
    log_cfg = loss_cfg if loss_cfg is not None else LossConfig(
        v_origin=mesh.rest_volume, lam=0.0
    )

    if resume is not None:
        opt_state = {k: v.copy() for k, v in resume.optimizer_state.items()}
        step = resume.step
        start_epoch = resume.epoch + 1
        train_hist = resume.train_history[: resume.epoch + 1]
        val_hist = resume.val_history[: resume.epoch + 1]
        dv_hist = resume.dv_history[: resume.epoch + 1]
        best_val = resume.best_val
    else:
        model.norm = _fit_norm(train_set)
        opt_state = init_adam_state(model)
        step = 0
        start_epoch = 0
        train_hist, val_hist, dv_hist = [], [], []
        best_val = math.inf

    n = len(x_tr)
    aborted = None
    epoch = start_epoch - 1
    best_epoch = -1 if resume is None else resume.epoch

    def snapshot(e: int) -> Checkpoint:
        return Checkpoint(
            model=model.copy(),
            optimizer_state={k: v.copy() for k, v in opt_state.items()},
            epoch=e,
            step=step,
            train_history=list(train_hist),
            val_history=list(val_hist),
            dv_history=list(dv_hist),
            best_val=best_val,
            stopped_epoch=e,
            aborted=None,
            loss_config=loss_cfg,
            train_config=cfg,
        )

    # A private snapshot of the incoming state: the caller's model object
    # is mutated as training proceeds, so the best checkpoint must never
    # alias it (or the resume argument).
    best = None if resume is None else snapshot(resume.epoch)

    for epoch in range(start_epoch, cfg.max_epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch])
        ).permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss = _batch_objective(model, x_tr[idx], y_tr[idx], mesh, loss_cfg)
            value = float(loss.data)
            if not math.isfinite(value):
                aborted = f"non-finite training loss at epoch {epoch}, batch {s // cfg.batch_size}"
                break
            model.zero_grads()
            loss.backward()
            step += 1
            adam_step(model, opt_state, step, cfg)
            total += value * len(idx)
        if aborted:
            log(f"abort: {aborted}")
            break
        train_loss = total / n
        val_loss, comp = _validate(
            model, x_va, y_va, mesh, loss_cfg, log_cfg, cfg.batch_size
        )
        if not math.isfinite(val_loss):
            aborted = f"non-finite validation loss at epoch {epoch}"
            log(f"abort: {aborted}")
            break
        train_hist.append(train_loss)
        val_hist.append(val_loss)
        dv_hist.append(comp["mean_abs_dv"])
        log(_log_line(epoch, train_loss, val_loss, comp["mean_abs_dv"]))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best = snapshot(epoch)
        elif epoch - best_epoch >= cfg.patience:
            log(f"early stop at epoch {epoch}: no improvement since {best_epoch}")
            break

    if best is None:
        raise TrainerError(
            "training produced no usable checkpoint"
            + (f" ({aborted})" if aborted else "")
        )
    best.train_history = list(train_hist)
    best.val_history = list(val_hist)
    best.dv_history = list(dv_hist)
    best.best_val = best_val
    best.stopped_epoch = epoch
    best.aborted = aborted
    return best


# ----------------------------------------------------------------------
# evaluation and the configuration sweep
# ----------------------------------------------------------------------


def evaluate_loss(
    model: ModelInstance,
    dataset: SequenceDataset,
    loss_cfg: LossConfig,
) -> tuple[float, float, np.ndarray]:
    """Decomposed loss over every frame of ``dataset``.

    Returns ``(mse, physics_term, per_frame_dv)`` where the physics term
    already carries its lambda weight and the gate, and ``per_frame_dv``
    is the signed volume deviation of each predicted frame in mm^3.
    """
    mesh = dataset.mesh
    se_sum = 0.0
    se_count = 0
    vol_acc = 0.0
    gate_count = 0
    dvs = []
    for seq in dataset.sequences:
        preds = sg.predict_sequence(model, seq.forces)
        diff = preds.astype(np.float64) - seq.displacements.astype(np.float64)
        se_sum += float(np.sum(diff * diff))
        se_count += diff.size
        vols = meshkit.deformed_volumes(mesh, preds.astype(np.float64))
        dv = vols - loss_cfg.v_origin
        dvs.append(dv)
        open_gate = np.abs(dv) > loss_cfg.gate_threshold
        vol_acc += float(np.sum(np.where(open_gate, dv, 0.0) ** 2))
        gate_count += len(dv)
    mse = se_sum / se_count
    physics = loss_cfg.lam * (vol_acc / gate_count) if gate_count else 0.0
    return mse, physics, np.concatenate(dvs)


def run_sweep(
    train_set: SequenceDataset,
    val_set: SequenceDataset,
    cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    configs: TSequence[tuple[int, int]] = TABLE_CONFIGS,
    out_dir=None,
    seed: int = 0,
    log: Callable[[str], None] | None = None,
) -> list[dict]:
    """Train one model per (hidden size, window length) configuration.

    Returns one report dict per configuration; when ``out_dir`` is given
    each checkpoint is also written there.
    """
    reports = []
    for index, (n_n, n_t) in enumerate(configs, start=1):
        spec = sg.ModelSpec(
            kind="cnn_lstm", dims=train_set.mesh.dims, n_t=n_t, n_n=n_n
        )
        model = sg.build_model(spec, seed=seed)
        ck = train(model, train_set, val_set, cfg, loss_cfg, log=log)
        report = {
            "configuration": index,
            "n_n": n_n,
            "n_t": n_t,
            "parameters": model.parameter_count,
            "best_val": ck.best_val,
            "best_epoch": ck.epoch,
            "stopped_epoch": ck.stopped_epoch,
            "aborted": ck.aborted,
        }
        if out_dir is not None:
            path = os.path.join(os.fspath(out_dir), f"cnn_lstm_nn{n_n}_nt{n_t}.ckpt")
            ck.save(path)
            report["checkpoint"] = path
        reports.append(report)
    return reports
