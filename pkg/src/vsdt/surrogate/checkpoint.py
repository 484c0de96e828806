"""Checkpoint persistence: spec, parameters, normalization, loss config.

Checkpoints ride on the binary container format with schema tag
``vsdt.checkpoint/1``.  Optimizer moments are stored alongside the
parameters so interrupted trainings resume exactly.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .. import store
from .losses import LossConfig
from .models import ModelInstance, ModelSpec, NormStats, build_model
from ..tensorad import Tensor

CHECKPOINT_SCHEMA = "vsdt.checkpoint/1"


class CheckpointError(RuntimeError):
    """Checkpoint file is not usable."""


def save_checkpoint(
    path,
    model: ModelInstance,
    loss_config: LossConfig | None = None,
    optimizer_state: Mapping[str, np.ndarray] | None = None,
    meta: Mapping | None = None,
) -> None:
    """Write the model (and optionally optimizer state) to ``path``."""
    metadata = {
        "schema": CHECKPOINT_SCHEMA,
        "spec": model.spec.to_dict(),
        "loss_config": None if loss_config is None else loss_config.to_dict(),
        "extra": dict(meta) if meta else {},
    }
    entries: dict[str, np.ndarray] = {}
    for name, tensor in model.params.items():
        entries[f"param/{name}"] = np.asarray(tensor.data, dtype=np.float32)
    entries.update(model.norm.to_entries())
    if optimizer_state is not None:
        for name, arr in optimizer_state.items():
            entries[f"opt/{name}"] = np.asarray(arr, dtype=np.float32)
    store.write_container(path, metadata, entries)


def load_checkpoint(
    path,
) -> tuple[ModelInstance, LossConfig | None, dict[str, np.ndarray], dict]:
    """Rebuild a model from ``path``.

    Returns ``(model, loss_config, optimizer_state, extra_meta)``; the
    optimizer state dict is empty when none was stored.
    """
    metadata, entries = store.read_container(path)
    if metadata.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"{path}: schema tag {metadata.get('schema')!r} is not "
            f"{CHECKPOINT_SCHEMA!r}; not a model checkpoint"
        )
    spec = ModelSpec.from_dict(metadata["spec"])
    model = build_model(spec, seed=0)

    params: dict[str, np.ndarray] = {}
    for key, arr in entries.items():
        if key.startswith("param/"):
            params[key[len("param/") :]] = arr
    try:
        model.load_param_arrays(params)
    except Exception as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    model.norm = NormStats.from_entries(entries)

    lc = metadata.get("loss_config")
    loss_config = None if lc is None else LossConfig.from_dict(lc)
    opt_state = {
        key[len("opt/") :]: arr
        for key, arr in entries.items()
        if key.startswith("opt/")
    }
    return model, loss_config, opt_state, metadata.get("extra", {})


def model_size_bytes(model: ModelInstance) -> int:
    return sum(int(p.data.nbytes) for p in model.params.values())


def params_close(a: ModelInstance, b: ModelInstance) -> bool:
    """Bitwise parameter equality (used by determinism checks)."""
    if set(a.params) != set(b.params):
        return False
    for k in a.params:
        if not np.array_equal(a.params[k].data, b.params[k].data):
            return False
    return True


def set_param(model: ModelInstance, name: str, value: np.ndarray) -> None:
    cur = model.params[name]
    arr = np.asarray(value, dtype=cur.data.dtype)
    if arr.shape != cur.data.shape:
        raise CheckpointError(
            f"parameter {name!r}: shape {arr.shape} != {cur.data.shape}"
        )
    model.params[name] = Tensor(arr.copy(), requires_grad=True)
