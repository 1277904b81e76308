"""Checkpoints as ``PCTC`` record containers.

Record order is fixed so that save -> load -> save reproduces the file byte
for byte: ``config`` (the ``key=value`` text as UTF-8 bytes), ``iteration``
(two 16-bit halves), every model tensor in ``state_dict`` order, then per
optimizer ``opt.<net>.step`` and the first/second moments.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .containers import (
    CHECKPOINT_MAGIC,
    ContainerError,
    array_to_text,
    join_u32,
    read_container,
    split_u32,
    text_to_array,
    write_container,
)
from .training import TrainConfig, TrainState, build_state

OPTIMIZERS = ("discriminator", "encoder", "generator")


def checkpoint_records(state: TrainState, cfg: TrainConfig) -> list[tuple[str, np.ndarray]]:
    recs = [("config", text_to_array(cfg.to_text())),
            ("iteration", np.array(split_u32(state.iteration), np.float32))]
    recs.extend(state.model.state_dict().items())
    for name in OPTIMIZERS:
        opt = state.optimizers[name]
        st = opt.state
        recs.append((f"opt.{name}.step", np.array(split_u32(st.step), np.float32)))
        moments = st.m if st.m else [np.zeros_like(p.data) for p in opt.params]
        seconds = st.v if st.v else [np.zeros_like(p.data) for p in opt.params]
        for i, (m, v) in enumerate(zip(moments, seconds)):
            recs.append((f"opt.{name}.m.{i}", m))
            recs.append((f"opt.{name}.v.{i}", v))
    return recs


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    write_container(path, CHECKPOINT_MAGIC, checkpoint_records(state, cfg))


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    """Rebuild the networks and optimizer state; every record is checked by name and shape."""
    recs = read_container(path, CHECKPOINT_MAGIC)
    for key in ("config", "iteration"):
        if key not in recs:
            raise ContainerError(f"{path}: missing record {key!r}")
    try:
        cfg = TrainConfig.from_text(array_to_text(recs["config"]))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ContainerError(f"{path}: bad 'config' record: {exc}") from None
    state = build_state(cfg)
    expected = checkpoint_records(state, cfg)
    names = {n for n, _ in expected}
    for name, ref in expected:
        if name not in recs:
            raise ContainerError(f"{path}: missing record {name!r}")
        if name != "config" and recs[name].shape != np.shape(ref):
            raise ContainerError(f"{path}: record {name!r} has shape {recs[name].shape}, "
                                 f"expected {np.shape(ref)}")
    extra = [n for n in recs if n not in names]
    if extra:
        raise ContainerError(f"{path}: unexpected record {extra[0]!r}")

    state.iteration = join_u32(*recs["iteration"])
    model_keys = state.model.state_dict().keys()
    state.model.load_state_dict({k: recs[k] for k in model_keys})
    for name in OPTIMIZERS:
        opt = state.optimizers[name]
        opt.state.step = join_u32(*recs[f"opt.{name}.step"])
        n = len(opt.params)
        opt.state.m = [recs[f"opt.{name}.m.{i}"].astype(opt.params[i].dtype) for i in range(n)]
        opt.state.v = [recs[f"opt.{name}.v.{i}"].astype(opt.params[i].dtype) for i in range(n)]
    return state, cfg


def load_model(path):
    """Networks only, in evaluation mode."""
    state, cfg = load_checkpoint(path)
    return state.model.eval(), cfg


def checkpoint_path(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint {p} not found")
    return p
