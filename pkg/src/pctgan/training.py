"""Adversarial training of the encoder/generator pair against the conditional critic.

One generator iteration performs ``n_disc`` critic updates, then one update of
the encoder and generator.  Every update draws a fresh batch: per element a
random channel subset, a random process and a sorted random step triple.  The
encoder sees the begin/end shape images with labels (begin, end, step k) for
each of the three steps; the generated triple and the real triple are reduced
to the selected channels and stacked step-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .evaluation import evaluate_model
from .models import COND_MODES, ModelConfig, PCTGAN
from .ndgrad import (
    Adam,
    Tensor,
    backward,
    concat,
    getitem,
    gradient_penalty,
    grad,
    mean,
    mul,
    no_grad,
    reshape,
    sqrt,
    transpose,
    tsum,
)
from .labels import ORIENTATIONS

METRICS_HEADER = "iteration\td_loss\tg_score\tgp_term\tfrechet_val"
GP_EPS = 1e-20


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 10.0
    n_disc: int = 5
    n_step: int = 3
    n_ch: int = 5
    nd: int = 2
    m: int = 128
    lr_d: float = 2e-4
    lr_eg: float = 5e-5
    beta1: float = 0.5
    beta2: float = 0.9
    z_dim: int = 128
    cond_mode: str = "projection"
    image_size: int = 64
    iterations: int = 1000
    seed: int = 0
    critic_sigmoid: bool = True
    orientation: str = "continuous"
    N: int = 3
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 1 <= self.nd <= self.n_ch:
            raise ValueError(f"nd must lie in 1..{self.n_ch}, got {self.nd}")
        if self.n_step != 3:
            raise ValueError("n_step must be 3")
        if self.m < 1 or self.n_disc < 1 or self.iterations < 0:
            raise ValueError("m and n_disc must be >= 1 and iterations >= 0")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.cond_mode not in COND_MODES:
            raise ValueError(f"cond_mode must be one of {COND_MODES}, got {self.cond_mode!r}")
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ValueError("log_every must be >= 1 and checkpoint_every >= 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size, z_dim=self.z_dim, n_ch=self.n_ch, n_step=self.n_step,
                           N=self.N, nd=self.nd, cond_mode=self.cond_mode, critic_sigmoid=self.critic_sigmoid)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Parse ``key=value`` lines; ``#`` comments and blank lines are ignored."""
        kw = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            kw[key] = value
        return (base or cls()).updated(kw)

    def updated(self, values: dict) -> "TrainConfig":
        known = {f.name: type(getattr(self, f.name)) for f in fields(self)}
        out = {}
        for key, value in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kind = known[key]
            if not isinstance(value, str):
                out[key] = kind(value)
            elif kind is bool:
                if value.lower() not in ("true", "false"):
                    raise ValueError(f"{key}: expected true/false, got {value!r}")
                out[key] = value.lower() == "true"
            else:
                try:
                    out[key] = kind(value)
                except ValueError:
                    raise ValueError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None
        return replace(self, **out)


# -- sampling ---------------------------------------------------------------------

@dataclass
class TripleSample:
    indices: np.ndarray  # global step indices, strictly increasing
    frames: np.ndarray   # [3, n_ch, H, W]
    timings: np.ndarray  # [3, N + 1]


def triple_indices(n_frames: int, rng: np.random.Generator) -> np.ndarray:
    if n_frames < 3:
        raise ValueError(f"need at least 3 frames to sample a triple, got {n_frames}")
    return np.sort(rng.choice(n_frames, size=3, replace=False))


def sample_triple(seq: dict, rng: np.random.Generator) -> TripleSample:
    idx = triple_indices(seq["frames"].shape[0], rng)
    return TripleSample(idx, seq["frames"][idx], seq["timings"][idx])


def select_channels(n_ch: int, nd: int, rng: np.random.Generator) -> np.ndarray:
    """``nd`` distinct 0-based channel indices, ascending."""
    return np.sort(rng.choice(n_ch, size=nd, replace=False))


@dataclass
class Batch:
    begin: np.ndarray          # [m, H, W] shape channel of the first step
    end: np.ndarray            # [m, H, W] shape channel of the last step
    timings: np.ndarray        # [m, 3, N + 1]
    selection: np.ndarray      # [m, nd] 0-based channel indices
    channel_label: np.ndarray  # [m, n_ch]
    real: np.ndarray           # [m, 3 * nd, H, W]

    @property
    def size(self) -> int:
        return self.begin.shape[0]

    def encoder_inputs(self) -> tuple[np.ndarray, np.ndarray]:
        """Step-major repetition: rows ``k * m + i`` carry labels (begin, end, step k) of element ``i``."""
        pair = np.stack([self.begin, self.end], axis=1)
        pair = np.concatenate([pair] * 3)
        t = self.timings
        labels = np.concatenate([np.stack([t[:, 0], t[:, 2], t[:, k]], axis=1) for k in range(3)])
        return pair, labels


def sample_batch(data: Sequence[dict], m: int, nd: int, n_ch: int, rng: np.random.Generator) -> Batch:
    sels, frames, timings = [], [], []
    for _ in range(m):
        sel = select_channels(n_ch, nd, rng)
        seq = data[int(rng.integers(len(data)))]
        trip = sample_triple(seq, rng)
        sels.append(sel)
        frames.append(trip.frames)
        timings.append(trip.timings)
    sel = np.stack(sels)
    frames = np.stack(frames)
    rows = np.arange(m)[:, None, None]
    steps = np.arange(3)[None, :, None]
    real = frames[rows, steps, sel[:, None, :]]
    H, W = frames.shape[-2:]
    label = np.zeros((m, n_ch))
    np.put_along_axis(label, sel, 1.0, axis=1)
    return Batch(frames[:, 0, 0], frames[:, 2, 0], np.stack(timings), sel, label,
                 real.reshape(m, 3 * nd, H, W).astype(np.float32))


def gather_selected(generated: Tensor, selection: np.ndarray) -> Tensor:
    """Step-major ``[3m, C, H, W]`` generator output to ``[m, 3 * nd, H, W]`` selected channels."""
    m, nd = selection.shape
    _, C, H, W = generated.shape
    g = transpose(reshape(generated, (3, m, C, H, W)), (1, 0, 2, 3, 4))
    rows = np.arange(m)[:, None, None]
    steps = np.arange(3)[None, :, None]
    picked = getitem(g, (rows, steps, selection[:, None, :]))
    return reshape(picked, (m, 3 * nd, H, W))


def gp_interpolate(x_real, x_gen, eps) -> np.ndarray:
    """``eps * x_real + (1 - eps) * x_gen`` with one ``eps`` per batch element."""
    x_real = np.asarray(x_real.data if isinstance(x_real, Tensor) else x_real)
    x_gen = np.asarray(x_gen.data if isinstance(x_gen, Tensor) else x_gen)
    if x_real.shape != x_gen.shape:
        raise ValueError(f"shape mismatch: real {x_real.shape} vs generated {x_gen.shape}")
    e = np.asarray(eps, dtype=x_real.dtype)
    if e.ndim == 0:
        e = np.full(x_real.shape[0], e)
    if e.shape != (x_real.shape[0],):
        raise ValueError(f"need one eps per batch element, got shape {e.shape}")
    if np.any(e < 0) or np.any(e > 1):
        raise ValueError("eps must lie in [0, 1]")
    e = e.reshape(-1, *([1] * (x_real.ndim - 1)))
    return e * x_real + (1 - e) * x_gen


def discriminator_loss(critic: Callable[[Tensor], Tensor], x_real: Tensor, x_gen: Tensor,
                       eps, lam: float) -> tuple[Tensor, dict]:
    """Batch mean of ``D(x_gen) - D(x_real) + lam * (||grad D(x_hat)|| - 1)^2``.

    ``critic`` maps a ``[B, ...]`` tensor to ``[B]`` scores and must treat
    batch elements independently; it is called once on the three stacked
    inputs.  The penalty stays on the tape so its parameter gradient is exact.
    """
    x_real = x_real if isinstance(x_real, Tensor) else Tensor(x_real)
    x_gen = x_gen if isinstance(x_gen, Tensor) else Tensor(x_gen)
    B = x_real.shape[0]
    if lam == 0:
        scores = reshape(critic(concat([x_gen, x_real], axis=0)), (2 * B,))
        w_term = mean(scores[:B]) - mean(scores[B:])
        return w_term, {"wasserstein": float(w_term.data), "gp": 0.0, "grad_norm": math.nan}
    x_hat = Tensor(gp_interpolate(x_real, x_gen, eps), requires_grad=True)
    scores = critic(concat([x_gen, x_real, x_hat], axis=0))
    if scores.shape != (3 * B,):
        scores = reshape(scores, (3 * B,))
    s_gen, s_real, s_hat = scores[:B], scores[B:2 * B], scores[2 * B:]
    (g,) = grad(tsum(s_hat), [x_hat], create_graph=True)
    if g is None:
        norms = Tensor(np.zeros(B, dtype=x_real.dtype))
    else:
        flat = reshape(g, (B, -1))
        norms = sqrt(tsum(mul(flat, flat), axis=1) + GP_EPS)
    w_term = mean(s_gen) - mean(s_real)
    gp = gradient_penalty(norms, lam)
    return w_term + gp, {"wasserstein": float(w_term.data), "gp": float(gp.data),
                         "grad_norm": float(np.mean(norms.data))}


# -- loop -------------------------------------------------------------------------

class NonFiniteLossError(FloatingPointError):
    def __init__(self, snapshot: dict, path: Path | None = None):
        self.snapshot = snapshot
        self.path = path
        body = ", ".join(f"{k}={v}" for k, v in snapshot.items())
        super().__init__(f"non-finite loss: {body}" + (f" (snapshot written to {path})" if path else ""))


@dataclass
class TrainState:
    model: PCTGAN
    optimizers: dict[str, Adam]
    iteration: int = 0


@dataclass
class TrainResult:
    state: TrainState
    history: list[dict] = field(default_factory=list)
    checkpoints: dict[str, Path] = field(default_factory=dict)
    best_frechet: float = math.inf


def build_state(cfg: TrainConfig) -> TrainState:
    model = PCTGAN(cfg.model_config(), seed=cfg.seed)
    betas = (cfg.beta1, cfg.beta2)
    opts = {
        "discriminator": Adam(model.discriminator.parameters(), cfg.lr_d, betas),
        "encoder": Adam(model.encoder.parameters(), cfg.lr_eg, betas),
        "generator": Adam(model.generator.parameters(), cfg.lr_eg, betas),
    }
    return TrainState(model, opts)


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad.data, dtype=np.float64)))
    return math.sqrt(total)


def _generate(model: PCTGAN, batch: Batch) -> Tensor:
    pair, labels = batch.encoder_inputs()
    dtype = model.encoder.fc.weight.dtype
    out = model.generator(model.encoder(Tensor(pair.astype(dtype)), labels))
    return gather_selected(out, batch.selection)


def critic_step(state: TrainState, cfg: TrainConfig, data, rng) -> dict:
    model = state.model
    D = model.discriminator
    batch = sample_batch(data, cfg.m, cfg.nd, cfg.n_ch, rng)
    model.encoder.train()
    model.generator.train()
    with no_grad():
        fake = _generate(model, batch)
    eps = rng.uniform(size=batch.size)
    t3 = np.concatenate([batch.timings] * 3)
    ch3 = np.concatenate([batch.channel_label] * 3)
    D.requires_grad_(True)
    D.zero_grad()
    loss, parts = discriminator_loss(lambda x: D(x, t3, ch3), Tensor(batch.real), fake, eps, cfg.lam)
    backward(loss)
    parts["d_loss"] = float(loss.data)
    parts["d_grad_norm"] = _grad_norm(D.parameters())
    if np.isfinite(parts["d_loss"]):
        state.optimizers["discriminator"].step()
    return parts


def generator_step(state: TrainState, cfg: TrainConfig, data, rng) -> dict:
    model = state.model
    D = model.discriminator
    batch = sample_batch(data, cfg.m, cfg.nd, cfg.n_ch, rng)
    model.encoder.train()
    model.generator.train()
    model.encoder.zero_grad()
    model.generator.zero_grad()
    D.zero_grad()
    D.requires_grad_(False)
    try:
        score = D(_generate(model, batch), batch.timings, batch.channel_label)
        loss = -mean(score)
        backward(loss)
    finally:
        D.requires_grad_(True)
    parts = {"g_score": float(loss.data), "e_grad_norm": _grad_norm(model.encoder.parameters()),
             "g_grad_norm": _grad_norm(model.generator.parameters())}
    if np.isfinite(parts["g_score"]):
        state.optimizers["encoder"].step()
        state.optimizers["generator"].step()
    return parts


def calibrate_batch_norm(model: PCTGAN, cfg: TrainConfig, data, rng) -> None:
    """Set encoder/generator running statistics from one training-mode batch."""
    norms = [m for net in (model.encoder, model.generator) for m in net.modules() if hasattr(m, "stats")]
    saved = [n.stats.momentum for n in norms]
    for n in norms:
        n.stats.momentum = 1.0
    batch = sample_batch(data, cfg.m, cfg.nd, cfg.n_ch, rng)
    model.encoder.train()
    model.generator.train()
    with no_grad():
        _generate(model, batch)
    for n, mom in zip(norms, saved):
        n.stats.momentum = mom
        n.stats.num_batches = 1


def _fmt(v: float) -> str:
    return repr(float(v)) if np.isfinite(v) else str(float(v))


def check_data(data: Sequence[dict], cfg: TrainConfig) -> None:
    if not data:
        raise ValueError("training data is empty")
    for i, seq in enumerate(data):
        f = seq["frames"]
        want = (cfg.n_ch, cfg.image_size, cfg.image_size)
        if f.ndim != 4 or f.shape[1:] != want:
            raise ValueError(f"sequence {i}: frames must be [T, {want[0]}, {want[1]}, {want[2]}], got {f.shape}")
        if f.shape[0] < 3:
            raise ValueError(f"sequence {i}: need at least 3 frames, got {f.shape[0]}")
        if seq["timings"].shape != (f.shape[0], cfg.N + 1):
            raise ValueError(f"sequence {i}: timings shape {seq['timings'].shape} does not match frames")
        if np.min(f) < -1.0 or np.max(f) > 1.0:
            raise ValueError(f"sequence {i}: frames are not normalized to [-1, 1]")


def train(cfg: TrainConfig, data: Sequence[dict], out_dir=None, val: Sequence[dict] | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``cfg.iterations`` generator iterations.

    With ``out_dir`` the metrics log (``metrics.tsv``) and checkpoints
    ``init``, ``iter_<k>`` (every ``checkpoint_every``), ``best`` (lowest
    validation score) and ``final`` are written there.
    """
    from .checkpoint import save_checkpoint

    check_data(data, cfg)
    state = build_state(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult(state)
    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "metrics.tsv", "w", encoding="utf-8")
        log.write(METRICS_HEADER + "\n")

    def save(tag: str) -> None:
        if out is not None:
            path = out / f"{tag}.pctc"
            save_checkpoint(path, state, cfg)
            result.checkpoints[tag] = path

    try:
        calibrate_batch_norm(state.model, cfg, data, rng)
        save("init")
        for it in range(1, cfg.iterations + 1):
            for _ in range(cfg.n_disc):
                d = critic_step(state, cfg, data, rng)
                if not np.isfinite(d["d_loss"]):
                    raise _abort(out, {"iteration": it, "phase": "critic", **d})
            g = generator_step(state, cfg, data, rng)
            if not np.isfinite(g["g_score"]):
                raise _abort(out, {"iteration": it, "phase": "generator", **d, **g})
            state.iteration = it
            if it % cfg.log_every == 0 or it == cfg.iterations:
                fr = evaluate_model(state.model, val) if val else math.nan
                row = {"iteration": it, "d_loss": d["d_loss"], "g_score": g["g_score"],
                       "gp_term": d["gp"], "frechet_val": fr}
                result.history.append(row)
                if log is not None:
                    log.write("\t".join([str(it)] + [_fmt(row[k]) for k in
                                                      ("d_loss", "g_score", "gp_term", "frechet_val")]) + "\n")
                    log.flush()
                if progress is not None:
                    progress(row)
                if np.isfinite(fr) and fr < result.best_frechet:
                    result.best_frechet = fr
                    save("best")
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save(f"iter_{it}")
        save("final")
    finally:
        if log is not None:
            log.close()
    return result


def _abort(out: Path | None, snapshot: dict) -> NonFiniteLossError:
    path = None
    if out is not None:
        path = out / "nonfinite_snapshot.txt"
        path.write_text("".join(f"{k}\t{v}\n" for k, v in snapshot.items()), encoding="utf-8")
    return NonFiniteLossError(snapshot, path)
