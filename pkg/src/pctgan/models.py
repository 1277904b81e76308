"""Encoder, generator and conditional critic, plus single-frame prediction.

Shapes use a leading batch axis.  Timing labels enter the networks as a
``[B, 3, N + 1]`` array ordered (begin, end, target) for the encoder and
(step 0, step 1, step 2) for the critic; channel labels are ``[B, n_ch]`` masks.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .labels import TimingLabel
from .ndgrad import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Linear,
    Module,
    Tensor,
    concat,
    global_sum_pool,
    leaky_relu,
    mul,
    no_grad,
    reshape,
    sigmoid,
    tanh,
    tsum,
)

COND_MODES = ("none", "concat", "projection")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    z_dim: int = 128
    n_ch: int = 5
    n_step: int = 3
    N: int = 3
    nd: int = 2
    cond_mode: str = "projection"
    critic_sigmoid: bool = True
    slope: float = 0.2
    enc_channels: tuple = (64, 128, 256, 64)
    gen_channels: tuple = (256, 256, 128, 64)
    disc_channels: tuple = (64, 128, 256, 256)

    def __post_init__(self):
        if self.cond_mode not in COND_MODES:
            raise ValueError(f"cond_mode must be one of {COND_MODES}, got {self.cond_mode!r}")
        if not 1 <= self.nd <= self.n_ch:
            raise ValueError(f"nd={self.nd} outside 1..{self.n_ch}")
        depth = len(self.enc_channels)
        if len(self.gen_channels) != depth or len(self.disc_channels) != depth:
            raise ValueError("encoder, generator and critic must have the same number of blocks")
        if self.image_size % (2 ** depth):
            raise ValueError(f"image_size {self.image_size} not divisible by {2 ** depth}")
        if self.z_dim < 1 or self.N < 1 or self.n_step != 3:
            raise ValueError("z_dim and N must be positive and n_step must be 3")

    @property
    def seed_size(self) -> int:
        return self.image_size // 2 ** len(self.enc_channels)

    @property
    def label_dim(self) -> int:
        """Length of the critic's label vector: timing labels of all steps plus the channel mask."""
        return self.n_step * (self.N + 1) + self.n_ch

    @property
    def critic_in_channels(self) -> int:
        base = self.n_step * self.nd
        return base + self.label_dim if self.cond_mode == "concat" else base


def _check_timings(t: np.ndarray, batch: int, cfg: ModelConfig, who: str) -> np.ndarray:
    t = np.asarray(t)
    if t.shape != (batch, 3, cfg.N + 1):
        raise ValueError(f"{who}: timing labels must have shape {(batch, 3, cfg.N + 1)}, got {t.shape}")
    return t


class Encoder(Module):
    """Begin/end shape images plus three timing labels to one latent vector."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        chans = (2,) + tuple(cfg.enc_channels)
        self.convs = [Conv2d(a, b, rng=rng, dtype=dtype) for a, b in zip(chans[:-1], chans[1:])]
        self.norms = [BatchNorm2d(c, dtype) for c in chans[1:]]
        flat = chans[-1] * cfg.seed_size ** 2
        self.fc = Linear(flat + 3 * (cfg.N + 1), cfg.z_dim, rng=rng, dtype=dtype)

    def forward(self, pair: Tensor, timings: np.ndarray) -> Tensor:
        cfg = self.cfg
        size = cfg.image_size
        if pair.ndim != 4 or pair.shape[1:] != (2, size, size):
            raise ValueError(f"encoder expects images of shape [B, 2, {size}, {size}], got {pair.shape}")
        B = pair.shape[0]
        t = _check_timings(timings, B, cfg, "encoder")
        h = pair
        for conv, bn in zip(self.convs, self.norms):
            h = leaky_relu(bn(conv(h)), cfg.slope)
        h = reshape(h, (B, -1))
        lab = Tensor(t.reshape(B, -1).astype(h.dtype))
        return self.fc(concat([h, lab], axis=1))


class Generator(Module):
    """Latent vector to all ``n_ch`` channels in ``[-1, 1]``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        s0 = cfg.seed_size
        self.seed_channels = cfg.gen_channels[0]
        self.fc = Linear(cfg.z_dim, self.seed_channels * s0 * s0, rng=rng, dtype=dtype)
        chans = (self.seed_channels,) + tuple(cfg.gen_channels)
        self.deconvs = [ConvTranspose2d(a, b, rng=rng, dtype=dtype) for a, b in zip(chans[:-1], chans[1:])]
        self.norms = [BatchNorm2d(c, dtype) for c in chans[1:]]
        # size-preserving output layer
        self.out = ConvTranspose2d(chans[-1], cfg.n_ch, kernel=3, stride=1, padding=1, rng=rng, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        cfg = self.cfg
        if z.ndim != 2 or z.shape[1] != cfg.z_dim:
            raise ValueError(f"generator expects latents of shape [B, {cfg.z_dim}], got {z.shape}")
        s0 = cfg.seed_size
        h = leaky_relu(reshape(self.fc(z), (z.shape[0], self.seed_channels, s0, s0)), cfg.slope)
        for deconv, bn in zip(self.deconvs, self.norms):
            h = leaky_relu(bn(deconv(h)), cfg.slope)
        return tanh(self.out(h))


class Discriminator(Module):
    """Spectrally normalized critic over stacked selected channels of a step triple."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32,
                 n_power_iters: int = 1):
        self.cfg = cfg
        chans = (cfg.critic_in_channels,) + tuple(cfg.disc_channels)
        self.convs = [Conv2d(a, b, spectral=True, rng=rng, dtype=dtype, n_power_iters=n_power_iters)
                      for a, b in zip(chans[:-1], chans[1:])]
        self.fc = Linear(chans[-1], 1, spectral=True, rng=rng, dtype=dtype, n_power_iters=n_power_iters)
        self.embed = (Linear(cfg.label_dim, chans[-1], bias=False, spectral=True, rng=rng, dtype=dtype,
                             n_power_iters=n_power_iters)
                      if cfg.cond_mode == "projection" else None)

    def spectral_states(self):
        return [m.sn for m in self.modules() if getattr(m, "sn", None) is not None]

    def label_vector(self, timings: np.ndarray, channel_label: np.ndarray) -> np.ndarray:
        B = timings.shape[0]
        return np.concatenate([timings.reshape(B, -1), channel_label], axis=1)

    def _validate(self, x: Tensor, timings, channel_label) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        size = cfg.image_size
        want = cfg.n_step * cfg.nd
        if x.ndim != 4 or x.shape[1:] != (want, size, size):
            raise ValueError(f"critic expects [B, {want}, {size}, {size}] "
                             f"(n_step * nd stacked channels), got {x.shape}")
        B = x.shape[0]
        t = _check_timings(timings, B, cfg, "critic")
        ch = np.asarray(channel_label)
        if ch.shape != (B, cfg.n_ch):
            raise ValueError(f"channel labels must have shape {(B, cfg.n_ch)}, got {ch.shape}")
        counts = ch.sum(axis=1)
        if np.any(counts != cfg.nd):
            raise ValueError(f"channel labels must select exactly nd={cfg.nd} channels, got counts {counts}")
        return t, ch

    def features(self, x: Tensor, timings=None, channel_label=None) -> Tensor:
        """Pooled features ``[B, C]``; Concat mode appends label planes first."""
        if self.cfg.cond_mode == "concat":
            B, _, H, W = x.shape
            lab = self.label_vector(timings, channel_label).astype(x.dtype)
            planes = np.broadcast_to(lab[:, :, None, None], (B, lab.shape[1], H, W))
            x = concat([x, Tensor(np.ascontiguousarray(planes))], axis=1)
        h = x
        for conv in self.convs:
            h = leaky_relu(conv(h), self.cfg.slope)
        return global_sum_pool(h)

    def pre_score(self, x: Tensor, timings, channel_label, label_vec: np.ndarray | None = None) -> Tensor:
        """Score before the sigmoid stage, shape ``[B]``.

        ``label_vec`` overrides the projection label vector (used to check the
        additive decomposition).
        """
        t, ch = self._validate(x, timings, channel_label)
        h = self.features(x, t, ch)
        out = reshape(self.fc(h), (x.shape[0],))
        if self.embed is not None:
            lab = self.label_vector(t, ch) if label_vec is None else np.asarray(label_vec)
            proj = tsum(mul(self.embed(Tensor(lab.astype(h.dtype))), h), axis=1)
            out = out + proj
        return out

    def forward(self, x: Tensor, timings, channel_label) -> Tensor:
        s = self.pre_score(x, timings, channel_label)
        return sigmoid(s) if self.cfg.critic_sigmoid else s


class PCTGAN:
    """The three networks built from one seeded generator."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32,
                 n_power_iters: int = 1):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng, dtype)
        self.generator = Generator(cfg, rng, dtype)
        self.discriminator = Discriminator(cfg, rng, dtype, n_power_iters)

    def networks(self) -> dict[str, Module]:
        return {"encoder": self.encoder, "generator": self.generator, "discriminator": self.discriminator}

    def train(self, mode: bool = True) -> "PCTGAN":
        for net in self.networks().values():
            net.train(mode)
        return self

    def eval(self) -> "PCTGAN":
        return self.train(False)

    def to(self, dtype) -> "PCTGAN":
        for net in self.networks().values():
            net.to(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in self.networks().items():
            for k, v in net.state_dict().items():
                out[f"{prefix}.{k}"] = v
        return out

    def load_state_dict(self, state: dict) -> None:
        for prefix, net in self.networks().items():
            sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}
            net.load_state_dict(sub)

    def encode_generate(self, begin: np.ndarray, end: np.ndarray, timings: np.ndarray) -> Tensor:
        """Batch of ``[B, H, W]`` begin/end shapes and ``[B, 3, N+1]`` labels to ``[B, n_ch, H, W]``."""
        dtype = self.encoder.fc.weight.dtype
        pair = Tensor(np.stack([begin, end], axis=1).astype(dtype))
        return self.generator(self.encoder(pair, timings))


def _as_image(x, size: int, what: str) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    if arr.shape == (1, size, size):
        arr = arr[0]
    if arr.shape != (size, size):
        raise ValueError(f"{what} must have shape [1, {size}, {size}] or [{size}, {size}], got {arr.shape}")
    return arr


def encode(model: PCTGAN, x_begin, x_end, t_begin: TimingLabel, t_end: TimingLabel,
           t_target: TimingLabel) -> np.ndarray:
    """One latent for ``t_target`` (eval-mode batch norm)."""
    size = model.cfg.image_size
    b = _as_image(x_begin, size, "x_begin")
    e = _as_image(x_end, size, "x_end")
    t = np.stack([t_begin.values, t_end.values, t_target.values])[None]
    model.encoder.eval()
    dtype = model.encoder.fc.weight.dtype
    with no_grad():
        z = model.encoder(Tensor(np.stack([b, e])[None].astype(dtype)), t)
    return z.data[0]


def generate(model: PCTGAN, z) -> np.ndarray:
    """All channels ``[n_ch, H, W]`` for one latent (eval-mode batch norm)."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z)
    if z.shape != (model.cfg.z_dim,):
        raise ValueError(f"latent must have shape ({model.cfg.z_dim},), got {z.shape}")
    model.generator.eval()
    with no_grad():
        out = model.generator(Tensor(z[None].astype(model.generator.fc.weight.dtype)))
    return out.data[0]


def predict_frame(model: PCTGAN, x_begin, x_end, t_begin: TimingLabel, t_end: TimingLabel,
                  t_target: TimingLabel) -> np.ndarray:
    """Shape channel ``[1, H, W]`` of the frame at ``t_target``."""
    z = encode(model, x_begin, x_end, t_begin, t_end, t_target)
    return generate(model, z)[:1]


def model_config_from(obj, **overrides) -> ModelConfig:
    """Pick the ``ModelConfig`` fields out of any attribute bag."""
    kw = {f.name: getattr(obj, f.name) for f in fields(ModelConfig) if hasattr(obj, f.name)}
    kw.update(overrides)
    return replace(ModelConfig(), **kw)
