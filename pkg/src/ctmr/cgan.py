"""CT-perfusion to DWI conditional GAN.

Generator: ResNet-style encoder/decoder with reflection padding, instance
normalization and dropout inside each residual block (dropout doubles as the
noise input, so it stays on at inference unless disabled). Discriminator: a
conditional PatchGAN scoring overlapping 70x70 patches of the 6-channel
(CTP + MR) stack.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import AdamState, ParamBuilder, ParamSet, adam_step
from .tensor import Tensor


@dataclass
class GeneratorConfig:
    in_channels: int = 5
    out_channels: int = 1
    base_width: int = 64
    n_resnet_blocks: int = 9
    image_size: int = 256
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.image_size % 4:
            raise ValueError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.n_resnet_blocks < 1:
            raise ValueError("n_resnet_blocks must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class DiscriminatorConfig:
    in_channels: int = 6
    widths: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    kernel: int = 4
    leaky_slope: float = 0.2
    padding: int = 1

    def strides(self) -> list[int]:
        # stride-2 stages for all but the last hidden width, then stride 1 for
        # the last hidden conv and the 1-channel output conv
        return [2] * (len(self.widths) - 1) + [1, 1]


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------
def init_generator(cfg: GeneratorConfig, seed: int) -> ParamSet:
    w = cfg.base_width
    b = ParamBuilder(seed)
    b.conv("g.in", cfg.in_channels, w, 7, bias=False)
    b.conv("g.down1", w, 2 * w, 3, bias=False)
    b.conv("g.down2", 2 * w, 4 * w, 3, bias=False)
    for i in range(cfg.n_resnet_blocks):
        b.conv(f"g.res{i}.conv1", 4 * w, 4 * w, 3, bias=False)
        b.conv(f"g.res{i}.conv2", 4 * w, 4 * w, 3, bias=False)
    b.conv_transpose("g.up1", 4 * w, 2 * w, 3, bias=False)
    b.conv_transpose("g.up2", 2 * w, w, 3, bias=False)
    b.conv("g.out", w, cfg.out_channels, 7)
    return b.params


def _resnet_block(h: Tensor, p: ParamSet, i: int, rate: float, active: bool, seed) -> Tensor:
    # Conv-InstanceNorm-ReLU-Dropout-Conv-InstanceNorm, reflection pad 1 before each conv
    y = T.conv2d(T.reflection_pad2d(h, 1), p[f"g.res{i}.conv1.weight"])
    y = T.relu(T.instance_norm2d(y))
    y = T.dropout(y, rate, seed=(seed, i), active=active)
    y = T.conv2d(T.reflection_pad2d(y, 1), p[f"g.res{i}.conv2.weight"])
    return h + T.instance_norm2d(y)


def generator_forward(x: Tensor, params: ParamSet, cfg: GeneratorConfig,
                      dropout_active: bool = True, seed: int = 0) -> Tensor:
    """Map a (1, 5, S, S) CTP stack to a (1, 1, S, S) MR slice in [-1, 1]."""
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"generator expects (N, {cfg.in_channels}, S, S) input, got {x.shape}")
    s = x.shape[2]
    if x.shape[3] != s or s % 4:
        raise T.ShapeError(f"generator input must be square with side divisible by 4, got {x.shape[2:]}")
    p = params
    h = T.conv2d(T.reflection_pad2d(x, 3), p["g.in.weight"])
    h = T.relu(T.instance_norm2d(h))
    h = T.relu(T.instance_norm2d(T.conv2d(h, p["g.down1.weight"], stride=2, padding=1)))
    h = T.relu(T.instance_norm2d(T.conv2d(h, p["g.down2.weight"], stride=2, padding=1)))
    for i in range(cfg.n_resnet_blocks):
        h = _resnet_block(h, p, i, cfg.dropout_rate, dropout_active, seed)
    h = T.conv_transpose2d(h, p["g.up1.weight"], stride=2, padding=1, output_padding=1)
    h = T.relu(T.instance_norm2d(h))
    h = T.conv_transpose2d(h, p["g.up2.weight"], stride=2, padding=1, output_padding=1)
    h = T.relu(T.instance_norm2d(h))
    h = T.conv2d(T.reflection_pad2d(h, 3), p["g.out.weight"], p["g.out.bias"])
    return T.tanh(h)


# ---------------------------------------------------------------------------
# Discriminator
# ---------------------------------------------------------------------------
def init_discriminator(cfg: DiscriminatorConfig, seed: int) -> ParamSet:
    b = ParamBuilder(seed)
    chans = [cfg.in_channels] + list(cfg.widths) + [1]
    for i in range(len(chans) - 1):
        normed = 0 < i < len(chans) - 2
        b.conv(f"d.c{i + 1}", chans[i], chans[i + 1], cfg.kernel, bias=not normed)
    return b.params


def discriminator_forward(x: Tensor, m: Tensor, params: ParamSet,
                          cfg: DiscriminatorConfig) -> tuple[Tensor, Tensor]:
    """Score an MR slice ``m`` conditioned on CTP ``x``.

    Returns the patch logit map and its mean (the scalar score).
    """
    if x.ndim != 4 or m.ndim != 4 or x.shape[0] != m.shape[0] or x.shape[2:] != m.shape[2:]:
        raise T.ShapeError(f"conditioning input {x.shape} and MR slice {m.shape} do not stack")
    h = T.concat([x, m], axis=1)
    if h.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"discriminator expects {cfg.in_channels} stacked channels, got {h.shape[1]}")
    strides = cfg.strides()
    last = len(strides) - 1
    for i, stride in enumerate(strides):
        name = f"d.c{i + 1}"
        bias = params[f"{name}.bias"] if f"{name}.bias" in params else None
        h = T.conv2d(h, params[f"{name}.weight"], bias, stride=stride, padding=cfg.padding)
        if i == last:
            break
        if i > 0:
            h = T.instance_norm2d(h)
        h = T.leaky_relu(h, cfg.leaky_slope)
    return h, T.mean(h)


def receptive_field(cfg: DiscriminatorConfig) -> int:
    """Side length of the input patch seen by one output unit."""
    r = 1
    for stride in reversed(cfg.strides()):
        r = (r - 1) * stride + cfg.kernel
    return r


def patch_map_size(size: int, cfg: DiscriminatorConfig) -> int:
    for stride in cfg.strides():
        size = T.conv_output_size(size, cfg.kernel, stride, cfg.padding)
    return size


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------
def d_loss(real_map: Tensor, fake_map: Tensor) -> Tensor:
    """Per-patch sigmoid cross-entropy: real patches labelled 1, fake 0."""
    return -T.mean(T.log_sigmoid(real_map)) - T.mean(T.log_sigmoid(-fake_map))


def g_adv_loss(fake_map: Tensor) -> Tensor:
    """Non-saturating generator loss, -mean log D(x, G(x))."""
    return -T.mean(T.log_sigmoid(fake_map))


def l1_loss(generated: Tensor, target: Tensor) -> Tensor:
    if generated.shape != target.shape:
        raise T.ShapeError(f"generated {generated.shape} and target {target.shape} differ")
    return T.mean(T.tabs(target - generated))


def g_total_loss(fake_map: Tensor, generated: Tensor, target: Tensor, lam: float = 100.0) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return g_adv_loss(fake_map) + lam * l1_loss(generated, target)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
class NonFiniteLossError(FloatingPointError):
    pass


@contextlib.contextmanager
def frozen(params: ParamSet):
    """Exclude ``params`` from the tape for the duration of the block."""
    for _, t in params:
        t.requires_grad = False
    try:
        yield
    finally:
        for _, t in params:
            t.requires_grad = True


def _require_finite(loss: Tensor, what: str, *param_sets: ParamSet) -> None:
    if math.isfinite(loss.item()):
        return
    bad = T.first_nonfinite(loss)
    if bad is None:
        raise NonFiniteLossError(f"{what} is not finite (source unknown)")
    names = {id(t): name for ps in param_sets for name, t in ps}
    label = f"parameter {names[id(bad)]}" if id(bad) in names else bad.op
    raise NonFiniteLossError(f"{what} is not finite (first non-finite tensor: {label} {bad.shape})")


@dataclass
class CGAN:
    """Generator and discriminator with their optimizers."""

    g_cfg: GeneratorConfig
    d_cfg: DiscriminatorConfig
    g_params: ParamSet
    d_params: ParamSet
    g_adam: AdamState
    d_adam: AdamState
    lam: float = 100.0

    @classmethod
    def create(cls, g_cfg: GeneratorConfig, d_cfg: DiscriminatorConfig | None = None, seed: int = 0,
               lr: float = 2e-4, betas=(0.5, 0.999), lam: float = 100.0) -> "CGAN":
        d_cfg = d_cfg or DiscriminatorConfig(in_channels=g_cfg.in_channels + g_cfg.out_channels)
        return cls(g_cfg, d_cfg,
                   init_generator(g_cfg, seed), init_discriminator(d_cfg, seed + 1),
                   AdamState(lr=lr, beta1=betas[0], beta2=betas[1]),
                   AdamState(lr=lr, beta1=betas[0], beta2=betas[1]), lam)

    def generate(self, x: np.ndarray | Tensor, dropout_active: bool = True, seed: int = 0) -> np.ndarray:
        x = x if isinstance(x, Tensor) else Tensor(x)
        with T.no_grad():
            return generator_forward(x, self.g_params, self.g_cfg, dropout_active, seed).data

    def train_step(self, x: np.ndarray | Tensor, y: np.ndarray | Tensor, seed: int) -> tuple[float, float]:
        return train_step(self, x, y, seed)


def train_step(model: CGAN, x, y, seed: int) -> tuple[float, float]:
    """One discriminator Adam step followed by one generator Adam step (batch of 1).

    Returns ``(d_loss, g_total_loss)`` as floats.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y)
    if x.shape[0] != 1 or y.shape[0] != 1:
        raise T.ShapeError(f"training uses a batch size of 1, got {x.shape[0]}")

    fake = generator_forward(x, model.g_params, model.g_cfg, dropout_active=True, seed=seed)

    with frozen(model.g_params):
        real_map, _ = discriminator_forward(x, y, model.d_params, model.d_cfg)
        fake_map, _ = discriminator_forward(x, fake.detach(), model.d_params, model.d_cfg)
        ld = d_loss(real_map, fake_map)
    _require_finite(ld, "discriminator loss", model.g_params, model.d_params)
    model.d_params.zero_grad()
    T.backward(ld)
    adam_step(model.d_params, model.d_adam)
    model.d_params.zero_grad()

    with frozen(model.d_params):
        fake_map, _ = discriminator_forward(x, fake, model.d_params, model.d_cfg)
        lg = g_total_loss(fake_map, fake, y, model.lam)
    _require_finite(lg, "generator loss", model.g_params, model.d_params)
    model.g_params.zero_grad()
    T.backward(lg)
    adam_step(model.g_params, model.g_adam)
    model.g_params.zero_grad()
    return ld.item(), lg.item()
