"""Ischemic-core segmentation FCN.

A compact residual trunk with dilated convolutions at 1/4 resolution, a
pyramid-pooling head and a single-logit output upsampled back to the input
size. The same architecture runs on 5-channel CTP input (``FCN``) or on CTP
plus a generated MR channel (``FCN-CGAN``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import AugmentRanges, ScanRecord, affine_augment
from .nn import AdamState, ParamBuilder, ParamSet, adam_step
from .tensor import Tensor

MODE_NAMES = {5: "FCN", 6: "FCN-CGAN"}


@dataclass
class FcnConfig:
    in_channels: int = 5
    widths: tuple[int, int, int] = (32, 64, 128)
    dilations: tuple[int, ...] = (1, 2, 4)
    bins: tuple[int, ...] = (1, 2, 3, 6)
    branch_width: int = 32
    head_width: int = 64
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.in_channels not in MODE_NAMES:
            raise ValueError(f"in_channels must be 5 (FCN) or 6 (FCN-CGAN), got {self.in_channels}")

    @property
    def mode(self) -> str:
        return MODE_NAMES[self.in_channels]

    @property
    def prefix(self) -> str:
        # parameter names carry the input mode so a checkpoint cannot be
        # loaded into the other configuration
        return f"fcn{self.in_channels}"


def init_fcn(cfg: FcnConfig, seed: int) -> ParamSet:
    w0, w1, w2 = cfg.widths
    p = cfg.prefix
    b = ParamBuilder(seed)
    b.conv(f"{p}.stem1", cfg.in_channels, w0, 3, bias=False)
    b.conv(f"{p}.stem2", w0, w1, 3, bias=False)
    # first block keeps w1, one further block per dilation rate at w2
    chans = [(w1, w1, 1)] + [((w1 if i == 0 else w2), w2, d) for i, d in enumerate(cfg.dilations)]
    for i, (cin, cout, _) in enumerate(chans):
        b.conv(f"{p}.res{i}.conv1", cin, cout, 3, bias=False)
        b.conv(f"{p}.res{i}.conv2", cout, cout, 3, bias=False)
        if cin != cout:
            b.conv(f"{p}.res{i}.proj", cin, cout, 1, bias=False)
    for bins in cfg.bins:
        b.conv(f"{p}.ppm{bins}", w2, cfg.branch_width, 1)
    b.conv(f"{p}.head", w2 + cfg.branch_width * len(cfg.bins), cfg.head_width, 3, bias=False)
    b.conv(f"{p}.cls", cfg.head_width, 1, 1)
    return b.params


def block_layout(cfg: FcnConfig) -> list[int]:
    return [1] + list(cfg.dilations)


def fcn_forward(x: Tensor, params: ParamSet, cfg: FcnConfig) -> Tensor:
    """(1, C, S, S) input -> (1, 1, S, S) lesion logits."""
    if x.ndim != 4:
        raise T.ShapeError(f"expected (N, C, S, S) input, got {x.shape}")
    c = x.shape[1]
    if c != cfg.in_channels:
        got = MODE_NAMES.get(c, f"{c}-channel")
        raise T.ShapeError(f"{cfg.mode} model expects {cfg.in_channels} input channels, got {c} ({got} input)")
    s_h, s_w = x.shape[2:]
    p, pre = params, cfg.prefix
    h = T.relu(T.instance_norm2d(T.conv2d(x, p[f"{pre}.stem1.weight"], stride=2, padding=1)))
    h = T.relu(T.instance_norm2d(T.conv2d(h, p[f"{pre}.stem2.weight"], stride=2, padding=1)))
    for i, d in enumerate(block_layout(cfg)):
        y = T.conv2d(h, p[f"{pre}.res{i}.conv1.weight"], padding=d, dilation=d)
        y = T.relu(T.instance_norm2d(y))
        y = T.instance_norm2d(T.conv2d(y, p[f"{pre}.res{i}.conv2.weight"], padding=d, dilation=d))
        skip = h
        if f"{pre}.res{i}.proj.weight" in p:
            skip = T.conv2d(h, p[f"{pre}.res{i}.proj.weight"])
        h = T.relu(y + skip)
    th, tw = h.shape[2:]
    branches = [h]
    for bins in cfg.bins:
        z = T.pool2d(h, "adaptive_avg", bins=bins)
        z = T.relu(T.conv2d(z, p[f"{pre}.ppm{bins}.weight"], p[f"{pre}.ppm{bins}.bias"]))
        branches.append(T.upsample_bilinear(z, th, tw))
    h = T.concat(branches, axis=1)
    h = T.relu(T.instance_norm2d(T.conv2d(h, p[f"{pre}.head.weight"], padding=1)))
    logits = T.conv2d(h, p[f"{pre}.cls.weight"], p[f"{pre}.cls.bias"])
    return T.upsample_bilinear(logits, s_h, s_w)


def focal_loss(logits: Tensor, mask, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean over pixels of -alpha_t (1 - p_t)^gamma log(p_t)."""
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if m.shape != logits.shape:
        raise T.ShapeError(f"mask shape {m.shape} does not match logits {logits.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("focal loss mask must be binary")
    m = m.astype(logits.dtype)
    sign = Tensor(2 * m - 1, dtype=logits.dtype)
    log_pt = T.log_sigmoid(logits * sign)
    alpha_t = Tensor(alpha * m + (1 - alpha) * (1 - m), dtype=logits.dtype)
    weight = T.power(1.0 - T.exp(log_pt), gamma) if gamma != 0 else 1.0
    return -T.mean(alpha_t * weight * log_pt)


def predict_mask(logits) -> np.ndarray:
    """Binary mask where sigmoid(logit) > 0.5, i.e. logit > 0; ties go to background."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (z > 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------
def scan_inputs(rec: ScanRecord, genmr: np.ndarray | None, cfg: FcnConfig) -> np.ndarray:
    """(C, D, S, S) network input for a scan, appending the generated MR channel for FCN-CGAN."""
    if cfg.in_channels == 6:
        if genmr is None:
            raise ValueError(f"{rec.scan_id}: FCN-CGAN needs a generated MR stack")
        if genmr.shape != rec.dwi.shape:
            raise ValueError(f"{rec.scan_id}: generated MR shape {genmr.shape} != {rec.dwi.shape}")
        return np.concatenate([rec.ctp, genmr], axis=0)
    return rec.ctp


@dataclass
class FcnTrainer:
    cfg: FcnConfig
    params: ParamSet
    adam: AdamState = field(default_factory=AdamState)

    @classmethod
    def create(cls, cfg: FcnConfig, seed: int, lr: float = 2e-4, betas=(0.5, 0.999)) -> "FcnTrainer":
        return cls(cfg, init_fcn(cfg, seed), AdamState(lr=lr, beta1=betas[0], beta2=betas[1]))

    def step(self, x: np.ndarray, mask: np.ndarray) -> float:
        logits = fcn_forward(Tensor(x[None]), self.params, self.cfg)
        loss = focal_loss(logits, mask[None], self.cfg.gamma, self.cfg.alpha)
        self.params.zero_grad()
        T.backward(loss)
        adam_step(self.params, self.adam)
        self.params.zero_grad()
        return loss.item()

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return fcn_forward(Tensor(x[None]), self.params, self.cfg).data[0]

    def segment(self, inputs: np.ndarray) -> np.ndarray:
        """(C, D, S, S) scan -> (1, D, S, S) uint8 mask, slice by slice."""
        out = [predict_mask(self.predict_logits(inputs[:, z])) for z in range(inputs.shape[1])]
        return np.stack(out, axis=1)


def fcn_train_epoch(trainer: FcnTrainer, dataset: list[tuple[np.ndarray, np.ndarray]],
                    augment: AugmentRanges | None, rng: np.random.Generator) -> float:
    """One shuffled pass over (C,S,S) slice / (1,S,S) mask pairs with batch size 1.

    Returns the mean focal loss over the epoch.
    """
    if not dataset:
        raise ValueError("training set is empty")
    c = trainer.cfg.in_channels
    for x, _ in dataset:
        if x.shape[0] != c:
            raise ValueError(f"{trainer.cfg.mode} expects {c}-channel slices, got {x.shape[0]}")
    order = rng.permutation(len(dataset))
    # a separate stream for the transforms keeps the visiting order of later
    # epochs independent of whether (or how) augmentation draws
    aug_rng = np.random.default_rng(rng.integers(2**63))
    losses = []
    for i in order:
        x, m = dataset[i]
        if augment is not None:
            x, m = affine_augment(x, m, augment, aug_rng)
        losses.append(trainer.step(x, m))
    return float(np.mean(losses))


def slice_dataset(records: list[ScanRecord], inputs: dict[str, np.ndarray]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Flatten scans into per-slice (input, mask) pairs; ``inputs`` maps scan id to (C,D,S,S)."""
    out = []
    for rec in records:
        x = inputs[rec.scan_id]
        for z in range(rec.n_slices):
            out.append((x[:, z], rec.mask[:, z]))
    return out
