"""Central finite-difference gradient checks.

The analytic gradient is taken in the default 32-bit mode. The numerical
gradient re-evaluates the same function on 64-bit copies of the inputs, so
the comparison measures the backward rules rather than float32 cancellation
in the difference quotient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-3
RTOL = 1e-2
# Whole networks initialised with N(0, 0.02) weights: a 1e-3 nudge is 5% of a
# typical weight and flips ReLUs across 64x64 maps, so the difference quotient
# stops tracking the derivative. A smaller step keeps it on one linear piece.
NETWORK_STEP = 1e-5


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.rel_error < RTOL


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], *, step: float = STEP,
          max_elements: int | None = None, seed: int = 0, name: str = "fn",
          perturb: Sequence[int] | None = None, avoid_kinks: bool = False) -> GradCheckResult:
    """Compare backward() of ``fn(*tensors)`` against central differences.

    ``fn`` must return a scalar tensor. ``perturb`` restricts the check to the
    listed input positions (default: all). With ``max_elements`` only a seeded
    random subset of those elements is perturbed. With ``avoid_kinks`` an
    element whose +step and -step evaluations put any ReLU, leaky ReLU or
    abs on different linear pieces is skipped and the next candidate drawn,
    since the difference quotient is not a derivative estimate there.
    """
    leaves = [Tensor(np.asarray(x, dtype=np.float32), requires_grad=True) for x in inputs]
    loss = fn(*leaves)
    T.backward(loss)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    base = [np.asarray(x, dtype=np.float64).copy() for x in inputs]
    positions = range(len(base)) if perturb is None else perturb
    picks = [(i, j) for i in positions for j in range(base[i].size)]
    if max_elements is not None and len(picks) > max_elements:
        order = np.random.default_rng(seed).permutation(len(picks))
        picks = [picks[k] for k in order]
    limit = len(picks) if max_elements is None else max_elements

    def evaluate():
        with T.precision(np.float64), T.no_grad(), T.record_kinks() as kinks:
            value = fn(*[Tensor(x, dtype=np.float64) for x in base]).item()
        return value, kinks

    a_vals, n_vals, skipped = [], [], 0
    for i, j in picks:
        if len(a_vals) == limit:
            break
        flat = base[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up, kinks_up = evaluate()
        flat[j] = orig - step
        down, kinks_down = evaluate()
        flat[j] = orig
        if avoid_kinks and kinks_up != kinks_down:
            skipped += 1
            continue
        n_vals.append((up - down) / (2 * step))
        a_vals.append(analytic[i].reshape(-1)[j])
    return GradCheckResult(name, relative_error(np.array(a_vals), np.array(n_vals)), len(a_vals), skipped)


def op_suite(seed: int = 0) -> list[GradCheckResult]:
    """Finite-difference checks for every differentiable primitive, two shapes each."""
    results: list[GradCheckResult] = []
    rng = np.random.default_rng(seed)

    def run(name, fn, shapes, positive=False, away_from_zero=False):
        for k, shp in enumerate(shapes):
            xs = []
            for s in shp:
                x = rng.standard_normal(s)
                if positive:
                    x = np.abs(x) + 0.5
                if away_from_zero:
                    x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-9) * 0.2, x)
                xs.append(x)
            proj = np.random.default_rng(seed + k)
            w_holder = {}

            def wrapped(*ts, _fn=fn):
                out = _fn(*ts)
                if "w" not in w_holder:
                    w_holder["w"] = proj.standard_normal(out.shape)
                return (out * w_holder["w"]).sum()

            results.append(check(wrapped, xs, name=f"{name}{list(shp[0])}", max_elements=60, seed=seed + k))

    run("add", lambda a, b: a + b, [[(3, 4), (3, 4)], [(2, 3, 4), (4,)]])
    run("sub", lambda a, b: a - b, [[(3, 4), (3, 4)], [(2, 1, 4), (3, 1)]])
    run("mul", lambda a, b: a * b, [[(3, 4), (3, 4)], [(2, 3, 4), (3, 1)]])
    run("div", lambda a, b: a / b, [[(3, 4), (3, 4)], [(5,), (1,)]], positive=True)
    run("pow", lambda a: a ** 3.0, [[(4,)], [(2, 3)]])
    run("exp", T.exp, [[(4,)], [(2, 3)]])
    run("log", T.log, [[(4,)], [(2, 3)]], positive=True)
    run("abs", T.tabs, [[(4,)], [(2, 3)]], away_from_zero=True)
    run("sum", lambda a: T.tsum(a, axis=1, keepdims=True), [[(3, 4)], [(2, 3, 4)]])
    run("mean", lambda a: T.mean(a, axis=(0, 2)), [[(3, 4, 2)], [(2, 3, 5)]])
    run("reshape", lambda a: a.reshape(-1), [[(3, 4)], [(2, 3, 2)]])
    run("getitem", lambda a: a[1:, ::2], [[(3, 4)], [(4, 5, 2)]])
    run("concat", lambda a, b: T.concat([a, b], axis=1), [[(1, 2, 3, 3), (1, 1, 3, 3)], [(2, 3), (2, 4)]])
    run("relu", T.relu, [[(5,)], [(2, 3, 4)]], away_from_zero=True)
    run("leaky_relu", lambda a: T.leaky_relu(a, 0.2), [[(5,)], [(2, 3, 4)]], away_from_zero=True)
    run("tanh", T.tanh, [[(5,)], [(2, 3, 4)]])
    run("sigmoid", T.sigmoid, [[(5,)], [(2, 3, 4)]])
    run("log_sigmoid", T.log_sigmoid, [[(5,)], [(2, 3, 4)]])
    run("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1),
        [[(1, 2, 6, 6), (3, 2, 3, 3), (3,)], [(2, 3, 7, 5), (2, 3, 4, 4), (2,)]])
    run("conv2d_strided_dilated", lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=2, dilation=2),
        [[(1, 2, 9, 9), (3, 2, 3, 3), (3,)], [(1, 1, 8, 10), (2, 1, 2, 3), (2,)]])
    run("conv_transpose2d", lambda x, w, b: T.conv_transpose2d(x, w, b, stride=2, padding=1, output_padding=1),
        [[(1, 2, 4, 4), (2, 3, 3, 3), (3,)], [(2, 3, 3, 5), (3, 2, 4, 4), (2,)]])
    run("reflection_pad2d", lambda x: T.reflection_pad2d(x, 2), [[(1, 2, 4, 5)], [(2, 1, 3, 3)]])
    run("instance_norm2d", lambda x: T.instance_norm2d(x), [[(1, 2, 4, 4)], [(2, 3, 5, 3)]])
    run("dropout", lambda x: T.dropout(x, 0.5, seed=3), [[(1, 2, 4, 4)], [(3, 5)]])
    run("adaptive_avg_pool2d", lambda x: T.pool2d(x, "adaptive_avg", bins=3), [[(1, 2, 7, 7)], [(2, 1, 6, 8)]])
    run("avg_pool2d", lambda x: T.pool2d(x, "avg", kernel=2), [[(1, 2, 6, 6)], [(2, 1, 4, 8)]])
    run("upsample_bilinear", lambda x: T.upsample_bilinear(x, 7, 9), [[(1, 2, 3, 4)], [(2, 1, 5, 5)]])
    return results


def _param_fn(names: list[str], build: Callable[..., Tensor]):
    """Adapt ``build(params, *extra)`` to the positional-array interface of :func:`check`."""
    from .nn import ParamSet

    def fn(*tensors):
        params = ParamSet(zip(names, tensors[:len(names)]))
        return build(params, *tensors[len(names):])
    return fn


def network_suite(size: int = 64, seed: int = 0, max_elements: int = 20, step: float = NETWORK_STEP) -> list[GradCheckResult]:
    """Finite-difference checks through the desk-scale networks and their training losses.

    Each check perturbs a seeded sample of ``max_elements`` parameter entries;
    the data inputs stay fixed.
    """
    from .cgan import (DiscriminatorConfig, GeneratorConfig, d_loss, discriminator_forward,
                       g_total_loss, generator_forward, init_discriminator, init_generator)
    from .fcn import FcnConfig, fcn_forward, focal_loss, init_fcn
    from .nn import ParamSet

    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (1, 5, size, size))
    y = rng.uniform(-1, 1, (1, 1, size, size))
    mask = (rng.random((1, 1, size, size)) < 0.2).astype(np.float64)
    proj = rng.standard_normal((1, 1, size, size))
    results = []

    g_cfg = GeneratorConfig(base_width=16, n_resnet_blocks=3, image_size=size)
    d_cfg = DiscriminatorConfig(widths=[32, 64, 128, 256])
    g = init_generator(g_cfg, seed)
    d = init_discriminator(d_cfg, seed + 1)
    gn, dn = g.names(), d.names()
    g_arrays = list(g.arrays().values())
    d_arrays = list(d.arrays().values())

    gen = _param_fn(gn, lambda p, xi: T.tsum(generator_forward(xi, p, g_cfg, True, seed) * Tensor(proj, dtype=xi.dtype)))
    results.append(check(gen, g_arrays + [x], max_elements=max_elements, seed=seed, step=step, avoid_kinks=True, name="generator",
                         perturb=range(len(gn))))

    def disc(p, xi, real, fake):
        real_map, _ = discriminator_forward(xi, real, p, d_cfg)
        fake_map, _ = discriminator_forward(xi, fake, p, d_cfg)
        return d_loss(real_map, fake_map)
    fake = np.tanh(rng.standard_normal(y.shape))
    results.append(check(_param_fn(dn, disc), d_arrays + [x, y, fake], max_elements=max_elements,
                         seed=seed, step=step, avoid_kinks=True, name="discriminator", perturb=range(len(dn))))

    def g_objective(gp, *rest):
        dp = ParamSet(zip(dn, rest[:len(dn)]))
        xi, yi = rest[len(dn):]
        out = generator_forward(xi, gp, g_cfg, True, seed)
        fmap, _ = discriminator_forward(xi, out, dp, d_cfg)
        return g_total_loss(fmap, out, yi, lam=100.0)
    results.append(check(_param_fn(gn, g_objective), g_arrays + d_arrays + [x, y], max_elements=max_elements,
                         seed=seed, step=step, avoid_kinks=True, name="cgan_generator_objective", perturb=range(len(gn))))

    for c in (5, 6):
        f_cfg = FcnConfig(in_channels=c)
        f = init_fcn(f_cfg, seed)
        xin = np.concatenate([x, y], axis=1)[:, :c]
        seg = _param_fn(f.names(), lambda p, xi, _c=f_cfg: focal_loss(fcn_forward(xi, p, _c), mask, _c.gamma, _c.alpha))
        results.append(check(seg, list(f.arrays().values()) + [xin], max_elements=max_elements,
                             seed=seed, step=step, avoid_kinks=True, name=f"fcn_{f_cfg.mode}", perturb=range(len(f))))
    return results
