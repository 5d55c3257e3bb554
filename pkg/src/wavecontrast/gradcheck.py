"""Finite-difference verification of reverse-mode gradients.

Runs the model fragment in 64-bit and compares each tape gradient against
central differences, (f(w+eps) - f(w-eps)) / (2 eps). The fragment must be
deterministic across calls: no live dropout, no shared generator advancing
between evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .engine import Parameter, Tape, Tensor

EPSILON = 1e-5
REL_ERR_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    tolerance: float
    per_param: Dict[str, float] = field(default_factory=dict)
    failures: List[Tuple[str, int, float, float, float]] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> List[str]:
        out = []
        for name in sorted(self.per_param):
            err = self.per_param[name]
            status = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{status}  {name}  max_rel_err={err:.3e}")
        out.append(
            f"{'pass' if self.passed else 'FAIL'}: max relative error "
            f"{self.max_rel_err:.3e} vs tolerance {self.tolerance:.1e}"
        )
        return out


def _coords(size: int, limit: int) -> np.ndarray:
    if size <= limit:
        return np.arange(size)
    # Deterministic spread across the flat index range.
    return np.unique(np.linspace(0, size - 1, limit).round().astype(np.int64))


def rel_error(g_ad: float, g_fd: float) -> float:
    return abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), REL_ERR_FLOOR)


def grad_check(
    forward: Callable[[], Tensor],
    params: Sequence[Parameter],
    tolerance: float = 1e-4,
    epsilon: float = EPSILON,
    max_coords: int = 24,
) -> GradCheckReport:
    """Compare tape gradients of a scalar-valued fragment with central FD.

    Parameters larger than ``max_coords`` entries are probed at a
    deterministic subset of coordinates.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 parameters, {p.name!r} is {p.data.dtype}")
    with Tape() as tape:
        loss = forward()
        grads = tape.backward(loss, params)
    report = GradCheckReport(tolerance=tolerance)
    for p in params:
        g_ad = grads[p.name].ravel()
        flat = p.data.ravel()
        worst = 0.0
        for idx in _coords(flat.size, max_coords):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            loss_plus = float(forward().data)
            flat[idx] = orig - epsilon
            loss_minus = float(forward().data)
            flat[idx] = orig
            g_fd = (loss_plus - loss_minus) / (2.0 * epsilon)
            err = rel_error(float(g_ad[idx]), g_fd)
            if err > worst:
                worst = err
            if err >= tolerance:
                report.failures.append((p.name, int(idx), float(g_ad[idx]), g_fd, err))
        report.per_param[p.name] = worst
    return report


# ---------------------------------------------------------------------------
# standard verification battery


def standard_battery(seed: int = 0) -> List[Tuple[str, Callable[[], Tensor], List[Parameter], int]]:
    """Deterministic fragments covering every differentiable primitive plus
    the assembled dual-tower model; entries are (name, forward, params,
    max_coords). All parameters are float64."""
    from . import ops
    from .losses import contrastive_loss
    from .scn import ScnArchitecture, build_scn

    rng = np.random.default_rng(seed)

    def param(name: str, *shape: int) -> Parameter:
        return Parameter(name, rng.standard_normal(shape))

    def positive(name: str, *shape: int) -> Parameter:
        return Parameter(name, rng.uniform(0.5, 2.0, shape))

    def away_from_zero(name: str, *shape: int) -> Parameter:
        signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        return Parameter(name, signs * rng.uniform(0.2, 1.5, shape))

    battery: List[Tuple[str, Callable[[], Tensor], List[Parameter], int]] = []

    def register(name, forward, params, max_coords=24):
        battery.append((name, forward, list(params), max_coords))

    a = param("a", 3, 4)
    b = param("b", 4)
    register("add", lambda: ops.tensor_mean(ops.add(a, b)), [a, b])
    register("sub", lambda: ops.tensor_mean(ops.sub(a, b)), [a, b])
    register("mul", lambda: ops.tensor_mean(ops.mul(a, b)), [a, b])

    c = param("c", 5)
    register("scale", lambda: ops.tensor_sum(ops.scale(c, -1.7)), [c])
    register("add_scalar", lambda: ops.tensor_sum(ops.square(ops.add_scalar(c, 0.3))), [c])
    register("neg", lambda: ops.tensor_sum(ops.square(ops.neg(c))), [c])

    r = away_from_zero("r", 4, 3)
    register("relu", lambda: ops.tensor_sum(ops.relu(r)), [r])
    m = param("m", 4, 3)
    register("mish", lambda: ops.tensor_mean(ops.mish(m)), [m])
    register("square", lambda: ops.tensor_mean(ops.square(m)), [m])
    s = positive("s", 6)
    register("sqrt", lambda: ops.tensor_sum(ops.sqrt(s)), [s])

    t = param("t", 2, 3, 4)
    register("tensor_sum_axis", lambda: ops.tensor_mean(ops.square(ops.tensor_sum(t, axis=1))), [t])
    register(
        "tensor_mean_keepdims",
        lambda: ops.tensor_sum(ops.square(ops.tensor_mean(t, axis=(0, 2), keepdims=True))),
        [t],
    )
    register("reshape", lambda: ops.tensor_mean(ops.square(ops.reshape(t, (6, 4)))), [t])

    c1 = param("c1", 2, 3)
    c2 = param("c2", 2, 2)
    register("concat", lambda: ops.tensor_mean(ops.square(ops.concat([c1, c2], axis=1))), [c1, c2])

    ma = param("ma", 3, 4)
    mb = param("mb", 4, 2)
    register("matmul", lambda: ops.tensor_mean(ops.square(ops.matmul(ma, mb))), [ma, mb])

    dx = Tensor(rng.standard_normal((4, 3)))
    dw = param("dw", 3, 5)
    db = param("db", 5)
    register("dense", lambda: ops.tensor_mean(ops.square(ops.dense(dx, dw, db))), [dw, db])

    x1 = Tensor(rng.standard_normal((2, 9, 2)))
    k1 = param("k1", 3, 2, 4)
    b1 = param("b1", 4)
    register("conv1d_same", lambda: ops.tensor_mean(ops.square(ops.conv1d(x1, k1, b1))), [k1, b1])
    register(
        "conv1d_valid_stride",
        lambda: ops.tensor_mean(ops.square(ops.conv1d(x1, k1, b1, stride=2, padding="valid"))),
        [k1, b1],
    )

    x2 = Tensor(rng.standard_normal((2, 6, 5, 2)))
    k2 = param("k2", 3, 3, 2, 3)
    b2 = param("b2", 3)
    register("conv2d_same", lambda: ops.tensor_mean(ops.square(ops.conv2d(x2, k2, b2))), [k2, b2])
    register(
        "conv2d_valid",
        lambda: ops.tensor_mean(ops.square(ops.conv2d(x2, k2, b2, padding="valid"))),
        [k2, b2],
    )

    p1 = param("p1", 2, 8, 3)
    register("max_pool_1d", lambda: ops.tensor_mean(ops.square(ops.max_pool(p1, 2, dims=1))), [p1])
    p2 = param("p2", 2, 6, 6, 2)
    register("max_pool_2d", lambda: ops.tensor_mean(ops.square(ops.max_pool(p2, 2, dims=2))), [p2])
    register("global_average_pool", lambda: ops.tensor_sum(ops.square(ops.global_average_pool(p2))), [p2])

    u1 = param("u1", 2, 4, 3)
    register("upsample_1d", lambda: ops.tensor_mean(ops.square(ops.upsample_nearest(u1, 2, dims=1))), [u1])
    u2 = param("u2", 2, 3, 3, 2)
    register("upsample_2d", lambda: ops.tensor_mean(ops.square(ops.upsample_nearest(u2, 2, dims=2))), [u2])

    logits = param("logits", 6, 4)
    labels = rng.integers(0, 4, 6)
    register("softmax_cross_entropy", lambda: ops.softmax_cross_entropy(logits, labels), [logits])

    blogits = param("blogits", 8)
    targets = rng.integers(0, 2, 8).astype(np.float64)
    register("sigmoid_bce", lambda: ops.sigmoid_bce_with_logits(blogits, targets), [blogits])

    pred = param("pred", 3, 5)
    target = rng.standard_normal((3, 5))
    register("mse_loss", lambda: ops.mse_loss(pred, target), [pred])

    cw = param("cw", 4, 3)
    cx = Tensor(rng.standard_normal((4, 4)))
    czs = Tensor(rng.standard_normal((4, 3)))
    cy = np.array([1, 0, 1, 0])
    register(
        "contrastive_composite",
        lambda: contrastive_loss(ops.matmul(cx, cw), czs, cy, alpha=1.0),
        [cw],
    )

    tiny = ScnArchitecture(
        signal_kernels=(3, 2),
        signal_maps=(2, 2),
        signal_fusion_kernel=2,
        scalogram_kernels=(2, 2),
        scalogram_maps=(2, 2),
        scalogram_fusion_kernel=2,
        fusion_maps=3,
        head_conv_maps=3,
        head_conv_kernel=2,
        embedding_dim=4,
        pool_window=2,
        pools_after_first=1,
        dropout_rate=0.0,
    )
    model = build_scn({"a": 1, "b": 2}, 8, (4, 4), seed=seed, arch=tiny, dtype=np.float64)
    signals = {"a": rng.standard_normal((2, 8, 1)), "b": rng.standard_normal((2, 8, 2))}
    scalos = {"a": rng.standard_normal((2, 4, 4, 1)), "b": rng.standard_normal((2, 4, 4, 2))}
    y = np.array([1, 0])

    def scn_forward():
        zx = model.signal_embedding(signals)
        zs = model.scalogram_embedding(scalos)
        return contrastive_loss(zx, zs, y, alpha=1.0)

    register("scn_full", scn_forward, model.param_list(), 2)
    return battery


def run_battery(seeds: Sequence[int] = (0,), tolerance: float = 1e-4) -> Tuple[List[str], bool]:
    """Run the standard battery across seeds; returns (report lines, pass)."""
    worst: Dict[str, float] = {}
    failed: Dict[str, int] = {}
    for seed in seeds:
        for name, forward, params, max_coords in standard_battery(seed):
            report = grad_check(forward, params, tolerance=tolerance, max_coords=max_coords)
            worst[name] = max(worst.get(name, 0.0), report.max_rel_err)
            if not report.passed:
                failed[name] = failed.get(name, 0) + len(report.failures)
    lines = []
    for name in worst:
        status = "ok" if name not in failed else "FAIL"
        lines.append(f"{status}  {name}  max_rel_err={worst[name]:.3e}")
    passed = not failed
    lines.append(
        f"{'pass' if passed else 'FAIL'}: {len(worst)} fragments x {len(list(seeds))} seeds, tolerance {tolerance:.1e}"
    )
    return lines, passed
