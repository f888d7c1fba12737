"""Finite-difference checks for every layer type and for whole networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import axial_decoder_block, full_attention, init_axial_attention
from .autodiff import Tensor, finite_difference_check, kink_trace, leaky_relu, sigmoid, softmax
from .layers import (ConvParams, batch_norm, conv3d, effective_groups, group_norm, init_conv, init_norm,
                     transpose_conv3d)
from .losses import LossConfig, bce_dice_loss, deep_supervision_loss
from .unet import NetworkSpec, build_network, forward


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    kink_rejections: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol

    def lines(self) -> list[str]:
        return [f"{name:<40} {err:.3e}" for name, err in self.errors.items()]


def _sample_coords(shape, n: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(n, total), replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in sorted(flat)]


def _away_from_zero(rng, shape, margin=1e-3):
    """Random values with |v| >= margin, so lReLU kinks are not straddled by the step."""
    v = rng.standard_normal(shape)
    return np.where(np.abs(v) < margin, np.sign(v + 0.5) * (margin + np.abs(v)), v)


def _weighted_sum(seed_rng, shape):
    """Random projection turning a tensor into a scalar, so every output entry matters."""
    w = Tensor(seed_rng.standard_normal(shape))
    return lambda t: (t * w).sum()


def layer_gradient_checks(seed: int = 0, coords: int = 12, step: float = 1e-5) -> GradCheckReport:
    """Check conv, transposed conv, both norms, lReLU, sigmoid, softmax, attention and the loss at 64-bit."""
    rng = np.random.default_rng(seed)
    rep = GradCheckReport()
    f64 = np.float64

    def run(name, f, point):
        point = np.asarray(point, dtype=f64)
        rep.errors[name] = finite_difference_check(f, point, step, _sample_coords(point.shape, coords, rng))

    x = rng.standard_normal((2, 3, 4, 4, 4))
    conv = init_conv(rng, 5, 3, 3, f64, stride=1, padding=1)
    conv.bias = Tensor(rng.standard_normal(5), requires_grad=True)
    proj = _weighted_sum(rng, (2, 5, 4, 4, 4))
    run("conv3d.input", lambda t: proj(conv3d(t, conv)), x)
    run("conv3d.weight", lambda t: proj(conv3d(Tensor(x), ConvParams(t, conv.bias, 1, 1))), conv.weights.data)
    run("conv3d.bias", lambda t: proj(conv3d(Tensor(x), ConvParams(conv.weights, t, 1, 1))), conv.bias.data)

    down = init_conv(rng, 4, 3, 3, f64, stride=2, padding=1)
    proj_d = _weighted_sum(rng, (2, 4, 2, 2, 2))
    run("conv3d.stride2.input", lambda t: proj_d(conv3d(t, down)), x)
    run("conv3d.stride2.weight",
        lambda t: proj_d(conv3d(Tensor(x), ConvParams(t, down.bias, 2, 1))), down.weights.data)

    up = init_conv(rng, 3, 2, 2, f64, stride=2, padding=0)
    up.bias = Tensor(rng.standard_normal(2), requires_grad=True)
    proj_u = _weighted_sum(rng, (2, 2, 8, 8, 8))
    run("transpose_conv3d.input", lambda t: proj_u(transpose_conv3d(t, up)), x)
    run("transpose_conv3d.weight",
        lambda t: proj_u(transpose_conv3d(Tensor(x), ConvParams(t, up.bias, 2, 0))), up.weights.data)
    run("transpose_conv3d.bias",
        lambda t: proj_u(transpose_conv3d(Tensor(x), ConvParams(up.weights, t, 2, 0))), up.bias.data)

    xn = rng.standard_normal((2, 4, 3, 3, 3))
    proj_n = _weighted_sum(rng, xn.shape)
    gn = init_norm("group", 4, f64, num_groups=2)
    gn.gamma = Tensor(rng.uniform(0.5, 1.5, 4))
    gn.beta = Tensor(rng.standard_normal(4))
    run("group_norm.input", lambda t: proj_n(group_norm(t, gn)), xn)
    bn = init_norm("batch", 4, f64)
    bn.gamma = Tensor(rng.uniform(0.5, 1.5, 4))
    run("batch_norm.train.input", lambda t: proj_n(batch_norm(t, bn, "train")), xn)
    bn.running_mean = rng.standard_normal(4)
    bn.running_var = rng.uniform(0.5, 2.0, 4)
    bn.init_running_stats()
    run("batch_norm.infer.input", lambda t: proj_n(batch_norm(t, bn, "infer")), xn)

    v = _away_from_zero(rng, (3, 7))
    proj_v = _weighted_sum(rng, v.shape)
    run("leaky_relu", lambda t: proj_v(leaky_relu(t)), v)
    run("sigmoid", lambda t: proj_v(sigmoid(t)), v)
    run("softmax", lambda t: proj_v(softmax(t, axis=-1)), v)

    ap = init_axial_attention(rng, 4, 2, 3, f64)
    xa = rng.standard_normal((1, 4, 3, 2, 4))
    proj_a = _weighted_sum(rng, xa.shape)
    run("axial_attention.input", lambda t: proj_a(axial_decoder_block(t, ap)), xa)
    for key in ("wq", "wk", "wv", "wo"):
        w0 = ap.weights["y"][key]

        def f(t, key=key):
            ap.weights["y"][key] = t
            try:
                return proj_a(axial_decoder_block(Tensor(xa), ap))
            finally:
                ap.weights["y"][key] = w0

        run(f"axial_attention.y.{key}", f, w0.data)
    run("full_attention.input", lambda t: proj_a(full_attention(t, ap)), xa)

    logits = rng.standard_normal((2, 3, 4, 4, 4))
    targets = Tensor((rng.random(logits.shape) < 0.4).astype(f64))
    for mode in ("batch", "sample"):
        cfg = LossConfig(dice_mode=mode)
        run(f"bce_dice_loss.{mode}", lambda t, cfg=cfg: bce_dice_loss(t, targets, cfg), logits)
    return rep


def _zero_gradient_by_construction(spec: NetworkSpec, name: str) -> bool:
    """Bias of a conv followed by a per-channel normalization: the norm removes it exactly."""
    block, rest = spec.split_parameter_name(name)
    if rest != "bias" or block not in spec.norms:
        return False
    nrm = spec.norms[block]
    return nrm.kind == "batch" or effective_groups(nrm.channels, nrm.num_groups) == nrm.channels


def _signs(f, point: np.ndarray) -> list[np.ndarray]:
    with kink_trace() as trace:
        f(Tensor(point))
    return trace


def _smooth_coords(f, base: np.ndarray, step: float, n: int, rng: np.random.Generator,
                   max_tries: int = 50) -> tuple[list[tuple[int, ...]], int]:
    """Sample up to ``n`` coordinates whose +-step probes flip no lReLU input sign.

    A probe that crosses a kink measures a one-sided slope mix, not the
    derivative, so such coordinates are rejected and redrawn.
    """
    ref = _signs(f, base)
    kept, rejected = [], 0
    for idx in _sample_coords(base.shape, max_tries, rng):
        if len(kept) == n:
            break
        same = True
        for sgn in (1, -1):
            probe = base.copy()
            probe[idx] += sgn * step
            if any(not np.array_equal(a, b) for a, b in zip(ref, _signs(f, probe))):
                same = False
                break
        if same:
            kept.append(idx)
        else:
            rejected += 1
    return kept, rejected


def network_gradient_check(preset: str = "BL+L+GN", levels: int = 3, patch: int = 8, batch: int = 2,
                           seed: int = 0, coords: int = 4, step: float = 1e-5,
                           spec: NetworkSpec | None = None) -> GradCheckReport:
    """Check the full loss pipeline of a 64-bit network against central differences.

    Every parameter tensor contributes ``coords`` sampled coordinates, as does
    the input batch. Coordinates whose probes straddle an lReLU kink are
    redrawn (counted in ``kink_rejections``). Conv biases that a per-channel
    normalization cancels exactly are listed in ``skipped``.
    """
    if spec is None:
        spec = build_network(preset, patch_size=patch, levels=levels, seed=seed, dtype=np.float64)
    if spec.dtype != "float64":
        raise ValueError("gradient checks need a 64-bit network")
    rng = np.random.default_rng([seed, 0x6C])
    shape = (batch, spec.in_channels) + tuple(spec.patch_size)
    x0 = rng.standard_normal(shape)
    targets = (rng.random((batch, spec.out_regions) + tuple(spec.patch_size)) < 0.3).astype(np.float64)
    cfg = LossConfig()

    def loss_of(x: Tensor) -> Tensor:
        return deep_supervision_loss(forward(spec, x, mode="train"), targets, cfg)

    rep = GradCheckReport()

    def check(name, f, point):
        kept, rejected = _smooth_coords(f, point, step, coords, rng)
        rep.kink_rejections += rejected
        if not kept:
            rep.skipped.append(f"{name} (every probe straddles a kink)")
            return
        rep.errors[name] = finite_difference_check(f, point, step, kept)

    check("input", loss_of, x0)
    for name, p in spec.parameters().items():
        if _zero_gradient_by_construction(spec, name):
            rep.skipped.append(name)
            continue

        def f(t: Tensor, name=name) -> Tensor:
            with spec.substituted(name, t):
                return loss_of(Tensor(x0))

        check(name, f, p.data.copy())
    return rep
