"""Finite-difference gradient checks for every differentiable op and the full model.

Each check builds a scalar ``f = sum(op(inputs) * R)`` with a fixed random
weighting ``R`` and compares ``backward`` against central differences. The
error of one input is ``max|analytic - numeric| / max(max|analytic|,
max|numeric|, 1e-4)``; the floor keeps exactly-zero gradients (such as
the key bias under softmax shift invariance) from dividing noise by noise.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import swin
from . import tensor as T
from .bottleneck import CNNBottleneck
from .model import Model, ModelConfig
from .skip import FuseNode
from .tensor import Tensor, finite_diff_grad


@dataclass
class CheckResult:
    name: str
    seed: int
    rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.rel_err < self.tol)


ABS_FLOOR = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), ABS_FLOOR)
    return float(np.abs(analytic - numeric).max() / scale)


def check_function(fn: Callable[..., Tensor], inputs: list[Tensor], rng: np.random.Generator,
                   h: float = 1e-5, max_coords: int | None = None) -> float:
    """Worst relative error over ``inputs`` of d sum(fn(*inputs) * R)."""
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out_shape = fn(*inputs).shape
    weight = rng.uniform(-1.0, 1.0, out_shape)

    def scalar(*args):
        return (fn(*args) * weight).sum()

    scalar(*inputs).backward()
    worst = 0.0
    for k, t in enumerate(inputs):
        idx = None
        if max_coords is not None and t.size > max_coords:
            idx = rng.choice(t.size, max_coords, replace=False)

        def f(_x, k=k):
            return scalar(*inputs)

        num = finite_diff_grad(f, t, h, idx)
        ana = t.grad
        if idx is not None:
            num, ana = num.reshape(-1)[idx], ana.reshape(-1)[idx]
        worst = max(worst, rel_error(ana, num))
    return worst


def _u(rng, shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape))


def _away_from_zero(rng, shape, margin=0.05) -> Tensor:
    x = rng.uniform(-2.0, 2.0, shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)
    return Tensor(x)


def op_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, list[Tensor]]]]:
    """Named factories returning ``(fn, inputs)`` for every differentiable op."""

    def bn_train(rng):
        rm, rv = np.zeros(3), np.ones(3)
        return (lambda x, g, b: T.batch_norm(x, g, b, rm.copy(), rv.copy(), True),
                [_u(rng, (2, 3, 2, 3)), _u(rng, (3,)), _u(rng, (3,))])

    def bn_eval(rng):
        rm, rv = rng.uniform(-1, 1, 3), rng.uniform(0.5, 2, 3)
        return (lambda x, g, b: T.batch_norm(x, g, b, rm, rv, False),
                [_u(rng, (2, 3, 2, 3)), _u(rng, (3,)), _u(rng, (3,))])

    return {
        "add": lambda r: (lambda a, b: a + b, [_u(r, (3, 4)), _u(r, (4,))]),
        "sub": lambda r: (lambda a, b: a - b, [_u(r, (3, 1)), _u(r, (3, 4))]),
        "mul": lambda r: (lambda a, b: a * b, [_u(r, (2, 3, 4)), _u(r, (3, 1))]),
        "div": lambda r: (lambda a, b: a / b, [_u(r, (3, 4)), _u(r, (3, 4), 0.5, 2.0)]),
        "pow": lambda r: (lambda a: a**3, [_u(r, (3, 4))]),
        "exp": lambda r: (T.exp, [_u(r, (3, 4))]),
        "log": lambda r: (T.log, [_u(r, (3, 4), 0.5, 2.0)]),
        "relu": lambda r: (T.relu, [_away_from_zero(r, (3, 4))]),
        "gelu": lambda r: (T.gelu, [_u(r, (3, 4))]),
        "sum": lambda r: (lambda a: a.sum(axis=1, keepdims=True), [_u(r, (3, 4, 2))]),
        "mean": lambda r: (lambda a: a.mean(axis=(0, 2)), [_u(r, (3, 4, 2))]),
        "reshape": lambda r: (lambda a: a.reshape(4, 6), [_u(r, (2, 3, 4))]),
        "transpose": lambda r: (lambda a: a.transpose(2, 0, 1), [_u(r, (2, 3, 4))]),
        "getitem": lambda r: (lambda a: a[:, 1::2], [_u(r, (3, 6))]),
        "gather": lambda r: (lambda a: a[np.array([0, 2, 2, 1])], [_u(r, (3, 4))]),
        "concat": lambda r: (lambda a, b: T.concat([a, b], -1), [_u(r, (2, 3)), _u(r, (2, 2))]),
        "roll": lambda r: (lambda a: T.roll(a, (-1, 2), (0, 1)), [_u(r, (3, 4))]),
        "broadcast": lambda r: (lambda a: T.broadcast_to(a, (2, 3, 4)), [_u(r, (3, 1))]),
        "matmul": lambda r: (T.matmul, [_u(r, (3, 4)), _u(r, (4, 5))]),
        "matmul_batched": lambda r: (T.matmul, [_u(r, (2, 3, 4)), _u(r, (2, 4, 2))]),
        "matmul_broadcast": lambda r: (T.matmul, [_u(r, (2, 1, 3, 4)), _u(r, (3, 4, 2))]),
        "softmax": lambda r: (lambda a: T.softmax(a, -1), [_u(r, (3, 5))]),
        "log_softmax": lambda r: (lambda a: T.log_softmax(a, 1), [_u(r, (2, 3, 4))]),
        "layer_norm": lambda r: (lambda x, g, b: T.layer_norm(x, g, b, 1e-5), [_u(r, (2, 3, 5)), _u(r, (5,)), _u(r, (5,))]),
        "batch_norm_train": bn_train,
        "batch_norm_eval": bn_eval,
        "conv2d": lambda r: (lambda x, k: T.conv2d(x, k, 1, 1), [_u(r, (2, 2, 5, 5)), _u(r, (3, 2, 3, 3))]),
        "conv2d_stride2": lambda r: (lambda x, k: T.conv2d(x, k, 2, 0), [_u(r, (1, 2, 6, 5)), _u(r, (2, 2, 3, 2))]),
        "conv2d_1x1": lambda r: (lambda x, k: T.conv2d(x, k, 1, 0), [_u(r, (2, 3, 3, 3)), _u(r, (2, 3, 1, 1))]),
    }


def _layer_inputs(module, x: Tensor, n_params: int, rng) -> list[Tensor]:
    params = module.parameters()
    pick = rng.choice(len(params), min(n_params, len(params)), replace=False)
    return [x, *[params[i] for i in sorted(pick)]]


def layer_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, list[Tensor]]]]:
    """Composite layers: gradients w.r.t. the input and a sample of parameters."""

    def attn_shifted(rng):
        attn = swin.WindowAttention(4, 2, 4, rng, rel_pos_bias=True)
        _randomize(attn, rng)
        x = _u(rng, (1, 8, 8, 4))
        return (lambda x, *_: swin.swmsa(x, attn, 4, 2)), _layer_inputs(attn, x, 4, rng)

    def block(rng):
        blk = swin.SwinBlock(8, 2, 4, rng, shifted=True)
        _randomize(blk, rng)
        x = _u(rng, (1, 8, 8, 8))
        return (lambda x, *_: blk(x)), _layer_inputs(blk, x, 4, rng)

    def double(rng):
        blk = swin.DoubleSwinBlock(8, 2, 4, rng)
        _randomize(blk, rng)
        x = _u(rng, (1, 8, 8, 8))
        return (lambda x, *_: blk(x)), _layer_inputs(blk, x, 6, rng)

    def merge_expand(rng):
        m, e = swin.PatchMerging(4, rng), swin.PatchExpand(8, rng)
        _randomize(m, rng)
        _randomize(e, rng)
        x = _u(rng, (1, 4, 4, 4))
        return (lambda x, a, b: swin.patch_expand(swin.patch_merge(x, m), e)), [x, m.reduction.weight, e.expand.weight]

    def embed_final(rng):
        pe, fe = swin.PatchEmbed(4, rng), swin.FinalExpand4(4, rng)
        _randomize(pe, rng)
        _randomize(fe, rng)
        x = _u(rng, (1, 3, 8, 8))
        return (lambda x, a, b: swin.final_expand4(pe(x), fe)), [x, pe.proj.weight, fe.expand.weight]

    def bottleneck(rng):
        bn = CNNBottleneck(8, rng, units=2)
        _randomize(bn, rng, conv_scale=0.5)
        x = _u(rng, (2, 8, 3, 3))
        return (lambda x, *_: bn(x)), _layer_inputs(bn, x, 6, rng)

    def fuse(rng):
        node = FuseNode(4, 2, rng)
        _randomize(node, rng, conv_scale=0.5)
        a, b, c = _u(rng, (2, 4, 4, 4)), _u(rng, (2, 4, 4, 4)), _u(rng, (2, 2, 2, 8))
        return (lambda a, b, c, *_: node([a, b], c)), [a, b, c, node.conv.weight, node.up.expand.weight]

    def loss(rng):
        from .trainer import seg_loss

        mask = rng.random((2, 4, 4)) < 0.4
        return (lambda z: seg_loss(z, mask).reshape(1)), [_u(rng, (2, 2, 4, 4))]

    return {
        "swmsa": attn_shifted,
        "swin_block": block,
        "double_swin_block": double,
        "patch_merge_expand": merge_expand,
        "patch_embed_final_expand4": embed_final,
        "cnn_bottleneck": bottleneck,
        "fuse_node": fuse,
        "seg_loss": loss,
    }


def _randomize(module, rng, scale: float = 0.5, conv_scale: float = 0.5) -> None:
    """Replace the small default init so the check exercises nonlinear regimes."""
    for name, p in module.named_parameters():
        if p.ndim == 4:
            p.data = rng.normal(0.0, conv_scale / np.sqrt(p.shape[1] * p.shape[2] * p.shape[3]), p.shape)
        elif name.endswith("weight") and p.ndim == 1:
            p.data = rng.uniform(0.5, 1.5, p.shape)
        else:
            p.data = rng.normal(0.0, scale / np.sqrt(p.shape[0]) if p.ndim == 2 else scale, p.shape)


def check_ops(seeds=range(100), tol: float = 1e-4, names=None) -> list[CheckResult]:
    results = []
    for name, factory in op_cases().items():
        if names is not None and name not in names:
            continue
        for seed in seeds:
            rng = np.random.default_rng(seed)
            fn, inputs = factory(rng)
            results.append(CheckResult(name, seed, check_function(fn, inputs, rng), tol))
    return results


def check_layers(seeds=range(20), tol: float = 1e-4, names=None, max_coords: int = 64) -> list[CheckResult]:
    results = []
    for name, factory in layer_cases().items():
        if names is not None and name not in names:
            continue
        for seed in seeds:
            rng = np.random.default_rng(1000 + seed)
            fn, inputs = factory(rng)
            results.append(CheckResult(name, seed, check_function(fn, inputs, rng, max_coords=max_coords), tol))
    return results


MICRO_CONFIG = ModelConfig(img_size=32, base_dim=8, window=4, heads=(2, 2, 4, 4))


class _ReluGates:
    """Records ReLU gates on one forward pass and replays them on later ones.

    The analytic gradient belongs to the linear piece the base point sits
    on. BatchNorm centres every channel ahead of each ReLU, so a random
    perturbation almost always flips a few gates, and central differences
    then straddle a kink. Replaying the gates keeps the numeric side on the
    same piece.
    """

    def __init__(self):
        self.masks: list[np.ndarray] = []
        self.replaying = False
        self.calls = 0

    def relu(self, x: Tensor) -> Tensor:
        if not self.replaying:
            self.masks.append(x.data > 0)
            return _relu(x)
        mask = self.masks[self.calls]
        self.calls += 1
        return x * Tensor(mask.astype(x.dtype))

    def replay(self) -> None:
        self.replaying, self.calls = True, 0


_relu = T.relu


@contextlib.contextmanager
def _patched_relu(gates: _ReluGates):
    T.relu = gates.relu
    try:
        yield
    finally:
        T.relu = _relu


def check_model(seeds=range(20), tol: float = 1e-3, cfg: ModelConfig = MICRO_CONFIG, n_coords: int = 24,
                h: float = 1e-7, batch: int = 4) -> list[CheckResult]:
    """End-to-end check of loss(model(x)) in train mode on a micro config.

    Per seed: a directional derivative along a random direction over every
    parameter and the input, plus ``n_coords`` single coordinates drawn
    from randomly chosen parameter tensors. ReLU gates are frozen at the
    base point while differencing (see ``_ReluGates``). The micro
    bottleneck is 1x1, so its BatchNorm sees one value per sample; a batch
    of two bends sharply enough to defeat any practical step, hence four.
    """
    results = []
    for seed in seeds:
        gates = _ReluGates()
        with _patched_relu(gates):
            results.append(_check_model_seed(seed, cfg, tol, n_coords, h, batch, gates))
    return results


def _check_model_seed(seed, cfg, tol, n_coords, h, batch, gates) -> CheckResult:
    from .trainer import seg_loss

    rng = np.random.default_rng(5000 + seed)
    model = Model(ModelConfig(**{**cfg.to_dict(), "seed": seed}))
    _randomize(model, rng, scale=0.5, conv_scale=0.5)
    x = Tensor(rng.uniform(0.0, 1.0, (batch, 3, cfg.img_size, cfg.img_size)), requires_grad=True)
    mask = rng.random((batch, cfg.img_size, cfg.img_size)) < 0.3
    leaves = [x, *model.parameters()]

    def loss():
        gates.calls = 0
        return seg_loss(model(x, "train"), mask)

    model.zero_grad()
    x.grad = None
    loss().backward()
    gates.replay()
    grads = [t.grad.copy() for t in leaves]

    direction = [rng.standard_normal(t.shape) for t in leaves]
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
    base = [t.data.copy() for t in leaves]
    values = []
    with T.no_grad():
        for sign in (1.0, -1.0):
            for t, b, d in zip(leaves, base, direction):
                t.data = b + sign * h * d
            values.append(loss().item())
    for t, b in zip(leaves, base):
        t.data = b
    numeric = (values[0] - values[1]) / (2 * h)
    err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABS_FLOOR)

    coord_ana, coord_num = [], []
    for k in rng.choice(len(leaves), n_coords, replace=False):
        t = leaves[k]
        i = int(rng.integers(t.size))
        num = finite_diff_grad(lambda _t: loss(), t, h, [i]).reshape(-1)[i]
        coord_ana.append(grads[k].reshape(-1)[i])
        coord_num.append(num)
    coord_err = rel_error(np.array(coord_ana), np.array(coord_num))
    return CheckResult("model", seed, max(err, coord_err), tol)


def run_suite(level: str = "full", seeds: int | None = None) -> list[CheckResult]:
    """``ops``: primitive ops; ``layers``: ops plus composite layers; ``full``: plus end-to-end."""
    if level not in ("ops", "layers", "full"):
        raise ValueError(f"unknown gradcheck level {level!r}")
    results = check_ops(range(seeds or 100))
    if level in ("layers", "full"):
        results += check_layers(range(seeds or 20))
    if level == "full":
        results += check_model(range(seeds or 20))
    return results
