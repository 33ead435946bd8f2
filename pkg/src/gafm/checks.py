"""Seeded finite-difference checks over ops, blocks and the tiny network.

Scopes nest: ``ops`` is a subset of ``blocks`` which is a subset of ``model``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .blocks import GFFM, AuxBranch, Bottleneck, SEBlock
from .gradcheck import GradCheckReport, gradient_check
from .model import GafmConfig, GafmNetwork, Vnn
from .nn import Module, init_params
from .tensor import Tensor, precision

__all__ = ["Check", "SCOPES", "checks_for", "run_checks"]

SCOPES = ("ops", "blocks", "model")


@dataclass
class Check:
    name: str
    scope: str
    tolerance: float
    run: Callable[[float], GradCheckReport]


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _off_zero(a: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    """Push values away from 0 so kinks stay outside the finite-difference step."""
    return np.where(np.abs(a) < margin, np.copysign(margin, a) + a, a)


def _weighted(out: Tensor, seed: int) -> Tensor:
    # a random projection avoids the cancellations a plain sum hits after BN
    w = Tensor(_rng(seed).standard_normal(out.shape))
    return ops.sum(ops.mul(out, w))


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def _op_checks() -> list[Check]:
    r = _rng(1)
    cases: list[tuple[str, Callable[[], tuple]]] = []

    def conv_case(stride, padding):
        def make():
            x, w, b = _t(r.standard_normal((2, 3, 6, 6))), _t(r.standard_normal((4, 3, 3, 3))), _t(r.standard_normal(4))
            return lambda x, w, b: _weighted(ops.conv2d(x, w, b, stride, padding, truncate=True), 11), [x, w, b]
        return make

    cases.append(("conv2d", conv_case(1, 0)))
    cases.append(("conv2d_stride2_pad1", conv_case(2, 1)))

    def bn_case(mode):
        def make():
            x = _t(r.standard_normal((3, 2, 3, 3)) * 2 + 1)
            g, b = _t(r.uniform(0.5, 1.5, 2)), _t(r.standard_normal(2))
            rm, rv = r.standard_normal(2), r.uniform(0.5, 2.0, 2)

            def f(x, g, b):
                return _weighted(ops.batchnorm2d(x, g, b, rm.copy(), rv.copy(), mode=mode), 12)
            return f, [x, g, b]
        return make

    cases.append(("batchnorm2d_train", bn_case("train")))
    cases.append(("batchnorm2d_eval", bn_case("eval")))
    cases.append(("relu", lambda: (lambda x: _weighted(ops.relu(x), 13), [_t(_off_zero(r.standard_normal((2, 3, 4))))])))
    cases.append(("sigmoid", lambda: (lambda x: _weighted(ops.sigmoid(x), 14), [_t(r.standard_normal((3, 5)) * 3)])))
    cases.append(("global_avg_pool", lambda: (lambda x: _weighted(ops.global_avg_pool(x), 15), [_t(r.standard_normal((2, 3, 4, 5)))])))
    cases.append(("max_pool2d", lambda: (lambda x: _weighted(ops.max_pool2d(x, 3, 2, 1), 16), [_t(r.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.1)])))
    cases.append(("fully_connected", lambda: (
        lambda x, w, b: _weighted(ops.fully_connected(x, w, b), 17),
        [_t(r.standard_normal((4, 5))), _t(r.standard_normal((3, 5))), _t(r.standard_normal(3))])))
    cases.append(("concat_channels", lambda: (
        lambda a, b: _weighted(ops.concat_channels(a, b), 18),
        [_t(r.standard_normal((2, 2, 3, 3))), _t(r.standard_normal((2, 3, 3, 3)))])))
    cases.append(("split_channels", lambda: (
        lambda x: ops.add(_weighted(ops.split_channels(x, [2, 3])[0], 19), _weighted(ops.split_channels(x, [2, 3])[1], 20)),
        [_t(r.standard_normal((2, 5, 2, 2)))])))
    cases.append(("mul_broadcast", lambda: (
        lambda a, b: _weighted(ops.mul(a, b), 21),
        [_t(r.standard_normal((2, 3, 4, 4))), _t(r.standard_normal((2, 3, 1, 1)))])))
    cases.append(("add_broadcast", lambda: (
        lambda a, b: _weighted(ops.add(a, b), 22),
        [_t(r.standard_normal((2, 3, 4, 4))), _t(r.standard_normal((1, 3, 1, 4)))])))
    cases.append(("sub", lambda: (
        lambda a, b: _weighted(ops.sub(a, b), 23),
        [_t(r.standard_normal((3, 4))), _t(r.standard_normal((3, 4)))])))
    cases.append(("scale_one_minus", lambda: (
        lambda a: _weighted(ops.one_minus(ops.scale(a, -2.5)), 24), [_t(r.standard_normal((3, 4)))])))
    cases.append(("reshape_mean", lambda: (
        lambda a: ops.mean(ops.mul(ops.reshape(a, (6, 2)), ops.reshape(a, (6, 2)))), [_t(r.standard_normal((3, 4)))])))
    cases.append(("mse_loss", lambda: (
        lambda p: ops.mse_loss(p, _t(np.linspace(-1, 1, 6).reshape(6, 1))), [_t(r.standard_normal((6, 1)))])))
    cases.append(("mae_loss", lambda: (
        lambda p: ops.mae_loss(p, _t(np.zeros((6, 1)))), [_t(_off_zero(r.standard_normal((6, 1))))])))

    out = []
    for name, make in cases:
        def run(tol, make=make):
            f, pts = make()
            return gradient_check(f, pts, tol)
        out.append(Check(name, "ops", 1e-4, run))
    return out


def _module_check(name: str, scope: str, tol: float, build: Callable[[], tuple]) -> Check:
    """Check gradients w.r.t. the input(s) and every parameter of a module."""

    def run(tol=tol):
        module, inputs, f = build()
        params = module.parameters()
        n_in = len(inputs)

        def g(*args):
            return f(*args[:n_in])
        return gradient_check(g, inputs + params, tol)

    return Check(name, scope, tol, run)


def _double(m: Module, seed: int) -> Module:
    init_params(m, seed)
    m.to(np.float64)
    return m


def _block_checks() -> list[Check]:
    r = _rng(2)

    def se():
        m = _double(SEBlock(4, 2), 30)
        return m, [_t(r.standard_normal((2, 4, 3, 3)))], lambda x: _weighted(m(x), 31)

    def bottleneck(in_ch, out_ch, stride):
        def build():
            m = _double(Bottleneck(in_ch, out_ch, stride), 32)
            return m, [_t(r.standard_normal((2, in_ch, 5, 5)))], lambda x: _weighted(m(x, True), 33)
        return build

    def aux():
        m = _double(AuxBranch(3, 4, 2), 34)
        return m, [_t(r.standard_normal((2, 3, 6, 6)))], lambda x: _weighted(m(x, True), 35)

    def gffm():
        m = _double(GFFM(3), 36)
        a, b = _t(r.standard_normal((2, 3, 3, 3))), _t(r.standard_normal((2, 3, 3, 3)))
        return m, [a, b], lambda a, b: _weighted(m(a, b), 37)

    return [
        _module_check("se_block", "blocks", 1e-4, se),
        _module_check("bottleneck_identity", "blocks", 1e-4, bottleneck(4, 4, 1)),
        _module_check("bottleneck_projection", "blocks", 1e-4, bottleneck(4, 8, 2)),
        _module_check("aux_branch", "blocks", 1e-4, aux),
        _module_check("gffm", "blocks", 1e-4, gffm),
    ]


def _model_checks() -> list[Check]:
    r = _rng(3)

    def tiny():
        with precision("double"):
            net = GafmNetwork(GafmConfig.tiny(), seed=40)
        x = _t(r.standard_normal((2, 3, 16, 16)))
        return net, [x], lambda x: ops.mean(net(x, True))

    def vnn():
        with precision("double"):
            v = Vnn(5, (6, 4), seed=41)
        # keep hidden pre-activations clear of the ReLU kink
        for layer in (v.fc1, v.fc2):
            layer.bias.data[...] = 0.5
        return v, [_t(r.standard_normal((4, 5)))], lambda f: _weighted(v(f), 42)

    return [
        _module_check("tiny_network", "model", 1e-3, tiny),
        _module_check("vnn", "model", 1e-4, vnn),
    ]


def checks_for(scope: str) -> list[Check]:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    out = _op_checks()
    if scope in ("blocks", "model"):
        out += _block_checks()
    if scope == "model":
        out += _model_checks()
    return out


def run_checks(scope: str) -> list[tuple[Check, GradCheckReport]]:
    return [(c, c.run(c.tolerance)) for c in checks_for(scope)]
