"""Quick oracle suite behind ``bandbridge selftest``."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from . import metrics as mt
from . import oracles
from .models import ModelSpec, build, esrt_forward, unet_forward
from .raster import bicubic_matrix, cubic_taps


def _t(gen, *shape):
    return ag.Tensor(gen.standard_normal(shape), requires_grad=True)


def check_conv_oracle():
    gen = np.random.default_rng(0)
    x = gen.standard_normal((1, 2, 5, 5))
    w = gen.standard_normal((3, 2, 3, 3))
    b = gen.standard_normal(3)
    ok = True
    for stride, pad in ((1, 0), (1, 1), (2, 1)):
        fast = ag.conv2d(ag.Tensor(x), ag.Tensor(w), ag.Tensor(b), stride=stride, padding=pad).data
        ok &= np.max(np.abs(fast - oracles.conv2d_loop(x, w, b, stride, pad))) < 1e-12
    return ok, "conv2d vs loop"


def check_op_gradients():
    gen = np.random.default_rng(1)
    cases = {
        "conv2d": lambda: (lambda x, w, b: (ag.conv2d(x, w, b, padding=1) * 0.3).sum(), (_t(gen, 1, 2, 6, 6), _t(gen, 3, 2, 3, 3), _t(gen, 3))),
        "gelu": lambda: (lambda x: (ag.gelu(x) * x).sum(), (_t(gen, 2, 3, 4),)),
        "softmax": lambda: (lambda x, y: (ag.softmax(x, -1) * y).sum(), (_t(gen, 2, 5), ag.Tensor(gen.standard_normal((2, 5))))),
        "layer_norm": lambda: (
            lambda x, g, b, y: (ag.layer_norm(x, g, b) * y).sum(),
            (_t(gen, 1, 4, 3, 3), _t(gen, 4), _t(gen, 4), ag.Tensor(gen.standard_normal((1, 4, 3, 3)))),
        ),
        "matmul": lambda: (lambda a, b: (a @ b).sum(), (_t(gen, 2, 3, 4), _t(gen, 2, 4, 2))),
    }
    worst = 0.0
    ok = True
    for _, make in cases.items():
        fn, args = make()
        good, err = oracles.gradcheck(lambda: fn(*args), [a for a in args if a.requires_grad])
        ok &= good
        worst = max(worst, err)
    return ok, f"op gradients, worst rel err {worst:.2e}"


def check_model_gradients():
    gen = np.random.default_rng(2)
    worst = 0.0
    ok = True
    for spec, fwd in (
        (ModelSpec(kind="unet", unet_depth=1, unet_base=2, seed=3), unet_forward),
        (ModelSpec(kind="esrt_lite", esrt_backbone_blocks=1, esrt_transformer_blocks=1, esrt_embed=4, esrt_heads=1, esrt_window=4, esrt_split=2, seed=3), esrt_forward),
    ):
        ps = build(spec, np.float64)
        for t in ps:
            t.data[...] = gen.standard_normal(t.shape) * 0.5
        x = ag.Tensor(gen.random((1, 7, 8, 8)))
        target = ag.Tensor(gen.random((1, 6, 8, 8)) * 5)
        names = [n for n in ps.names() if n.endswith("weight")][:2] + ["head.weight"]
        params = [ps[n] for n in dict.fromkeys(names)]
        good, err = oracles.gradcheck(lambda: ag.l1_loss(fwd(ps, x), target), params, refine=3)
        ok &= good
        worst = max(worst, err)
    return ok, f"model gradients, worst rel err {worst:.2e}"


def check_metrics():
    gen = np.random.default_rng(4)
    worst = 0.0
    for _ in range(3):
        a, b = gen.random((1, 16, 16)), gen.random((1, 16, 16))
        worst = max(worst, abs(mt.ssim(a, b) - oracles.ssim_naive(a, b)), abs(mt.nrmse(a, b) - oracles.nrmse_loop(a, b)))
    const = mt.ssim(np.full((1, 16, 16), 0.6), np.full((1, 16, 16), 0.5))
    ok = worst < 1e-9 and abs(const - 0.6001 / 0.6101) < 1e-6 and abs(mt.ssim(a, a) - 1.0) < 1e-12
    return ok, f"metric oracles, worst abs err {worst:.2e}"


def check_bicubic():
    taps = cubic_taps(0.25)
    exact = np.array_equal(taps, [-0.0703125, 0.8671875, 0.2265625, -0.0234375])
    phases = np.random.default_rng(5).random(1000)
    sums = max(abs(cubic_taps(t).sum() - 1.0) for t in phases)
    rows = np.abs(bicubic_matrix(7, 28).sum(axis=1) - 1.0).max()
    ok = exact and sums < 1e-12 and rows < 1e-12 and math.isclose(oracles.cubic_weight(1.25), taps[0])
    return ok, f"bicubic kernel taps, max sum err {max(sums, rows):.1e}"


CHECKS = (check_conv_oracle, check_op_gradients, check_model_gradients, check_metrics, check_bicubic)


def run_all(verbose: bool = False) -> bool:
    all_ok = True
    for check in CHECKS:
        try:
            ok, detail = check()
        except Exception as exc:  # noqa: BLE001
            ok, detail = False, f"{check.__name__} raised {exc!r}"
        all_ok &= bool(ok)
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {detail}")
    return all_ok
