"""Fast oracle and gradient self-checks behind the `check` subcommand.

Each check re-derives its expectation independently (naive loops, closed
forms, finite differences) and returns pass/fail with a detail string,
so a broken build fails loudly without the full test suite.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import completion as cm
from . import ssm
from .fusion import trilinear_weights
from .optim import adam_init, adam_step
from .serialization import chunkify_array, hilbert_build, unchunkify_array
from .volumes import GridSpec

__all__ = ["run_self_checks"]


def _check_hilbert():
    for edge in (2, 4, 8, 16):
        order = hilbert_build(edge)
        if len(np.unique(order.forward_flat)) != edge**3:
            return False, f"edge {edge}: not a bijection"
        steps = np.abs(np.diff(order.forward, axis=0)).sum(axis=1)
        if not np.all(steps == 1):
            return False, f"edge {edge}: non-unit step"
        if tuple(order.forward[0]) != (0, 0, 0):
            return False, f"edge {edge}: wrong entry cell"
    return True, "edges 2..16 bijective, unit steps"


def _check_zoh():
    a_bar, b_bar = ssm.discretize(-1.0, float(np.log(2.0)), 1.0)
    err = max(abs(a_bar - 0.5), abs(b_bar - 0.5))
    return err < 1e-12, f"|err|={err:.2e}"


def _check_scan():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(3):
        p = ssm.ssm_init(4, 5, rng)
        seq = rng.normal(size=(48, 4))
        got = ssm.scan(p, seq)
        h = np.zeros((4, 5))
        a = -np.exp(p.a_log.data)
        ref = np.zeros_like(seq)
        for k in range(48):
            x = seq[k]
            d = np.logaddexp(0.0, p.delta_w.data @ x + p.delta_b.data)
            bk = p.b_w.data @ x + p.b_b.data
            ck = p.c_w.data @ x + p.c_b.data
            for c in range(4):
                for n in range(5):
                    abar, bbar = ssm.discretize(a[c, n], d[c], bk[n])
                    h[c, n] = abar * h[c, n] + bbar * x[c]
                ref[k, c] = ck @ h[c] + p.skip.data[c] * x[c]
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst < 1e-6, f"max|scan-naive|={worst:.2e}"


def _check_trilinear():
    rng = np.random.default_rng(5)
    spec = GridSpec(16)
    worst = 0.0
    for p in rng.uniform(0.0, 15.0, size=(2000, 3)):
        worst = max(worst, abs(sum(w for _, w in trilinear_weights(p, spec)) - 1.0))
    return worst < 1e-6, f"max|sum-1|={worst:.2e}"


def _check_conv_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    y = ad.conv3(ad.constant(x), ad.constant(w), stride=1, pad=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    ref = np.zeros((3, 5, 5, 5))
    for o in range(3):
        for z in range(5):
            for yy in range(5):
                for xx in range(5):
                    ref[o, z, yy, xx] = (xp[:, z : z + 3, yy : yy + 3, xx : xx + 3] * w[o]).sum()
    err = float(np.abs(y - ref).max())
    return err < 1e-12, f"max err {err:.2e}"


def _check_gradients():
    rng = np.random.default_rng(9)
    worst = 0.0

    x = ad.parameter(rng.normal(size=(2, 4, 4, 4)))
    w = ad.parameter(rng.normal(size=(3, 2, 3, 3, 3)) * 0.4)
    worst = max(worst, ad.grad_check(
        lambda ps: ad.reduce_mean(ad.mul(ad.tanh(ad.conv3(ps[0], ps[1], stride=1, pad=1)),
                                         ad.softplus(ad.conv3(ps[0], ps[1], stride=1, pad=1)))),
        [x, w]))

    zs = ad.parameter(rng.normal(size=(3, 4, 4, 4)))
    ms = ad.parameter(rng.uniform(0.2, 0.8, size=(1, 4, 4, 4)))
    z_hat = rng.normal(size=(3, 4, 4, 4))
    m_hat = (rng.random((4, 4, 4)) > 0.5).astype(np.float64)
    lw = cm.LossWeights()
    worst = max(worst, ad.grad_check(
        lambda ps: cm.distill_loss_node(ps[0], z_hat, ps[1], m_hat, lw), [zs, ms]))

    pred = ad.parameter(np.clip(rng.normal(size=(4, 4, 4)), -2.5, 2.5))
    gt = np.clip(rng.normal(size=(4, 4, 4)), -3.0, 3.0)
    worst = max(worst, ad.grad_check(lambda ps: cm.tsdf_loss_node(ps[0], gt, lw), [pred]))
    return worst < 1e-4, f"max rel err {worst:.2e}"


def _check_roundtrips():
    rng = np.random.default_rng(1)
    vals = rng.normal(size=(3, 4, 4, 4)).astype(np.float32)
    order = hilbert_build(4)
    seq = vals.reshape(3, -1)[:, order.forward_flat]
    back = np.empty_like(vals.reshape(3, -1))
    back[:, order.forward_flat] = seq
    ok = np.array_equal(back.reshape(vals.shape), vals)
    ck = chunkify_array(vals, 2)
    ok = ok and np.array_equal(unchunkify_array(ck, 2, 3), vals)
    return ok, "hilbert + chunk round trips bitwise"


def _check_adam():
    p = [np.array([1.0, -2.0])]
    g = [np.array([0.5, -0.5])]
    state = adam_init(p)
    out = adam_step(p, g, state, lr=0.1)
    m_hat = 0.1 * np.array([0.5, -0.5]) / 0.1
    v_hat = 0.001 * np.array([0.25, 0.25]) / 0.001
    ref = p[0] - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    err = float(np.abs(out[0] - ref).max())
    return err < 1e-12, f"first-step err {err:.2e}"


CHECKS = [
    ("hilbert order", _check_hilbert),
    ("zoh discretization", _check_zoh),
    ("scan vs naive recurrence", _check_scan),
    ("trilinear partition of unity", _check_trilinear),
    ("conv3 vs naive loops", _check_conv_oracle),
    ("gradient finite differences", _check_gradients),
    ("serialization round trips", _check_roundtrips),
    ("adam first step", _check_adam),
]


def run_self_checks():
    """Run every check; returns a list of (name, ok, detail)."""
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
