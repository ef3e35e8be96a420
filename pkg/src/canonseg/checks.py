"""Invariant self-check battery behind the `selfcheck` CLI subcommand.

Each suite re-verifies one architectural guarantee on fresh random inputs and
raises AssertionError on violation; the CLI prints one line per suite.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import data as D
from . import groups as G
from . import losses as L
from . import tensor as T
from .canonicalizer import Canonicalizer


def check_group_axioms(seed: int) -> None:
    els = G.elements(4)
    e = G.identity(4)
    for a in els:
        assert G.compose(a, G.inverse(a)) == e
        assert G.compose(e, a) == a
        for b in els:
            assert 0 <= G.compose(a, b).index < 8
            for c in els:
                assert G.compose(G.compose(a, b), c) == G.compose(a, G.compose(b, c))


def check_action_homomorphism(seed: int) -> None:
    rng = np.random.default_rng(seed)
    action = G.GroupAction(4)
    x = rng.normal(size=(10, 10)).astype(np.float32)
    for a in G.elements(4):
        assert np.array_equal(action.act(a, action.act(G.inverse(a), x)), x)
        for b in G.elements(4):
            lhs = action.act(a, action.act(b, x))
            assert np.array_equal(lhs, action.act(G.compose(a, b), x))


def check_conv_against_naive(seed: int) -> None:
    rng = np.random.default_rng(seed)
    x = rng.random((1, 2, 6, 6)).astype(np.float32)
    w = rng.random((3, 2, 3, 3)).astype(np.float32)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), stride=1, pad=1).data
    ref = np.zeros_like(got, dtype=np.float64)
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for yy in range(6):
            for xx in range(6):
                acc = 0.0
                for c in range(2):
                    for i in range(3):
                        for j in range(3):
                            acc += xp[0, c, yy + i, xx + j] * w[o, c, i, j]
                ref[0, o, yy, xx] = acc
    assert np.abs(got - ref).max() / max(1.0, np.abs(ref).max()) <= 1e-6


def check_gradients(seed: int) -> None:
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        x = T.Tensor(rng.random((4, 4)) + 0.1, requires_grad=True, dtype=np.float64)
        assert T.grad_check(lambda t: T.tmean(T.sigmoid(t * t)), x) <= 1e-4
        target = (rng.random((4, 4)) < 0.5).astype(np.float64)
        y = T.Tensor(rng.random((4, 4)) * 0.8 + 0.1, requires_grad=True, dtype=np.float64)
        assert T.grad_check(lambda t: L.dice_loss(t, target), y) <= 1e-4
        z = T.Tensor(rng.random((4, 4)) * 0.8 + 0.1, requires_grad=True, dtype=np.float64)
        assert T.grad_check(lambda t: L.ce_mask_loss(t, target), z) <= 1e-4


def check_canonicalizer_equivariance(seed: int) -> None:
    rng = np.random.default_rng(seed)
    net = Canonicalizer(group_order=4, layers=3, hidden=3, kernel=5, pool_to=16, seed=seed)
    action = G.GroupAction(4)
    comp = G.compose_table(4)
    inv = G.inverse_table(4)
    for _ in range(5):
        x = rng.random((16, 16)).astype(np.float32)
        base = net.energies(x).data
        for g in G.elements(4):
            got = net.energies(action.act(g, x)).data
            perm = base[comp[inv[g.index]]]
            assert np.abs(got - perm).max() <= 1e-5
        xc0, _ = net.canonicalize_hard(x)
        for g in G.elements(4):
            xcg, _ = net.canonicalize_hard(action.act(g, x))
            assert np.array_equal(xcg, xc0)


def check_fts_round_trip(seed: int) -> None:
    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory() as td:
        for arr in (
            rng.random((3, 5)).astype(np.float32),
            (rng.random((4, 4)) < 0.5).astype(np.uint8),
            rng.integers(-100, 100, (7,)).astype(np.int32),
        ):
            path = Path(td) / "t.fts"
            D.write_fts(path, arr)
            back = D.read_fts(path)
            assert back.tobytes() == arr.tobytes() and back.shape == arr.shape


def check_metric_invariance(seed: int) -> None:
    rng = np.random.default_rng(seed)
    action = G.GroupAction(4)
    a = rng.random((8, 8)) < 0.4
    b = rng.random((8, 8)) < 0.4
    for g in G.elements(4):
        ag = action.act(g, a.astype(np.uint8), mask=True)
        bg = action.act(g, b.astype(np.uint8), mask=True)
        assert L.dice_metric(ag, bg) == L.dice_metric(a, b)
        assert L.nsd_metric(ag, bg, 2) == L.nsd_metric(a, b, 2)


SUITES = [
    ("group-axioms", check_group_axioms),
    ("action-homomorphism", check_action_homomorphism),
    ("conv-vs-naive", check_conv_against_naive),
    ("gradient-checks", check_gradients),
    ("canonicalizer-equivariance", check_canonicalizer_equivariance),
    ("fts-round-trip", check_fts_round_trip),
    ("metric-invariance", check_metric_invariance),
]


def run_selfcheck(seed: int = 0, log=print) -> int:
    """Run every suite; returns the number of failures."""
    failures = 0
    for name, fn in SUITES:
        try:
            fn(seed)
        except Exception as err:  # noqa: BLE001 - report and continue
            failures += 1
            log(f"FAIL {name}: {err}")
        else:
            log(f"ok   {name}")
    return failures
