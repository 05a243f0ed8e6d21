import numpy as np
import pytest

from promptseg3d.errors import ShapeError, ValidationError
from promptseg3d.metrics import (boundary, boundary_bruteforce, dice, dice_bruteforce, evaluate, nsd,
                                 nsd_bruteforce)


def _cube(dims=(8, 8, 8), lo=(2, 2, 2), size=4):
    m = np.zeros(dims, dtype=np.int64)
    m[tuple(slice(a, a + size) for a in lo)] = 1
    return m


def test_dice_examples():
    m = _cube()
    assert dice(m, m) == 1.0
    assert dice(_cube(lo=(0, 0, 0), size=2), _cube(lo=(5, 5, 5), size=2)) == 0.0
    p = np.zeros((2, 2, 2), dtype=int)
    t = np.zeros((2, 2, 2), dtype=int)
    p[0] = 1
    t[:, 0] = 1
    assert (p.sum(), t.sum(), (p & t).sum()) == (4, 4, 2)
    assert dice(p, t) == 0.5 == dice_bruteforce(p, t)
    assert dice(np.zeros((3, 3, 3)), np.zeros((3, 3, 3))) == 1.0
    with pytest.raises(ShapeError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_boundary_of_cube():
    m = _cube()
    b = boundary(m)
    assert b.sum() == 64 - 8
    assert sorted(zip(*np.nonzero(b))) == sorted(boundary_bruteforce(m))
    full = np.ones((3, 3, 3))
    assert boundary(full).sum() == 26


def test_nsd_examples():
    m = _cube()
    assert nsd(m, m) == 1.0
    shifted = _cube(lo=(3, 2, 2))
    assert nsd(m, shifted, tolerance_mm=1.0) == 1.0
    half = nsd(m, shifted, tolerance_mm=0.5)
    assert half == pytest.approx(nsd_bruteforce(m, shifted, tolerance_mm=0.5), abs=1e-9)
    assert half < 1.0
    assert nsd(m, np.zeros_like(m)) == 0.0
    assert nsd(np.zeros_like(m), np.zeros_like(m)) == 1.0
    with pytest.raises(ValidationError):
        nsd(m, m, tolerance_mm=-0.1)


def _random_case(rng):
    dims = tuple(int(d) for d in rng.integers(2, 17, size=3))
    kind = rng.integers(3)
    if kind == 0:
        p = rng.random(dims) < rng.uniform(0.05, 0.6)
        t = rng.random(dims) < rng.uniform(0.05, 0.6)
    else:
        grid = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), -1)
        c1, c2 = rng.uniform(0, dims), rng.uniform(0, dims)
        r1, r2 = rng.uniform(1, 6, 2)
        p = ((grid - c1) ** 2).sum(-1) <= r1 ** 2
        t = ((grid - c2) ** 2).sum(-1) <= r2 ** 2
    spacing = tuple(rng.choice([0.5, 1.0, 1.5, 2.0], size=3)) if kind == 2 else (1.0, 1.0, 1.0)
    return p.astype(np.int64), t.astype(np.int64), spacing


def test_fast_metrics_match_bruteforce_on_random_suite():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        p, t, spacing = _random_case(rng)
        tau = float(rng.choice([0.0, 0.5, 1.0, 1.5, 2.0, 3.0]))
        assert abs(dice(p, t) - dice_bruteforce(p, t)) <= 1e-9
        assert abs(nsd(p, t, 1, tau, spacing) - nsd_bruteforce(p, t, 1, tau, spacing)) <= 1e-9


def test_symmetry_and_monotonicity():
    rng = np.random.default_rng(7)
    for _ in range(20):
        p, t, spacing = _random_case(rng)
        assert dice(p, t) == dice(t, p)
        assert nsd(p, t, 1, 1.0, spacing) == nsd(t, p, 1, 1.0, spacing)
        values = [nsd(p, t, 1, tau, spacing) for tau in (0.0, 0.5, 1.0, 2.0, 4.0)]
        assert all(a <= b for a, b in zip(values, values[1:]))
        assert all(0.0 <= v <= 1.0 for v in values)


def test_evaluate_report():
    target = np.zeros((6, 6, 6), dtype=np.int64)
    target[1:3, 1:3, 1:3] = 1
    target[3:5, 3:5, 3:5] = 2
    rep = evaluate(target, target, num_classes=3)
    assert rep.dice == {1: 1.0, 2: 1.0} and rep.nsd == {1: 1.0, 2: 1.0}
    assert rep.mean_dice == 1.0 and rep.tolerance_mm == 1.0
    pred = target.copy()
    pred[pred == 2] = 0
    rep = evaluate(pred, target, num_classes=3)
    assert rep.dice[2] == 0.0 and rep.mean_dice == 0.5
