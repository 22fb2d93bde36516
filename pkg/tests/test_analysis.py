import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbvit import analysis as an
from cbvit.model import AttentionRecord, ModelConfig, ViT


def random_rows(rng, count, n):
    return rng.dirichlet(np.ones(n), size=count)


# -- entropy --------------------------------------------------------------------


def test_entropy_examples():
    assert an.attention_entropy(np.full(197, 1 / 197)) == pytest.approx(5.2832, abs=1e-4)
    assert an.attention_entropy([0.0, 1.0, 0.0]) == 0.0
    assert an.attention_entropy([0.5, 0.5]) == pytest.approx(0.693147, abs=1e-6)


@pytest.mark.parametrize("bad", [[0.5, 0.6], [1.2, -0.2], [np.nan, 1.0], []])
def test_entropy_rejects_invalid(bad):
    with pytest.raises(an.InvalidDistributionError):
        an.attention_entropy(bad)


@given(st.integers(2, 40), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_entropy_within_bound(n, seed):
    a = np.random.default_rng(seed).dirichlet(np.full(n, 0.5))
    h = an.attention_entropy(a)
    assert 0.0 <= h <= math.log(n)
    assert abs(an.attention_entropy(np.full(n, 1 / n)) - math.log(n)) < 1e-9


def _records(maps):
    return [AttentionRecord(layer=l, head=h, A=A) for (l, h), A in maps.items()]


def test_entropy_profile_uniform_and_identity():
    n = 5
    uni = np.full((2, n, n), 1 / n)
    eye = np.broadcast_to(np.eye(n), (2, n, n))
    recs = _records({(0, 0): uni, (0, 1): uni, (1, 0): eye, (1, 1): eye, (2, 0): uni})
    prof = an.entropy_profile(recs, exclude_last_layers=1)
    assert prof.layers == [0, 1]
    assert prof.per_layer == pytest.approx([math.log(n), 0.0], abs=1e-12)
    spatial = an.entropy_profile(recs, exclude_class_token=True, exclude_last_layers=0)
    assert spatial.per_layer[0] == pytest.approx(math.log(n - 1), abs=1e-12)
    assert spatial.bound == pytest.approx(math.log(n - 1))
    with pytest.raises(ValueError):
        an.entropy_profile([])


def test_entropy_profile_matches_brute_force_on_model():
    cfg = ModelConfig(image_size=8, patch_size=4, depth=2, dim=8, heads=2, init_std=0.5)
    model = ViT(cfg, seed=1, dtype=np.float64)
    x = np.random.default_rng(2).uniform(0, 255, size=(3, 8, 8, 3))
    _, recs = model.forward(x)
    prof = an.entropy_profile(recs, exclude_last_layers=0)
    for layer, got in zip(prof.layers, prof.per_layer):
        vals = []
        for r in recs:
            if r.layer == layer:
                for row in r.A.reshape(-1, r.A.shape[-1]):
                    vals.append(-sum(p * math.log(p) for p in row if p > 0))
        assert got == pytest.approx(sum(vals) / len(vals), abs=1e-12)


# -- Jacobian -------------------------------------------------------------------


def test_jacobian_examples():
    np.testing.assert_array_equal(an.softmax_jacobian([0.0, 1.0, 0.0]), np.zeros((3, 3)))
    np.testing.assert_allclose(an.softmax_jacobian([0.5, 0.5]), [[0.25, -0.25], [-0.25, 0.25]])
    with pytest.raises(an.InvalidDistributionError):
        an.softmax_jacobian([0.3, 0.3])
    with pytest.raises(ValueError):
        an.softmax_jacobian([0.5, 0.5], lam=0.0)


def test_jacobian_matches_finite_difference_of_softmax():
    from cbvit.numerics import softmax_rows

    s = np.random.default_rng(0).normal(size=6)
    lam = 1.7
    a = softmax_rows(s[None], lam)[0]
    h = 1e-6
    fd = np.stack(
        [(softmax_rows((s + h * e)[None], lam)[0] - softmax_rows((s - h * e)[None], lam)[0]) / (2 * h) for e in np.eye(6)],
        axis=1,
    )
    np.testing.assert_allclose(an.softmax_jacobian(a, lam), fd, atol=1e-9)


def test_jacobian_rows_sum_zero_and_psd():
    rng = np.random.default_rng(1)
    for a in random_rows(rng, 50, 9):
        J = an.softmax_jacobian(a, 1.3)
        np.testing.assert_allclose(J.sum(axis=1), 0.0, atol=1e-15)
        np.testing.assert_allclose(J, J.T, atol=0)
        assert np.linalg.eigvalsh(J).min() >= -1e-10


def test_nuclear_norm_examples():
    assert an.nuclear_norm_analytic(np.full(4, 0.25)) == pytest.approx(0.75, abs=1e-15)
    assert an.nuclear_norm_analytic([0, 0, 1.0]) == 0.0
    assert an.nuclear_norm_analytic([0.5, 0.25, 0.25], lam=2.0) == pytest.approx(1.25, abs=1e-15)
    assert an.nuclear_norm_svd([0.5, 0.25, 0.25], lam=2.0) == pytest.approx(1.25, abs=1e-12)


def test_nuclear_norm_matches_svd():
    rng = np.random.default_rng(2)
    for n in range(2, 17):
        for a in random_rows(rng, 100 // 15 + 1, n):
            assert abs(an.nuclear_norm_analytic(a, 0.8) - an.nuclear_norm_svd(a, 0.8)) < 1e-8


def test_nuclear_norm_vectorized():
    rows = random_rows(np.random.default_rng(3), 7, 5).reshape(7, 1, 5)
    out = an.nuclear_norm_analytic(rows)
    assert out.shape == (7, 1)
    np.testing.assert_allclose(out[:, 0], [an.nuclear_norm_analytic(r[0]) for r in rows], atol=0)


# -- maximality -----------------------------------------------------------------


def test_maximality_two_point_calculus():
    # over [t, 1-t] the value is 2 t (1-t): peak 0.5 at t = 1/2
    ts = np.linspace(0, 1, 10001)
    vals = [an.nuclear_norm_analytic([t, 1 - t]) for t in ts]
    assert max(vals) == pytest.approx(0.5, abs=1e-15)
    assert ts[int(np.argmax(vals))] == pytest.approx(0.5)
    rep = an.verify_uniform_maximality(2, trials=1000)
    assert rep.ok and rep.max_found == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(rep.argmax, [0.5, 0.5])


def test_maximality_n10():
    rep = an.verify_uniform_maximality(10, trials=100_000)
    assert rep.ok
    assert rep.max_found <= 0.9 + 1e-12
    assert rep.samples == 100_000 + 10 + 45
    assert rep.uniform_value == pytest.approx(0.9, abs=1e-15)
    assert rep.argmax.max() < 1.0  # never a vertex


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
def test_maximality_sweep(lam):
    for n in (2, 3, 5, 16, 32):
        rep = an.verify_uniform_maximality(n, lam=lam, trials=5_000, seed=n)
        assert rep.ok, (n, lam)
        assert rep.margin >= -1e-12


def test_maximality_argument_errors():
    with pytest.raises(ValueError):
        an.verify_uniform_maximality(1)


# -- relative distance ----------------------------------------------------------


def _with_class(spatial):
    """Embed a spatial map into an (N+1) map with the class token at 0."""
    n = spatial.shape[-1]
    A = np.zeros(spatial.shape[:-2] + (n + 1, n + 1))
    A[..., 1:, 1:] = spatial
    A[..., 0, 0] = 1.0
    return A


def brute_distance(spatial, pos):
    n = len(pos)
    total = 0.0
    for i, j in itertools.permutations(range(n), 2):
        total += spatial[i, j] * sum(abs(pos[i][k] - pos[j][k]) for k in range(2))
    return total / (n * (n - 1))


def test_grid_positions():
    np.testing.assert_array_equal(an.grid_positions(2), [[0, 0], [0, 1], [1, 0], [1, 1]])
    assert an.grid_positions(4).shape == (16, 2)


def test_relative_distance_examples():
    pos = an.grid_positions(2)
    assert an.relative_distance(_with_class(np.eye(4)), pos) == 0.0
    uni = _with_class(np.full((4, 4), 0.25))
    assert an.relative_distance(uni, pos) == pytest.approx(1 / 3, abs=1e-15)
    assert an.relative_distance(uni, 2 * pos) == pytest.approx(2 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        an.relative_distance(uni, an.grid_positions(3))


def test_relative_distance_brute_force_and_head_permutation():
    rng = np.random.default_rng(4)
    pos = an.grid_positions(3)
    maps = random_rows(rng, 2 * 9, 9).reshape(2, 9, 9)
    full = _with_class(maps)
    expected = np.mean([brute_distance(m, pos) for m in maps])
    assert an.relative_distance(full, pos) == pytest.approx(expected, abs=1e-14)
    assert an.relative_distance(full[::-1], pos) == pytest.approx(expected, abs=1e-14)


def test_relative_distance_renormalized_mode():
    pos = an.grid_positions(2)
    uni = _with_class(np.full((4, 4), 0.25))
    # off-diagonal weights become 1/3 each: mean over 12 pairs of (1/3)*dist
    assert an.relative_distance(uni, pos, renormalize=True) == pytest.approx((8 + 8) / 3 / 12, abs=1e-15)


# -- scaling stats --------------------------------------------------------------


def test_scaling_stats_examples():
    const, ramp, sym = an.scaling_stats([np.full(6, -2.5), np.arange(1.0, 11.0), np.array([-3.0, 3.0])])
    assert const.ratio == 1.0 and const.mean == -2.5
    # linear rule: position 0.1 * 9 = 0.9 between 1 and 2, 0.9 * 9 = 8.1 between 9 and 10
    assert ramp.q10 == pytest.approx(1.9) and ramp.q90 == pytest.approx(9.1)
    assert ramp.ratio == pytest.approx(1.9 / 9.1) and ramp.ratio == pytest.approx(0.2088, abs=1e-4)
    assert ramp.mean == 5.5
    assert sym.mean == 0.0 and sym.ratio == 1.0


def test_scaling_stats_zero_and_empty():
    (z,) = an.scaling_stats({3: np.zeros(4)})
    assert z.layer == 3 and z.ratio is None
    with pytest.raises(ValueError):
        an.scaling_stats([np.array([])])


def test_write_layer_csv(tmp_path):
    path = tmp_path / "layers.csv"
    an.write_layer_csv(path, [{"layer": 0, "mean_entropy": 1.5, "lambda_ratio": "n/a"}], extra_columns=["model_tag"])
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(an.LAYER_COLUMNS) + ",model_tag"
    assert lines[1] == "0,1.5,,,n/a,,"
