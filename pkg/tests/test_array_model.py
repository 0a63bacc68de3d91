import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pboost.array_model import (
    ArrayGeometry,
    ArrayModelError,
    EndfireError,
    IllConditionedNoiseError,
    MaternParams,
    NoiseModel,
    Scenario,
    SnapshotBatch,
    build_codebook,
    coherent_covariance,
    fixed_scenario,
    generate_matern_scenario,
    synthesize_snapshots,
    ula_steering,
    uniform_grid,
)
from pboost.subspace import sample_covariance

from _oracles import analytic_covariance, gradient_fd

ULA8 = ArrayGeometry.ula(8, 0.5)
WHITE8 = NoiseModel.white(8)


def test_broadside_is_all_ones():
    np.testing.assert_allclose(ula_steering(ULA8, 0.0), np.ones(8), atol=1e-15)


@pytest.mark.parametrize("theta", [-61.0, -5.0, 12.5, 30.0, 77.0])
def test_adjacent_phase_increment(theta):
    a = ula_steering(ULA8, theta)
    np.testing.assert_allclose(a[1:] / a[:-1], np.exp(1j * np.pi * np.sin(np.deg2rad(theta))), atol=1e-12)
    np.testing.assert_allclose(np.abs(a), 1.0, atol=1e-14)


def test_thirty_degree_phase_step_is_quarter_turn():
    # 2*pi*0.5*sin(30 deg) = pi/2
    a = ula_steering(ULA8, 30.0)
    assert np.angle(a[1] / a[0]) == pytest.approx(np.pi / 2, abs=1e-12)


@pytest.mark.parametrize("theta", [90.0, -90.0, 95.0])
def test_endfire_rejected(theta):
    with pytest.raises(EndfireError):
        ula_steering(ULA8, theta)


def test_geometry_validation():
    with pytest.raises(ArrayModelError):
        ArrayGeometry(np.zeros((1, 3)))
    with pytest.raises(ArrayModelError):
        ArrayGeometry(np.array([[0.0, 0, 0], [np.nan, 0, 0]]))
    pos = ULA8.positions
    assert np.allclose(np.diff(pos[:, 0]), 0.5) and np.allclose(pos[:, 1:], 0.0)


@given(st.floats(min_value=-89.0, max_value=89.0, allow_nan=False))
def test_conjugate_symmetry(theta):
    np.testing.assert_allclose(ula_steering(ULA8, -theta), ula_steering(ULA8, theta).conj(), atol=1e-12)


def test_identity_whitening_is_exact():
    grid = uniform_grid()
    cb = build_codebook(ULA8, WHITE8, grid)
    from pboost.array_model import steering_matrix
    assert np.array_equal(cb.columns, steering_matrix(ULA8, grid))


def test_default_grid():
    grid = uniform_grid()
    assert grid.size == 180 and grid[0] == -89.5 and grid[-1] == 89.5
    cb = build_codebook(ULA8, WHITE8, grid)
    assert cb.size == 180 and cb.size > cb.n_sensors
    assert cb.quantization_step == 1.0
    assert np.all(np.diff(cb.grid) > 0)
    assert np.all(np.isfinite(np.linalg.norm(cb.columns, axis=0)))


def test_adjacent_column_correlation():
    cb = build_codebook(ULA8, WHITE8, uniform_grid())
    q = 100
    b0, b1 = cb.columns[:, q], cb.columns[:, q + 1]
    got = abs(np.vdot(b0, b1)) / (np.linalg.norm(b0) * np.linalg.norm(b1))
    # direct sum of the phase differences
    dphi = np.pi * (np.sin(np.deg2rad(cb.grid[q + 1])) - np.sin(np.deg2rad(cb.grid[q])))
    x = ULA8.positions[:, 0] / 0.5
    ref = abs(np.sum(np.exp(1j * dphi * x))) / 8
    assert got == pytest.approx(ref, rel=1e-12)


def test_gradients_match_finite_differences_all_grid():
    cb = build_codebook(ULA8, WHITE8, uniform_grid())
    fd = gradient_fd(ULA8, cb.grid)
    rel = np.linalg.norm(cb.gradients - fd, axis=0) / np.linalg.norm(cb.gradients, axis=0)
    assert rel.max() < 1e-5


def test_coloured_noise_whitening():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    cov = x @ x.conj().T + 8 * np.eye(8)
    noise = NoiseModel(cov)
    cb = build_codebook(ULA8, noise, uniform_grid())
    w = noise.whitener
    np.testing.assert_allclose(w @ cov @ w, np.eye(8), atol=1e-10)
    from pboost.array_model import steering_matrix
    np.testing.assert_allclose(cb.columns, w @ steering_matrix(ULA8, cb.grid), atol=1e-12)


def test_ill_conditioned_noise():
    cov = np.diag([1.0] * 7 + [1e-13])
    with pytest.raises(IllConditionedNoiseError):
        build_codebook(ULA8, NoiseModel(cov), uniform_grid())


def test_noise_model_validation():
    with pytest.raises(ArrayModelError):
        NoiseModel(np.diag([1.0, -1.0]))
    with pytest.raises(ArrayModelError):
        NoiseModel(np.array([[1.0, 1j], [0.0, 1.0]]))


def test_zero_noise_single_source_rank_one():
    sc = fixed_scenario([10.0], 20.0, 50)
    noise = NoiseModel(np.eye(8) * 1e-30)   # effectively noiseless
    batch = synthesize_snapshots(sc, ULA8, noise, 1)
    w = np.linalg.eigvalsh(sample_covariance(batch))
    assert w[-2] < 1e-12 * w[-1]


def test_coherent_pairs_have_rank_two():
    sc = fixed_scenario([8, 13, 33, 37], 10.0, 100, groups=((0, 1), (2, 3)), rng=3)
    assert sc.rank == 2 and sc.n_sources == 4


def test_large_sample_covariance_matches_analytic():
    sc = fixed_scenario([8, 13, 33, 37], 10.0, 100_000)
    batch = synthesize_snapshots(sc, ULA8, WHITE8, 7)
    ref = analytic_covariance(sc.true_doas, sc.source_covariance, 10.0)
    err = np.linalg.norm(sample_covariance(batch) - ref) / np.linalg.norm(ref)
    assert err < 0.02


def test_snr_calibration():
    sc = fixed_scenario([20.0], 3.0, 100_000)
    batch = synthesize_snapshots(sc, ULA8, WHITE8, 9)
    rxx = sample_covariance(batch)
    # per-sensor signal power = mean diagonal minus unit noise
    measured = 10 * np.log10(np.real(np.trace(rxx)) / 8 - 1.0)
    assert abs(measured - 3.0) < 0.2


def test_seed_determinism():
    sc = fixed_scenario([8, 13], 5.0, 40, groups=((0, 1),), rng=2)
    a = synthesize_snapshots(sc, ULA8, WHITE8, 11).data
    b = synthesize_snapshots(sc, ULA8, WHITE8, 11).data
    c = synthesize_snapshots(sc, ULA8, WHITE8, 12).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_coherent_covariance_structure():
    p = coherent_covariance(4, ((0, 1), (2, 3)), phases=[0.0, 1.0, 2.0, 3.0])
    np.testing.assert_allclose(np.diag(p).real, 1.0)
    assert abs(p[0, 1]) == pytest.approx(1.0) and p[0, 2] == 0
    assert np.angle(p[1, 0]) == pytest.approx(1.0)


def test_scenario_invariants():
    with pytest.raises(ArrayModelError):
        Scenario([1.0, 2.0], np.eye(2), 10.0, 2)  # N < K + 1
    with pytest.raises(ArrayModelError):
        Scenario([1.0], [[1.0]], np.inf, 10)
    with pytest.raises(ArrayModelError):
        Scenario([1.0, 2.0], np.diag([1.0, -1.0]), 0.0, 10)


def test_snapshot_batch_invariants(tmp_path):
    with pytest.raises(ArrayModelError):
        SnapshotBatch(np.full((4, 3), np.nan))
    rng = np.random.default_rng(1)
    x = SnapshotBatch(rng.standard_normal((4, 5)) + 1j * rng.standard_normal((4, 5)))
    path = tmp_path / "x.csv"
    x.to_csv(path, header="test")
    assert np.array_equal(SnapshotBatch.from_csv(path).data, x.data)
    rows = np.loadtxt(path, delimiter=",")
    assert rows.shape == (4, 10)


def test_matern_centres_within_bound():
    rng = np.random.default_rng(5)
    for _ in range(300):
        sc = generate_matern_scenario(rng)
        if sc.n_sources:
            assert np.all(np.abs(sc.true_doas) <= 60.0 + 9.0 + 1e-9)
        for g in sc.coherence_groups:
            d = sc.true_doas[list(g)]
            assert d.max() - d.min() <= 18.0 + 1e-9


def test_matern_zero_intensity_is_empty():
    sc = generate_matern_scenario(0, MaternParams(source_intensity=0.0))
    assert sc.n_sources == 0 and sc.rank == 0


def test_matern_mean_cluster_count():
    # empty clusters (no sources) still count as drawn clusters: count through a
    # huge intra-cluster intensity so every drawn cluster is visible
    params = MaternParams(source_intensity=10.0)
    rng = np.random.default_rng(123)
    counts = [len(generate_matern_scenario(rng, params).coherence_groups) for _ in range(10_000)]
    assert abs(np.mean(counts) - 1.0) < 0.05


def test_matern_clusters_uncorrelated_and_psd():
    rng = np.random.default_rng(8)
    for _ in range(200):
        sc = generate_matern_scenario(rng)
        p = sc.source_covariance
        if sc.n_sources == 0:
            continue
        assert np.linalg.eigvalsh(p).min() > -1e-10
        groups = sc.coherence_groups
        for i, g in enumerate(groups):
            for h in groups[i + 1:]:
                assert np.all(p[np.ix_(g, h)] == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_matern_determinism(seed):
    a = generate_matern_scenario(seed)
    b = generate_matern_scenario(seed)
    assert np.array_equal(a.true_doas, b.true_doas)
    assert np.array_equal(a.source_covariance, b.source_covariance)
