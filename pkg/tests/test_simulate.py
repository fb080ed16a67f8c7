import numpy as np
import pytest

from conftest import small_problem
from jsct.model import gradient, objective
from jsct.projector import Geometry, SystemMatrix, build_system_matrix
from jsct.simulate import MU_WATER, PHANTOMS, make_phantom, pixel_centers, simulate_counts

# modified Shepp-Logan: (a, b, x0, y0, phi_deg, value), scaled to water below
TABLE = (
    (0.69, 0.92, 0.0, 0.0, 0, 1.0),
    (0.6624, 0.874, 0.0, -0.0184, 0, -0.8),
    (0.11, 0.31, 0.22, 0.0, -18, -0.2),
    (0.16, 0.41, -0.22, 0.0, 18, -0.2),
    (0.21, 0.25, 0.0, 0.35, 0, 0.1),
    (0.046, 0.046, 0.0, 0.1, 0, 0.1),
    (0.046, 0.046, 0.0, -0.1, 0, 0.1),
    (0.046, 0.023, -0.08, -0.605, 0, 0.1),
    (0.023, 0.023, 0.0, -0.606, 0, 0.1),
    (0.023, 0.046, 0.06, -0.605, 0, 0.1),
)


def ellipse_sum(x, y):
    total = 0.0
    for a, b, x0, y0, phi, v in TABLE:
        t = np.radians(phi)
        dx, dy = x - x0, y - y0
        u = (np.cos(t) * dx + np.sin(t) * dy) / a
        w = (-np.sin(t) * dx + np.cos(t) * dy) / b
        if u * u + w * w <= 1.0:
            total += v
    return total * MU_WATER / 0.2


GEOM = Geometry(32, 32, 1.0, 20, 48, 1.0)


def test_uniform_disc():
    ph = make_phantom("uniform_disc", GEOM, value=0.05, radius=0.5)
    X, Y = pixel_centers(GEOM)
    inside = X**2 + Y**2 <= 0.25
    assert np.all(ph.image[inside] == 0.05)
    assert np.all(ph.image[~inside] == 0.0)


def test_shepp_logan_matches_ellipse_sum():
    ph = make_phantom("shepp_logan_like", GEOM)
    X, Y = pixel_centers(GEOM)
    rng = np.random.default_rng(0)
    for r, c in rng.integers(0, 32, size=(20, 2)):
        assert ph.image[r, c] == pytest.approx(ellipse_sum(X[r, c], Y[r, c]), abs=1e-12)


def test_blocks_are_piecewise_constant():
    ph = make_phantom("blocks", GEOM)
    values = np.unique(ph.image)
    assert values.size <= 2 ** len(ph.description)
    assert values.size >= 3
    assert ph.image.min() == 0.0


@pytest.mark.parametrize("kind", sorted(PHANTOMS))
def test_phantoms_are_physical_and_deterministic(kind):
    a = make_phantom(kind, GEOM)
    b = make_phantom(kind, GEOM)
    assert np.array_equal(a.image, b.image)
    assert a.image.min() >= 0 and a.image.max() <= 1.0
    assert a.x.shape == (GEOM.n_voxels,)


def test_phantom_errors():
    with pytest.raises(ValueError, match="unknown phantom"):
        make_phantom("teapot", GEOM)
    with pytest.raises(ValueError, match="outside"):
        make_phantom("uniform_disc", GEOM, value=2.0)


def test_noiseless_counts():
    H = build_system_matrix(GEOM)
    data = simulate_counts(H, np.zeros(H.n), 1e4, noiseless=True)
    assert np.all(data.d == 1e4)
    I0 = np.linspace(1e3, 2e3, H.m)
    data = simulate_counts(H, np.zeros(H.n), I0, noiseless=True)
    assert np.array_equal(data.I0, I0)


def test_noiseless_data_give_zero_gradient():
    problem, x_true = small_problem(4, 4, 10, 10, noiseless=True, phantom="shepp_logan_like")
    g = gradient(x_true, problem.H, problem.data, problem.nbhd, problem.reg)
    assert np.max(np.abs(g)) <= 1e-9 * problem.data.I0.max()
    phi = objective(x_true, problem.H, problem.data, problem.nbhd, problem.reg)
    for j in range(problem.n):
        for step in (-1e-3, 1e-3):
            probe = x_true.copy()
            probe[j] = max(0.0, probe[j] + step)
            assert objective(probe, problem.H, problem.data, problem.nbhd, problem.reg) >= phi


def test_counts_have_poisson_moments():
    H = SystemMatrix.from_dense(np.array([[0.0], [1.0], [3.0]]))
    x = np.array([0.7])
    q = 500.0 * np.exp(-H.toarray() @ x)
    reps = np.array([simulate_counts(H, x, 500.0, seed=s).d for s in range(10_000)])
    sigma = np.sqrt(q / reps.shape[0])
    assert np.all(np.abs(reps.mean(axis=0) - q) <= 3 * sigma)


def test_sampler_mean_and_variance_at_rate_ten():
    H = SystemMatrix.from_dense(np.zeros((100_000, 1)))
    d = simulate_counts(H, np.zeros(1), 10.0, seed=123).d
    assert d.mean() == pytest.approx(10.0, rel=0.01)
    assert d.var() == pytest.approx(10.0, rel=0.03)
    assert np.all(d == np.round(d))


def test_seeded_sampling_is_deterministic():
    H = build_system_matrix(GEOM)
    x = make_phantom("blocks", GEOM).x
    a = simulate_counts(H, x, 1e4, seed=9).d
    assert np.array_equal(a, simulate_counts(H, x, 1e4, seed=9).d)
    assert not np.array_equal(a, simulate_counts(H, x, 1e4, seed=10).d)


def test_extreme_line_integrals_warn():
    H = SystemMatrix.from_dense(np.array([[1.0], [1000.0]]))
    with pytest.warns(UserWarning, match="exceed"):
        data = simulate_counts(H, np.array([1.0]), 100.0, noiseless=True)
    assert data.d[1] == 0.0
    assert data.d[0] == pytest.approx(100 * np.exp(-1.0))


def test_rejects_nonpositive_I0():
    H = SystemMatrix.from_dense(np.eye(2))
    with pytest.raises(ValueError):
        simulate_counts(H, np.zeros(2), 0.0)
