"""Tests for the Schur solver, marginalization and Levenberg-Marquardt."""
import numpy as np
import pytest

from common.geometry import Pose
from common.image import ImagePyramid
from config.constants import PATCH_PATTERN, PointStatus
from config.settings import OptimizerConfig
from localization.optimizer import (
    LevenbergMarquardt,
    LMResult,
    NormalEquations,
    build_normal_equations,
    merge_results,
    remove_outliers,
    schur_marginalize,
    solve_dense,
    solve_schur,
)
from localization.state import FrameState, MarginalizationPrior, WindowState


def random_system(rng, n_f=16, n_p=30):
    """SPD system with a diagonal point block, built from random residual Jacobians."""
    J_f = rng.normal(size=(3 * (n_f + n_p), n_f))
    J_p = np.zeros((3 * (n_f + n_p), n_p))
    for k in range(n_p):
        J_p[3 * k : 3 * k + 3, k] = rng.normal(size=3)
    r = rng.normal(size=3 * (n_f + n_p))
    return NormalEquations(
        J_f.T @ J_f,
        J_f.T @ r,
        J_f.T @ J_p,
        np.einsum("ij,ij->j", J_p, J_p),
        J_p.T @ r,
    )


def random_spd(rng, n):
    A = rng.normal(size=(n + 5, n))
    return A.T @ A + 0.1 * np.eye(n)


class LinearProblem:
    """r(x) = A x - y; H = A^T A, b = A^T r."""

    def __init__(self, A, y):
        self.A, self.y = A, y
        self.x = np.zeros(A.shape[1])
        self._saved = None

    def residuals(self):
        return self.A @ self.x - self.y

    def linearize(self):
        r = self.residuals()
        return NormalEquations.from_dense(self.A.T @ self.A, self.A.T @ r, float(r @ r))

    def energy(self):
        r = self.residuals()
        return float(r @ r)

    def apply_step(self, step):
        self.x = self.x + step

    def backup(self):
        self._saved = self.x.copy()

    def restore(self):
        self.x = self._saved


class ExponentialFit(LinearProblem):
    """r_i(k) = exp(k t_i) - y_i, one parameter."""

    def __init__(self, t, y, k0):
        self.t, self.y = t, y
        self.x = np.array([k0])
        self._saved = None

    def residuals(self):
        return np.exp(self.x[0] * self.t) - self.y

    def linearize(self):
        r = self.residuals()
        J = (self.t * np.exp(self.x[0] * self.t))[:, None]
        return NormalEquations.from_dense(J.T @ J, J.T @ r, float(r @ r))


def test_schur_matches_dense_solve():
    """Reduced-system steps equal the unreduced solve."""
    rng = np.random.default_rng(0)
    for damping in (0.0, 1e-3, 1.0):
        ne = random_system(rng)
        assert np.allclose(solve_schur(ne, damping), solve_dense(ne, damping), atol=1e-8)


def test_schur_respects_fixed_variables():
    """Fixed frame variables get a zero step."""
    rng = np.random.default_rng(1)
    ne = random_system(rng)
    ne.fixed = np.zeros(ne.n_frame_vars, dtype=bool)
    ne.fixed[:6] = True
    step = solve_schur(ne)
    assert np.all(step[:6] == 0.0)
    assert np.allclose(step, solve_dense(ne), atol=1e-8)


def test_undamped_step_minimizes_quadratic_model():
    """The undamped step is -H^-1 b."""
    rng = np.random.default_rng(2)
    ne = random_system(rng, n_f=8, n_p=12)
    H, b = ne.dense()
    assert np.allclose(solve_schur(ne), -np.linalg.solve(H, b), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_marginalization_preserves_kept_minimizer(seed):
    """Minimizing the marginalized system gives the kept part of the full minimizer."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 200))
    H = random_spd(rng, n)
    b = rng.normal(size=n)
    perm = rng.permutation(n)
    marg, keep = np.sort(perm[: n // 3]), np.sort(perm[n // 3 :])

    H_new, b_new = schur_marginalize(H, b, keep, marg)
    full = -np.linalg.solve(H, b)
    reduced = -np.linalg.solve(H_new, b_new)
    assert np.allclose(reduced, full[keep], atol=1e-9, rtol=1e-9)


def test_marginalization_preserves_minimum_energy():
    """The marginalized quadratic has the same minimum up to a constant."""
    rng = np.random.default_rng(7)
    H = random_spd(rng, 24)
    b = rng.normal(size=24)
    keep, marg = np.arange(16), np.arange(16, 24)
    H_new, b_new = schur_marginalize(H, b, keep, marg)
    full_min = -b @ np.linalg.solve(H, b)
    reduced_min = -b_new @ np.linalg.solve(H_new, b_new)
    # the eliminated variables contribute -b_m^T H_mm^-1 b_m
    H_mm = H[np.ix_(marg, marg)]
    offset = -b[marg] @ np.linalg.solve(H_mm, b[marg])
    assert reduced_min + offset == pytest.approx(full_min, rel=1e-9)


def test_marginalized_prior_is_psd():
    """Schur complements of PSD systems are PSD priors."""
    rng = np.random.default_rng(3)
    H = random_spd(rng, 32)
    H_new, b_new = schur_marginalize(H, rng.normal(size=32), np.arange(24), np.arange(24, 32))
    prior = MarginalizationPrior([0, 1, 2], H_new, b_new)
    assert prior.is_psd()
    assert MarginalizationPrior().is_psd()


def test_marginalize_nothing_returns_kept_block():
    """An empty elimination set is a plain slice."""
    rng = np.random.default_rng(4)
    H = random_spd(rng, 6)
    b = rng.normal(size=6)
    H_new, b_new = schur_marginalize(H, b, np.arange(6), [])
    assert np.array_equal(H_new, H)
    assert np.array_equal(b_new, b)


def test_lm_solves_linear_least_squares():
    """LM reaches the normal-equation solution of a linear problem."""
    rng = np.random.default_rng(5)
    A = rng.normal(size=(40, 5))
    y = rng.normal(size=40)
    problem = LinearProblem(A, y)
    result = LevenbergMarquardt(initial_damping=1e-6).solve(problem)
    expected, *_ = np.linalg.lstsq(A, y, rcond=None)
    assert result.converged
    assert np.allclose(problem.x, expected, atol=1e-5)
    assert result.final_energy <= result.initial_energy


def test_lm_energy_never_increases():
    """Accepted steps decrease the energy on a nonlinear fit."""
    t = np.linspace(0.0, 1.0, 20)
    problem = ExponentialFit(t, np.exp(1.3 * t), k0=0.0)
    result = LevenbergMarquardt(max_iterations=50).solve(problem)
    assert problem.x[0] == pytest.approx(1.3, abs=1e-4)
    assert result.final_energy < result.initial_energy
    assert all(r.damping > 0 for r in result.records)


def test_lm_zero_energy_converges_immediately():
    """A problem already at its exact solution takes no iterations."""
    A = np.eye(3)
    problem = LinearProblem(A, np.zeros(3))
    result = LevenbergMarquardt().solve(problem)
    assert result.converged
    assert result.iterations == 0


def ramp_window(camera, corrupt):
    """Two identical-pose keyframes over a ramp; `corrupt` pattern indices are brightened in the target."""
    v, u = np.mgrid[0:60, 0:80].astype(float)
    base = 2.0 * u + 1.5 * v + 20.0
    target_image = base.copy()
    pixel = np.array([40.0, 30.0])
    for k in corrupt:
        du, dv = PATCH_PATTERN[k]
        target_image[int(pixel[1] + dv), int(pixel[0] + du)] += 100.0
    host = FrameState(0, ImagePyramid.from_image(base), Pose.identity())
    target = FrameState(1, ImagePyramid.from_image(target_image), Pose.identity())
    window = WindowState(camera, keyframes=[host, target])
    point = window.add_point(host_id=0, pixel=pixel, inv_depth=0.5, inv_depth_sigma=0.01, status=PointStatus.ACTIVE)
    return window, point


def test_remove_outliers_masks_single_residuals(camera):
    """One bad pattern pixel is removed while the rest of the observation stays."""
    config = OptimizerConfig()
    window, point = ramp_window(camera, corrupt=[0])
    before, _ = build_normal_equations(window, config)
    assert before.energy_non > 0

    assert remove_outliers(window, config) == 1
    assert point.outlier_pixels[1].tolist() == [True] + [False] * (len(PATCH_PATTERN) - 1)
    assert 1 not in point.dropped_targets
    assert point.status == PointStatus.ACTIVE
    after, _ = build_normal_equations(window, config)
    assert after.energy_non == pytest.approx(0.0, abs=1e-9)
    # removed residuals stay removed
    assert remove_outliers(window, config) == 0


def test_remove_outliers_drops_fully_bad_observation(camera):
    """An observation with every pattern pixel removed is dropped and its point becomes an outlier."""
    window, point = ramp_window(camera, corrupt=range(len(PATCH_PATTERN)))
    assert remove_outliers(window, OptimizerConfig()) == len(PATCH_PATTERN)
    assert point.dropped_targets == {1}
    assert 1 not in point.outlier_pixels
    assert point.status == PointStatus.OUTLIER


def test_merge_results_continues_iterations():
    """Two consecutive solves report as one, with continuing iteration numbers."""
    problem = LinearProblem(np.eye(3), np.ones(3))
    lm = LevenbergMarquardt(max_iterations=3)
    first = lm.solve(problem)
    problem.y = 2.0 * np.ones(3)
    second = lm.solve(problem)
    merged = merge_results(first, second)
    assert isinstance(merged, LMResult)
    assert merged.iterations == first.iterations + second.iterations
    assert merged.initial_energy == first.initial_energy
    assert merged.final_energy == second.final_energy
    assert [r.iteration for r in merged.records] == list(range(1, merged.iterations + 1))
