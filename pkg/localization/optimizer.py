"""Sliding-window photometric optimization.

Levenberg-Marquardt over keyframe states (pose, a, b) and free inverse depths,
with the depth block eliminated by Schur complement, and frame
marginalization into a First-Estimate-Jacobian prior.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from common.errors import OptimizationError
from common.geometry import box_minus, box_plus
from config.constants import PATCH_PATTERN, PointMarginalization, PointStatus
from config.settings import OptimizerConfig
from localization.photometric import PatchEval, evaluate_patches
from localization.state import FRAME_DIM, FrameState, MarginalizationPrior, TrackedPoint, WindowState

logger = logging.getLogger(__name__)

SINGULAR_REGULARIZER = 1e-9
MIN_INV_DEPTH_FRACTION = 0.1


@dataclass(eq=False)
class NormalEquations:
    """Gauss-Newton system with a diagonal point block.

    Variables are [frames (n_f) | points (n_p)]. The energy model is
    E(x + dx) ~ E + 2 b^T dx + dx^T H dx.
    """

    H_ff: np.ndarray
    b_f: np.ndarray
    H_fp: np.ndarray
    d_pp: np.ndarray
    b_p: np.ndarray
    energy_surfel: float = 0.0
    energy_non: float = 0.0
    energy_prior: float = 0.0
    fixed: Optional[np.ndarray] = None
    num_residuals: int = 0

    @property
    def energy(self) -> float:
        return self.energy_surfel + self.energy_non + self.energy_prior

    @property
    def n_frame_vars(self) -> int:
        return len(self.b_f)

    def dense(self) -> Tuple[np.ndarray, np.ndarray]:
        """Full (H, b)."""
        n_f, n_p = len(self.b_f), len(self.b_p)
        H = np.zeros((n_f + n_p, n_f + n_p))
        H[:n_f, :n_f] = self.H_ff
        H[:n_f, n_f:] = self.H_fp
        H[n_f:, :n_f] = self.H_fp.T
        H[n_f:, n_f:] = np.diag(self.d_pp)
        return H, np.concatenate([self.b_f, self.b_p])

    @classmethod
    def from_dense(cls, H: np.ndarray, b: np.ndarray, energy: float = 0.0) -> "NormalEquations":
        """Frame-only system (no point block)."""
        n = len(b)
        return cls(H, b, np.zeros((n, 0)), np.zeros(0), np.zeros(0), energy_non=energy)


class LeastSquaresProblem(Protocol):
    def linearize(self) -> NormalEquations: ...

    def energy(self) -> float: ...

    def apply_step(self, step: np.ndarray) -> None: ...

    def backup(self) -> None: ...

    def restore(self) -> None: ...


def solve_schur(ne: NormalEquations, damping: float = 0.0) -> np.ndarray:
    """Damped step -(H + lambda diag H)^-1 b via the reduced frame system.

    Raises LinAlgError when the reduced system is not positive definite.
    """
    n_f = ne.n_frame_vars
    H_ff = ne.H_ff + np.diag(damping * np.diag(ne.H_ff) + SINGULAR_REGULARIZER)
    d = ne.d_pp * (1.0 + damping)
    d = np.where(d > SINGULAR_REGULARIZER, d, 1.0)
    d_inv = 1.0 / d

    S = H_ff - (ne.H_fp * d_inv) @ ne.H_fp.T
    s = ne.b_f - ne.H_fp @ (d_inv * ne.b_p)
    free = np.ones(n_f, dtype=bool) if ne.fixed is None else ~ne.fixed

    dx_f = np.zeros(n_f)
    if free.any():
        S_free = S[np.ix_(free, free)]
        factor = cho_factor(0.5 * (S_free + S_free.T))
        dx_f[free] = -cho_solve(factor, s[free])
    dx_p = -d_inv * (ne.b_p + ne.H_fp.T @ dx_f)
    return np.concatenate([dx_f, dx_p])


def solve_dense(ne: NormalEquations, damping: float = 0.0) -> np.ndarray:
    """Unreduced damped solve, same damping as solve_schur."""
    H, b = ne.dense()
    n_f = ne.n_frame_vars
    diag = np.diag(H) * damping
    diag[:n_f] += SINGULAR_REGULARIZER
    d_pp = ne.d_pp * (1.0 + damping)
    H = H + np.diag(diag)
    H[n_f:, n_f:] = np.diag(np.where(d_pp > SINGULAR_REGULARIZER, d_pp, 1.0))
    free = np.ones(len(b), dtype=bool)
    if ne.fixed is not None:
        free[:n_f] = ~ne.fixed
    dx = np.zeros(len(b))
    dx[free] = -np.linalg.solve(H[np.ix_(free, free)], b[free])
    return dx


def schur_marginalize(
    H: np.ndarray, b: np.ndarray, keep: Sequence[int], marg: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray]:
    """Eliminate `marg` variables: (H_kk - H_km H_mm^-1 H_mk, b_k - H_km H_mm^-1 b_m)."""
    keep = np.asarray(keep, dtype=int)
    marg = np.asarray(marg, dtype=int)
    H_kk = H[np.ix_(keep, keep)]
    if len(marg) == 0:
        return H_kk.copy(), b[keep].copy()
    H_km = H[np.ix_(keep, marg)]
    H_mm = 0.5 * (H[np.ix_(marg, marg)] + H[np.ix_(marg, marg)].T)
    eig_min = np.linalg.eigvalsh(H_mm).min() if len(marg) else 1.0
    if eig_min <= SINGULAR_REGULARIZER * max(1.0, np.abs(H_mm).max()):
        logger.warning(f"Singular block in marginalization (min eigenvalue {eig_min:.3e}), regularizing")
        H_mm = H_mm + SINGULAR_REGULARIZER * np.eye(len(marg))
    factor = cho_factor(H_mm)
    H_new = H_kk - H_km @ cho_solve(factor, H_km.T)
    b_new = b[keep] - H_km @ cho_solve(factor, b[marg])
    return 0.5 * (H_new + H_new.T), b_new


@dataclass
class IterationRecord:
    iteration: int
    energy_surfel: float
    energy_non: float
    damping: float
    step_norm: float
    accepted: bool


@dataclass
class LMResult:
    converged: bool
    iterations: int
    initial_energy: float
    final_energy: float
    records: List[IterationRecord] = field(default_factory=list)


def merge_results(first: LMResult, second: LMResult) -> LMResult:
    """One result for two consecutive solves of the same window."""
    offset = first.iterations
    records = list(first.records) + [replace(r, iteration=r.iteration + offset) for r in second.records]
    return LMResult(
        second.converged,
        first.iterations + second.iterations,
        first.initial_energy,
        second.final_energy,
        records,
    )


class LevenbergMarquardt:
    """Multiplicative-damping LM with accept-on-decrease."""

    def __init__(
        self,
        initial_damping: float = 1e-4,
        max_iterations: int = 10,
        step_tolerance: float = 1e-8,
        energy_tolerance: float = 1e-6,
    ):
        self.initial_damping = initial_damping
        self.max_iterations = max_iterations
        self.step_tolerance = step_tolerance
        self.energy_tolerance = energy_tolerance

    def solve(self, problem: LeastSquaresProblem) -> LMResult:
        ne = problem.linearize()
        energy = ne.energy
        if not math.isfinite(energy):
            raise OptimizationError(f"Non-finite initial energy {energy}")
        result = LMResult(False, 0, energy, energy)
        if energy == 0.0 and not np.any(ne.b_f) and not np.any(ne.b_p):
            result.converged = True
            return result

        damping = self.initial_damping
        for it in range(1, self.max_iterations + 1):
            result.iterations = it
            try:
                step = solve_schur(ne, damping)
            except LinAlgError:
                logger.warning(f"Reduced system not positive definite, damping {damping:.1e} -> {damping * 2:.1e}")
                damping *= 2.0
                result.records.append(IterationRecord(it, ne.energy_surfel, ne.energy_non, damping, float("nan"), False))
                continue

            step_norm = float(np.linalg.norm(step))
            problem.backup()
            problem.apply_step(step)
            new_energy = problem.energy()
            if not math.isfinite(new_energy):
                problem.restore()
                raise OptimizationError(f"Non-finite energy at iteration {it} (step norm {step_norm:.3e})")

            accepted = new_energy < energy
            result.records.append(IterationRecord(it, ne.energy_surfel, ne.energy_non, damping, step_norm, accepted))
            if accepted:
                relative = (energy - new_energy) / max(abs(energy), 1e-300)
                assert new_energy <= energy
                energy = new_energy
                damping *= 0.5
                if step_norm < self.step_tolerance or relative < self.energy_tolerance:
                    result.converged = True
                    break
                ne = problem.linearize()
                energy = ne.energy
            else:
                problem.restore()
                logger.debug(f"Iteration {it}: rejected step, energy {new_energy:.4f} >= {energy:.4f}")
                damping *= 2.0
                if step_norm < self.step_tolerance:
                    result.converged = True
                    break

        result.final_energy = energy
        return result


def _frame_delta(frame: FrameState) -> np.ndarray:
    """Current state minus first estimate, as an 8-vector."""
    T0, a0, b0 = frame.first_estimate
    return np.concatenate([box_minus(frame.T_c_w, T0), [frame.a - a0, frame.b - b0]])


def _apply_frame_step(frame: FrameState, delta: np.ndarray) -> None:
    frame.T_c_w = box_plus(frame.T_c_w, delta[:6])
    frame.a += float(delta[6])
    frame.b += float(delta[7])


def _accumulate_pair(
    H: np.ndarray,
    b: np.ndarray,
    hi: int,
    ti: int,
    ev: PatchEval,
    residuals: np.ndarray,
) -> None:
    """Add the frame-frame blocks of one host/target evaluation."""
    W, Jh, Jt = ev.weights, ev.J_host, ev.J_target
    sh = slice(hi * FRAME_DIM, (hi + 1) * FRAME_DIM)
    st = slice(ti * FRAME_DIM, (ti + 1) * FRAME_DIM)
    H[sh, sh] += np.einsum("npi,np,npj->ij", Jh, W, Jh)
    H[st, st] += np.einsum("npi,np,npj->ij", Jt, W, Jt)
    H_ht = np.einsum("npi,np,npj->ij", Jh, W, Jt)
    H[sh, st] += H_ht
    H[st, sh] += H_ht.T
    b[sh] += np.einsum("npi,np,np->i", Jh, W, residuals)
    b[st] += np.einsum("npi,np,np->i", Jt, W, residuals)


def _point_arrays(points: List[TrackedPoint]) -> Tuple[np.ndarray, np.ndarray]:
    pixels = np.array([p.pixel for p in points]).reshape(-1, 2)
    inv_depths = np.array([p.inv_depth for p in points])
    return pixels, inv_depths


def _plane_arrays(points: List[TrackedPoint]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    pixels = np.array([p.pixel for p in points]).reshape(-1, 2)
    normals = np.array([p.plane.normal for p in points]).reshape(-1, 3)
    d = np.array([p.plane.d for p in points])
    return pixels, normals, d


def _targets_mask(points: List[TrackedPoint], target_id: int) -> np.ndarray:
    return np.array([target_id not in p.dropped_targets for p in points], dtype=bool)


def _pixel_mask(points: List[TrackedPoint], target_id: int) -> Optional[np.ndarray]:
    """(N, P) pattern pixels still in use, None when nothing was removed."""
    removed = [p.outlier_pixels.get(target_id) for p in points]
    if all(m is None for m in removed):
        return None
    n_pat = len(PATCH_PATTERN)
    return ~np.array([np.zeros(n_pat, dtype=bool) if m is None else m for m in removed])


def _evaluate_group(
    host: FrameState,
    target: FrameState,
    window: WindowState,
    points: List[TrackedPoint],
    config: OptimizerConfig,
    jacobians: bool,
) -> PatchEval:
    if points[0].is_associated:
        pixels, normals, d = _plane_arrays(points)
        ev = evaluate_patches(
            host, target, window.K, pixels, plane_normals=normals, plane_d=d,
            gamma=config.huber_gamma, gradient_c=config.gradient_weight_c, jacobians=jacobians,
            pixel_mask=_pixel_mask(points, target.frame_id),
        )
    else:
        pixels, inv_depths = _point_arrays(points)
        ev = evaluate_patches(
            host, target, window.K, pixels, inv_depths=inv_depths,
            gamma=config.huber_gamma, gradient_c=config.gradient_weight_c, jacobians=jacobians,
            pixel_mask=_pixel_mask(points, target.frame_id),
        )
    keep = _targets_mask(points, target.frame_id)
    if not keep.all():
        ev.valid &= keep
        ev.weights[~keep] = 0.0
        ev.energy[~keep] = 0.0
        ev.residuals[~keep] = 0.0
    return ev


def _hosted_groups(window: WindowState) -> Dict[int, Tuple[List[TrackedPoint], List[TrackedPoint]]]:
    """Per host id: (free-depth points, associated points)."""
    groups = {kf.frame_id: ([], []) for kf in window.keyframes}
    for p in window.points.values():
        if p.host_id not in groups:
            continue
        if p.status == PointStatus.ACTIVE:
            groups[p.host_id][0].append(p)
        elif p.status == PointStatus.ASSOCIATED:
            groups[p.host_id][1].append(p)
    return groups


def _add_frame_priors(window: WindowState, config: OptimizerConfig, H: np.ndarray, b: np.ndarray) -> float:
    """Affine priors on every keyframe and the marginalization prior; returns their energy."""
    energy = 0.0
    for i, kf in enumerate(window.keyframes):
        ia, ib = i * FRAME_DIM + 6, i * FRAME_DIM + 7
        H[ia, ia] += config.affine_prior_a
        H[ib, ib] += config.affine_prior_b
        b[ia] += config.affine_prior_a * kf.a
        b[ib] += config.affine_prior_b * kf.b
        energy += config.affine_prior_a * kf.a**2 + config.affine_prior_b * kf.b**2

    prior = window.prior
    if not prior.is_empty:
        idx = np.concatenate(
            [np.arange(FRAME_DIM) + FRAME_DIM * window.frame_index(fid) for fid in prior.frame_ids]
        )
        delta = np.concatenate([_frame_delta(window.frame(fid)) for fid in prior.frame_ids])
        H[np.ix_(idx, idx)] += prior.H
        b[idx] += prior.b + prior.H @ delta
        energy += float(delta @ prior.H @ delta + 2.0 * prior.b @ delta)
    return energy


def build_normal_equations(
    window: WindowState,
    config: Optional[OptimizerConfig] = None,
    jacobians: bool = True,
) -> Tuple[NormalEquations, List[TrackedPoint]]:
    """Robust Gauss-Newton system over keyframe states and free inverse depths.

    Returns the system and the free-depth points in variable order. Surfel
    blocks contribute to frame blocks only.
    """
    config = config or OptimizerConfig()
    n_frames = len(window.keyframes)
    groups = _hosted_groups(window)
    free_points = [p for kf in window.keyframes for p in groups[kf.frame_id][0]]
    point_index = {p.point_id: k for k, p in enumerate(free_points)}
    n_f, n_p = n_frames * FRAME_DIM, len(free_points)

    H_ff = np.zeros((n_f, n_f))
    b_f = np.zeros(n_f)
    H_fp = np.zeros((n_f, n_p))
    d_pp = np.zeros(n_p)
    b_p = np.zeros(n_p)
    energy_surfel = energy_non = 0.0
    num_residuals = 0

    for hi, host in enumerate(window.keyframes):
        free, assoc = groups[host.frame_id]
        for ti, target in enumerate(window.keyframes):
            if ti == hi:
                continue
            if assoc:
                ev = _evaluate_group(host, target, window, assoc, config, jacobians)
                energy_surfel += float(ev.energy.sum())
                num_residuals += int(ev.valid.sum()) * ev.residuals.shape[1]
                if jacobians:
                    _accumulate_pair(H_ff, b_f, hi, ti, ev, ev.residuals)
            if free:
                ev = _evaluate_group(host, target, window, free, config, jacobians)
                energy_non += float(ev.energy.sum())
                num_residuals += int(ev.valid.sum()) * ev.residuals.shape[1]
                if jacobians:
                    _accumulate_pair(H_ff, b_f, hi, ti, ev, ev.residuals)
                    cols = np.array([point_index[p.point_id] for p in free])
                    W, Jr = ev.weights, ev.J_rho
                    np.add.at(d_pp, cols, np.einsum("np,np,np->n", Jr, W, Jr))
                    np.add.at(b_p, cols, np.einsum("np,np,np->n", Jr, W, ev.residuals))
                    sh = slice(hi * FRAME_DIM, (hi + 1) * FRAME_DIM)
                    st = slice(ti * FRAME_DIM, (ti + 1) * FRAME_DIM)
                    H_fp[sh, cols] += np.einsum("npi,np,np->in", ev.J_host, W, Jr)
                    H_fp[st, cols] += np.einsum("npi,np,np->in", ev.J_target, W, Jr)

    energy_prior = _add_frame_priors(window, config, H_ff, b_f)

    fixed = np.zeros(n_f, dtype=bool)
    if n_frames and not window.has_associations():
        # Gauge: oldest keyframe pose held fixed until surfel constraints exist
        fixed[:6] = True

    ne = NormalEquations(
        H_ff, b_f, H_fp, d_pp, b_p,
        energy_surfel=energy_surfel,
        energy_non=energy_non,
        energy_prior=energy_prior,
        fixed=fixed,
        num_residuals=num_residuals,
    )
    return ne, free_points


class WindowProblem:
    """LM adapter over a WindowState."""

    def __init__(self, window: WindowState, config: OptimizerConfig):
        self.window = window
        self.config = config
        self.free_points: List[TrackedPoint] = []
        self._backup = None

    def linearize(self) -> NormalEquations:
        ne, self.free_points = build_normal_equations(self.window, self.config)
        return ne

    def energy(self) -> float:
        ne, _ = build_normal_equations(self.window, self.config, jacobians=False)
        return ne.energy

    def apply_step(self, step: np.ndarray) -> None:
        for i, kf in enumerate(self.window.keyframes):
            _apply_frame_step(kf, step[i * FRAME_DIM : (i + 1) * FRAME_DIM])
        n_f = len(self.window.keyframes) * FRAME_DIM
        for k, p in enumerate(self.free_points):
            new = p.inv_depth + float(step[n_f + k])
            p.inv_depth = new if new > 0 else p.inv_depth * MIN_INV_DEPTH_FRACTION

    def backup(self) -> None:
        self._backup = (
            [(kf.T_c_w, kf.a, kf.b) for kf in self.window.keyframes],
            [p.inv_depth for p in self.free_points],
        )

    def restore(self) -> None:
        frames, depths = self._backup
        for kf, (T, a, b) in zip(self.window.keyframes, frames):
            kf.T_c_w, kf.a, kf.b = T, a, b
        for p, rho in zip(self.free_points, depths):
            p.inv_depth = rho


def remove_outliers(window: WindowState, config: Optional[OptimizerConfig] = None) -> int:
    """Remove residuals with |r| > factor * gamma; returns the number of removed residuals.

    An observation whose pattern pixels are all removed is dropped, and a
    point whose observations are all dropped becomes an outlier.
    """
    config = config or OptimizerConfig()
    threshold = config.outlier_energy_factor * config.huber_gamma
    groups = _hosted_groups(window)
    removed = dropped = 0
    for host in window.keyframes:
        for points in groups[host.frame_id]:
            if not points:
                continue
            for target in window.keyframes:
                if target.frame_id == host.frame_id:
                    continue
                ev = _evaluate_group(host, target, window, points, config, jacobians=False)
                bad = ev.valid[:, None] & (np.abs(ev.residuals) > threshold)
                for p, row in zip(points, bad):
                    if not row.any():
                        continue
                    removed += int(row.sum())
                    mask = p.outlier_pixels.get(target.frame_id, np.zeros(len(row), dtype=bool)) | row
                    if mask.all():
                        p.outlier_pixels.pop(target.frame_id, None)
                        p.dropped_targets.add(target.frame_id)
                        dropped += 1
                    else:
                        p.outlier_pixels[target.frame_id] = mask
    n_targets = len(window.keyframes) - 1
    for p in window.points.values():
        if p.status in (PointStatus.ACTIVE, PointStatus.ASSOCIATED) and n_targets > 0:
            live = {kf.frame_id for kf in window.keyframes if kf.frame_id != p.host_id}
            if live and live <= p.dropped_targets:
                p.set_status(PointStatus.OUTLIER)
    if removed:
        logger.info(f"Removed {removed} outlier residuals, dropped {dropped} observations")
    return removed


def solve_window(window: WindowState, config: Optional[OptimizerConfig] = None) -> LMResult:
    """Joint LM solve of the window, followed by outlier removal."""
    config = config or OptimizerConfig()
    if len(window.keyframes) < 2:
        return LMResult(True, 0, 0.0, 0.0)
    lm = LevenbergMarquardt(
        config.initial_damping, config.max_iterations, config.step_tolerance, config.energy_tolerance
    )
    result = lm.solve(WindowProblem(window, config))
    logger.info(
        f"Window of {len(window.keyframes)} keyframes: energy {result.initial_energy:.1f} -> "
        f"{result.final_energy:.1f} in {result.iterations} iterations"
    )
    remove_outliers(window, config)
    return result


def _fej_state(frame: FrameState) -> FrameState:
    if frame.first_estimate is None:
        return frame
    T0, a0, b0 = frame.first_estimate
    return frame.copy_with(T_c_w=T0, a=a0, b=b0)


def marginalize_frame(window: WindowState, frame_id: int, config: Optional[OptimizerConfig] = None) -> None:
    """Fold every residual touching `frame_id` into the prior and drop the frame.

    Jacobians are taken at first estimates; residuals at the current state.
    Free-depth points hosted in the frame are marginalized (or discarded per
    config); free-depth observations from other hosts into the frame are dropped.
    """
    config = config or OptimizerConfig()
    m_idx = window.frame_index(frame_id)
    frame = window.keyframes[m_idx]
    n_frames = len(window.keyframes)

    hosted_free = window.points_with(PointStatus.ACTIVE, host_id=frame_id)
    hosted_assoc = window.points_with(PointStatus.ASSOCIATED, host_id=frame_id)
    foreign_assoc = {
        kf.frame_id: [p for p in window.points_with(PointStatus.ASSOCIATED, host_id=kf.frame_id) if frame_id not in p.dropped_targets]
        for kf in window.keyframes
        if kf.frame_id != frame_id
    }

    marg_points: List[TrackedPoint] = []
    if config.point_marginalization == PointMarginalization.MARGINALIZE and hosted_free:
        for p in hosted_free:
            n_obs = sum(
                1 for kf in window.keyframes if kf.frame_id != frame_id and kf.frame_id not in p.dropped_targets
            )
            if n_obs >= config.min_obs_for_marginalization:
                marg_points.append(p)

    # Collect linearizations: (host index, target index, current eval, FEJ eval, point columns)
    terms = []
    touched = set()

    def linearize(host: FrameState, target: FrameState, points: List[TrackedPoint]):
        current = _evaluate_group(host, target, window, points, config, jacobians=False)
        fej = _evaluate_group(_fej_state(host), _fej_state(target), window, points, config, jacobians=True)
        valid = current.valid & fej.valid
        if not valid.any():
            return None
        current.weights[~valid] = 0.0
        current.residuals[~valid] = 0.0
        return current, fej

    for target in window.keyframes:
        if target.frame_id == frame_id:
            continue
        for group in (marg_points, hosted_assoc):
            if group:
                out = linearize(frame, target, group)
                if out:
                    terms.append((frame, target, group, out))
                    touched |= {frame_id, target.frame_id}
        assoc = foreign_assoc.get(target.frame_id)
        if assoc:
            out = linearize(target, frame, assoc)
            if out:
                terms.append((target, frame, assoc, out))
                touched |= {frame_id, target.frame_id}

    if not terms and frame_id not in window.prior.frame_ids:
        logger.info(f"Keyframe #{frame_id}: marginalized without residuals, prior unchanged")
        _drop_frame(window, frame_id)
        return

    for kf in window.keyframes:
        if kf.frame_id in touched:
            kf.fix_first_estimate()

    point_index = {p.point_id: k for k, p in enumerate(marg_points)}
    n_f, n_p = n_frames * FRAME_DIM, len(marg_points)
    H = np.zeros((n_f + n_p, n_f + n_p))
    b = np.zeros(n_f + n_p)

    for host, target, points, (current, fej) in terms:
        hi, ti = window.frame_index(host.frame_id), window.frame_index(target.frame_id)
        delta_h, delta_t = _frame_delta(host), _frame_delta(target)
        # Residual re-referenced to the first estimate: r - J (x - x0)
        r_ref = current.residuals - (fej.J_host @ delta_h) - (fej.J_target @ delta_t)
        r_ref = np.where(current.weights > 0, r_ref, 0.0)
        ev = PatchEval(r_ref, current.valid, current.weights, current.energy, current.uv_target, current.inv_depth,
                       fej.J_host, fej.J_target, fej.J_rho)
        H_ff = H[:n_f, :n_f]
        b_f = b[:n_f]
        _accumulate_pair(H_ff, b_f, hi, ti, ev, r_ref)
        if fej.J_rho is not None and points and points[0].point_id in point_index:
            W, Jr = current.weights, fej.J_rho
            cols = n_f + np.array([point_index[p.point_id] for p in points])
            H[cols, cols] += np.einsum("np,np,np->n", Jr, W, Jr)
            b[cols] += np.einsum("np,np,np->n", Jr, W, r_ref)
            sh = np.arange(hi * FRAME_DIM, (hi + 1) * FRAME_DIM)
            st = np.arange(ti * FRAME_DIM, (ti + 1) * FRAME_DIM)
            H_hp = np.einsum("npi,np,np->in", fej.J_host, W, Jr)
            H_tp = np.einsum("npi,np,np->in", fej.J_target, W, Jr)
            H[np.ix_(sh, cols)] += H_hp
            H[np.ix_(cols, sh)] += H_hp.T
            H[np.ix_(st, cols)] += H_tp
            H[np.ix_(cols, st)] += H_tp.T

    # Affine priors of the eliminated frame, referenced to its first estimate
    _, a0, b0 = frame.first_estimate or (frame.T_c_w, frame.a, frame.b)
    ia, ib = m_idx * FRAME_DIM + 6, m_idx * FRAME_DIM + 7
    H[ia, ia] += config.affine_prior_a
    H[ib, ib] += config.affine_prior_b
    b[ia] += config.affine_prior_a * a0
    b[ib] += config.affine_prior_b * b0

    prior = window.prior
    if not prior.is_empty:
        idx = np.concatenate(
            [np.arange(FRAME_DIM) + FRAME_DIM * window.frame_index(fid) for fid in prior.frame_ids]
        )
        H[np.ix_(idx, idx)] += prior.H
        b[idx] += prior.b

    remaining = [kf.frame_id for kf in window.keyframes if kf.frame_id != frame_id and (kf.frame_id in touched or kf.frame_id in prior.frame_ids)]
    keep = np.concatenate(
        [np.arange(FRAME_DIM) + FRAME_DIM * window.frame_index(fid) for fid in remaining]
    ).astype(int) if remaining else np.zeros(0, dtype=int)
    marg = np.concatenate([np.arange(FRAME_DIM) + FRAME_DIM * m_idx, n_f + np.arange(n_p)]).astype(int)
    H_new, b_new = schur_marginalize(H, b, keep, marg)

    window.prior = MarginalizationPrior(remaining, H_new, b_new)
    logger.info(
        f"Keyframe #{frame_id}: marginalized {len(terms)} residual groups, {n_p} points, "
        f"prior over {len(remaining)} frames"
    )
    _drop_frame(window, frame_id)
    if not window.prior.is_psd():
        logger.warning(f"Keyframe #{frame_id}: prior lost positive semidefiniteness")


def _drop_frame(window: WindowState, frame_id: int) -> None:
    window.keyframes = [kf for kf in window.keyframes if kf.frame_id != frame_id]
    removed = [pid for pid, p in window.points.items() if p.host_id == frame_id]
    for pid in removed:
        del window.points[pid]
    for p in window.points.values():
        p.dropped_targets.discard(frame_id)
        p.outlier_pixels.pop(frame_id, None)
    logger.debug(f"Keyframe #{frame_id}: removed with {len(removed)} hosted points")
