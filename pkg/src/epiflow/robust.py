"""Lower-level problem: RANSAC initialisation and IRLS on the truncated-L2 objective."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigError, EstimationFailed, InsufficientData,
                     NumericalError)
from .fivepoint import solve_five_point_batch
from .geometry import (EssentialParams, NormalizedCorrespondenceSet, canonical_essential,
                       epipolar_residuals, params_from_pose, residual_derivatives)

log = logging.getLogger(__name__)

CHUNK = 64  # hypotheses per work unit; fixed so results do not depend on thread count

# RNG stream identifiers
_POOL_STREAM, _HYP_STREAM, _TEST_STREAM = 0, 1, 2


@dataclass(frozen=True)
class RobustConfig:
    inlier_threshold: float = 1e-3
    sample_pool: int = 10000
    test_set_size: int = 2000
    hypothesis_count: int = 1024
    irls_max_iters: int = 200
    irls_objective_floor: float = 1e-20
    rng_seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.inlier_threshold) and self.inlier_threshold > 0):
            raise ConfigError(f"inlier_threshold must be > 0, got {self.inlier_threshold}")
        if not (self.sample_pool >= self.test_set_size >= 5):
            raise ConfigError("need sample_pool >= test_set_size >= 5, got "
                              f"{self.sample_pool} and {self.test_set_size}")
        if self.hypothesis_count < 1:
            raise ConfigError("hypothesis_count must be >= 1")
        if self.irls_max_iters < 1:
            raise ConfigError("irls_max_iters must be >= 1")
        if self.irls_objective_floor < 0:
            raise ConfigError("irls_objective_floor must be >= 0")
        if self.rng_seed < 0:
            raise ConfigError("rng_seed must be non-negative")

    @classmethod
    def from_mapping(cls, values: dict) -> "RobustConfig":
        """Build from a parsed key=value mapping; unknown keys raise ConfigError."""
        kinds = {"inlier_threshold": float, "irls_objective_floor": float}
        kw = {}
        for key, raw in values.items():
            if key not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown estimation config key: {key}")
            try:
                kw[key] = kinds.get(key, int)(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**kw)

    def to_mapping(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class RansacResult:
    E: np.ndarray
    inlier_mask: np.ndarray
    hypotheses_tried: int
    degenerate_hypotheses: int
    best_inlier_count: int
    best_hypothesis: int

    def __iter__(self):
        # unpacks as (E, inlier_mask)
        return iter((self.E, self.inlier_mask))


@dataclass
class EstimationResult:
    params: EssentialParams
    E: np.ndarray
    inlier_mask: np.ndarray
    objective: float
    iterations: int
    history: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def robust_penalty(z, delta):
    """Truncated L2: ``z^2 / 2`` inside ``|z| < delta``, ``delta^2 / 2`` outside."""
    z = np.asarray(z, dtype=float)
    out = np.where(np.abs(z) < delta, 0.5 * z * z, 0.5 * delta * delta)
    return float(out) if out.ndim == 0 else out


def lower_objective(corr: NormalizedCorrespondenceSet, params: EssentialParams, delta: float) -> float:
    if len(corr) == 0:
        raise InsufficientData("empty correspondence set")
    z = epipolar_residuals(corr.x1, corr.x2, params.essential())
    return float(np.sum(robust_penalty(z, delta)))


def _rng(seed, *stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def _score_chunk(hyp_ids, pool_x1, pool_x2, test_x1, test_x2, seed, delta):
    n_pool = len(pool_x1)
    picks = np.stack([_rng(seed, _HYP_STREAM, int(h)).choice(n_pool, 5, replace=False) for h in hyp_ids])
    sols = solve_five_point_batch(pool_x1[picks], pool_x2[picks])
    cands, owners = [], []
    degenerate = 0
    for h, s in zip(hyp_ids, sols):
        if s is None:
            degenerate += 1
            continue
        for c, E in enumerate(s):
            cands.append(E)
            owners.append((int(h), c))
    if not cands:
        return [], degenerate
    Es = np.stack(cands)
    z = np.abs(np.einsum("ni,mij,nj->mn", test_x2, Es, test_x1))
    counts = np.sum(z < delta, axis=1)
    sums = np.sum(z, axis=1)
    return [(int(counts[m]), float(sums[m]), owners[m][0], owners[m][1], Es[m]) for m in range(len(cands))], degenerate


def ransac_init(corr: NormalizedCorrespondenceSet, cfg: RobustConfig, threads: int = 1) -> RansacResult:
    """Best five-point hypothesis by inlier count on a held-out test set.

    A pool of ``sample_pool`` correspondences feeds the minimal samples and a
    separate draw of ``test_set_size`` correspondences scores every candidate.
    Both are clipped to the number of available correspondences. Ties are
    broken by the smaller summed absolute residual, then by hypothesis index.
    Each hypothesis draws from its own counter-based stream derived from
    ``(rng_seed, index)``, so the result is identical for any ``threads``.
    """
    n = len(corr)
    if n < 5:
        raise InsufficientData(f"need at least 5 correspondences, got {n}")
    delta = cfg.inlier_threshold
    pool = _rng(cfg.rng_seed, _POOL_STREAM).choice(n, min(cfg.sample_pool, n), replace=False)
    test = _rng(cfg.rng_seed, _TEST_STREAM).choice(n, min(cfg.test_set_size, n), replace=False)
    args = (corr.x1[pool], corr.x2[pool], corr.x1[test], corr.x2[test], cfg.rng_seed, delta)
    chunks = [np.arange(i, min(i + CHUNK, cfg.hypothesis_count))
              for i in range(0, cfg.hypothesis_count, CHUNK)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(lambda ids: _score_chunk(ids, *args), chunks))
    else:
        results = [_score_chunk(ids, *args) for ids in chunks]
    degenerate = sum(r[1] for r in results)
    best = None
    for scored, _ in results:
        for item in scored:
            if best is None or (-item[0], item[1], item[2], item[3]) < (-best[0], best[1], best[2], best[3]):
                best = item
    if best is None:
        raise EstimationFailed(f"all {cfg.hypothesis_count} hypotheses were degenerate")
    E = best[4]
    mask = np.abs(epipolar_residuals(corr.x1, corr.x2, E)) < delta
    return RansacResult(E, mask, cfg.hypothesis_count, degenerate, best[0], best[2])


def _restricted_cost(corr, params, mask):
    z = epipolar_residuals(corr.x1[mask], corr.x2[mask], params.essential())
    return 0.5 * float(z @ z)


def _newton_polish(corr, params, mask, max_steps=10):
    """Newton steps on the frozen inlier set, in the reporting chart.

    Near the optimum the cost changes fall below its rounding resolution, so
    steps are accepted while they reduce the gradient instead.
    """
    sub = corr.subset(mask)
    z, dz, d2z = residual_derivatives(sub, params, second=True)
    g = dz.T @ z
    gnorm = np.max(np.abs(g))
    for k in range(1, max_steps + 1):
        H = dz.T @ dz + np.einsum("n,njk->jk", z, d2z)
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            return params, k - 1
        trial = params.with_theta(params.theta + step)
        z, dz, d2z = residual_derivatives(sub, trial, second=True)
        g = dz.T @ z
        if not np.max(np.abs(g)) < gnorm:
            return params, k - 1
        params, gnorm = trial, np.max(np.abs(g))
    return params, max_steps


def irls_refine(corr: NormalizedCorrespondenceSet, theta0: EssentialParams, cfg: RobustConfig) -> EstimationResult:
    """Minimise the truncated-L2 objective from ``theta0``.

    Truncated-L2 weights are 1 inside the threshold and 0 outside, so each
    iteration takes one Levenberg-Marquardt step on the current inlier set.
    Iterates are kept on a chart re-centred at the current pose; the result is
    reported in the chart of ``theta0``. Stops when the objective reaches
    ``irls_objective_floor`` or after ``irls_max_iters`` iterations.

    The returned inlier mask is frozen: if the last step changed the inlier
    set, Gauss-Newton steps converge on the new set first. A few Newton steps
    on the frozen set then bring the gradient down to rounding level.
    """
    if len(corr) < 5:
        raise InsufficientData(f"need at least 5 correspondences, got {len(corr)}")
    if not np.all(np.isfinite(theta0.theta)):
        raise NumericalError("initial parameters are not finite")
    delta, floor = cfg.inlier_threshold, cfg.irls_objective_floor
    cur = theta0.rebased()
    lam = 1e-3
    history, epochs, mask = [], [], None
    stop = "max_iters"
    iters = 0
    for iters in range(1, cfg.irls_max_iters + 1):
        before = (cur, lam, mask)
        z, dz = residual_derivatives(corr, cur)
        new_mask = np.abs(z) < delta
        # epoch counts inlier-set changes; the objective cannot rise within one epoch
        epochs.append(0 if mask is None else epochs[-1] + int(not np.array_equal(new_mask, mask)))
        mask = new_mask
        obj = float(np.sum(robust_penalty(z, delta)))
        history.append(obj)
        if obj <= floor:
            stop = "objective_floor"
            break
        if mask.sum() < 5:
            raise EstimationFailed(f"inlier set collapsed to {int(mask.sum())} points")
        r, J = z[mask], dz[mask]
        cost = 0.5 * float(r @ r)
        H = J.T @ J
        g = J.T @ r
        dH = np.diag(H) + 1e-12 * np.trace(H) / 5
        for _ in range(8):
            try:
                step = np.linalg.solve(H + lam * np.diag(dH), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            if not np.any(np.abs(step) > 1e-16):
                break  # nothing left to gain at this inlier set
            trial = cur.with_theta(step).rebased()
            # the second test is the recorded objective itself, so history never rises by rounding
            if (_restricted_cost(corr, trial, mask) <= cost
                    and float(np.sum(robust_penalty(residual_derivatives(corr, trial)[0], delta))) <= obj):
                cur = trial
                lam = max(lam * 0.1, 1e-12)
                break
            lam = min(lam * 10, 1e12)
        if before[0] is cur and before[1] == lam and np.array_equal(before[2], mask):
            # fixed point: every remaining iteration would repeat this one exactly
            history.extend([obj] * (cfg.irls_max_iters - iters))
            epochs.extend([epochs[-1]] * (cfg.irls_max_iters - iters))
            iters = cfg.irls_max_iters
            break

    z = epipolar_residuals(corr.x1, corr.x2, cur.essential())
    final_mask = np.abs(z) < delta
    polish = 0
    if mask is not None and not np.array_equal(final_mask, mask) and history[-1] > floor:
        # inlier set changed on the last step: converge on the final set, then freeze it
        mask = final_mask
        for polish in range(1, 21):
            zz, dzz = residual_derivatives(corr, cur)
            J, r = dzz[mask], zz[mask]
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
            trial = cur.with_theta(step).rebased()
            if _restricted_cost(corr, trial, mask) > 0.5 * float(r @ r):
                break
            cur = trial
            if not np.any(np.abs(step) > 1e-16):
                break
    else:
        mask = final_mask

    R, t = cur.pose()
    params = params_from_pose(R, t, (theta0.R0, theta0.t0))
    params, newton = _newton_polish(corr, params, mask)
    z, dz = residual_derivatives(corr, params)
    grad = dz[mask].T @ z[mask]
    objective = float(np.sum(robust_penalty(z, delta)))
    diag = {
        "stop_reason": stop,
        "gradient_inf_norm": float(np.max(np.abs(grad))),
        "inlier_count": int(mask.sum()),
        "polish_iterations": polish,
        "newton_iterations": newton,
        "inlier_epochs": epochs,
    }
    return EstimationResult(params, canonical_essential(params.essential()), mask, objective, iters, history, diag)


def estimate(corr: NormalizedCorrespondenceSet, cfg: RobustConfig | None = None, threads: int = 1) -> EstimationResult:
    """RANSAC + five-point initialisation followed by IRLS.

    The chart is centred on the RANSAC pose (the cheirality-consistent
    decomposition of its essential matrix), so IRLS starts from ``theta = 0``.
    """
    from .pose import decompose_essential

    cfg = cfg or RobustConfig()
    init = ransac_init(corr, cfg, threads=threads)
    log.debug("ransac: %d inliers from hypothesis %d", init.best_inlier_count, init.best_hypothesis)
    voters = corr.subset(init.inlier_mask) if init.inlier_mask.sum() >= 5 else corr
    rel = decompose_essential(init.E, voters)
    theta0 = EssentialParams.at_pose(rel.R, rel.t)
    res = irls_refine(corr, theta0, cfg)
    res.diagnostics.update(
        hypotheses_tried=init.hypotheses_tried,
        degenerate_hypotheses=init.degenerate_hypotheses,
        best_inlier_count=init.best_inlier_count,
        best_hypothesis=init.best_hypothesis,
    )
    return res
