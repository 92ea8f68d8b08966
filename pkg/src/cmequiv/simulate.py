"""Sampling, Monte-Carlo checks and a two-filter smoother built on an AE model pair.

All randomness flows through ``numpy.random.Generator`` with the PCG64 bit
generator. Parallel trials use independent child streams spawned from one
``SeedSequence``, so results depend only on (seed, workers) and are merged in
worker order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .blockmat import BlockMatrix, invert, relative_error, solve
from .equivalence import NoiseMap, ae_map, markov_fwd_to_bwd
from .errors import DimensionMismatch, NotSPD
from .models import LinearModel, MarkovParams, precision, spd_inv


def make_rng(seed: int | np.random.SeedSequence | None) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True, eq=False)
class SamplePath:
    states: np.ndarray  # shape (N+1, d)

    def __post_init__(self):
        if self.states.ndim != 2:
            raise ValueError("states must be an (N+1, d) array")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("sample path has non-finite entries")

    @property
    def N(self) -> int:
        return self.states.shape[0] - 1

    @property
    def stacked(self) -> np.ndarray:
        return self.states.reshape(-1)


def _factor(P: BlockMatrix) -> np.ndarray:
    try:
        return np.linalg.cholesky(P.array)
    except np.linalg.LinAlgError:
        raise NotSPD("noise covariance is not positive definite") from None


def sample_noise(model: LinearModel, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """v ~ N(0, P); shape (n,) or (size, n)."""
    L = _factor(model.P)
    n = L.shape[0]
    z = rng.standard_normal(n if size is None else (size, n))
    return z @ L.T


def sample_path(model: LinearModel, rng: np.random.Generator) -> SamplePath:
    x = solve(model.T, sample_noise(model, rng))
    return SamplePath(x.reshape(model.N + 1, model.d))


def sample_paths(model: LinearModel, rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` stacked paths as rows."""
    v = sample_noise(model, rng, size)
    return solve(model.T, v.T).T


def _split(trials: int, workers: int) -> list[int]:
    base, extra = divmod(trials, workers)
    return [base + (i < extra) for i in range(workers)]


def verify_ae(
    m1: LinearModel,
    m2: LinearModel,
    nm: NoiseMap,
    trials: int = 100,
    seed: int = 0,
    workers: int = 1,
) -> float:
    """Largest relative path deviation |x - y| / |x| over ``trials`` noise draws of model 1."""
    if trials < 1 or workers < 1:
        raise ValueError("trials and workers must be >= 1")
    children = np.random.SeedSequence(seed).spawn(workers)
    counts = _split(trials, workers)

    def run(i: int) -> float:
        if counts[i] == 0:
            return 0.0
        rng = make_rng(children[i])
        v = sample_noise(m1, rng, counts[i])
        w = ae_map(nm, v, check=False)
        x = solve(m1.T, v.T)
        y = solve(m2.T, w.T)
        return float(np.max(np.linalg.norm(x - y, axis=0) / np.linalg.norm(x, axis=0)))

    if workers == 1:
        return run(0)
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return max(ex.map(run, range(workers)))


def report(check: str, max_residual: float, tolerance: float, seed: int | None = None, **details) -> dict:
    """Verification report in the JSON layout shared by the CLI and the scripts."""
    out = {
        "check": check,
        "max_residual": float(max_residual),
        "tolerance": float(tolerance),
        "pass": bool(max_residual <= tolerance),
        "seed": seed,
    }
    out.update(details)
    return out


def mc_covariance_check(samples: np.ndarray, target: np.ndarray, n_se: float = 3.0) -> dict:
    """Compare the zero-mean sample covariance with ``target`` entry by entry.

    The standard error of each entry is the sample standard deviation of the
    products x_i x_j over sqrt(draws). Returns the largest |error| / SE over
    the upper triangle; the check passes when it is at most ``n_se``.
    """
    x = np.asarray(samples, dtype=float)
    n, dim = x.shape
    iu = np.triu_indices(dim)
    prods = x[:, iu[0]] * x[:, iu[1]]
    est = prods.mean(axis=0)
    se = prods.std(axis=0, ddof=1) / np.sqrt(n)
    z = np.abs(est - np.asarray(target)[iu]) / se
    return {
        "max_z": float(z.max()),
        "n_se": n_se,
        "pass": bool(z.max() <= n_se),
        "draws": n,
        "entries": int(z.size),
        "worst_entry": [int(iu[0][z.argmax()]), int(iu[1][z.argmax()])],
    }


def path_covariance_check(model: LinearModel, draws: int = 100_000, seed: int = 0, n_se: float = 3.0) -> dict:
    """Empirical Cov(x) of sampled paths against the exact covariance inv(C^{-1})."""
    x = sample_paths(model, make_rng(seed), draws)
    C = invert(model.precision())
    res = mc_covariance_check(x, C.array, n_se)
    res.update(check="path_covariance", form=model.form.tag, seed=seed)
    return res


def noise_covariance_check(model: LinearModel, draws: int = 100_000, seed: int = 0, n_se: float = 3.0) -> dict:
    v = sample_noise(model, make_rng(seed), draws)
    res = mc_covariance_check(v, model.P.array, n_se)
    res.update(check="noise_covariance", form=model.form.tag, seed=seed)
    return res


# ------------------------------------------------------------ smoothing


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """y_k = H x_k + r_k with r_k ~ N(0, R), the same at every time."""

    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape != (H.shape[0], H.shape[0]):
            raise DimensionMismatch(f"R must be {H.shape[0]}x{H.shape[0]}, got {R.shape}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)

    def simulate(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        L = np.linalg.cholesky(self.R)
        r = rng.standard_normal((states.shape[0], self.H.shape[0])) @ L.T
        return states @ self.H.T + r


@dataclass(frozen=True, eq=False)
class SmoothedEstimates:
    means: np.ndarray  # (N+1, d)
    covs: np.ndarray  # (N+1, d, d)


def _check_measurements(fwd: MarkovParams, y: np.ndarray, meas: MeasurementModel) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if meas.H.shape[1] != fwd.d:
        raise DimensionMismatch(f"H has {meas.H.shape[1]} columns, state dimension is {fwd.d}")
    if y.shape != (fwd.N + 1, meas.H.shape[0]):
        raise DimensionMismatch(f"measurements must have shape {(fwd.N + 1, meas.H.shape[0])}, got {y.shape}")
    return y


def _update(m, P, y, H, R):
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    m = m + K @ (y - H @ m)
    P = P - K @ S @ K.T
    return m, 0.5 * (P + P.T)


def two_filter_smooth(fwd: MarkovParams, measurements: np.ndarray, meas: MeasurementModel) -> SmoothedEstimates:
    """Fuse a forward filter on ``fwd`` with a backward filter on its AE backward model.

    The backward model comes from the closed-form time reversal, which never
    inverts a transition matrix, so singular transitions are fine.
    """
    if fwd.direction != "fwd":
        raise ValueError("two_filter_smooth needs a forward Markov model")
    y = _check_measurements(fwd, measurements, meas)
    N, d = fwd.N, fwd.d
    H, R = meas.H, meas.R
    bwd, _ = markov_fwd_to_bwd(fwd)

    # forward filter: x_k | y_0..y_k, and the prior marginal covariances
    mf, Pf, prior = [None] * (N + 1), [None] * (N + 1), [None] * (N + 1)
    m, P = np.zeros(d), fwd.cov(0)
    prior[0] = P
    for k in range(N + 1):
        if k > 0:
            F = fwd.transition(k)
            m, P = F @ m, F @ P @ F.T + fwd.cov(k)
            prior[k] = F @ prior[k - 1] @ F.T + fwd.cov(k)
        mf[k], Pf[k] = _update(m, P, y[k], H, R)
        m, P = mf[k], Pf[k]

    # backward filter: x_k | y_{k+1}..y_N, run on the backward model
    mb, Pb = [None] * (N + 1), [None] * (N + 1)
    m, P = np.zeros(d), bwd.cov(N)
    for k in range(N, -1, -1):
        if k < N:
            B = bwd.transition(k)
            m, P = B @ m, B @ P @ B.T + bwd.cov(k)
        mb[k], Pb[k] = m, P
        m, P = _update(m, P, y[k], H, R)

    means = np.zeros((N + 1, d))
    covs = np.zeros((N + 1, d, d))
    for k in range(N + 1):
        Jf, Jb = spd_inv(Pf[k]), spd_inv(Pb[k])
        J = Jf + Jb - spd_inv(prior[k])
        covs[k] = spd_inv(0.5 * (J + J.T))
        means[k] = covs[k] @ (Jf @ mf[k] + Jb @ mb[k])
    return SmoothedEstimates(means, covs)


def batch_map(fwd: MarkovParams, measurements: np.ndarray, meas: MeasurementModel) -> np.ndarray:
    """(C^{-1} + H'R^{-1}H)^{-1} H'R^{-1} y for the stacked sequence; shape (N+1, d)."""
    y = _check_measurements(fwd, measurements, meas)
    N = fwd.N
    Hbar = np.kron(np.eye(N + 1), meas.H)
    Rinv = np.kron(np.eye(N + 1), spd_inv(meas.R))
    J = precision(fwd).array + Hbar.T @ Rinv @ Hbar
    x = np.linalg.solve(J, Hbar.T @ Rinv @ y.reshape(-1))
    return x.reshape(N + 1, fwd.d)


def smoother_residual(fwd: MarkovParams, measurements: np.ndarray, meas: MeasurementModel) -> float:
    return relative_error(two_filter_smooth(fwd, measurements, meas).means, batch_map(fwd, measurements, meas))
