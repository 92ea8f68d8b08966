"""Markov models whose sequences share a reciprocal / CM_L transition law.

Two models share their reciprocal (equivalently, CM_L) law when the interior
band A_1..A_{N-1}, B_0..B_{N-1} of their precisions agree; they additionally
share the Markov transition law when their final noise covariances M_N agree.
The initial covariance M_0 never affects either.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blockmat import DEFAULT_TOL, EntryView, StructureKind, is_compatible, classify_structure
from .errors import DimensionMismatch, IncompatibleShape, Infeasible, InvalidParams
from .models import MarkovParams, ModelParams, precision, spd_inv


@dataclass(frozen=True)
class SharedLawReport:
    share_reciprocal: bool
    share_cml: bool
    share_markov: bool
    residuals: dict = field(default_factory=dict)


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), np.finfo(float).tiny)
    return float(np.linalg.norm(a - b) / scale)


def _check_dims(m1: ModelParams, m2: ModelParams) -> None:
    if (m1.N, m1.d) != (m2.N, m2.d):
        raise DimensionMismatch(f"(N, d) = {(m1.N, m1.d)} vs {(m2.N, m2.d)}")


def _band_residuals(m1: ModelParams, m2: ModelParams) -> dict:
    c1, c2 = precision(m1), precision(m2)
    N = m1.N
    out = {}
    out["A_interior"] = max(_rel(c1.block(k, k), c2.block(k, k)) for k in range(1, N)) if N > 1 else 0.0
    out["B"] = max(_rel(c1.block(k, k + 1), c2.block(k, k + 1)) for k in range(N))
    return out


def markov_pair_share(m1: MarkovParams, m2: MarkovParams, tol: float = DEFAULT_TOL) -> SharedLawReport:
    """Do two forward Markov models obey the same reciprocal / Markov transition law?"""
    _check_dims(m1, m2)
    if m1.direction != "fwd" or m2.direction != "fwd":
        raise InvalidParams("markov_pair_share compares forward models")
    N = m1.N
    res = {}
    # R^0_k and R^+_k of the two models (k = 1..N-1 and 0..N-1)
    r0 = lambda m, k: spd_inv(m.cov(k)) + m.transition(k + 1).T @ spd_inv(m.cov(k + 1)) @ m.transition(k + 1)
    rp = lambda m, k: m.transition(k + 1).T @ spd_inv(m.cov(k + 1))
    res["R0"] = max((_rel(r0(m1, k), r0(m2, k)) for k in range(1, N)), default=0.0)
    res["Rplus"] = max(_rel(rp(m1, k), rp(m2, k)) for k in range(N))
    res["M_N"] = _rel(m1.cov(N), m2.cov(N))
    rec = max(res["R0"], res["Rplus"]) <= tol
    return SharedLawReport(rec, rec, rec and res["M_N"] <= tol, res)


def construct_markov_from_reciprocal(R0, Rplus, M_N, M_0) -> MarkovParams:
    """Forward Markov model with the given interior reciprocal law and boundary covariances.

    ``R0`` holds R^0_k for k = 1..N-1 and ``Rplus`` holds R^+_k for k = 0..N-1.
    Runs M_{k+1,k} = M_{k+1} (R^+_k)', M_k^{-1} = R^0_k - R^+_k M_{k+1} (R^+_k)'
    for k = N-1 down to 1, then M_{1,0} = M_1 (R^+_0)'.
    """
    R0 = [np.atleast_2d(np.asarray(r, dtype=float)) for r in R0]
    Rplus = [np.atleast_2d(np.asarray(r, dtype=float)) for r in Rplus]
    N = len(Rplus)
    if N < 2 or len(R0) != N - 1:
        raise InvalidParams(f"need N >= 2 with N-1 R0 blocks; got {len(R0)} R0 and {N} Rplus")
    M = [None] * (N + 1)
    F = [None] * N  # F[k] = M_{k+1,k}
    M[N] = np.atleast_2d(np.asarray(M_N, dtype=float))
    M[0] = np.atleast_2d(np.asarray(M_0, dtype=float))
    for k in range(N - 1, 0, -1):
        F[k] = M[k + 1] @ Rplus[k].T
        info = R0[k - 1] - Rplus[k] @ M[k + 1] @ Rplus[k].T
        info = 0.5 * (info + info.T)
        try:
            M[k] = spd_inv(info)
        except np.linalg.LinAlgError:
            raise Infeasible(k, f"R^0_{k} - R^+_{k} M_{k+1} (R^+_{k})' is not positive definite") from None
    F[0] = M[1] @ Rplus[0].T
    return MarkovParams("fwd", F, M)


def share_cml(m1: ModelParams, m2: ModelParams, tol: float = DEFAULT_TOL) -> bool:
    """True iff the two sequences obey the same CM_L transition law.

    Besides the interior band, the CM_L law depends on the border blocks
    D_1..D_{N-2}; those are compared too (they vanish for reciprocal models).
    """
    return share_cml_residuals(m1, m2) <= tol


def share_cml_residuals(m1: ModelParams, m2: ModelParams) -> float:
    _check_dims(m1, m2)
    c1, c2 = precision(m1), precision(m2)
    for c in (c1, c2):
        if not is_compatible(classify_structure(c), StructureKind.CML_SHAPE):
            raise IncompatibleShape("share_cml needs CM_L-shape compatible precisions")
    res = _band_residuals(m1, m2)
    v1 = EntryView.from_matrix(c1, StructureKind.CML_SHAPE)
    v2 = EntryView.from_matrix(c2, StructureKind.CML_SHAPE)
    scale = max(c1.norm(), c2.norm())
    d_res = max((np.linalg.norm(v1.D[k] - v2.D[k]) / scale for k in range(1, m1.N - 1)), default=0.0)
    return float(max(res["A_interior"], res["B"], d_res))
