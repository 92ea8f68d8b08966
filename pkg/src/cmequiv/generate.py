"""Random, valid parameter sets for every model form."""

from __future__ import annotations

import numpy as np

from .errors import InvalidParams
from .models import CMParams, Form, MarkovParams, ModelParams, ReciprocalParams, spd_inv


def random_spd(rng: np.random.Generator, d: int, eps: float = 0.5) -> np.ndarray:
    a = rng.standard_normal((d, d))
    m = a @ a.T + eps * np.eye(d)
    return 0.5 * (m + m.T)


def random_gain(rng: np.random.Generator, d: int, scale: float = 0.6) -> np.ndarray:
    return scale * rng.standard_normal((d, d))


def random_markov(
    rng: np.random.Generator,
    N: int,
    d: int,
    direction: str = "fwd",
    singular: str | None = None,
    singular_at: int | None = None,
) -> MarkovParams:
    """Random Markov model. ``singular`` = 'zero' or 'rank1' degrades one transition block."""
    transitions = [random_gain(rng, d) for _ in range(N)]
    if singular is not None:
        i = int(rng.integers(N)) if singular_at is None else singular_at
        if singular == "zero":
            transitions[i] = np.zeros((d, d))
        elif singular == "rank1":
            u, v = rng.standard_normal(d), rng.standard_normal(d)
            transitions[i] = 0.6 * np.outer(u, v) / np.sqrt(d)
        else:
            raise InvalidParams(f"unknown singular mode {singular!r}")
    covs = [random_spd(rng, d) for _ in range(N + 1)]
    return MarkovParams(direction, transitions, covs)


def random_cm(rng: np.random.Generator, form: Form, N: int, d: int) -> CMParams:
    n_cond = N - 1 if form.family == "cml" else N
    return CMParams(
        form.family,
        form.direction,
        form.boundary,
        [random_gain(rng, d) for _ in range(N - 1)],
        [random_gain(rng, d, 0.4) for _ in range(n_cond)],
        [random_spd(rng, d) for _ in range(N + 1)],
        random_gain(rng, d, 0.4) if form.family == "cml" else None,
    )


def reciprocal_cml(rng: np.random.Generator, N: int, d: int, boundary: str = "BC1", markov: bool = False) -> CMParams:
    """Random forward CM_L model whose conditioning gains obey the reciprocity condition.

    With ``markov`` the boundary gain also satisfies the Markov condition.
    """
    steps = [random_gain(rng, d) for _ in range(N - 1)]
    covs = [random_spd(rng, d) for _ in range(N + 1)]
    q = [None] * N
    q[N - 1] = random_gain(rng, d, 0.4)
    for k in range(N - 2, 0, -1):
        # G_k^{-1} G_{k,N} = G'_{k+1,k} G_{k+1}^{-1} G_{k+1,N}
        q[k] = covs[k] @ steps[k].T @ spd_inv(covs[k + 1]) @ q[k + 1]
    if markov:
        if boundary == "BC1":
            gain = covs[N] @ q[1].T @ spd_inv(covs[1]) @ steps[0]
        else:
            gain = covs[0] @ steps[0].T @ spd_inv(covs[1]) @ q[1]
    else:
        gain = random_gain(rng, d, 0.4)
    return CMParams("cml", "fwd", boundary, steps, q[1:], covs, gain)


def random_reciprocal(rng: np.random.Generator, N: int, d: int, boundary: str = "cyclic") -> ReciprocalParams:
    """Random reciprocal model that is in general not Markov."""
    from .equivalence import cml_to_reciprocal, extract_model
    from .models import precision

    src = reciprocal_cml(rng, N, d, "BC1")
    if boundary == "cyclic":
        return cml_to_reciprocal(src)[0]
    return extract_model(precision(src), Form("reciprocal", "fwd", boundary))


def random_params(form: Form | str, N: int, d: int, rng: np.random.Generator, **kwargs) -> ModelParams:
    """Random valid parameters for ``form``; extra keywords go to the Markov generator."""
    form = Form.parse(form) if isinstance(form, str) else form
    if N < form.min_N:
        raise InvalidParams(f"{form.tag} needs N >= {form.min_N}")
    if d < 1:
        raise InvalidParams("d must be >= 1")
    if form.family == "markov":
        return random_markov(rng, N, d, form.direction, **kwargs)
    if form.family == "reciprocal":
        return random_reciprocal(rng, N, d, form.boundary)
    return random_cm(rng, form, N, d)


def reciprocal_from_random_markov(rng: np.random.Generator, N: int, d: int) -> ReciprocalParams:
    """Cyclic reciprocal parameters of a random Markov model (always valid)."""
    from .equivalence import reciprocal_from_markov

    return reciprocal_from_markov(random_markov(rng, N, d))
