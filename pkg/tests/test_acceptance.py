"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest

from cmequiv.blockmat import relative_error
from cmequiv.equivalence import (
    appendix_b_noise_check,
    cml_to_reciprocal,
    compatible_targets,
    extract_model,
    markov_fwd_to_bwd,
    markov_reciprocal_consistency,
    noise_map,
    pe_convert,
    reciprocal_from_markov,
    reciprocal_to_cml_via_T,
)
from cmequiv.errors import Infeasible
from cmequiv.generate import random_cm, random_markov, random_params, random_reciprocal, random_spd, reciprocal_cml
from cmequiv.models import (
    ALL_FORMS,
    CML_FWD_BC1,
    CML_FWD_BC2,
    CMF_BWD,
    CMF_FWD,
    MARKOV_BWD,
    RECIPROCAL_CYCLIC,
    RECIPROCAL_X0,
    RECIPROCAL_XN,
    CMParams,
    assemble,
    cm_membership,
    precision,
)
from cmequiv.sharing import construct_markov_from_reciprocal, markov_pair_share, share_cml
from cmequiv.simulate import (
    MeasurementModel,
    make_rng,
    mc_covariance_check,
    path_covariance_check,
    sample_path,
    smoother_residual,
    verify_ae,
)

from test_equivalence import flat


@pytest.fixture
def verdict(capsys):
    t0 = time.perf_counter()

    def emit(number, title, ok, detail):
        with capsys.disabled():
            status = "PASS" if ok else "FAIL"
            print(f"\n[{status}] criterion {number:>2}: {title} -- {detail} ({time.perf_counter() - t0:.1f}s)")
        assert ok, detail

    return emit


def random_size(rng, form, max_N=8, max_d=3):
    return int(rng.integers(form.min_N if form.min_N > 1 else 1, max_N + 1)), int(rng.integers(1, max_d + 1))


def test_criterion_01_pe_round_trip(verdict):
    rng = np.random.default_rng(101)
    worst, pairs, models = 0.0, set(), 0
    for form in ALL_FORMS:
        for _ in range(200):
            N, d = random_size(rng, form)
            p = random_params(form, N, d, rng)
            c = precision(p)
            models += 1
            for target in compatible_targets(form):
                if N < target.min_N:
                    continue
                q = pe_convert(p, target)
                back = pe_convert(q, form)
                worst = max(worst, relative_error(precision(q), c), relative_error(precision(back), c))
                pairs.add((form.tag, target.tag))
    verdict(1, "PE round trip", worst < 1e-8, f"{models} models, {len(pairs)} ordered pairs, max rel err {worst:.2e}")


def test_criterion_02_closed_forms_vs_generic(verdict):
    rng = np.random.default_rng(102)
    worst = {"fwd->bwd": 0.0, "cml BC1->reciprocal": 0.0, "cml BC2->reciprocal": 0.0}
    for _ in range(100):
        N, d = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        m = random_markov(rng, N, d, singular=rng.choice([None, "zero", "rank1"]))
        bwd, _ = markov_fwd_to_bwd(m)
        worst["fwd->bwd"] = max(worst["fwd->bwd"], relative_error(flat(bwd), flat(extract_model(precision(m), MARKOV_BWD))))
        for bc in ("BC1", "BC2"):
            N, d = int(rng.integers(3, 9)), int(rng.integers(1, 4))
            src = reciprocal_cml(rng, N, d, bc)
            rec, _ = cml_to_reciprocal(src)
            generic = extract_model(precision(src), RECIPROCAL_CYCLIC)
            key = f"cml {bc}->reciprocal"
            worst[key] = max(worst[key], relative_error(flat(rec), flat(generic)))
    ok = max(worst.values()) < 1e-9
    verdict(2, "closed forms == extraction", ok, ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + " (100 each)")


def test_criterion_03_ae_path_identity(verdict):
    rng = np.random.default_rng(103)
    worst, pairs, seed = 0.0, 0, 0
    sources = [random_params(f, 5, 2, rng) for f in ALL_FORMS]
    sources += [random_markov(rng, 5, 2, singular="zero"), random_markov(rng, 5, 2, singular="rank1")]
    sources += [random_markov(rng, 5, 2, "bwd", singular="zero")]
    for src in sources:
        for target in compatible_targets(src.form):
            tgt = pe_convert(src, target)
            nm = noise_map(src, tgt)
            worst = max(worst, verify_ae(assemble(src), assemble(tgt), nm, trials=100, seed=seed))
            pairs += 1
            seed += 1
    # closed-form maps, including an all-zero transition chain
    zero_chain = random_markov(rng, 5, 2, singular="zero")
    zero_chain = type(zero_chain)("fwd", [np.zeros((2, 2))] * 5, zero_chain.noise_covs)
    for m in (zero_chain, random_markov(rng, 6, 3, singular="rank1")):
        bwd, nm = markov_fwd_to_bwd(m)
        worst = max(worst, verify_ae(assemble(m), assemble(bwd), nm, trials=100, seed=seed))
        pairs += 1
    for bc in ("BC1", "BC2"):
        src = reciprocal_cml(rng, 5, 2, bc)
        rec, nm = cml_to_reciprocal(src)
        worst = max(worst, verify_ae(assemble(src), assemble(rec), nm, trials=100, seed=seed))
        pairs += 1
    verdict(3, "AE path identity", worst < 1e-9, f"{pairs} noise maps x 100 trials, max path deviation {worst:.2e}")


def test_criterion_04_noise_relations(verdict):
    rng = np.random.default_rng(104)
    worst = {}

    def record(kind, a, b):
        v = rng.standard_normal((a.N + 1) * a.d)
        r = appendix_b_noise_check(kind, a, b, v) / np.linalg.norm(v)
        worst[kind] = max(worst.get(kind, 0.0), r)

    for i in range(50):
        N, d = int(rng.integers(3, 8)), int(rng.integers(1, 4))
        m = random_markov(rng, N, d)
        record("reciprocal-markov", reciprocal_from_markov(m), m)
        record("cml-markov", pe_convert(m, CML_FWD_BC1 if i % 2 else CML_FWD_BC2), m)
        r = random_reciprocal(rng, N, d)
        record("cmf-reciprocal", pe_convert(r, CMF_FWD), r)
        c = random_cm(rng, CML_FWD_BC1 if i % 2 else CML_FWD_BC2, N, d)
        record("cml-bwdcmf", c, pe_convert(c, CMF_BWD))
    ok = max(worst.values()) < 1e-9
    verdict(4, "noise relation oracles", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (50 each, /|v|)")


def test_criterion_05_whiteness(verdict):
    rng = np.random.default_rng(105)
    exact, mc = 0.0, []
    for target in (RECIPROCAL_X0, RECIPROCAL_XN):
        src = random_reciprocal(rng, 4, 2, target.boundary)
        link = reciprocal_to_cml_via_T(src)
        exact = max(exact, link.whiteness_residual, link.diag_residual)
        model = assemble(src)
        er = np.linalg.cholesky(model.P.array) @ make_rng(500 + len(mc)).standard_normal((10, 100_000))
        e = np.linalg.solve(link.transfer, er).T
        target_cov = np.zeros((10, 10))
        for k in range(5):
            target_cov[2 * k:2 * k + 2, 2 * k:2 * k + 2] = link.params.cov(k)
        mc.append(mc_covariance_check(e, target_cov))
    ok = exact < 1e-8 and all(r["pass"] for r in mc)
    zs = ", ".join(f"{r['max_z']:.2f} at {tuple(r['worst_entry'])}" for r in mc)
    verdict(5, "whiteness of mapped noise", ok, f"exact off-diagonal {exact:.1e}; MC max |z| {zs} (limit 3, 1e5 draws)")


def test_criterion_06_membership_chain(verdict):
    rng = np.random.default_rng(106)
    worst, undetected, perturbations = 0.0, 0, 0
    for i in range(100):
        N, d = int(rng.integers(3, 9)), int(rng.integers(1, 4))
        m = random_markov(rng, N, d)
        cml = pe_convert(m, CML_FWD_BC1 if i % 2 == 0 else CML_FWD_BC2)
        mem = cm_membership(cml, 1e-8)
        worst = max(worst, mem.reciprocal_residual, mem.markov_residual)
        if not (mem.is_reciprocal and mem.is_markov):
            worst = float("inf")
        for j in range(len(cml.cond_gains)):
            gains = [g.copy() for g in cml.cond_gains]
            gains[j][rng.integers(d), rng.integers(d)] += 1e-3
            bent = CMParams("cml", "fwd", cml.boundary, cml.step_gains, gains, cml.noise_covs, cml.boundary_gain)
            perturbations += 1
            undetected += cm_membership(bent, 1e-8).is_reciprocal
    ok = worst <= 1e-8 and undetected == 0
    verdict(6, "membership chain", ok, f"max residual {worst:.1e}; {undetected}/{perturbations} perturbations undetected")


def test_criterion_07_shared_laws(verdict):
    rng = np.random.default_rng(107)
    failures, pairs = 0, 0
    for _ in range(30):
        N, d = int(rng.integers(3, 8)), int(rng.integers(1, 4))
        m = random_markov(rng, N, d)
        r = reciprocal_from_markov(m)
        members = [construct_markov_from_reciprocal(r.R0, r.Rplus, s * m.cov(N), random_spd(rng, d)) for s in (1.0, 1.0, 0.6)]
        for a in members:
            rep = markov_pair_share(m, a)
            same_MN = np.allclose(a.cov(N), m.cov(N), rtol=1e-12)
            pairs += 1
            failures += not (rep.share_reciprocal and rep.share_cml and share_cml(m, a) and rep.share_markov == same_MN)
    try:
        construct_markov_from_reciprocal([[[2.0]]], [[[1.0]], [[1.0]]], [[2.0]], [[1.0]])
        infeasible_k = None
    except Infeasible as exc:
        infeasible_k = exc.k
    ok = failures == 0 and infeasible_k == 1
    verdict(7, "shared reciprocal / CM_L / Markov laws", ok, f"{failures}/{pairs} family pairs wrong; scalar example Infeasible(k={infeasible_k})")


def test_criterion_08_conditional_density(verdict):
    rng = np.random.default_rng(108)
    worst = max(
        markov_reciprocal_consistency(random_markov(rng, int(rng.integers(3, 9)), int(rng.integers(1, 4))))
        for _ in range(100)
    )
    verdict(8, "conditional-density reciprocal parameters", worst < 1e-9, f"100 models, max rel mismatch {worst:.2e}")


def test_criterion_09_two_filter_smoother(verdict):
    rng = np.random.default_rng(109)
    worst, cases = 0.0, 0
    for singular in (None, "zero", "rank1"):
        for d in (1, 2):
            m = random_markov(rng, 5, d, singular=singular)
            meas = MeasurementModel(np.eye(d), 0.3 * np.eye(d))
            y = meas.simulate(sample_path(assemble(m), rng).states, rng)
            worst = max(worst, smoother_residual(m, y, meas))
            cases += 1
    verdict(9, "two-filter smoother == batch MAP", worst < 1e-6, f"{cases} N=5 models incl. singular transitions, max rel err {worst:.1e}")


def test_criterion_10_monte_carlo_covariance(verdict):
    rng = np.random.default_rng(110)
    results = []
    for i, form in enumerate(ALL_FORMS):
        model = assemble(random_params(form, 3, 2, rng))
        results.append(path_covariance_check(model, draws=100_000, seed=1000 + i))
    bad = [r["form"] for r in results if not r["pass"]]
    zmax = max(r["max_z"] for r in results)
    verdict(10, "Monte-Carlo path covariance", not bad, f"11 forms x 1e5 draws, max |z| {zmax:.2f} (limit 3); failing: {bad or 'none'}")
