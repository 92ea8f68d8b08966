"""Command-line front end: gen | convert | verify | sample | smooth-demo.

Reports go to stdout as JSON; model files and noise maps go to files.

Exit codes: 0 pass, 1 verification failed, 2 usage / invalid input,
3 infeasible, 4 incompatible shape, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import errors
from .blockmat import relative_error
from .equivalence import AE_TOL, PE_TOL, NoiseMap, extract_model, noise_map, pe_convert
from .generate import random_markov, random_params
from .models import ALL_FORMS, CMParams, Form, LinearModel, MarkovParams, assemble, cm_membership, load_params, precision, save_params
from .sharing import markov_pair_share, share_cml_residuals
from .simulate import MeasurementModel, batch_map, make_rng, report, sample_path, sample_paths, two_filter_smooth, verify_ae

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_INCOMPATIBLE, EXIT_NUMERICAL = range(6)
TOL_ENV = "CM_MODELS_TOL"
FORM_TAGS = [f.tag for f in ALL_FORMS]


class UsageError(Exception):
    pass


@dataclass
class CliConfig:
    subcommand: str
    inputs: list[str] = field(default_factory=list)
    out: str | None = None
    form: str | None = None
    target: str | None = None
    N: int | None = None
    d: int | None = None
    seed: int = 0
    trials: int = 100
    tol: float | None = None
    ae: bool = False
    mode: str | None = None
    expect: str = "reciprocal"
    singular: str | None = None

    def __post_init__(self):
        if self.tol is not None and not self.tol > 0:
            raise UsageError("--tol must be > 0")
        if self.trials < 1:
            raise UsageError("--trials must be >= 1")

    def tolerance(self, default: float) -> float:
        """--tol, else $CM_MODELS_TOL, else the check's own default."""
        if self.tol is not None:
            return self.tol
        env = os.environ.get(TOL_ENV)
        if env:
            try:
                val = float(env)
            except ValueError:
                raise UsageError(f"{TOL_ENV}={env!r} is not a number") from None
            if not val > 0:
                raise UsageError(f"{TOL_ENV} must be > 0")
            return val
        return default


def _form(tag: str) -> Form:
    try:
        return Form.parse(tag)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load(path: str):
    try:
        return load_params(path)
    except (OSError, json.JSONDecodeError, errors.InvalidParams, ValueError) as exc:
        raise UsageError(f"cannot read model {path}: {exc}") from None


def _emit(rep: dict) -> int:
    print(json.dumps(rep, indent=1))
    return EXIT_PASS if rep["pass"] else EXIT_FAIL


def noise_map_path(out: str) -> Path:
    p = Path(out)
    return p.with_name(p.stem + ".noisemap.json")


# ------------------------------------------------------------ subcommands


def cmd_gen(cfg: CliConfig) -> int:
    form = _form(cfg.form)
    if cfg.N is None or cfg.d is None:
        raise UsageError("gen needs --N and --d")
    if cfg.N < form.min_N or cfg.d < 1 or cfg.N > 64 or cfg.d > 16:
        raise UsageError(f"{form.tag} needs {form.min_N} <= N <= 64 and 1 <= d <= 16")
    rng = make_rng(cfg.seed)
    if form.family == "reciprocal":
        # reciprocal parameters from a random Markov model are always valid
        params = extract_model(precision(random_markov(rng, cfg.N, cfg.d)), form)
    elif form.family == "markov" and cfg.singular:
        params = random_params(form, cfg.N, cfg.d, rng, singular=cfg.singular)
    else:
        params = random_params(form, cfg.N, cfg.d, rng)
    assemble(params)
    save_params(params, cfg.out)
    print(json.dumps({"written": cfg.out, "form": form.tag, "N": cfg.N, "d": cfg.d, "seed": cfg.seed}))
    return EXIT_PASS


def cmd_convert(cfg: CliConfig) -> int:
    if len(cfg.inputs) != 1:
        raise UsageError("convert takes exactly one input model")
    src = _load(cfg.inputs[0])
    target = _form(cfg.target)
    tol = cfg.tolerance(PE_TOL)
    out = pe_convert(src, target, tol)
    save_params(out, cfg.out)
    info = {"written": cfg.out, "source": src.form.tag, "target": target.tag}
    if cfg.ae:
        nm = noise_map(src, out, tol)
        path = noise_map_path(cfg.out)
        path.write_text(json.dumps(nm.to_json_dict()))
        info["noise_map"] = str(path)
    print(json.dumps(info))
    return EXIT_PASS


def _verify_pe(cfg: CliConfig) -> dict:
    if len(cfg.inputs) != 2:
        raise UsageError("--mode pe takes two model files")
    a, b = (_load(p) for p in cfg.inputs)
    if (a.N, a.d) != (b.N, b.d):
        raise UsageError("models have different (N, d)")
    res = relative_error(precision(b), precision(a))
    return report("pe", res, cfg.tolerance(PE_TOL), None, source=a.form.tag, target=b.form.tag)


def _verify_ae(cfg: CliConfig) -> dict:
    tol = cfg.tolerance(AE_TOL)
    if len(cfg.inputs) == 1:
        try:
            nm = NoiseMap.from_json_dict(json.loads(Path(cfg.inputs[0]).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise UsageError(f"cannot read noise map {cfg.inputs[0]}: {exc}") from None
        pe_res = nm.pe_residual()
        if pe_res > cfg.tolerance(PE_TOL):
            return report("ae", float("inf"), tol, cfg.seed, pe_residual=pe_res, reason="noise map is not PE")
    elif len(cfg.inputs) == 2:
        a, b = (_load(p) for p in cfg.inputs)
        try:
            nm = noise_map(a, b, cfg.tolerance(PE_TOL))
        except errors.NotEquivalent as exc:
            return report("ae", float("inf"), tol, cfg.seed, reason=str(exc))
    else:
        raise UsageError("--mode ae takes a noise-map file or two model files")
    m1 = LinearModel(nm.T1, nm.P1, nm.source_form)
    m2 = LinearModel(nm.T2, nm.P2, nm.target_form)
    dev = verify_ae(m1, m2, nm, cfg.trials, cfg.seed)
    return report(
        "ae", dev, tol, cfg.seed,
        trials=cfg.trials, source=nm.source_form.tag, target=nm.target_form.tag,
    )


def _verify_membership(cfg: CliConfig) -> dict:
    if len(cfg.inputs) != 1:
        raise UsageError("--mode membership takes one CM model file")
    p = _load(cfg.inputs[0])
    if not isinstance(p, CMParams):
        raise UsageError("--mode membership needs a CM_L / CM_F model")
    tol = cfg.tolerance(PE_TOL)
    mem = cm_membership(p, tol)
    res = mem.reciprocal_residual if cfg.expect == "reciprocal" else max(mem.reciprocal_residual, mem.markov_residual)
    return report(
        "membership", res, tol, None,
        expect=cfg.expect, is_reciprocal=mem.is_reciprocal, is_markov=mem.is_markov,
        reciprocal_residual=mem.reciprocal_residual, markov_residual=mem.markov_residual,
    )


def _verify_share(cfg: CliConfig) -> dict:
    if len(cfg.inputs) != 2:
        raise UsageError("--mode share takes two model files")
    a, b = (_load(p) for p in cfg.inputs)
    tol = cfg.tolerance(PE_TOL)
    try:
        if all(isinstance(m, MarkovParams) and m.direction == "fwd" for m in (a, b)):
            rep = markov_pair_share(a, b, tol)
            res = max(rep.residuals["R0"], rep.residuals["Rplus"])
            return report(
                "share", res, tol, None,
                share_reciprocal=rep.share_reciprocal, share_cml=rep.share_cml,
                share_markov=rep.share_markov, residuals=rep.residuals,
            )
        res = share_cml_residuals(a, b)
    except errors.DimensionMismatch as exc:
        raise UsageError(str(exc)) from None
    return report("share", res, tol, None, share_cml=bool(res <= tol))


def cmd_verify(cfg: CliConfig) -> int:
    modes = {"pe": _verify_pe, "ae": _verify_ae, "membership": _verify_membership, "share": _verify_share}
    return _emit(modes[cfg.mode](cfg))


def cmd_sample(cfg: CliConfig) -> int:
    if len(cfg.inputs) != 1:
        raise UsageError("sample takes one model file")
    p = _load(cfg.inputs[0])
    model = assemble(p)
    rng = make_rng(cfg.seed)
    paths = sample_paths(model, rng, cfg.trials).reshape(cfg.trials, p.N + 1, p.d)
    summary = {"form": p.form.tag, "seed": cfg.seed, "paths": cfg.trials}
    if cfg.out:
        Path(cfg.out).write_text(json.dumps({**summary, "states": paths.tolist()}))
        summary["written"] = cfg.out
    else:
        summary["first_path"] = paths[0].tolist()
    print(json.dumps(summary))
    return EXIT_PASS


def cmd_smooth_demo(cfg: CliConfig) -> int:
    N = 5 if cfg.N is None else cfg.N
    d = 1 if cfg.d is None else cfg.d
    if N < 1 or d < 1:
        raise UsageError("smooth-demo needs N >= 1 and d >= 1")
    rng = make_rng(cfg.seed)
    fwd = random_markov(rng, N, d, singular=cfg.singular)
    meas = MeasurementModel(np.eye(d), 0.25 * np.eye(d))
    truth = sample_path(assemble(fwd), rng).states
    y = meas.simulate(truth, rng)
    est = two_filter_smooth(fwd, y, meas)
    ref = batch_map(fwd, y, meas)
    rep = report(
        "two_filter_vs_batch_map", relative_error(est.means, ref), cfg.tolerance(1e-6), cfg.seed,
        N=N, d=d, singular=cfg.singular,
        rmse_smoothed=float(np.sqrt(np.mean((est.means - truth) ** 2))),
        rmse_measurements=float(np.sqrt(np.mean((y - truth) ** 2))),
    )
    return _emit(rep)


COMMANDS = {
    "gen": cmd_gen,
    "convert": cmd_convert,
    "verify": cmd_verify,
    "sample": cmd_sample,
    "smooth-demo": cmd_smooth_demo,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmequiv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, seed=True, tol=True):
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if tol:
            p.add_argument("--tol", type=float, default=None, help=f"tolerance (default from ${TOL_ENV} or the check)")

    p = sub.add_parser("gen", help="write a random valid model")
    p.add_argument("--form", required=True, choices=FORM_TAGS)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--singular", choices=["zero", "rank1"], help="degrade one Markov transition block")
    p.add_argument("--out", required=True)
    common(p, tol=False)

    p = sub.add_parser("convert", help="PE conversion to another form")
    p.add_argument("inputs", nargs=1)
    p.add_argument("--target", required=True, choices=FORM_TAGS)
    p.add_argument("--out", required=True)
    p.add_argument("--ae", action="store_true", help="also write the noise map (T1, P1, T2, P2) next to --out")
    common(p, seed=False)

    p = sub.add_parser("verify", help="run a check and print a JSON report")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--mode", required=True, choices=["pe", "ae", "membership", "share"])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--expect", choices=["reciprocal", "markov"], default="reciprocal")
    common(p)

    p = sub.add_parser("sample", help="draw sample paths from a model")
    p.add_argument("inputs", nargs=1)
    p.add_argument("--trials", type=int, default=1, help="number of paths")
    p.add_argument("--out")
    common(p, tol=False)

    p = sub.add_parser("smooth-demo", help="two-filter smoother against batch MAP")
    p.add_argument("--N", type=int, default=5)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--singular", choices=["zero", "rank1"])
    common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    try:
        cfg = CliConfig(**{k.replace("-", "_"): v for k, v in vars(ns).items()})
        return COMMANDS[cfg.subcommand](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except errors.Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except errors.IncompatibleShape as exc:
        print(f"incompatible: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (errors.FactorizationFailure, errors.NotSPD, errors.Singular, errors.SingularT,
            errors.NonSymmetric, errors.NotEquivalent, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except errors.CMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
