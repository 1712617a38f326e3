"""Command-line entry point: ``directlik {simulate,score,search,validate,check,kl}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .benchmark import select_lambda
from .errors import DirectLikError, MatrixNotPDError, IllConditionedError, LineSearchStall, SchemaError
from .fit import score_dag
from .graph import generate_candidates, load_candidates, load_dag
from .likelihood import ScoreConfig, fit_nuisance_kl
from .model import (Mode, ScmParams, empirical_cov, env_covariance, load_manifest, load_params,
                    save_params, simulate, write_manifest, write_samples)
from .presets import PRESETS, make_preset
from .search import run_search
from .theory import VARIANTS, check_assumptions

log = logging.getLogger("directlik")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class InputError(Exception):
    pass


def _dump(obj, out=None):
    text = json.dumps(obj, indent=1, sort_keys=False, default=_jsonable) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    return text


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, (set, frozenset, tuple)):
        return sorted(v) if isinstance(v, (set, frozenset)) else list(v)
    if isinstance(v, Mode):
        return v.value
    raise TypeError(f"not serialisable: {type(v).__name__}")


def _add_cfg_flags(ap):
    ap.add_argument("--lambda", dest="lam", type=float, default=0.0, help="moral-edge penalty")
    ap.add_argument("--h-bar", type=int, default=1, help="number of latent columns")
    ap.add_argument("--c-psi", type=float, default=1.0, help="bound on latent perturbation")
    ap.add_argument("--mode", default="iid-latent",
                    choices=["iid-latent", "unperturbed", "single-param"])
    ap.add_argument("--eps1", type=float, default=1e-6)
    ap.add_argument("--eps2", type=float, default=1e-2)
    ap.add_argument("--opt-tol", type=float, default=1e-3)


def _cfg(args) -> ScoreConfig:
    return ScoreConfig(lam=args.lam, h_bar=args.h_bar, c_psi=args.c_psi, mode=args.mode,
                       eps1=args.eps1, eps2=args.eps2, opt_tolerance=args.opt_tol)


def _candidates(args, samples):
    if args.candidates and args.auto_candidates:
        raise InputError("give either --candidates or --auto-candidates, not both")
    if args.candidates:
        return load_candidates(args.candidates)
    if args.auto_candidates:
        x = np.vstack(samples)
        return generate_candidates(empirical_cov(x), x.shape[0], restarts=args.restarts,
                                   include_mec=True, neighbours=False, rng_seed=args.seed)
    raise InputError("no candidates: pass --candidates FILE or --auto-candidates")


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    if args.config:
        try:
            conf = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{args.config}: {exc}") from exc
    else:
        conf = {}
    preset_name = args.preset or conf.get("preset")
    seed = args.seed if args.seed is not None else conf.get("seed")
    if seed is None:
        raise InputError("a seed is required (--seed or 'seed' in the config)")
    noise, latent, xi = "gaussian", None, 0.0
    if preset_name:
        t = args.t if args.t is not None else int(conf.get("t", 64))
        preset = make_preset(preset_name, seed=seed, t=t, psi_law=conf.get("psi_law"))
        params, ns = preset.params, preset.n_per_env
        noise, latent, xi = preset.noise, preset.latent_cov, preset.xi
        meta = {"preset": preset_name, "version": preset.version, "seed": seed, "t": t}
    elif "params" in conf:
        params = ScmParams.from_dict(conf["params"])
        ns = conf.get("n")
        if ns is None:
            raise InputError("explicit params need 'n' (samples per environment)")
        ns = [int(ns)] * params.m if np.isscalar(ns) else list(ns)
        noise = conf.get("noise", "gaussian")
        xi = float(conf.get("xi", 0.0))
        meta = {"seed": seed}
    else:
        raise InputError("config must name a preset or give explicit params")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = simulate(params, ns, noise, latent, xi, rng_seed=seed)
    entries = []
    for e, (x, d) in enumerate(sim):
        name = f"env_{e + 1:02d}.csv"
        write_samples(out / name, x, comment=d.label or f"environment {e + 1}")
        entries.append({"csv": name, "n": int(x.shape[0]), "do_set": sorted(d.do_set),
                        "label": d.label})
    write_manifest(out / "manifest.json", entries, meta)
    save_params(params, out / "params.json")
    if preset_name and preset.candidates is not None:
        from .graph import save_candidates
        save_candidates(preset.candidates, out / "candidates.json")
    print(f"wrote {len(entries)} environments to {out}")
    return EXIT_OK


def cmd_score(args) -> int:
    _, data, _ = load_manifest(args.manifest)
    dag = load_dag(args.dag)
    res = score_dag(dag, data, _cfg(args))
    sys.stdout.write(_dump(res.to_dict(), args.out))
    return EXIT_OK if res.converged else EXIT_NUMERIC


def _summary(rep) -> str:
    rows = [f"{'rank':>4}  {'score':>14}  {'nll':>14}  {'moral':>5}  dag"]
    for k, (d, r) in enumerate(rep.final, 1):
        rows.append(f"{k:>4}  {r.score:14.8f}  {r.nll:14.8f}  {r.moral_edges:>5}  {d}")
    sel = rep.selected
    if sel is not None:
        rows.append(f"selected: {sel[0]}")
    return "\n".join(rows) + "\n"


def cmd_search(args) -> int:
    samples, data, _ = load_manifest(args.manifest)
    cands = _candidates(args, samples)
    rep = run_search(cands, data, _cfg(args), jobs=args.jobs)
    _dump(rep.to_dict(), args.out)
    sys.stdout.write(_summary(rep))
    if rep.selected is None:
        return EXIT_NUMERIC
    return EXIT_OK


def _parse_grid(text):
    try:
        grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InputError(f"bad lambda grid {text!r}") from exc
    if not grid or any(v < 0 for v in grid):
        raise InputError("lambda grid must be a nonempty list of nonnegative numbers")
    return grid


def cmd_validate(args) -> int:
    samples, data, _ = load_manifest(args.manifest)
    cands = _candidates(args, samples)
    cfg = _cfg(args)
    grid = _parse_grid(args.lambda_grid) if args.lambda_grid else None
    try:
        hold = select_lambda(samples, [d.do_set for d in data], cands, cfg, grid,
                             frac=args.holdout_frac, shuffle_seed=args.shuffle_seed, jobs=args.jobs)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    refit = run_search(cands, data, cfg.replace(lam=hold.best_lambda), jobs=args.jobs)
    train_entry = next(r for r in hold.path if r["lambda"] == hold.best_lambda)
    report = {
        "selected_lambda": hold.best_lambda,
        "holdout_frac": args.holdout_frac,
        "shuffle_seed": args.shuffle_seed,
        "path": [{"lambda": r["lambda"], "validation_nll": r["validation_nll"],
                  "score": r["score"], "dag": r["dag"].to_dict()} for r in hold.path],
        "train_model": {"dag": train_entry["dag"].to_dict(),
                        "validation_nll": train_entry["validation_nll"]},
        "full_data_model": None if refit.selected is None else refit.selected[1].to_dict(),
    }
    _dump(report, args.out)
    for r in hold.path:
        mark = "*" if r["lambda"] == hold.best_lambda else " "
        print(f"{mark} lambda={r['lambda']:<12.6g} validation_nll={r['validation_nll']:.8f}  {r['dag']}")
    return EXIT_OK


def cmd_check(args) -> int:
    params = load_params(args.params)
    try:
        rep = check_assumptions(params, args.variant, args.c_psi)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    _dump(rep.to_dict(), args.out)
    print(rep.summary())
    return EXIT_OK


def cmd_kl(args) -> int:
    params = load_params(args.params)
    if not 0 <= args.env < params.m:
        raise InputError(f"environment index {args.env} out of range (m={params.m})")
    if args.manifest:
        samples, _, _ = load_manifest(args.manifest)
        sigma = empirical_cov(samples[args.env])
    else:
        sigma = env_covariance(params, args.env)
    zeta, psi, kl = fit_nuisance_kl(sigma, params.b, params.gamma, params.w1, args.c_zeta, args.c_psi)
    _dump({"env": args.env, "zeta": zeta, "psi": psi, "kl": kl}, args.out)
    print(f"env {args.env}: zeta={zeta:.8g} psi={psi:.8g} kl={kl:.6e}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="directlik", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a preset or explicit parameters")
    p.add_argument("config", nargs="?", help="JSON config with 'preset' or 'params'")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--t", type=int, default=None, help="interventional sample size is 5t")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("score", help="fit and score one DAG")
    p.add_argument("manifest")
    p.add_argument("dag")
    _add_cfg_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    for name, func in (("search", cmd_search), ("validate", cmd_validate)):
        p = sub.add_parser(name, help="score candidates" if name == "search"
                           else "choose lambda by observational holdout")
        p.add_argument("manifest")
        p.add_argument("--candidates")
        p.add_argument("--auto-candidates", action="store_true")
        p.add_argument("--restarts", type=int, default=100, help="hill-climb restarts")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        _add_cfg_flags(p)
        p.add_argument("--out")
        if name == "validate":
            p.add_argument("--lambda-grid", help="comma separated; default scales with log(N)/N")
            p.add_argument("--holdout-frac", type=float, default=0.2)
            p.add_argument("--shuffle-seed", type=int, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("check", help="evaluate identifiability assumptions")
    p.add_argument("params")
    p.add_argument("--variant", default="A1-4", help=", ".join(VARIANTS))
    p.add_argument("--c-psi", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("kl", help="best single-parameter perturbation at fixed (B, Gamma, w1)")
    p.add_argument("params")
    p.add_argument("--env", type=int, default=1)
    p.add_argument("--manifest", help="use the sample covariance of this dataset")
    p.add_argument("--c-zeta", type=float, default=10.0)
    p.add_argument("--c-psi", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_kl)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MatrixNotPDError, IllConditionedError, LineSearchStall, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, DirectLikError, OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
