"""Command-line frontend.

Subcommands: ``gen2d`` (synthetic datasets), ``sample`` (run a sampler from a
JSON config), ``eval`` (metrics), ``tilt`` (tilt estimation / energy model
export), ``classify`` (minimum-energy decisions from frozen model files).

Exit codes: 0 success, 2 configuration/input error, 1 runtime error.  Every
``sample`` run writes a manifest whose config echo reproduces the run
bit-identically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .baselines import KineticLangevinBAOAB, SigmaCFDM
from .datasets import Dataset2DSpec, generate_2d, load_matrix, save_csv
from .errors import DimensionMismatch, MMSOLDError, ParseError
from .gmm import SmoothingConfig, TrainingSet
from .metrics import MetricReport, dup_rate, kid_poly, recall_knn, sliced_w2
from .rng import TAG_MODEL, SubstreamKey
from .sampler import MMSOLD
from .tilting import EnergyModel, build_energy_model, estimate_tilting

METHODS = ("mmsold", "cfdm", "baoab")


class ConfigError(ValueError):
    """A run configuration is malformed."""


# --------------------------------------------------------------------------
# Config schema: {key: (required, validator)}; unknown keys are rejected.

def _typed(kind, name):
    def check(v):
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, kind) or isinstance(v, bool):
            raise ConfigError(f"{name} must be {kind.__name__}, got {v!r}")
        return v
    return check


def _choice(options, name):
    def check(v):
        if v not in options:
            raise ConfigError(f"{name} must be one of {options}, got {v!r}")
        return v
    return check


def _validate_section(doc, schema, section):
    if not isinstance(doc, dict):
        raise ConfigError(f"{section} must be a JSON object")
    unknown = set(doc) - set(schema)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")
    out = {}
    for field, (required, check) in schema.items():
        if field in doc:
            out[field] = check(doc[field]) if check else doc[field]
        elif required:
            raise ConfigError(f"{section} is missing required key {field!r}")
    return out


_DATASET_SCHEMA = {
    "path": (False, _typed(str, "dataset.path")),
    "kind": (False, _choice(("checkerboard", "two_spirals", "circle"),
                            "dataset.kind")),
    "n": (False, _typed(int, "dataset.n")),
    "seed": (False, _typed(int, "dataset.seed")),
    "noise": (False, _typed(float, "dataset.noise")),
    "turns": (False, _typed(int, "dataset.turns")),
    "equispaced": (False, None),
}

_SMOOTHING_SCHEMA = {
    "delta": (True, _typed(float, "smoothing.delta")),
    "sigma": (False, _typed(float, "smoothing.sigma")),
    "mc_samples": (False, _typed(int, "smoothing.mc_samples")),
}

_SAMPLER_SCHEMA = {
    "particles": (True, _typed(int, "sampler.particles")),
    "iterations": (True, _typed(int, "sampler.iterations")),
    "step_size": (True, _typed(float, "sampler.step_size")),
    "scheme": (False, _choice(("lm", "em"), "sampler.scheme")),
    "score_mode": (False, _choice(("full", "nearest_neighbor"),
                                  "sampler.score_mode")),
    "neighbors": (False, _typed(int, "sampler.neighbors")),
    "correction": (False, _typed(int, "sampler.correction")),
}

_CFDM_SCHEMA = {
    "particles": (True, _typed(int, "cfdm.particles")),
    "steps": (False, _typed(int, "cfdm.steps")),
    "t_start": (False, _typed(float, "cfdm.t_start")),
    "t_end": (False, _typed(float, "cfdm.t_end")),
    "preset": (False, _choice(("straight", "ou"), "cfdm.preset")),
    "alpha": (False, _typed(float, "cfdm.alpha")),
}

_BAOAB_SCHEMA = {
    "particles": (True, _typed(int, "baoab.particles")),
    "iterations": (True, _typed(int, "baoab.iterations")),
    "step_size": (True, _typed(float, "baoab.step_size")),
    "friction": (False, _typed(float, "baoab.friction")),
    "tilt": (False, _choice(("empirical", "leave_one_out", "none"),
                            "baoab.tilt")),
    "zeta": (False, _typed(float, "baoab.zeta")),
}

_TOP_SCHEMA = {
    "method": (True, _choice(METHODS, "method")),
    "seed": (False, _typed(int, "seed")),
    "output_dir": (False, _typed(str, "output_dir")),
    "dataset": (True, None),
    "smoothing": (True, None),
    "sampler": (False, None),
    "cfdm": (False, None),
    "baoab": (False, None),
}


def validate_config(doc: dict) -> dict:
    top = _validate_section(doc, _TOP_SCHEMA, "config")
    top["dataset"] = _validate_section(doc["dataset"], _DATASET_SCHEMA,
                                       "dataset")
    ds = top["dataset"]
    if ("path" in ds) == ("kind" in ds):
        raise ConfigError("dataset needs exactly one of 'path' or 'kind'")
    if "kind" in ds and "n" not in ds:
        raise ConfigError("generated datasets need dataset.n")
    top["smoothing"] = _validate_section(doc["smoothing"], _SMOOTHING_SCHEMA,
                                         "smoothing")
    method = top["method"]
    section = {"mmsold": "sampler", "cfdm": "cfdm", "baoab": "baoab"}[method]
    if section not in doc:
        raise ConfigError(f"method {method!r} needs a {section!r} section")
    schemas = {"sampler": _SAMPLER_SCHEMA, "cfdm": _CFDM_SCHEMA,
               "baoab": _BAOAB_SCHEMA}
    for name, schema in schemas.items():
        if name in doc:
            top[name] = _validate_section(doc[name], schema, name)
    return top


def _resolve_dataset(ds: dict) -> TrainingSet:
    if "path" in ds:
        return TrainingSet(load_matrix(ds["path"]))
    spec = Dataset2DSpec(
        kind=ds["kind"], n_samples=ds["n"], seed=ds.get("seed", 0),
        noise=ds.get("noise"), turns=ds.get("turns", 2),
        equispaced=ds.get("equispaced", True),
    )
    return generate_2d(spec)


# --------------------------------------------------------------------------
# Subcommands.

def cmd_gen2d(args) -> int:
    spec = Dataset2DSpec(
        kind=args.kind, n_samples=args.n, seed=args.seed, noise=args.noise,
        turns=args.turns, equispaced=not args.uniform_angles,
    )
    ts = generate_2d(spec)
    save_csv(args.out, ts.points)
    return 0


def cmd_sample(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    cfg = validate_config(raw)
    ts = _resolve_dataset(cfg["dataset"])
    seed = cfg.get("seed", 0)
    sm = cfg["smoothing"]
    smoothing = SmoothingConfig(sm["delta"], sm.get("sigma", 0.0),
                                sm.get("mc_samples", 2))
    out_dir = args.out_dir or cfg.get("output_dir", ".")
    os.makedirs(out_dir, exist_ok=True)
    method = cfg["method"]
    t0 = time.perf_counter()
    if method == "mmsold":
        sc = cfg["sampler"]
        est = MMSOLD(
            n_particles=sc["particles"], delta=smoothing.delta,
            sigma=smoothing.sigma, mc_samples=smoothing.mc_samples,
            step_size=sc["step_size"], n_iterations=sc["iterations"],
            scheme=sc.get("scheme", "lm"),
            score_mode=sc.get("score_mode", "full"),
            n_neighbors=sc.get("neighbors", 50),
            n_correction=sc.get("correction", 50), random_state=seed,
        ).fit(ts.points)
        samples, diag = est.sample(return_diagnostics=True)
    elif method == "cfdm":
        cc = cfg["cfdm"]
        est = SigmaCFDM(
            sigma=smoothing.sigma, mc_samples=smoothing.mc_samples,
            n_steps=cc.get("steps", 100), t_start=cc.get("t_start", 0.01),
            t_end=cc.get("t_end", 0.99), preset=cc.get("preset", "straight"),
            alpha=cc.get("alpha", 1.0), random_state=seed,
        ).fit(ts.points)
        samples, diag = est.sample(cc["particles"], return_diagnostics=True)
    else:
        bc = cfg["baoab"]
        est = KineticLangevinBAOAB(
            delta=smoothing.delta, sigma=smoothing.sigma,
            mc_samples=smoothing.mc_samples, step_size=bc["step_size"],
            friction=bc.get("friction", 1.0), n_iterations=bc["iterations"],
            tilt=bc.get("tilt", "empirical"), zeta=bc.get("zeta"),
            random_state=seed,
        ).fit(ts.points)
        samples, diag = est.sample(bc["particles"], return_diagnostics=True)
    samples_path = os.path.join(out_dir, "samples.csv")
    save_csv(samples_path, samples)
    manifest = {
        "package_version": __version__,
        "method": method,
        "seed": seed,
        "config": raw,
        "n_samples": int(samples.shape[0]),
        "dim": int(samples.shape[1]),
        "samples_path": os.path.basename(samples_path),
        "diagnostics": diag,
        "timings": {"total_seconds": time.perf_counter() - t0},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_eval(args) -> int:
    samples = load_matrix(args.samples)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    known = {"sw2", "kid", "recall", "duprate"}
    unknown = set(metrics) - known
    if unknown:
        raise ConfigError(f"unknown metric(s): {sorted(unknown)}")
    reference = load_matrix(args.reference) if args.reference else None
    train = load_matrix(args.train) if args.train else None
    reports = []
    for metric in metrics:
        if metric == "sw2":
            if reference is None:
                raise ConfigError("sw2 needs --reference")
            if reference.shape[1] != samples.shape[1]:
                raise DimensionMismatch("samples and reference dims differ")
            value = sliced_w2(samples, reference,
                              projections=args.projections, rng=args.seed)
            cfgd = {"projections": args.projections}
            nb = reference.shape[0]
        elif metric == "kid":
            if reference is None:
                raise ConfigError("kid needs --reference")
            if reference.shape[1] != samples.shape[1]:
                raise DimensionMismatch("samples and reference dims differ")
            value = kid_poly(reference, samples)
            cfgd = {"kernel": "(x.y/d + 1)^3"}
            nb = reference.shape[0]
        elif metric == "recall":
            if reference is None:
                raise ConfigError("recall needs --reference")
            if reference.shape[1] != samples.shape[1]:
                raise DimensionMismatch("samples and reference dims differ")
            value = recall_knn(reference, samples, k=args.k)
            cfgd = {"k": args.k}
            nb = reference.shape[0]
        else:
            if train is None:
                raise ConfigError("duprate needs --train")
            if train.shape[1] != samples.shape[1]:
                raise DimensionMismatch("samples and train dims differ")
            value = dup_rate(train, samples, percentile=args.percentile)
            cfgd = {"percentile": args.percentile}
            nb = train.shape[0]
        reports.append(MetricReport(metric, float(value), cfgd,
                                    n_a=samples.shape[0], n_b=nb,
                                    seed=args.seed).to_dict())
    text = json.dumps(reports, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_tilt(args) -> int:
    ts = TrainingSet(load_matrix(args.train))
    cfg = SmoothingConfig(args.delta, args.sigma, args.mc_samples)
    key = SubstreamKey(args.seed).child(TAG_MODEL)
    if args.model_out and args.label is None:
        raise ConfigError("--model-out requires --label")
    if args.model_out:
        model = build_energy_model(ts, cfg, key=key, label=args.label,
                                   zeta=args.zeta, mode=args.mode)
        with open(args.model_out, "w", encoding="utf-8") as fh:
            json.dump(model.to_dict(), fh)
            fh.write("\n")
        params = model.tilt
    else:
        params = estimate_tilting(ts, cfg, zeta=args.zeta, mode=args.mode,
                                  key=key.child(0))
    text = json.dumps(params.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_classify(args) -> int:
    names = sorted(fn for fn in os.listdir(args.models)
                   if fn.endswith(".json"))
    if not names:
        raise ConfigError(f"no model files in {args.models}")
    models = []
    for fn in names:
        with open(os.path.join(args.models, fn), "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
                models.append(EnergyModel.from_dict(doc))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ConfigError(f"malformed model file {fn}: {exc}") from exc
    dims = {m.training_set.dim for m in models}
    if len(dims) != 1:
        raise DimensionMismatch(f"model dimensions differ: {sorted(dims)}")
    queries = load_matrix(args.queries)
    if queries.shape[1] != dims.pop():
        raise DimensionMismatch("query dimension does not match the models")
    order = np.argsort([str(m.label) for m in models], kind="stable")
    models = [models[i] for i in order]
    energies = np.stack([m.energy(queries) + m.bias for m in models], axis=1)
    idx = np.argmin(energies, axis=1)
    labels = [models[i].label for i in idx]
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for lab in labels:
            fh.write(f"{lab}\n")
    return 0


# --------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--threads", type=int, default=1,
                   help="cap on data-parallel width (results unaffected)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmsold",
        description="Training-free moment-matched score-smoothed sampling",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen2d", help="generate a synthetic 2D dataset CSV")
    p.add_argument("--kind", required=True,
                   choices=("checkerboard", "two_spirals", "circle"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--turns", type=int, default=2)
    p.add_argument("--uniform-angles", action="store_true",
                   help="circle: draw angles uniformly instead of equispaced")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_gen2d)

    p = sub.add_parser("sample", help="run a sampler from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None,
                   help="override the config's output_dir")
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="compute metrics between sample sets")
    p.add_argument("--samples", required=True)
    p.add_argument("--reference", default=None)
    p.add_argument("--train", default=None)
    p.add_argument("--metrics", default="sw2")
    p.add_argument("--projections", type=int, default=512)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--percentile", type=float, default=5.0)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tilt", help="estimate tilt parameters from a CSV")
    p.add_argument("--train", required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--mc-samples", type=int, default=2)
    p.add_argument("--zeta", type=float, default=None)
    p.add_argument("--mode", choices=("empirical", "leave_one_out"),
                   default="empirical")
    p.add_argument("--label", default=None)
    p.add_argument("--model-out", default=None,
                   help="also write a frozen energy-model JSON")
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_tilt)

    p = sub.add_parser("classify",
                       help="minimum-energy labels from frozen model files")
    p.add_argument("--models", required=True, help="directory of model JSONs")
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_classify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, ParseError, DimensionMismatch, ValueError,
            FileNotFoundError, NotADirectoryError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MMSOLDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
