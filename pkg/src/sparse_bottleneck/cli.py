"""Command-line entry point: ``sparse-bottleneck <command> [options]``.

Settings come from built-in defaults, then an optional JSON file given with
``--config``, then command-line flags (highest precedence). Every command
writes ``manifest.json`` to its output directory with the resolved
configuration, its hash, the seed, library versions and SHA-256 digests of
all inputs and outputs.

Exit codes: 0 success, 2 argument/config error, 3 data error, 4 numeric
fault.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys

import numba
import numpy as np

from . import __version__
from .data import (
    SynthGroundTruth,
    load_paired_csv,
    preprocess,
    read_gene_subset,
    save_paired_csv,
    standardize,
    synth_generate,
)
from .errors import ArgumentError, DataError, EmptyModelError, NumericFault, SparseBottleneckError
from .evaluation import VARIANTS, cross_validate, fit_srrr_variant, stability_analysis
from .sbnn import SbnnConfig, SbnnModel, load_model
from .schedule import TrainSchedule, full_pipeline
from .viz import embed, prediction_overlays, render_latent_svg

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "x": None,
    "y": None,
    "meta": None,
    "out": "out",
    "seed": 0,
    "variant": "sbnn-2",
    "variants": list(VARIANTS),
    "depth_normalize": True,
    "log": True,
    "n_hvg": None,
    "zscore": True,
    "gene_subset": None,
    "folds": 10,
    "runs": 10,
    "paper_compat": True,
    "jobs": 1,
    "curves": True,
    "model": {},
    "schedule": {},
    "perplexity": 30.0,
    "tsne_iters": 750,
    "synth": {"n": 2000, "p": 200, "q": 10, "support_size": 10, "latent_dim": 2,
              "link": "linear", "noise_sd": 0.3, "quad_scale": 1.0},
}


class RunConfig(dict):
    """Resolved settings for one command (plain dict with attribute access)."""

    __getattr__ = dict.__getitem__

    def canonical(self):
        return json.dumps(self, sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def sbnn_config(self):
        try:
            return SbnnConfig.from_dict({**self.model, "seed": self.seed})
        except TypeError as err:
            raise ArgumentError(f"bad model settings: {err}") from None

    def train_schedule(self):
        return TrainSchedule.from_dict(dict(self.schedule))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def write_manifest(command, cfg, inputs, outputs):
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "numba": numba.__version__,
        },
        "inputs": {p: _sha256(p) for p in inputs if p},
        "outputs": {os.path.relpath(p, cfg.out): _sha256(p) for p in outputs},
    }
    return _write(os.path.join(cfg.out, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _input_paths(cfg):
    return [cfg.x, cfg.y, cfg.meta, cfg.gene_subset]


def _load(cfg):
    if not cfg.x or not cfg.y:
        raise ArgumentError("--x and --y are required")
    return load_paired_csv(cfg.x, cfg.y, cfg.meta)


def _load_processed(cfg):
    """Load a dataset written by ``preprocess`` (or ``synth``); it is used as is."""
    ds = _load(cfg)
    if cfg.gene_subset:
        wanted = read_gene_subset(cfg.gene_subset)
        keep = [i for i, g in enumerate(ds.x_names) if g in set(wanted)]
        if not keep:
            raise DataError("none of the subset genes occur in the dataset")
        ds = ds.select_x(keep)
    return ds.replace(preprocessed=True)


# -- commands --------------------------------------------------------------------

def cmd_preprocess(cfg):
    ds = _load(cfg)
    subset = read_gene_subset(cfg.gene_subset) if cfg.gene_subset else None
    ds, summary = preprocess(ds, depth_normalize=cfg.depth_normalize, log=cfg.log, n_hvg=cfg.n_hvg,
                             zscore=cfg.zscore, gene_subset=subset)
    paths = [os.path.join(cfg.out, f) for f in ("x.csv", "y.csv", "meta.csv")]
    os.makedirs(cfg.out, exist_ok=True)
    save_paired_csv(ds, *paths)
    paths.append(_write(os.path.join(cfg.out, "summary.json"),
                        json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n"))
    return paths


def _srrr_rank(variant, q):
    return 2 if variant == "srrr-2" else q


def cmd_fit(cfg):
    ds = _load_processed(cfg)
    schedule = cfg.train_schedule()
    seed = cfg.seed
    base = os.path.join(cfg.out, f"{cfg.variant}_seed{seed}")
    if cfg.variant.startswith("srrr"):
        if cfg.variant not in VARIANTS:
            raise ArgumentError(f"unknown variant {cfg.variant!r}")
        model = fit_srrr_variant(ds, _srrr_rank(cfg.variant, ds.q), schedule.prune_to)
        d = model.to_dict()
        d["input_names"] = list(ds.x_names)
        names = [ds.x_names[i] for i in model.selected]
        rows = ["lambda,n_selected"] + [f"{l!r},{c}" for l, c in model.diagnostics.get("path", [])]
        history_csv = "\n".join(rows) + "\n"
        model_json = json.dumps(d)
    elif cfg.variant in ("sbnn-2", "sbnn-64"):
        config = dataclasses.replace(cfg.sbnn_config(), bottleneck=int(cfg.variant.split("-")[1]))
        model, history, names = full_pipeline(ds, config, schedule, seed=seed)
        history_csv = history.to_csv()
        model_json = model.to_json()
    else:
        raise ArgumentError(f"unknown variant {cfg.variant!r}; choose from {', '.join(VARIANTS)}")
    return [
        _write(base + "_model.json", model_json + "\n"),
        _write(base + "_history.csv", history_csv),
        _write(base + "_selected.txt", "".join(f"{n}\n" for n in names)),
    ]


def cmd_crossval(cfg):
    ds = _load_processed(cfg)
    if not cfg.paper_compat:
        ds = ds.replace(preprocessed=False)
    report = cross_validate(ds, cfg.variants, folds=cfg.folds, seed=cfg.seed, paper_compat=cfg.paper_compat,
                            config=cfg.sbnn_config(), schedule=cfg.train_schedule(), n_jobs=cfg.jobs,
                            curves=cfg.curves)
    out = cfg.out
    return [
        _write(os.path.join(out, "cv_report.json"), report.to_json() + "\n"),
        _write(os.path.join(out, "cv_folds.csv"), report.to_csv()),
        _write(os.path.join(out, "cv_features.csv"), report.features_csv()),
        _write(os.path.join(out, "cv_curves.csv"), report.curves_csv()),
    ]


def cmd_stability(cfg):
    ds = _load_processed(cfg)
    report = stability_analysis(ds, cfg.sbnn_config(), cfg.train_schedule(), n_runs=cfg.runs,
                                base_seed=cfg.seed, n_jobs=cfg.jobs)
    out = cfg.out
    return [
        _write(os.path.join(out, "stability.json"), report.to_json() + "\n"),
        _write(os.path.join(out, "stability_histogram.csv"), report.histogram_csv()),
        _write(os.path.join(out, "stability_features.csv"), report.features_csv()),
    ]


def _check_model_inputs(model, names, ds):
    expected = list(names) if names is not None else None
    p_model = model.p_original if isinstance(model, SbnnModel) else model.w.shape[0]
    if p_model != ds.p or (expected is not None and expected != list(ds.x_names)):
        shown = expected if expected is not None else f"{p_model} unnamed genes"
        raise DataError(f"model expects the gene set {shown}, dataset has {list(ds.x_names)}")


def cmd_visualize(cfg):
    if not cfg.get("model_path"):
        raise ArgumentError("--model is required")
    ds = _load_processed(cfg)
    model = load_model(cfg.model_path)
    if isinstance(model, SbnnModel):
        names = model.input_names
    else:
        with open(cfg.model_path, encoding="utf-8") as fh:
            names = json.load(fh).get("input_names")
    _check_model_inputs(model, names, ds)
    emb = embed(model, ds, perplexity=cfg.perplexity, seed=cfg.seed, iters=cfg.tsne_iters)
    feats, genes = prediction_overlays(model, ds)
    return render_latent_svg(emb, feats + genes, os.path.join(cfg.out, "panels")) + [
        os.path.join(cfg.out, "panels", "index.json")]


def cmd_synth(cfg):
    s = cfg.synth
    truth = SynthGroundTruth(support=tuple(range(s["support_size"])), latent_dim=s["latent_dim"],
                             link=s["link"], noise_sd=s["noise_sd"], quad_scale=s["quad_scale"])
    ds, truth = synth_generate(s["n"], s["p"], s["q"], truth, seed=cfg.seed)
    if cfg.zscore:
        ds = standardize(ds)
    paths = [os.path.join(cfg.out, f) for f in ("x.csv", "y.csv", "meta.csv")]
    os.makedirs(cfg.out, exist_ok=True)
    save_paired_csv(ds, *paths)
    info = {"support": list(truth.support), "support_names": [ds.x_names[i] for i in truth.support],
            "link": truth.link, "latent_dim": truth.latent_dim, "noise_sd": truth.noise_sd,
            "quad_scale": truth.quad_scale}
    paths.append(_write(os.path.join(cfg.out, "truth.json"), json.dumps(info, indent=2) + "\n"))
    return paths


COMMANDS = {
    "preprocess": cmd_preprocess,
    "fit": cmd_fit,
    "crossval": cmd_crossval,
    "stability": cmd_stability,
    "visualize": cmd_visualize,
    "synth": cmd_synth,
}


# -- argument handling -------------------------------------------------------------

def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with settings; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--x", help="predictor CSV (samples x genes)")
    common.add_argument("--y", help="response CSV (samples x features)")
    common.add_argument("--meta", help="optional sample metadata CSV")
    common.add_argument("--gene-subset", dest="gene_subset", help="text file, one gene name per line")
    common.add_argument("--jobs", type=int, help="worker processes for folds / runs")
    common.add_argument("--schedule", dest="schedule_json", help="JSON object of schedule overrides")
    common.add_argument("--model-config", dest="model_json", help="JSON object of network settings")

    parser = argparse.ArgumentParser(prog="sparse-bottleneck", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="normalize, filter and standardize CSV data")
    p.add_argument("--no-depth-normalize", dest="depth_normalize", action="store_false", default=None)
    p.add_argument("--no-log", dest="log", action="store_false", default=None)
    p.add_argument("--no-zscore", dest="zscore", action="store_false", default=None)
    p.add_argument("--hvg", dest="n_hvg", type=int, help="keep this many highly variable genes")

    p = sub.add_parser("fit", parents=[common], help="train one model on the whole dataset")
    p.add_argument("--variant", choices=VARIANTS)

    p = sub.add_parser("crossval", parents=[common], help="k-fold cross-validation of model variants")
    p.add_argument("--variant", dest="variants", type=_csv_list,
                   help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--folds", type=int)
    compat = p.add_mutually_exclusive_group()
    compat.add_argument("--paper-compat", dest="paper_compat", action="store_true", default=None,
                        help="standardize once globally (default)")
    compat.add_argument("--per-fold", dest="paper_compat", action="store_false",
                        help="refit z-scoring inside every fold")
    p.add_argument("--no-curves", dest="curves", action="store_false", default=None)

    p = sub.add_parser("stability", parents=[common], help="repeat training with different seeds")
    p.add_argument("--runs", type=int)

    p = sub.add_parser("visualize", parents=[common], help="render latent-space SVG panels")
    p.add_argument("--model", dest="model_path", required=True, help="model JSON written by fit")
    p.add_argument("--perplexity", type=float)
    p.add_argument("--tsne-iters", dest="tsne_iters", type=int)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset with known support")
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--support-size", dest="support_size", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--link", choices=("linear", "nonlinear"))
    p.add_argument("--noise", dest="noise_sd", type=float)
    p.add_argument("--quad-scale", dest="quad_scale", type=float)
    p.add_argument("--no-zscore", dest="zscore", action="store_false", default=None)
    return parser


def _parse_json_object(text, what):
    try:
        value = json.loads(text)
    except json.JSONDecodeError as err:
        raise ArgumentError(f"{what} is not valid JSON: {err}") from None
    if not isinstance(value, dict):
        raise ArgumentError(f"{what} must be a JSON object")
    return value


def resolve_config(args):
    """Defaults, then the --config file, then explicit flags."""
    merged = json.loads(json.dumps(DEFAULTS))
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as err:
            raise ArgumentError(f"cannot read config {args.config}: {err}") from None
        file_cfg = _parse_json_object(text, args.config)
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ArgumentError(f"unknown config keys: {sorted(unknown)}")
        for key, value in file_cfg.items():
            if isinstance(merged.get(key), dict) and isinstance(value, dict):
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "command")}
    if "schedule_json" in flags:
        merged["schedule"] = {**merged["schedule"], **_parse_json_object(flags.pop("schedule_json"), "--schedule")}
    if "model_json" in flags:
        merged["model"] = {**merged["model"], **_parse_json_object(flags.pop("model_json"), "--model-config")}
    for key in ("n", "p", "q", "support_size", "latent_dim", "link", "noise_sd", "quad_scale"):
        if key in flags:
            merged["synth"][key] = flags.pop(key)
    merged.update(flags)
    cfg = RunConfig(merged)
    unknown = set(cfg.variants) - set(VARIANTS)
    if unknown:
        raise ArgumentError(f"unknown variants {sorted(unknown)}; choose from {', '.join(VARIANTS)}")
    if cfg.variant not in VARIANTS:
        raise ArgumentError(f"unknown variant {cfg.variant!r}")
    return cfg


def run(argv=None):
    """Run one command; returns the exit code instead of exiting."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_ARGS
    try:
        cfg = resolve_config(args)
        outputs = COMMANDS[args.command](cfg)
        write_manifest(args.command, cfg, [p for p in _input_paths(cfg) + [cfg.get("model_path")] if p], outputs)
    except ArgumentError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ARGS
    except (DataError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFault, EmptyModelError) as err:
        print(f"numeric fault: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except SparseBottleneckError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
