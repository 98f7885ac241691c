"""Cross-validated R^2 scores and gene-selection stability across restarts."""

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np

from .data import standardize, zscore_apply, zscore_fit_apply
from .errors import ArgumentError, DegenerateError, SparseBottleneckError
from .sbnn import SbnnConfig
from .schedule import TrainSchedule, full_pipeline
from .srrr import regularization_path, relaxed_refit

VARIANTS = ("srrr-2", "srrr-full", "sbnn-2", "sbnn-64")


# -- metrics -------------------------------------------------------------------

def _centered(y_test, y_pred, train_means):
    y_test = np.asarray(y_test, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    means = np.asarray(train_means, dtype=float)
    if y_test.shape != y_pred.shape:
        raise ArgumentError(f"y_test {y_test.shape} and y_pred {y_pred.shape} differ in shape")
    if y_test.ndim != 2 or means.shape != (y_test.shape[1],):
        raise ArgumentError(f"train_means must have length {y_test.shape[-1]}")
    return y_test - means, y_pred - means


def r2_multivariate(y_test, y_pred, train_means):
    """1 - ||Y - F||^2 / ||Y||^2 after centering both by the training means."""
    yc, fc = _centered(y_test, y_pred, train_means)
    denom = float(np.sum(yc * yc))
    if denom == 0:
        raise DegenerateError("centered test targets have zero norm")
    return 1.0 - float(np.sum((yc - fc) ** 2)) / denom


def r2_per_feature(y_test, y_pred, train_means):
    """Column-wise R^2; zero-norm columns give NaN."""
    yc, fc = _centered(y_test, y_pred, train_means)
    denom = np.sum(yc * yc, axis=0)
    resid = np.sum((yc - fc) ** 2, axis=0)
    out = np.full(denom.shape, np.nan)
    ok = denom > 0
    out[ok] = 1.0 - resid[ok] / denom[ok]
    return out


def make_folds(n, folds, seed=0):
    """Fold index per sample: a seeded permutation dealt round-robin into `folds` parts."""
    if folds < 2:
        raise ArgumentError("need at least 2 folds")
    if folds > n:
        raise ArgumentError(f"{folds} folds requested for {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=int)
    for i in range(folds):
        assignment[perm[i::folds]] = i
    return assignment


# -- model variants ------------------------------------------------------------

@dataclass(frozen=True)
class VariantSpec:
    """A named model recipe that can be fit on one split and predict another.

    ``kind`` is ``"srrr"`` (rank None means rank = q) or ``"sbnn"``.
    """

    name: str
    kind: str
    rank: int = None
    target_genes: int = 25
    relaxed: bool = True
    config: SbnnConfig = None
    schedule: TrainSchedule = None

    def fit_predict(self, train, test, seed=0, monitor=None):
        """Returns ``(y_pred, selected_names, history_or_None, info)``."""
        if self.kind == "srrr":
            model = fit_srrr_variant(train, self.rank, self.target_genes, self.relaxed)
            info = {"path_exact": bool(model.diagnostics.get("path_exact", True))}
            names = [train.x_names[i] for i in model.selected]
            return model.predict(test.x), names, None, info
        if self.kind == "sbnn":
            model, history, names = full_pipeline(train, self.config or SbnnConfig(),
                                                  self.schedule or TrainSchedule(), seed=seed,
                                                  monitor=monitor)
            return model.predict(test.x), names, history, {}
        raise ArgumentError(f"unknown variant kind {self.kind!r}")


def fit_srrr_variant(train, rank=None, target_genes=25, relaxed=True):
    """Path to `target_genes` predictors, optional relaxed refit, with intercepts.

    Both views are centered by their training means before fitting; the
    means are stored on the model so that ``predict`` adds them back.
    """
    rank = rank or train.q
    x_mean, y_mean = train.x.mean(axis=0), train.y.mean(axis=0)
    xc, yc = train.x - x_mean, train.y - y_mean
    _, model = regularization_path(xc, yc, rank, min(target_genes, train.p))
    if relaxed and model.selected.size:
        model = relaxed_refit(xc, yc, model)
    return replace(model, x_mean=x_mean, y_mean=y_mean)


def variant_spec(name, config=None, schedule=None, target_genes=None):
    """Named variant: srrr-2, srrr-full, sbnn-2 or sbnn-64."""
    config = config or SbnnConfig()
    schedule = schedule or TrainSchedule()
    genes = target_genes or schedule.prune_to
    if name == "srrr-2":
        return VariantSpec(name, "srrr", rank=2, target_genes=genes)
    if name == "srrr-full":
        return VariantSpec(name, "srrr", rank=None, target_genes=genes)
    if name in ("sbnn-2", "sbnn-64"):
        width = int(name.split("-")[1])
        return VariantSpec(name, "sbnn", config=replace(config, bottleneck=width), schedule=schedule)
    raise ArgumentError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")


def _as_variant(v, config, schedule):
    if isinstance(v, str):
        return variant_spec(v, config, schedule)
    if not (hasattr(v, "name") and hasattr(v, "fit_predict")):
        raise ArgumentError("variants must be names or objects with name and fit_predict")
    return v


# -- cross-validation ------------------------------------------------------------

def fold_split(dataset, train_idx, test_idx, paper_compat=True):
    """Train/test datasets for one fold plus the training response means.

    With ``paper_compat`` the dataset is used as it stands (standardized
    once, globally). Otherwise both views are z-scored with statistics of
    the training rows only, and the same transform is applied to the test
    rows. Returns ``(train, test, train_means, stats)``.
    """
    train = dataset.subset_rows(train_idx)
    test = dataset.subset_rows(test_idx)
    stats = None
    if not paper_compat:
        xtr, _, xm, xs = zscore_fit_apply(train.x, names=dataset.x_names)
        ytr, _, ym, ys = zscore_fit_apply(train.y, names=dataset.y_names)
        train = train.replace(x=xtr, y=ytr, preprocessed=True)
        test = test.replace(x=zscore_apply(test.x, xm, xs), y=zscore_apply(test.y, ym, ys), preprocessed=True)
        stats = {"x_means": xm, "x_sds": xs, "y_means": ym, "y_sds": ys}
    return train, test, train.y.mean(axis=0), stats


def fold_seed(seed, fold):
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _run_fold(job):
    dataset, assignment, fold, variants, seed, paper_compat, curves = job
    train, test, means, _ = fold_split(dataset, np.flatnonzero(assignment != fold),
                                       np.flatnonzero(assignment == fold), paper_compat)
    monitor = (test.x, test.y, means) if curves else None
    out = []
    for v in variants:
        try:
            pred, names, history, info = v.fit_predict(train, test, seed=fold_seed(seed, fold), monitor=monitor)
        except SparseBottleneckError as err:
            err.args = (f"fold {fold}, variant {v.name}: {err.args[0] if err.args else err}",) + err.args[1:]
            raise
        rows = history.to_long_rows(fold=fold, variant=v.name) if history is not None else []
        out.append({
            "r2": r2_multivariate(test.y, pred, means),
            "r2_features": r2_per_feature(test.y, pred, means),
            "selected": list(names) if names is not None else None,
            "info": info,
            "curve": rows,
        })
    return out


def _nan_to_none(a):
    return [None if np.isnan(v) else float(v) for v in np.ravel(a)]


@dataclass
class CvReport:
    variants: list
    folds: int
    seed: int
    paper_compat: bool
    fold_assignments: np.ndarray
    feature_names: list
    r2: dict
    r2_features: dict
    selected: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)

    def mean(self, variant):
        return float(np.mean(self.r2[variant]))

    def sd(self, variant):
        """Sample SD across folds."""
        return float(np.std(self.r2[variant], ddof=1))

    def feature_means(self, variant):
        """Per-feature mean over folds, skipping undefined entries."""
        m = np.asarray(self.r2_features[variant], dtype=float)
        out = np.full(m.shape[1], np.nan)
        ok = ~np.all(np.isnan(m), axis=0)
        out[ok] = np.nanmean(m[:, ok], axis=0)
        return out

    def to_dict(self):
        return {
            "variants": list(self.variants),
            "folds": self.folds,
            "seed": self.seed,
            "paper_compat": self.paper_compat,
            "fold_assignments": self.fold_assignments.tolist(),
            "feature_names": list(self.feature_names),
            "r2": {v: [float(s) for s in self.r2[v]] for v in self.variants},
            "r2_features": {v: [_nan_to_none(row) for row in self.r2_features[v]] for v in self.variants},
            "mean": {v: self.mean(v) for v in self.variants},
            "sd": {v: self.sd(v) for v in self.variants},
            "feature_mean": {v: _nan_to_none(self.feature_means(v)) for v in self.variants},
            "selected": self.selected,
            "info": self.info,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self):
        """One row per (fold, variant)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "variant", "r2", *[f"r2_{name}" for name in self.feature_names]])
        for fold in range(self.folds):
            for v in self.variants:
                feats = ["" if np.isnan(s) else repr(float(s)) for s in self.r2_features[v][fold]]
                w.writerow([fold, v, repr(float(self.r2[v][fold])), *feats])
        return buf.getvalue()

    def features_csv(self):
        """One row per response feature: mean per-feature R^2 for each variant."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", *self.variants])
        cols = [self.feature_means(v) for v in self.variants]
        for j, name in enumerate(self.feature_names):
            w.writerow([name, *["" if np.isnan(c[j]) else repr(float(c[j])) for c in cols]])
        return buf.getvalue()

    def curves_csv(self):
        """Long format: fold, variant, epoch, phase, metric, value."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "variant", "epoch", "phase", "metric", "value"])
        for r in self.curves:
            w.writerow([r["fold"], r["variant"], r["epoch"], r["phase"], r["metric"], repr(float(r["value"]))])
        return buf.getvalue()


def cross_validate(dataset, variants=VARIANTS, folds=10, seed=0, paper_compat=True,
                   config=None, schedule=None, n_jobs=1, curves=False):
    """K-fold CV of several model variants on identical folds.

    Parameters
    ----------
    variants : sequence
        Variant names (see :data:`VARIANTS`) or objects with a ``name`` and a
        ``fit_predict(train, test, seed, monitor)`` method.
    paper_compat : bool
        Standardize once on the whole dataset (if it is not already
        preprocessed) and center test responses with training means. When
        False, z-scoring is refit inside every fold on its training rows.
    n_jobs : int
        Worker processes over folds. Results do not depend on it.
    curves : bool
        Record per-epoch held-out R^2 of neural variants.
    """
    specs = [_as_variant(v, config, schedule) for v in variants]
    names = [v.name for v in specs]
    if len(set(names)) != len(names):
        raise ArgumentError(f"duplicate variant names: {names}")
    if paper_compat and not dataset.preprocessed:
        dataset = standardize(dataset)
    assignment = make_folds(dataset.n, folds, seed)
    jobs = [(dataset, assignment, f, specs, seed, paper_compat, curves) for f in range(folds)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, folds)) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    report = CvReport(names, folds, seed, paper_compat, assignment, list(dataset.y_names),
                      r2={v: [] for v in names}, r2_features={v: [] for v in names},
                      selected={v: [] for v in names}, info={v: [] for v in names})
    for fold_result in results:
        for v, res in zip(names, fold_result):
            report.r2[v].append(res["r2"])
            report.r2_features[v].append(res["r2_features"])
            report.selected[v].append(res["selected"])
            report.info[v].append(res["info"])
            report.curves.extend(res["curve"])
    for v in names:
        report.r2_features[v] = np.array(report.r2_features[v])
    return report


# -- stability -------------------------------------------------------------------

@dataclass
class StabilityReport:
    seeds: list
    feature_names: list
    runs: list
    prune_to: int

    @property
    def n_runs(self):
        return len(self.runs)

    @property
    def counts(self):
        """Times each feature index was selected, for features selected at least once."""
        out = {}
        for run in self.runs:
            for i in run:
                out[i] = out.get(i, 0) + 1
        return dict(sorted(out.items()))

    @property
    def histogram(self):
        """Entry k-1 is the number of features selected in exactly k runs."""
        hist = [0] * self.n_runs
        for c in self.counts.values():
            hist[c - 1] += 1
        return hist

    @property
    def pairwise_mean_overlap(self):
        if self.n_runs < 2:
            return None
        sets = [set(r) for r in self.runs]
        return float(np.mean([len(a & b) for a, b in combinations(sets, 2)]))

    def always_selected(self):
        return [i for i, c in self.counts.items() if c == self.n_runs]

    def to_dict(self):
        return {
            "seeds": list(self.seeds),
            "prune_to": self.prune_to,
            "runs": [list(r) for r in self.runs],
            "run_names": [[self.feature_names[i] for i in r] for r in self.runs],
            "histogram": self.histogram,
            "pairwise_mean_overlap": self.pairwise_mean_overlap,
            "union_size": len(self.counts),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def histogram_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["times_selected", "n_features"])
        for k, c in enumerate(self.histogram, start=1):
            w.writerow([k, c])
        return buf.getvalue()

    def features_csv(self):
        """One row per feature selected at least once."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "index", "times_selected"])
        for i, c in self.counts.items():
            w.writerow([self.feature_names[i], i, c])
        return buf.getvalue()


def _stability_run(job):
    dataset, config, schedule, seed = job
    model, _, _ = full_pipeline(dataset, config, schedule, seed=seed)
    return sorted(int(i) for i in model.surviving_inputs)


def stability_analysis(dataset, config=None, schedule=None, n_runs=10, base_seed=0, seeds=None, n_jobs=1):
    """Repeat the full pipeline with different seeds and tally the selected inputs.

    `seeds` overrides ``base_seed .. base_seed + n_runs - 1``.
    """
    config = config or SbnnConfig()
    schedule = schedule or TrainSchedule()
    seeds = list(seeds) if seeds is not None else list(range(base_seed, base_seed + n_runs))
    if not seeds:
        raise ArgumentError("need at least one run")
    jobs = [(dataset, config, schedule, s) for s in seeds]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, len(jobs))) as pool:
            runs = list(pool.map(_stability_run, jobs))
    else:
        runs = [_stability_run(j) for j in jobs]
    return StabilityReport(seeds, list(dataset.x_names), runs, min(schedule.prune_to, dataset.p))
