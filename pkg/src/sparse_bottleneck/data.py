"""Paired two-view datasets: CSV ingestion, preprocessing and a synthetic generator.

A dataset holds a predictor view ``x`` (e.g. gene expression, n x p) and a
response view ``y`` (e.g. electrophysiology, n x q) over the same samples.

Preprocessing follows a fixed order: sequencing-depth normalization, log2(x+1),
selection of highly variable genes, then z-scoring. Standard deviations use the
population convention (divide by n) throughout.
"""

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    ArgumentError,
    DegenerateError,
    DomainError,
    ParseError,
    SchemaError,
)

LINKS = ("linear", "nonlinear")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_unique(names, what):
    seen = set()
    dupes = []
    for name in names:
        if name in seen:
            dupes.append(name)
        seen.add(name)
    if dupes:
        raise SchemaError(f"duplicate {what}: {', '.join(sorted(set(dupes)))}")


@dataclass(frozen=True)
class PairedDataset:
    x: np.ndarray
    y: np.ndarray
    x_names: tuple
    y_names: tuple
    sample_ids: tuple = None
    sample_labels: tuple = None
    sample_colors: tuple = None
    preprocessed: bool = False

    def __post_init__(self):
        x, y = _frozen(self.x), _frozen(self.y)
        if x.ndim != 2 or y.ndim != 2:
            raise SchemaError(f"views must be 2-d matrices, got shapes {x.shape} and {y.shape}")
        n = x.shape[0]
        if n < 1 or y.shape[0] != n:
            raise SchemaError(f"views must share a nonzero row count, got {x.shape[0]} and {y.shape[0]}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        for attr, count in (("x_names", x.shape[1]), ("y_names", y.shape[1])):
            names = tuple(str(s) for s in getattr(self, attr))
            if len(names) != count:
                raise SchemaError(f"{attr} has {len(names)} entries for {count} columns")
            _check_unique(names, attr)
            object.__setattr__(self, attr, names)
        ids = self.sample_ids
        if ids is None:
            ids = tuple(f"s{i}" for i in range(n))
        for attr in ("sample_labels", "sample_colors"):
            val = getattr(self, attr)
            if val is not None:
                val = tuple(str(v) for v in val)
                if len(val) != n:
                    raise SchemaError(f"{attr} has {len(val)} entries for {n} samples")
                object.__setattr__(self, attr, val)
        ids = tuple(str(s) for s in ids)
        if len(ids) != n:
            raise SchemaError(f"sample_ids has {len(ids)} entries for {n} samples")
        object.__setattr__(self, "sample_ids", ids)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def p(self):
        return self.x.shape[1]

    @property
    def q(self):
        return self.y.shape[1]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def select_x(self, columns):
        columns = np.asarray(columns, dtype=int)
        return self.replace(x=self.x[:, columns], x_names=[self.x_names[i] for i in columns])

    def subset_rows(self, rows):
        rows = np.asarray(rows, dtype=int)
        pick = lambda t: None if t is None else [t[i] for i in rows]
        return self.replace(
            x=self.x[rows], y=self.y[rows], sample_ids=pick(self.sample_ids),
            sample_labels=pick(self.sample_labels), sample_colors=pick(self.sample_colors),
        )


@dataclass(frozen=True)
class SynthGroundTruth:
    support: tuple
    latent_dim: int = 2
    link: str = "linear"
    noise_sd: float = 0.3
    quad_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(sorted(int(i) for i in self.support)))
        if self.latent_dim < 1:
            raise ArgumentError("latent_dim must be >= 1")
        if self.link not in LINKS:
            raise ArgumentError(f"link must be one of {LINKS}, got {self.link!r}")
        if self.noise_sd < 0:
            raise ArgumentError("noise_sd must be >= 0")
        if len(set(self.support)) != len(self.support):
            raise ArgumentError("support indices must be distinct")


# -- CSV ---------------------------------------------------------------------

def _read_matrix_csv(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 1:
        raise SchemaError(f"{path}: missing header")
    names = [h.strip() for h in header[1:]]
    _check_unique(names, f"feature names in {path}")
    ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
        ids.append(row[0].strip())
        vals = []
        for name, cell in zip(names, row[1:]):
            try:
                vals.append(float(cell))
            except ValueError:
                raise ParseError(path, lineno, name, cell) from None
        values.append(vals)
    _check_unique(ids, f"sample identifiers in {path}")
    return ids, names, np.array(values, dtype=float).reshape(len(ids), len(names))


def _read_meta_csv(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "id" not in reader.fieldnames:
            raise SchemaError(f"{path}: meta file needs an 'id' column")
        return {row["id"].strip(): row for row in reader}


def load_paired_csv(x_path, y_path, meta_path=None):
    """Load two CSV views and align their rows by sample identifier.

    Row order follows the x file. The optional meta file has columns
    ``id, label, color`` and supplies per-sample annotations.
    """
    x_ids, x_names, x = _read_matrix_csv(x_path)
    y_ids, y_names, y = _read_matrix_csv(y_path)
    missing = set(x_ids) ^ set(y_ids)
    if missing:
        raise AlignmentError(missing)
    y_pos = {sid: i for i, sid in enumerate(y_ids)}
    y = y[[y_pos[sid] for sid in x_ids]]
    labels = colors = None
    if meta_path is not None:
        meta = _read_meta_csv(meta_path)
        absent = [sid for sid in x_ids if sid not in meta]
        if absent:
            raise AlignmentError(absent)
        if "label" in next(iter(meta.values()), {}):
            labels = [meta[sid]["label"] for sid in x_ids]
        if "color" in next(iter(meta.values()), {}):
            colors = [meta[sid]["color"] for sid in x_ids]
    return PairedDataset(x, y, x_names, y_names, sample_ids=x_ids,
                         sample_labels=labels, sample_colors=colors)


def _write_matrix_csv(path, ids, names, m):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *names])
        for sid, row in zip(ids, m):
            # repr() round-trips float64 exactly
            w.writerow([sid, *(repr(float(v)) for v in row)])


def save_paired_csv(dataset, x_path, y_path, meta_path=None):
    _write_matrix_csv(x_path, dataset.sample_ids, dataset.x_names, dataset.x)
    _write_matrix_csv(y_path, dataset.sample_ids, dataset.y_names, dataset.y)
    if meta_path is not None:
        with Path(meta_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "label", "color"])
            for i, sid in enumerate(dataset.sample_ids):
                w.writerow([
                    sid,
                    dataset.sample_labels[i] if dataset.sample_labels else "",
                    dataset.sample_colors[i] if dataset.sample_colors else "",
                ])


def read_gene_subset(path):
    """One feature name per line; blank lines and '#' comments ignored."""
    names = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return names


# -- preprocessing -------------------------------------------------------------

def normalize_depth(counts):
    """Scale every row to sum to the median of the original row sums."""
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 0):
        raise DomainError("counts must be non-negative")
    depth = counts.sum(axis=1)
    zero = np.flatnonzero(depth <= 0)
    if zero.size:
        raise DegenerateError(f"samples with zero total count at rows {zero.tolist()}")
    return counts / depth[:, None] * np.median(depth)


def log_transform(m):
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise DomainError("log2(x+1) requires non-negative entries")
    return np.log2(m + 1.0)


def select_hvg(dataset, n_genes):
    """Keep the `n_genes` predictor columns with the largest variance.

    Ties are broken toward the lower column index and the surviving columns
    keep their original order.
    """
    p = dataset.p
    if not 1 <= n_genes <= p:
        raise ArgumentError(f"n_genes must be between 1 and {p}, got {n_genes}")
    var = dataset.x.var(axis=0)
    keep = np.sort(np.argsort(-var, kind="stable")[:n_genes])
    return dataset.select_x(keep)


def zscore_apply(m, means, sds):
    return (np.asarray(m, dtype=float) - means) / sds


def zscore_fit_apply(train, test=None, names=None):
    """Standardize `train` with its own column statistics and `test` with train's.

    Returns ``(train_z, test_z, means, sds)``; ``test_z`` is None without a
    test matrix. Constant training columns raise :class:`DegenerateError`.
    """
    train = np.asarray(train, dtype=float)
    constant = np.flatnonzero(np.ptp(train, axis=0) == 0)
    if constant.size:
        labels = [names[i] for i in constant] if names is not None else constant.tolist()
        raise DegenerateError(f"constant columns cannot be standardized: {labels}")
    means = train.mean(axis=0)
    sds = train.std(axis=0)
    test_z = None if test is None else zscore_apply(test, means, sds)
    return zscore_apply(train, means, sds), test_z, means, sds


def standardize(dataset):
    """Z-score both views and mark the dataset preprocessed."""
    x, _, _, _ = zscore_fit_apply(dataset.x, names=dataset.x_names)
    y, _, _, _ = zscore_fit_apply(dataset.y, names=dataset.y_names)
    return dataset.replace(x=x, y=y, preprocessed=True)


@dataclass
class PreprocessSummary:
    n: int
    p_in: int
    q: int
    p_out: int = 0
    steps: list = field(default_factory=list)
    dropped_features: list = field(default_factory=list)
    dropped_samples: list = field(default_factory=list)

    def to_dict(self):
        return dataclasses.asdict(self)


def preprocess(dataset, depth_normalize=True, log=True, n_hvg=None, zscore=True, gene_subset=None):
    """Run the preprocessing chain and return ``(dataset, summary)``.

    Depth normalization uses all genes; the optional gene subset is applied
    after the log transform and before variable-gene selection.
    """
    summary = PreprocessSummary(n=dataset.n, p_in=dataset.p, q=dataset.q)
    x = dataset.x
    if depth_normalize:
        x = normalize_depth(x)
        summary.steps.append("depth_normalize")
    if log:
        x = log_transform(x)
        summary.steps.append("log2p1")
    ds = dataset.replace(x=x, preprocessed=False)
    if gene_subset is not None:
        wanted = set(gene_subset)
        keep = [i for i, name in enumerate(ds.x_names) if name in wanted]
        if not keep:
            raise ArgumentError("gene subset shares no names with the predictor view")
        summary.dropped_features += [
            {"name": name, "reason": "not in gene subset"}
            for i, name in enumerate(ds.x_names) if name not in wanted
        ]
        ds = ds.select_x(keep)
        summary.steps.append("gene_subset")
    if n_hvg is not None and n_hvg < ds.p:
        kept = select_hvg(ds, n_hvg)
        survivors = set(kept.x_names)
        summary.dropped_features += [
            {"name": name, "reason": "not highly variable"}
            for name in ds.x_names if name not in survivors
        ]
        ds = kept
        summary.steps.append(f"hvg{n_hvg}")
    if zscore:
        ds = standardize(ds)
        summary.steps.append("zscore")
    summary.p_out = ds.p
    return ds, summary


# -- synthetic data ------------------------------------------------------------

_PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def synth_generate(n, p, q, truth, seed=0):
    """Synthetic paired data with a known predictor support.

    X is standard normal. A latent ``Z = X[:, support] @ A`` (columns of unit
    expected variance) drives the response: ``Y = Z @ B + noise`` for the
    linear link, and ``Y = tanh(Z) @ B + (Z*Z) @ C + noise`` for the
    nonlinear one, with ``C`` scaled by ``truth.quad_scale`` relative to ``B``.
    Samples are labelled by the sign pattern of the first two latent
    coordinates.

    Returns ``(dataset, truth)``; identical seeds give bit-identical output.
    """
    if len(truth.support) > p or (truth.support and max(truth.support) >= p):
        raise ArgumentError(f"support {truth.support} does not fit in p={p} predictors")
    if not truth.support:
        raise ArgumentError("support must be nonempty")
    rng = np.random.default_rng(seed)
    s, d = len(truth.support), truth.latent_dim
    x = rng.standard_normal((n, p))
    a = rng.standard_normal((s, d)) / np.sqrt(s)
    b = rng.standard_normal((d, q)) / np.sqrt(d)
    c = rng.standard_normal((d, q)) / np.sqrt(d) * truth.quad_scale
    noise = rng.standard_normal((n, q)) * truth.noise_sd
    z = x[:, list(truth.support)] @ a
    if truth.link == "linear":
        y = z @ b + noise
    else:
        y = np.tanh(z) @ b + (z * z) @ c + noise
    codes = (z[:, 0] > 0).astype(int) + 2 * (z[:, min(1, d - 1)] > 0).astype(int)
    labels = [f"type{k}" for k in codes]
    colors = [_PALETTE[k] for k in codes]
    width_x, width_y = len(str(p - 1)), len(str(q - 1))
    ds = PairedDataset(
        x, y,
        [f"g{i:0{width_x}d}" for i in range(p)],
        [f"f{j:0{width_y}d}" for j in range(q)],
        sample_ids=[f"cell{i}" for i in range(n)],
        sample_labels=labels, sample_colors=colors,
    )
    return ds, truth
