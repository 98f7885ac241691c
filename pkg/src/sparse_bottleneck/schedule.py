"""Training recipe for the sparse bottleneck network.

1. Pre-training: k-means labels of the response view, softmax readout,
   40% of the rows held out; the weights from the epoch with the lowest
   unpenalized validation cross-entropy are restored afterwards.
2. Main training with the regression heads:
   - epochs 1..50: bottom two layers frozen, lr 1e-4, group lasso on;
   - epochs 51..100: all layers trainable, lr 5e-5, group lasso on;
   - after epoch 100: prune the input layer to 25 units;
   - epochs 101..200: lr 5e-5, group lasso off.

Main-training epochs are numbered from 1. Pre-training epochs are numbered
so that they end at 0, which keeps epoch numbers strictly increasing over a
full run.
"""

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ArgumentError, NumericFault
from .numerics import kmeans
from .sbnn import (
    CLASSIFICATION,
    REGRESSION,
    adam_step,
    build_network,
    forward,
    loss_and_gradients,
    penalty_terms,
    prune_inputs,
    set_frozen,
    swap_head,
)

_PRETRAIN_STREAM = 0
_MAIN_STREAM = 1
_SPLIT_STREAM = 2


@dataclass(frozen=True)
class TrainSchedule:
    pretrain_epochs: int = 50
    pretrain_val_fraction: float = 0.40
    k_clusters: int = 20
    frozen_epochs: int = 50
    frozen_layers: int = 2
    unfrozen_epochs: int = 50
    prune_to: int = 25
    postprune_epochs: int = 100
    lr_initial: float = 1e-4
    lr_reduced: float = 5e-5
    batch_size: int = 32

    def __post_init__(self):
        for name in ("pretrain_epochs", "frozen_epochs", "unfrozen_epochs", "postprune_epochs", "frozen_layers"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be >= 0")
        if not 0 < self.pretrain_val_fraction < 1:
            raise ArgumentError("pretrain_val_fraction must be in (0, 1)")
        if self.prune_to < 1 or self.batch_size < 1 or self.k_clusters < 2:
            raise ArgumentError("prune_to and batch_size must be >= 1, k_clusters >= 2")
        if self.lr_initial <= 0 or self.lr_reduced <= 0:
            raise ArgumentError("learning rates must be > 0")

    @property
    def prune_epoch(self):
        return self.frozen_epochs + self.unfrozen_epochs

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ArgumentError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    mse_y: float = float("nan")
    mse_x: float = float("nan")
    cross_entropy: float = float("nan")
    group_lasso: float = 0.0
    l2: float = 0.0
    penalized: float = float("nan")
    val_cross_entropy: float = float("nan")
    monitor_r2: float = float("nan")
    n_inputs: int = 0


@dataclass
class Event:
    epoch: int
    kind: str
    detail: dict = field(default_factory=dict)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def add_event(self, epoch, kind, **detail):
        self.events.append(Event(epoch, kind, detail))

    def extend(self, other):
        self.records.extend(other.records)
        self.events.extend(other.events)
        return self

    def events_of(self, kind):
        return [e for e in self.events if e.kind == kind]

    def column(self, name, phase=None):
        return np.array([getattr(r, name) for r in self.records if phase is None or r.phase == phase])

    def to_csv(self):
        names = [f.name for f in fields(EpochRecord)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names + ["event"])
        by_epoch = {}
        for e in self.events:
            by_epoch.setdefault(e.epoch, []).append(e.kind)
        seen = set()
        for r in self.records:
            tags = ";".join(by_epoch.get(r.epoch, [])) if r.epoch not in seen else ""
            seen.add(r.epoch)
            w.writerow([_fmt(getattr(r, n)) for n in names] + [tags])
        # events at epochs without a record (e.g. zero-epoch schedules)
        for epoch in sorted(set(by_epoch) - seen):
            w.writerow([_fmt(epoch)] + [""] * (len(names) - 1) + [";".join(by_epoch[epoch])])
        return buf.getvalue()

    def to_long_rows(self, **tags):
        """Long format: one row per (epoch, metric) for external plotting."""
        rows = []
        for r in self.records:
            for metric in ("mse_y", "mse_x", "cross_entropy", "penalized", "val_cross_entropy", "monitor_r2"):
                value = getattr(r, metric)
                if not np.isnan(value):
                    rows.append({**tags, "epoch": r.epoch, "phase": r.phase, "metric": metric, "value": value})
        return rows


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _epoch_rng(seed, stream, epoch):
    return np.random.default_rng(np.random.SeedSequence([seed, stream, epoch]))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _r2(y_true, y_pred, train_means):
    yc = y_true - train_means
    return 1.0 - float(np.sum((y_true - y_pred) ** 2) / np.sum(yc * yc))


def _run_epoch(model, x, targets, lr, batch_size, rng, epoch):
    """One pass over shuffled mini-batches; returns batch-averaged loss terms."""
    sums = np.zeros(3)
    count = 0
    for b, idx in enumerate(_batches(x.shape[0], batch_size, rng)):
        terms, grads = loss_and_gradients(model, x[idx], targets[idx], context={"epoch": epoch, "batch": b})
        adam_step(model, grads, lr)
        sums += (terms.mse_y, terms.mse_x, terms.cross_entropy)
        count += 1
    return sums / max(count, 1)


def _fill_record(rec, model, means, extra_data=0.0):
    rec.mse_y, rec.mse_x, rec.cross_entropy = (float(v) for v in means)
    rec.l2, rec.group_lasso = penalty_terms(model)
    rec.penalized = float(np.sum(means)) + rec.l2 + rec.group_lasso
    rec.n_inputs = model.n_inputs


def stratified_split(labels, fraction, seed):
    """Seeded train/validation split; stratified when every label occurs twice or more."""
    labels = np.asarray(labels)
    n = labels.size
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_STREAM]))
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() >= 2:
        val = []
        for c in classes:
            members = rng.permutation(np.flatnonzero(labels == c))
            k = int(round(fraction * members.size))
            k = min(max(k, 1), members.size - 1)
            val.extend(members[:k].tolist())
        val = np.sort(np.array(val, dtype=int))
    else:
        k = min(max(int(round(fraction * n)), 1), n - 1)
        val = np.sort(rng.permutation(n)[:k])
    train = np.setdiff1d(np.arange(n), val)
    return train, val


def pretrain(model, x, y, schedule, seed=0):
    """Classification pre-training on k-means cluster labels of `y`.

    `x` is the full-width predictor matrix of the training rows. Returns
    ``(model, history)``; the model ends up with the weights of the epoch
    with the lowest unpenalized validation cross-entropy.
    """
    history = TrainHistory()
    epochs = schedule.pretrain_epochs
    if epochs == 0:
        return model, history
    if model.head_mode != CLASSIFICATION:
        raise ArgumentError("pre-training needs the classification head (swap_head first)")
    k = model.n_classes
    n = x.shape[0]
    if k > n:
        raise ArgumentError(f"cannot form {k} clusters from {n} samples")
    labels, _, _ = kmeans(y, k, seed=seed)
    train, val = stratified_split(labels, schedule.pretrain_val_fraction, seed)
    xin = model.inputs_from(x)
    x_tr, l_tr, x_val, l_val = xin[train], labels[train], xin[val], labels[val]
    best = (np.inf, None, None)
    for e in range(1, epochs + 1):
        epoch = e - epochs
        rng = _epoch_rng(seed, _PRETRAIN_STREAM, e)
        means = _run_epoch(model, x_tr, l_tr, schedule.lr_initial, schedule.batch_size, rng, epoch)
        rec = EpochRecord(epoch=epoch, phase="pretrain", lr=schedule.lr_initial)
        _fill_record(rec, model, means)
        prob = forward(model, x_val)[1]
        rec.val_cross_entropy = float(-np.mean(np.log(np.maximum(prob[np.arange(val.size), l_val], 1e-300))))
        history.records.append(rec)
        if rec.val_cross_entropy < best[0]:
            best = (rec.val_cross_entropy, epoch, model.snapshot())
    model.restore(best[2])
    history.add_event(0, "restore-best", best_epoch=best[1], val_cross_entropy=best[0])
    return model, history


def train_main(model, train_x, train_y, schedule, monitor=None, seed=0):
    """Frozen phase, unfrozen phase, pruning and post-prune fine-tuning.

    Parameters
    ----------
    model : SbnnModel
        In regression head mode.
    train_x, train_y : arrays
        Full-width training predictors and responses.
    monitor : tuple, optional
        ``(x_test, y_test, train_means)``; the multivariate R^2 on this set
        is recorded after every epoch.
    """
    if model.head_mode != REGRESSION:
        raise ArgumentError("main training needs the regression heads")
    history = TrainHistory()
    s = schedule
    n_frozen = min(s.frozen_layers, len(model.trunk))
    phases = (
        ("frozen", s.frozen_epochs, s.lr_initial),
        ("unfrozen", s.unfrozen_epochs, s.lr_reduced),
        ("postprune", s.postprune_epochs, s.lr_reduced),
    )
    epoch = 0
    for phase, n_epochs, lr in phases:
        if phase == "frozen":
            set_frozen(model, range(n_frozen), True)
            history.add_event(epoch, "freeze", layers=list(range(n_frozen)))
        elif phase == "unfrozen":
            set_frozen(model, range(len(model.layers)), False)
            history.add_event(epoch, "unfreeze", lr=lr)
        else:
            target = min(s.prune_to, model.n_inputs)
            _, selected = prune_inputs(model, target)
            model.group_lasso = 0.0
            history.add_event(epoch, "prune", n_inputs=model.n_inputs,
                              surviving=model.surviving_inputs.tolist())
        xin = model.inputs_from(train_x)
        mon_x = model.inputs_from(monitor[0]) if monitor is not None else None
        for _ in range(n_epochs):
            epoch += 1
            rng = _epoch_rng(seed, _MAIN_STREAM, epoch)
            try:
                means = _run_epoch(model, xin, train_y, lr, s.batch_size, rng, epoch)
            except NumericFault as err:
                err.context.setdefault("phase", phase)
                raise
            rec = EpochRecord(epoch=epoch, phase=phase, lr=lr)
            # reconstruction target is the model input itself
            _fill_record(rec, model, means)
            if monitor is not None:
                rec.monitor_r2 = _r2(monitor[1], forward(model, mon_x)[1], monitor[2])
            history.records.append(rec)
    return model, history


def full_pipeline(dataset, config, schedule, seed=0, monitor=None):
    """Build, pre-train, swap to regression heads, train; return ``(model, history, names)``.

    `names` lists the surviving predictor names ordered by decreasing L2 norm
    of their first-layer weights (ties by original column order).
    """
    from dataclasses import replace

    config = replace(config, seed=seed)
    model = build_network(config, dataset.p, dataset.q)
    model.input_names = tuple(dataset.x_names)
    history = TrainHistory()
    if schedule.pretrain_epochs:
        k = min(schedule.k_clusters, dataset.n)
        swap_head(model, CLASSIFICATION, n_classes=k)
        history.add_event(-schedule.pretrain_epochs, "head-swap", mode=CLASSIFICATION)
        _, pre = pretrain(model, dataset.x, dataset.y, schedule, seed=seed)
        history.extend(pre)
        swap_head(model, REGRESSION)
        history.add_event(0, "head-swap", mode=REGRESSION)
    _, main = train_main(model, dataset.x, dataset.y, schedule, monitor=monitor, seed=seed)
    history.extend(main)
    return model, history, ranked_inputs(model)


def ranked_inputs(model):
    norms = np.linalg.norm(model.trunk[0].w, axis=1)
    order = np.argsort(-norms, kind="stable")
    names = model.input_names
    idx = model.surviving_inputs[order]
    return [names[i] for i in idx] if names is not None else idx.tolist()
