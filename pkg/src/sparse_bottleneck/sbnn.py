"""Sparse bottleneck neural network with hand-written backpropagation.

Architecture (defaults)::

    x (p') -> 512 -> 128 -> bottleneck (2 or 64)          shared trunk
    bottleneck -> 128 -> 512 -> q                         "allo" head, predicts y
    bottleneck -> 128 -> 512 -> p'                        "auto" head, reconstructs x

Hidden layers use ELU; the bottleneck and the readouts are linear. For
pre-training the two heads are replaced by a single softmax readout over
k-means cluster labels. ``p'`` is the number of inputs that survived pruning.

Layer indices used by :func:`set_frozen` refer to ``model.layers``: trunk
layers first (input side first), then the head layers in head order.
"""

import copy
import json
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .errors import ArgumentError, NumericFault, ShapeError

REGRESSION = "regression"
CLASSIFICATION = "classification"
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-7
GROUP_EPS = 1e-12
ACTIVATIONS = ("elu", "linear")


@dataclass(frozen=True)
class SbnnConfig:
    encoder_sizes: tuple = (512, 128)
    bottleneck: int = 2
    decoder_sizes: tuple = (128, 512)
    hidden_activation: str = "elu"
    output_activation: str = "linear"
    l2_penalty: float = 1e-10
    group_lasso: float = 0.1
    recon_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_sizes", tuple(int(s) for s in self.encoder_sizes))
        object.__setattr__(self, "decoder_sizes", tuple(int(s) for s in self.decoder_sizes))
        sizes = self.encoder_sizes + self.decoder_sizes + (self.bottleneck,)
        if any(s < 1 for s in sizes):
            raise ArgumentError(f"layer sizes must be >= 1, got {sizes}")
        for name in ("l2_penalty", "group_lasso", "recon_weight"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be >= 0")
        for name in ("hidden_activation", "output_activation"):
            if getattr(self, name) not in ACTIVATIONS:
                raise ArgumentError(f"{name} must be one of {ACTIVATIONS}")

    def to_dict(self):
        d = asdict(self)
        d["encoder_sizes"] = list(self.encoder_sizes)
        d["decoder_sizes"] = list(self.decoder_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Dense:
    w: np.ndarray
    b: np.ndarray
    activation: str
    name: str
    frozen: bool = False
    readout: bool = False
    m_w: np.ndarray = None
    v_w: np.ndarray = None
    m_b: np.ndarray = None
    v_b: np.ndarray = None

    def __post_init__(self):
        if self.m_w is None:
            self.reset_moments()

    def reset_moments(self):
        self.m_w = np.zeros_like(self.w)
        self.v_w = np.zeros_like(self.w)
        self.m_b = np.zeros_like(self.b)
        self.v_b = np.zeros_like(self.b)

    @property
    def shape(self):
        return self.w.shape


@dataclass
class LossTerms:
    mse_y: float = 0.0
    mse_x: float = 0.0
    cross_entropy: float = 0.0
    l2: float = 0.0
    group_lasso: float = 0.0

    @property
    def data(self):
        return self.mse_y + self.mse_x + self.cross_entropy

    @property
    def total(self):
        return self.data + self.l2 + self.group_lasso


class SbnnModel:
    """Network weights plus the training state that travels with them."""

    def __init__(self, config, p, q):
        self.config = config
        self.p_original = int(p)
        self.q = int(q)
        self.trunk = []
        self.heads = {}
        self.head_mode = REGRESSION
        self.n_classes = None
        self.surviving_inputs = np.arange(p)
        self.input_names = None
        self.group_lasso = config.group_lasso
        self.step = 0
        self._init_draws = 0

    @property
    def layers(self):
        out = list(self.trunk)
        for path in self.heads.values():
            out.extend(path)
        return out

    @property
    def n_inputs(self):
        return int(self.surviving_inputs.size)

    @property
    def selected_names(self):
        if self.input_names is None:
            return None
        return [self.input_names[i] for i in self.surviving_inputs]

    def n_params(self):
        return sum(l.w.size + l.b.size for l in self.layers)

    def _next_rng(self):
        rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, self._init_draws]))
        self._init_draws += 1
        return rng

    def inputs_from(self, x):
        """Pick the surviving input columns out of a full-width (or already pruned) matrix."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise ShapeError("input", "2-d matrix", x.shape)
        if x.shape[1] == self.n_inputs:
            return x
        if x.shape[1] == self.p_original:
            return x[:, self.surviving_inputs]
        raise ShapeError("input columns", f"{self.n_inputs} (or {self.p_original} before pruning)", x.shape[1])

    def predict(self, x):
        return forward(self, self.inputs_from(x))[1]

    def snapshot(self):
        return [(l.w.copy(), l.b.copy()) for l in self.layers]

    def restore(self, snap):
        for layer, (w, b) in zip(self.layers, snap):
            layer.w[...] = w
            layer.b[...] = b

    def copy(self):
        return copy.deepcopy(self)

    # -- serialization ---------------------------------------------------

    def to_dict(self):
        return {
            "kind": "sbnn",
            "config": self.config.to_dict(),
            "p_original": self.p_original,
            "q": self.q,
            "head_mode": self.head_mode,
            "n_classes": self.n_classes,
            "surviving_inputs": self.surviving_inputs.tolist(),
            "input_names": None if self.input_names is None else list(self.input_names),
            "group_lasso": self.group_lasso,
            "adam_step": self.step,
            "resumable": False,
            "init_draws": self._init_draws,
            "layers": [
                {
                    "name": l.name,
                    "head": head,
                    "activation": l.activation,
                    "shape": list(l.w.shape),
                    "frozen": l.frozen,
                    "readout": l.readout,
                    "w": l.w.ravel().tolist(),
                    "b": l.b.tolist(),
                }
                for head, l in self._tagged_layers()
            ],
        }

    def _tagged_layers(self):
        for l in self.trunk:
            yield "trunk", l
        for name, path in self.heads.items():
            for l in path:
                yield name, l

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        model = cls(SbnnConfig.from_dict(d["config"]), d["p_original"], d["q"])
        model.head_mode = d["head_mode"]
        model.n_classes = d["n_classes"]
        model.surviving_inputs = np.array(d["surviving_inputs"], dtype=int)
        model.input_names = None if d["input_names"] is None else tuple(d["input_names"])
        model.group_lasso = d["group_lasso"]
        model.step = d["adam_step"]
        model._init_draws = d.get("init_draws", 0)
        for entry in d["layers"]:
            layer = Dense(
                np.array(entry["w"], dtype=float).reshape(entry["shape"]),
                np.array(entry["b"], dtype=float),
                entry["activation"], entry["name"],
                frozen=entry["frozen"], readout=entry["readout"],
            )
            if entry["head"] == "trunk":
                model.trunk.append(layer)
            else:
                model.heads.setdefault(entry["head"], []).append(layer)
        return model


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _make_path(rng, sizes, activations, names, readout_last):
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(
            glorot_uniform(rng, fan_in, fan_out), np.zeros(fan_out), activations[i], names[i],
            readout=readout_last and i == len(sizes) - 2,
        ))
    return layers


def _regression_heads(model, rng):
    cfg = model.config
    hidden = [cfg.hidden_activation] * len(cfg.decoder_sizes) + [cfg.output_activation]
    heads = {}
    for name, width in (("allo", model.q), ("auto", model.n_inputs)):
        sizes = [cfg.bottleneck, *cfg.decoder_sizes, width]
        names = [f"{name}_{i}" for i in range(len(sizes) - 1)]
        heads[name] = _make_path(rng, sizes, hidden, names, readout_last=True)
    return heads


def build_network(config, p, q):
    """Fresh network in regression mode with Glorot-uniform weights and zero biases."""
    if p < 1 or q < 1:
        raise ArgumentError(f"p and q must be >= 1, got p={p}, q={q}")
    model = SbnnModel(config, p, q)
    rng = model._next_rng()
    sizes = [p, *config.encoder_sizes, config.bottleneck]
    acts = [config.hidden_activation] * len(config.encoder_sizes) + ["linear"]
    names = [f"enc_{i}" for i in range(len(config.encoder_sizes))] + ["bottleneck"]
    model.trunk = _make_path(rng, sizes, acts, names, readout_last=False)
    model.heads = _regression_heads(model, rng)
    return model


# -- forward / backward ---------------------------------------------------------

def _activate(z, kind):
    if kind == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if kind == "softmax":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    return z


def _run_path(path, h, cache):
    for layer in path:
        a = _activate(h @ layer.w + layer.b, layer.activation)
        if cache is not None:
            cache.append((layer, h, a))
        h = a
    return h


def _forward_cached(model, x, cache):
    latent = _run_path(model.trunk, x, cache["trunk"] if cache is not None else None)
    outs = {}
    for name, path in model.heads.items():
        outs[name] = _run_path(path, latent, cache.setdefault(name, []) if cache is not None else None)
    return latent, outs


def forward(model, x_batch):
    """Return ``(latent, y_pred, x_recon)``.

    In classification mode ``y_pred`` holds the softmax class probabilities
    and ``x_recon`` is None.
    """
    x_batch = np.asarray(x_batch, dtype=float)
    if x_batch.ndim != 2 or x_batch.shape[1] != model.n_inputs:
        raise ShapeError("input batch columns", model.n_inputs,
                         x_batch.shape[1] if x_batch.ndim == 2 else x_batch.shape)
    latent, outs = _forward_cached(model, x_batch, None)
    if model.head_mode == CLASSIFICATION:
        return latent, outs["cls"], None
    return latent, outs["allo"], outs["auto"]


def _backward_path(path_cache, grad_out, grads, start_is_logits=False, need_input=True):
    """Backpropagate through cached layers; returns gradient wrt the path input."""
    d = grad_out
    for k in range(len(path_cache) - 1, -1, -1):
        layer, h_in, a = path_cache[k]
        if k == len(path_cache) - 1 and start_is_logits:
            dz = d
        elif layer.activation == "elu":
            dz = d * np.where(a > 0, 1.0, a + 1.0)
        else:
            dz = d
        grads[id(layer)] = [h_in.T @ dz, dz.sum(axis=0)]
        if k or need_input:
            d = dz @ layer.w.T
    return d


def penalty_terms(model):
    """``(l2, group_lasso)`` penalty values for the current weights."""
    l2 = 0.0
    if model.config.l2_penalty:
        for layer in model.layers:
            l2 += float(np.sum(layer.w * layer.w))
            if not layer.readout:
                l2 += float(np.sum(layer.b * layer.b))
        l2 *= model.config.l2_penalty
    gl = 0.0
    if model.group_lasso:
        gl = model.group_lasso * float(np.sum(np.linalg.norm(model.trunk[0].w, axis=1)))
    return l2, gl


def loss_and_gradients(model, x_batch, y_batch, context=None):
    """Penalized loss and its gradient for one batch.

    Regression mode::

        MSE(y_pred, y) + recon_weight * MSE(x_recon, x)
        + l2 * (sum of squared weights and non-readout biases)
        + group_lasso * sum_i ||W1_i.||_2

    Classification mode replaces the two MSE terms with the mean categorical
    cross-entropy; ``y_batch`` then holds integer labels. MSE averages over
    all entries of the target. Gradients of frozen layers are zero.

    Returns ``(LossTerms, grads)`` where ``grads[i] = (dW, db)`` for
    ``model.layers[i]``.
    """
    cfg = model.config
    x = np.asarray(x_batch, dtype=float)
    bsz = x.shape[0]
    cache = {"trunk": []}
    latent, outs = _forward_cached(model, x, cache)
    terms = LossTerms()
    grads = {}
    d_latent = np.zeros_like(latent)
    if model.head_mode == CLASSIFICATION:
        labels = np.asarray(y_batch, dtype=int)
        prob = outs["cls"]
        picked = prob[np.arange(bsz), labels]
        terms.cross_entropy = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
        d = prob.copy()
        d[np.arange(bsz), labels] -= 1.0
        d_latent += _backward_path(cache["cls"], d / bsz, grads, start_is_logits=True)
    else:
        y = np.asarray(y_batch, dtype=float)
        resid_y = outs["allo"] - y
        terms.mse_y = float(np.mean(resid_y * resid_y))
        d_latent += _backward_path(cache["allo"], resid_y * (2.0 / resid_y.size), grads)
        if cfg.recon_weight:
            resid_x = outs["auto"] - x
            terms.mse_x = cfg.recon_weight * float(np.mean(resid_x * resid_x))
            d_latent += _backward_path(cache["auto"], resid_x * (2.0 * cfg.recon_weight / resid_x.size), grads)
        else:
            for layer in model.heads["auto"]:
                grads[id(layer)] = [np.zeros_like(layer.w), np.zeros_like(layer.b)]
    _backward_path(cache["trunk"], d_latent, grads, need_input=False)

    terms.l2, terms.group_lasso = penalty_terms(model)
    if cfg.l2_penalty:
        for layer in model.layers:
            g = grads[id(layer)]
            g[0] += 2.0 * cfg.l2_penalty * layer.w
            if not layer.readout:
                g[1] += 2.0 * cfg.l2_penalty * layer.b
    if model.group_lasso:
        w1 = model.trunk[0].w
        norms = np.maximum(np.linalg.norm(w1, axis=1), GROUP_EPS)
        grads[id(model.trunk[0])][0] += model.group_lasso * w1 / norms[:, None]

    if not np.isfinite(terms.total):
        raise NumericFault("non-finite loss", **(context or {}))
    out = []
    for layer in model.layers:
        gw, gb = grads[id(layer)]
        if layer.frozen:
            gw, gb = np.zeros_like(gw), np.zeros_like(gb)
        out.append((gw, gb))
    return terms, out


@numba.njit(cache=True)
def _adam_update(param, m, v, g, lr, c1, c2):
    rows, cols = param.shape
    for i in range(rows):
        for j in range(cols):
            gij = g[i, j]
            m[i, j] = ADAM_BETA1 * m[i, j] + (1.0 - ADAM_BETA1) * gij
            v[i, j] = ADAM_BETA2 * v[i, j] + (1.0 - ADAM_BETA2) * (gij * gij)
            param[i, j] -= lr * (m[i, j] / c1) / (np.sqrt(v[i, j] / c2) + ADAM_EPS)


def adam_step(model, gradients, lr):
    """One Adam update (beta1 0.9, beta2 0.999, eps 1e-7) of all unfrozen layers."""
    if lr <= 0:
        raise ArgumentError("learning rate must be > 0")
    model.step += 1
    t = model.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for layer, (gw, gb) in zip(model.layers, gradients):
        if layer.frozen:
            continue
        _adam_update(layer.w, layer.m_w, layer.v_w, gw, lr, c1, c2)
        _adam_update(layer.b[None, :], layer.m_b[None, :], layer.v_b[None, :], gb[None, :], lr, c1, c2)
    return model


def set_frozen(model, layer_indices, frozen=True):
    layers = model.layers
    for i in layer_indices:
        if not 0 <= i < len(layers):
            raise ArgumentError(f"layer index {i} out of range 0..{len(layers) - 1}")
    for i in layer_indices:
        layers[i].frozen = bool(frozen)
    return model


def prune_inputs(model, k):
    """Keep the `k` inputs whose first-layer rows have the largest L2 norm.

    Ties go to the lower index. The first layer, its Adam moments and (in
    regression mode) the reconstruction readout are cut down to the
    survivors, which keep their current order. Returns ``(model, selected)``
    with `selected` indexing the inputs as they were before this call.
    """
    current = model.n_inputs
    if not 1 <= k <= current:
        raise ArgumentError(f"cannot prune {current} inputs to {k}")
    first = model.trunk[0]
    norms = np.linalg.norm(first.w, axis=1)
    selected = np.sort(np.argsort(-norms, kind="stable")[:k])
    if k == current:
        return model, selected
    first.w = first.w[selected]
    first.m_w = first.m_w[selected]
    first.v_w = first.v_w[selected]
    if "auto" in model.heads:
        out = model.heads["auto"][-1]
        out.w = out.w[:, selected]
        out.b = out.b[selected]
        out.m_w, out.v_w = out.m_w[:, selected], out.v_w[:, selected]
        out.m_b, out.v_b = out.m_b[selected], out.v_b[selected]
    model.surviving_inputs = model.surviving_inputs[selected]
    return model, selected


def swap_head(model, mode, n_classes=None):
    """Replace the readout heads, keeping the trunk.

    ``classification`` installs one linear-softmax readout with
    `n_classes` outputs on the bottleneck; ``regression`` installs fresh
    allo/auto decoder heads. Adam moments and the step counter are reset,
    as with a freshly compiled optimizer.
    """
    rng = model._next_rng()
    if mode == CLASSIFICATION:
        if not n_classes or n_classes < 2:
            raise ArgumentError("classification head needs n_classes >= 2")
        b = model.config.bottleneck
        model.heads = {"cls": [Dense(glorot_uniform(rng, b, n_classes), np.zeros(n_classes),
                                     "softmax", "cls_out", readout=True)]}
        model.n_classes = int(n_classes)
    elif mode == REGRESSION:
        model.heads = _regression_heads(model, rng)
        model.n_classes = None
    else:
        raise ArgumentError(f"unknown head mode {mode!r}")
    model.head_mode = mode
    for layer in model.layers:
        layer.reset_moments()
    model.step = 0
    return model


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("kind") == "sbnn":
        return SbnnModel.from_dict(d)
    from .srrr import RrrModel
    return RrrModel.from_dict(d)
