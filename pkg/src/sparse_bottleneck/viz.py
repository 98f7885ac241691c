"""Latent-space scatter panels rendered as standalone SVG files.

Colormap anchors (value -1 .. 1, linear interpolation, 257 entries so that
0 lands exactly on the middle entry)::

    -1     #0d1b6e  dark blue
    -1/3   #1f8a8c  teal
    +1/3   #4cc24a  green
    +1     #fde725  yellow
"""

import json
import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError
from .sbnn import CLASSIFICATION, SbnnModel, forward
from .srrr import RrrModel
from .tsne import tsne_exact

SOURCES = ("direct_bottleneck", "tsne_of_bottleneck", "srrr_components")
CANVAS = 800
MARGIN = 0.05
RADIUS = 3
BASE_PANEL = "latent"
DEFAULT_COLOR = "#808080"
_ANCHORS = np.array([[0x0d, 0x1b, 0x6e], [0x1f, 0x8a, 0x8c], [0x4c, 0xc2, 0x4a], [0xfd, 0xe7, 0x25]], dtype=float)
N_COLORS = 257


def _build_colormap():
    t = np.linspace(0.0, 1.0, N_COLORS)
    at = np.linspace(0.0, 1.0, len(_ANCHORS))
    rgb = np.column_stack([np.interp(t, at, _ANCHORS[:, c]) for c in range(3)])
    return ["#%02x%02x%02x" % tuple(int(round(v)) for v in row) for row in rgb]


COLORMAP = tuple(_build_colormap())


def value_color(v):
    """Hex color for one overlay value; values outside [-1, 1] are clipped."""
    v = min(max(float(v), -1.0), 1.0)
    return COLORMAP[int(round((v + 1.0) / 2.0 * (N_COLORS - 1)))]


@dataclass(frozen=True)
class LatentEmbedding:
    coords: np.ndarray
    source: str
    colors: tuple
    labels: tuple

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.ndim != 2 or c.shape[1] != 2:
            raise ShapeError("embedding coords", "n x 2", c.shape)
        if not np.all(np.isfinite(c)):
            raise ArgumentError("embedding coordinates must be finite")
        if self.source not in SOURCES:
            raise ArgumentError(f"source must be one of {SOURCES}")
        if len(self.colors) != c.shape[0] or len(self.labels) != c.shape[0]:
            raise ShapeError("colors/labels", c.shape[0], (len(self.colors), len(self.labels)))
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "colors", tuple(self.colors))
        object.__setattr__(self, "labels", tuple(self.labels))


def extract_latent(model, x):
    """Bottleneck activations of an sBNN, or ``X W`` of a (sparse) RRR model.

    `x` may be full width or already restricted to the surviving inputs.
    """
    if isinstance(model, SbnnModel):
        return forward(model, model.inputs_from(x))[0]
    if isinstance(model, RrrModel):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != model.w.shape[0]:
            raise ShapeError("input columns", model.w.shape[0], x.shape[-1])
        return model.latent(x)
    raise ArgumentError(f"cannot extract a latent space from {type(model).__name__}")


def embed(model, dataset, perplexity=30.0, seed=0, iters=750):
    """2-d embedding of the dataset's latent representation.

    Two-dimensional latents are used directly; wider ones go through exact
    t-SNE. A one-dimensional latent gets a zero second axis.
    """
    z = extract_latent(model, dataset.x)
    if z.shape[1] > 2:
        coords = tsne_exact(z, perplexity=min(perplexity, dataset.n / 3.0), iters=iters, seed=seed)
        source = "tsne_of_bottleneck"
    else:
        coords = z if z.shape[1] == 2 else np.column_stack([z[:, 0], np.zeros(z.shape[0])])
        source = "direct_bottleneck" if isinstance(model, SbnnModel) else "srrr_components"
    colors = dataset.sample_colors or (DEFAULT_COLOR,) * dataset.n
    labels = dataset.sample_labels or ("",) * dataset.n
    return LatentEmbedding(coords, source, colors, labels)


def prediction_overlays(model, dataset):
    """Model predictions to paint on the latent space.

    Returns ``(feature_overlays, gene_overlays)`` as lists of
    ``(name, values)``: every response feature, then every selected gene.
    For an sBNN the gene values come from the reconstruction head; a linear
    model has none, so selected genes are predicted by least squares from
    the latent coordinates.
    """
    if isinstance(model, SbnnModel):
        if model.head_mode == CLASSIFICATION:
            raise ArgumentError("overlays need a model with regression heads")
        _, y_pred, x_recon = forward(model, model.inputs_from(dataset.x))
        genes = [dataset.x_names[i] for i in model.surviving_inputs]
        gene_values = x_recon
    else:
        y_pred = model.predict(dataset.x)
        sel = model.selected
        genes = [dataset.x_names[i] for i in sel]
        z = np.column_stack([np.ones(dataset.n), extract_latent(model, dataset.x)])
        coef, *_ = np.linalg.lstsq(z, dataset.x[:, sel], rcond=None)
        gene_values = z @ coef
    feats = [(name, y_pred[:, j]) for j, name in enumerate(dataset.y_names)]
    gene_panels = [(name, gene_values[:, j]) for j, name in enumerate(genes)]
    return feats, gene_panels


def _slug(name):
    s = re.sub(r"[^A-Za-z0-9._-]+", "_", str(name)).strip("._")
    return s or "panel"


def _xml_escape(s):
    return (str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def _layout(coords):
    """Map coords into the canvas with a 5% margin and one scale for both axes."""
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    span = float(np.max(hi - lo))
    inner = CANVAS * (1.0 - 2.0 * MARGIN)
    scale = inner / span if span > 0 else 0.0
    center = (lo + hi) / 2.0
    px = CANVAS / 2.0 + (coords[:, 0] - center[0]) * scale
    py = CANVAS / 2.0 - (coords[:, 1] - center[1]) * scale  # SVG y grows downwards
    return px, py


def _svg(px, py, fills, title):
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{CANVAS}" height="{CANVAS}" '
        f'viewBox="0 0 {CANVAS} {CANVAS}">',
        f"<title>{_xml_escape(title)}</title>",
        f'<rect x="0" y="0" width="{CANVAS}" height="{CANVAS}" fill="#ffffff"/>',
    ]
    for x, y, f in zip(px, py, fills):
        lines.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="{RADIUS}" fill="{f}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_latent_svg(embedding, overlays, out_dir):
    """Write the base scatter and one panel per overlay; return the file paths.

    The base panel (``latent.svg``) uses the samples' own colors; overlay
    panels (``<name>.svg``) color each point by its value through the
    colormap, clipped to [-1, 1]. ``index.json`` lists every panel with its
    raw value range and the embedding source.
    """
    n = embedding.coords.shape[0]
    px, py = _layout(embedding.coords)
    os.makedirs(out_dir, exist_ok=True)
    panels = [(BASE_PANEL, None)] + [(name, np.asarray(v, dtype=float)) for name, v in overlays]
    seen = set()
    paths = []
    index = {"source": embedding.source, "n": n, "canvas": CANVAS, "panels": []}
    for name, values in panels:
        slug = _slug(name)
        if slug in seen:
            raise ArgumentError(f"duplicate panel file name {slug!r}")
        seen.add(slug)
        if values is None:
            fills = embedding.colors
            entry = {"name": name, "file": f"{slug}.svg", "kind": "base"}
        else:
            if values.shape != (n,):
                raise ShapeError(f"overlay {name!r}", n, values.shape)
            fills = [value_color(v) for v in values]
            entry = {"name": name, "file": f"{slug}.svg", "kind": "overlay",
                     "min": float(values.min()), "max": float(values.max())}
        path = os.path.join(out_dir, f"{slug}.svg")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(_svg(px, py, fills, name))
        paths.append(path)
        index["panels"].append(entry)
    with open(os.path.join(out_dir, "index.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(index, fh, indent=2)
        fh.write("\n")
    return paths
