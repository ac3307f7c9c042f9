"""BOLD time series -> Pearson functional connectivity -> brain graph."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DimensionError

__all__ = [
    "BoldMatrix", "FCMatrix", "BrainGraph", "EdgeRule", "LabelError", "ConfigError",
    "extract_roi_timeseries", "pearson_fc", "build_graph", "parse_edge_rule",
    "read_timeseries_csv", "write_timeseries_csv", "read_labels_csv", "write_labels_csv",
    "read_fc_csv", "write_fc_csv", "read_edges_csv", "write_edges_csv",
]


class LabelError(ValueError):
    """A parcel label vector is inconsistent with the requested ROI count."""


class ConfigError(ValueError):
    pass


@dataclass
class BoldMatrix:
    """T x V signal matrix; ``channel_kind`` is ``"voxel"`` or ``"roi"``."""

    values: np.ndarray
    channel_kind: str = "roi"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"BOLD matrix must be 2-D, got shape {self.values.shape}")
        if self.channel_kind not in ("voxel", "roi"):
            raise ValueError(f"unknown channel kind {self.channel_kind!r}")

    @property
    def timepoints(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class FCMatrix:
    values: np.ndarray
    degenerate_mask: np.ndarray

    @property
    def n_rois(self) -> int:
        return self.values.shape[0]


@dataclass
class BrainGraph:
    """Undirected graph over ROIs; node features are FC rows."""

    node_features: np.ndarray
    edges: np.ndarray  # (E, 2) with i < j
    edge_weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.edge_weights is None:
            self.edge_weights = np.ones(len(self.edges))
        self.edge_weights = np.asarray(self.edge_weights, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]


def extract_roi_timeseries(bold: BoldMatrix, labels, n_rois: int | None = None) -> BoldMatrix:
    """Average voxel channels sharing a parcel label."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size != bold.channels:
        raise DimensionError(f"label vector length {labels.size} does not match {bold.channels} channels")
    if n_rois is None:
        n_rois = int(labels.max()) + 1 if labels.size else 0
    if labels.size and (labels.min() < 0 or labels.max() >= n_rois):
        raise LabelError(f"label ids must lie in [0, {n_rois})")
    counts = np.bincount(labels, minlength=n_rois)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise LabelError(f"ROI {int(empty[0])} has no voxels")
    sums = np.zeros((bold.timepoints, n_rois))
    np.add.at(sums.T, labels, bold.values.T)
    return BoldMatrix(sums / counts, channel_kind="roi")


def pearson_fc(ts: BoldMatrix) -> FCMatrix:
    """Pearson correlation between ROI columns.

    Population (1/T) moments are used; the normalisation cancels in r.
    Zero-variance columns are flagged and their whole row and column,
    diagonal included, are set to 0.
    """
    x = ts.values
    t, r = x.shape
    if t < 3:
        raise ValueError(f"need at least 3 timepoints for correlation, got {t}")
    centered = x - x.mean(axis=0)
    ss = (centered * centered).sum(axis=0)
    scale = np.sqrt(ss)
    degenerate = ~(scale > 1e-12 * np.maximum(np.abs(x).max(axis=0), 1e-300) * np.sqrt(t))
    z = np.zeros_like(centered)
    ok = ~degenerate
    z[:, ok] = centered[:, ok] / scale[ok]
    corr = z.T @ z
    upper = np.triu(corr)
    values = upper + np.triu(corr, 1).T
    np.clip(values, -1.0, 1.0, out=values)
    idx = np.flatnonzero(ok)
    values[idx, idx] = 1.0
    values[degenerate, :] = 0.0
    values[:, degenerate] = 0.0
    return FCMatrix(values, degenerate)


@dataclass(frozen=True)
class EdgeRule:
    kind: str  # "topk" | "threshold"
    value: float

    def __str__(self) -> str:
        return f"{self.kind}:{int(self.value) if self.kind == 'topk' else self.value}"


def parse_edge_rule(text: str) -> EdgeRule:
    """Parse ``topk:<k>`` or ``threshold:<tau>``."""
    try:
        kind, raw = text.split(":", 1)
        if kind == "topk":
            return EdgeRule("topk", int(raw))
        if kind == "threshold":
            return EdgeRule("threshold", float(raw))
    except ValueError:
        pass
    raise ConfigError(f"bad edge rule {text!r}; expected topk:<k> or threshold:<tau>")


def build_graph(fc: FCMatrix, rule: EdgeRule = EdgeRule("topk", 10)) -> BrainGraph:
    values = fc.values
    n = values.shape[0]
    strength = np.abs(values).copy()
    np.fill_diagonal(strength, -np.inf)
    strength[fc.degenerate_mask, :] = -np.inf
    strength[:, fc.degenerate_mask] = -np.inf

    if rule.kind == "threshold":
        tau = rule.value
        if not 0.0 <= tau < 1.0:
            raise ConfigError(f"threshold must lie in [0, 1), got {tau}")
        keep = strength > tau
    elif rule.kind == "topk":
        k = int(rule.value)
        if not 1 <= k < n:
            raise ConfigError(f"topk needs 1 <= k < {n}, got {k}")
        keep = np.zeros((n, n), dtype=bool)
        cols = np.arange(n)
        for i in np.flatnonzero(~fc.degenerate_mask):
            # descending strength, ascending neighbour index on ties
            order = np.lexsort((cols, -strength[i]))
            chosen = [j for j in order[:k] if np.isfinite(strength[i, j])]
            keep[i, chosen] = True
        keep |= keep.T
    else:
        raise ConfigError(f"unknown edge rule {rule.kind!r}")

    ii, jj = np.nonzero(np.triu(keep, 1))
    edges = np.stack([ii, jj], axis=1)
    weights = np.abs(values[ii, jj])
    return BrainGraph(values.copy(), edges, weights)


# ---------------------------------------------------------------------------
# CSV interfaces


def write_timeseries_csv(path, bold: BoldMatrix, fmt: str = "%.17g") -> None:
    t, v = bold.values.shape
    header = ",".join(["t"] + [f"ch{i}" for i in range(v)])
    data = np.column_stack([np.arange(t), bold.values])
    fmts = ["%d"] + [fmt] * v
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmts)


def read_timeseries_csv(path, channel_kind: str = "roi") -> BoldMatrix:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    if not header or header[0] != "t" or any(h != f"ch{i}" for i, h in enumerate(header[1:])):
        raise ValueError(f"{path}: header must be t,ch0,ch1,...")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return BoldMatrix(data[:, 1:], channel_kind=channel_kind)


def write_labels_csv(path, labels) -> None:
    np.savetxt(path, np.asarray(labels, dtype=np.int64), fmt="%d")


def read_labels_csv(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.int64, ndmin=1)


def write_fc_csv(path, fc: FCMatrix) -> None:
    np.savetxt(path, fc.values, delimiter=",", fmt="%.17g")


def read_fc_csv(path) -> FCMatrix:
    values = np.loadtxt(Path(path), delimiter=",", ndmin=2)
    degenerate = np.diag(values) == 0.0
    return FCMatrix(values, degenerate)


def write_edges_csv(path, graph: BrainGraph) -> None:
    data = np.column_stack([graph.edges, graph.edge_weights])
    np.savetxt(path, data, delimiter=",", header="i,j,weight", comments="", fmt=["%d", "%d", "%.17g"])


def read_edges_csv(path, fc: FCMatrix) -> BrainGraph:
    """Rebuild a graph from its edge list; node features come from ``fc``."""
    lines = Path(path).read_text().split("\n", 1)
    if len(lines) < 2 or not lines[1].strip():
        edges, weights = np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    else:
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        edges, weights = data[:, :2].astype(np.int64), data[:, 2]
    n = fc.n_rois
    if edges.size and (edges.min() < 0 or edges.max() >= n or np.any(edges[:, 0] >= edges[:, 1])):
        raise ValueError(f"{path}: edges must satisfy 0 <= i < j < {n}")
    return BrainGraph(fc.values.copy(), edges, weights)
