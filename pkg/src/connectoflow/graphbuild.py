"""Per-timepoint sparse correlation graphs and per-subject dynamic graphs.

Edges keep their (positive) correlation weight after thresholding; ties at
the density boundary break by lexicographic pair index so golden files are
stable. Degree-zero nodes are repaired with their single best-correlated
partner, which may carry a negative weight when no positive one exists
(flagged on the graph).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc


class GraphInputError(ValueError):
    """Signals are unusable for correlation-graph construction."""


class StructureError(ValueError):
    """The graph cannot satisfy a structural guarantee (e.g. N=1 repair)."""


@dataclass
class GraphSlice:
    """One timepoint of a dynamic graph."""

    time: float
    features: np.ndarray      # N x D reconstructed signals
    adjacency: np.ndarray     # N x N symmetric, zero diagonal
    sparsity_warning: bool = False
    repair_negative: bool = False
    zero_variance_nodes: tuple[int, ...] = ()

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Upper-triangle indices of present edges."""
        iu, ju = np.triu_indices(self.adjacency.shape[0], k=1)
        mask = self.adjacency[iu, ju] != 0.0
        return iu[mask], ju[mask]


@dataclass
class DynamicGraph:
    """Ordered (timestamp, features, adjacency) snapshots for one subject."""

    subject_id: str
    label: int
    slices: list[GraphSlice] = field(default_factory=list)

    @property
    def times(self) -> list[float]:
        return [s.time for s in self.slices]

    def __len__(self) -> int:
        return len(self.slices)


def pearson_matrix(signals: np.ndarray) -> np.ndarray:
    """Pearson correlation between rows; zero-variance rows correlate 0 with all."""
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 2 or signals.shape[1] < 3:
        raise GraphInputError(
            f"pearson_matrix needs an N x D matrix with D >= 3, got shape {signals.shape}"
        )
    centered = signals - signals.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    unit = centered / safe[:, None]
    corr = unit @ unit.T
    corr[zero, :] = 0.0
    corr[:, zero] = 0.0
    np.fill_diagonal(corr, np.where(zero, 0.0, 1.0))
    np.clip(corr, -1.0, 1.0, out=corr)
    return corr


def zero_variance_nodes(signals: np.ndarray) -> tuple[int, ...]:
    centered = signals - signals.mean(axis=1, keepdims=True)
    return tuple(int(i) for i in np.flatnonzero((centered * centered).sum(axis=1) == 0.0))


def threshold_top_positive(corr: np.ndarray, density: float) -> tuple[np.ndarray, bool]:
    """Keep the k = ceil(density * N(N-1)/2) largest strictly positive pairs.

    Ties at the boundary break by smaller (i, j) lexicographic index. Returns
    (adjacency, sparsity_warning); the warning flags fewer positive pairs
    than the density budget.
    """
    if not 0.0 < density <= 1.0:
        raise GraphInputError(f"density must lie in (0, 1], got {density}")
    corr = np.asarray(corr, dtype=np.float64)
    n = corr.shape[0]
    adj = np.zeros_like(corr)
    if n < 2:
        return adj, False
    iu, ju = np.triu_indices(n, k=1)
    vals = corr[iu, ju]
    pos_idx = np.flatnonzero(vals > 0.0)
    k = int(np.ceil(density * n * (n - 1) / 2.0))
    warning = pos_idx.size < k
    keep_count = min(k, pos_idx.size)
    if keep_count > 0:
        # sort by (-value, i, j): lexicographic index breaks value ties
        order = np.lexsort((ju[pos_idx], iu[pos_idx], -vals[pos_idx]))
        chosen = pos_idx[order[:keep_count]]
        adj[iu[chosen], ju[chosen]] = vals[chosen]
        adj[ju[chosen], iu[chosen]] = vals[chosen]
    return adj, warning


def repair_isolated(adjacency: np.ndarray, corr: np.ndarray) -> tuple[np.ndarray, bool]:
    """Connect each degree-0 node to its argmax-correlation partner.

    Positive correlations are preferred; failing that, the largest-absolute
    correlation is used and its (possibly negative) value stored. Idempotent.
    Returns (adjacency, used_negative_edge).
    """
    adjacency = np.asarray(adjacency, dtype=np.float64).copy()
    corr = np.asarray(corr, dtype=np.float64)
    n = adjacency.shape[0]
    if n == 1:
        raise StructureError("cannot repair isolation in a single-node graph")
    used_negative = False
    degree = (adjacency != 0.0).sum(axis=1)
    for node in np.flatnonzero(degree == 0):
        row = corr[node].copy()
        row[node] = -np.inf
        positive = row > 0.0
        if positive.any():
            candidates = np.where(positive, row, -np.inf)
            partner = int(np.argmax(candidates))
            weight = float(row[partner])
        else:
            partner = int(np.argmax(np.abs(np.where(np.isfinite(row), row, 0.0))))
            weight = float(row[partner])
            if weight == 0.0:
                weight = 1e-12  # fully uncorrelated node: minimal positive tie
            if weight < 0.0:
                used_negative = True
        adjacency[node, partner] = weight
        adjacency[partner, node] = weight
    return adjacency, used_negative


def build_slice(time: float, signals: np.ndarray, density: float) -> GraphSlice:
    """Correlate, threshold, and repair one timepoint's signal window."""
    corr = pearson_matrix(signals)
    adj, warning = threshold_top_positive(corr, density)
    adj, negative = repair_isolated(adj, corr)
    return GraphSlice(
        time=float(time),
        features=np.asarray(signals, dtype=np.float64),
        adjacency=adj,
        sparsity_warning=warning,
        repair_negative=negative,
        zero_variance_nodes=zero_variance_nodes(signals),
    )


def build_dynamic_graph(
    subject,
    recon_values: list[np.ndarray] | None,
    density: float,
    grid: list[float] | None = None,
) -> DynamicGraph:
    """Assemble a subject's dynamic graph from reconstructed visit windows.

    ``recon_values`` holds one N x D matrix per grid time (posterior-mean
    reconstructions); ``None`` passes the subject's raw observations through.
    ``grid`` defaults to the subject's own visit schedule.
    """
    times = list(grid) if grid is not None else list(subject.visit_months)
    if not times:
        raise GraphInputError(f"subject {subject.subject_id} has no visits")
    if recon_values is None:
        if grid is not None and list(grid) != list(subject.visit_months):
            raise GraphInputError("identity reconstruction requires the visit-time grid")
        recon_values = list(subject.signals)
    if len(recon_values) != len(times):
        raise GraphInputError(
            f"subject {subject.subject_id}: {len(recon_values)} windows for {len(times)} times"
        )
    graph = DynamicGraph(subject_id=subject.subject_id, label=int(subject.label))
    for t, window in zip(times, recon_values):
        try:
            graph.slices.append(build_slice(t, window, density))
        except (GraphInputError, StructureError) as err:
            raise type(err)(f"subject {subject.subject_id} at t={t}: {err}") from err
    return graph


# ---------------------------------------------------------------------------
# JSON manifest + CSV serialization
# ---------------------------------------------------------------------------

def save_dynamic_graph(graph: DynamicGraph, out_dir: Path) -> Path:
    """One JSON manifest per subject plus per-timepoint feature/adjacency CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subject_id": graph.subject_id,
        "label": graph.label,
        "times_months": graph.times,
        "features": [],
        "adjacency": [],
        "flags": {
            "sparsity_warning": [s.sparsity_warning for s in graph.slices],
            "repair_negative": [s.repair_negative for s in graph.slices],
            "zero_variance_nodes": [list(s.zero_variance_nodes) for s in graph.slices],
        },
    }
    for k, s in enumerate(graph.slices):
        feat = f"t{k}_features.csv"
        adjf = f"t{k}_adjacency.csv"
        dc.save_matrix_csv(s.features, out_dir / feat)
        dc.save_matrix_csv(s.adjacency, out_dir / adjf)
        manifest["features"].append(feat)
        manifest["adjacency"].append(adjf)
    path = out_dir / "graph.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dynamic_graph(manifest_path: Path) -> DynamicGraph:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    graph = DynamicGraph(subject_id=manifest["subject_id"], label=int(manifest["label"]))
    flags = manifest.get("flags", {})
    for k, t in enumerate(manifest["times_months"]):
        graph.slices.append(
            GraphSlice(
                time=float(t),
                features=dc.load_matrix_csv(manifest_path.parent / manifest["features"][k]),
                adjacency=dc.load_matrix_csv(manifest_path.parent / manifest["adjacency"][k]),
                sparsity_warning=bool(flags.get("sparsity_warning", [False] * (k + 1))[k]),
                repair_negative=bool(flags.get("repair_negative", [False] * (k + 1))[k]),
                zero_variance_nodes=tuple(flags.get("zero_variance_nodes", [[]] * (k + 1))[k]),
            )
        )
    return graph
