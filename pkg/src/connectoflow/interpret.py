"""Learnable importance probabilities and biomarker extraction.

P_X (shared feature importance, N x D) lives as unconstrained logits under a
sigmoid; the per-subject per-timepoint edge probabilities P_A are computed
from node features and P_X through a learnable projection, symmetrized over
both edge orientations. Group-level biomarkers come from Welch t-tests over
subject-mean masked edge weights with BH-FDR control.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import stats
from .diffcore import ParamStore, RandomStream, Value
from .synthcohort import NETWORK_NAMES, N_NETWORKS, network_table


class InterpretError(ValueError):
    """Interpretation inputs violate a precondition."""


class ImportanceMasks:
    """Shared P_X (as sigmoid logits) and the edge-probability projection v."""

    def __init__(self, store: ParamStore, n_nodes: int, n_features: int, rng: RandomStream):
        self.n_nodes = n_nodes
        self.n_features = n_features
        self.px_logits = store.register("masks.px_logits", np.zeros((n_nodes, n_features)))
        limit = float(np.sqrt(6.0 / (2 * n_features + 1)))
        self.v = store.register(
            "masks.v", (rng.uniform((2 * n_features, 1)) * 2.0 - 1.0) * limit
        )

    def px(self) -> Value:
        return dc.sigmoid(self.px_logits)

    def px_array(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.px_logits.data))


def edge_probability(x_i, x_j, p_i, p_j, v) -> Value:
    """Symmetrized edge importance: mean over both orientations of
    sigmoid(v^T [x o p || x' o p'])."""
    x_i, x_j = dc._coerce(x_i), dc._coerce(x_j)
    p_i, p_j = dc._coerce(p_i), dc._coerce(p_j)
    v = dc._coerce(v)
    masked_i = dc.mul(x_i, p_i)
    masked_j = dc.mul(x_j, p_j)
    fwd = dc.sigmoid(dc.matmul(dc.concat_cols([masked_i, masked_j]), v))
    rev = dc.sigmoid(dc.matmul(dc.concat_cols([masked_j, masked_i]), v))
    return dc.scale(dc.add(fwd, rev), 0.5)


@dataclass
class ScatterPlan:
    """Sort-based segment-sum plan for accumulating edge grads into node rows."""

    order: np.ndarray
    starts: np.ndarray
    rows: np.ndarray

    @classmethod
    def build(cls, i_idx: np.ndarray, j_idx: np.ndarray) -> "ScatterPlan":
        combined = np.concatenate([i_idx, j_idx])
        order = np.argsort(combined, kind="stable")
        sorted_rows = combined[order]
        starts = np.flatnonzero(np.diff(sorted_rows, prepend=sorted_rows[0] - 1))
        return cls(order, starts, sorted_rows[starts])


def edge_prob_vector(features: np.ndarray, px: Value, v: Value,
                     i_idx: np.ndarray, j_idx: np.ndarray,
                     plan: ScatterPlan | None = None) -> Value:
    """Edge probabilities for all existing edges at once (one tape node).

    Equivalent to stacking ``edge_probability`` over the edge list; fused for
    the training hot path.
    """
    d = features.shape[1]
    if v.data.shape != (2 * d, 1):
        raise dc.ShapeError(f"v must have shape ({2 * d}, 1), got {v.data.shape}")
    if i_idx.size == 0:
        return dc.constant(np.zeros((0, 1)))
    xi = features[i_idx]
    xj = features[j_idx]
    pxd = px.data
    mi = xi * pxd[i_idx]
    mj = xj * pxd[j_idx]
    vh = v.data[:d, 0]
    vt = v.data[d:, 0]
    logit_fwd = mi @ vh + mj @ vt
    logit_rev = mj @ vh + mi @ vt
    sig_fwd = 1.0 / (1.0 + np.exp(-logit_fwd))
    sig_rev = 1.0 / (1.0 + np.exp(-logit_rev))
    out = 0.5 * (sig_fwd + sig_rev)

    def bw(g, acc):
        gcol = g[:, 0]
        gf = 0.5 * gcol * sig_fwd * (1.0 - sig_fwd)
        gr = 0.5 * gcol * sig_rev * (1.0 - sig_rev)
        # logit_fwd = mi.vh + mj.vt ; logit_rev = mj.vh + mi.vt
        d_mi = gf[:, None] * vh[None, :] + gr[:, None] * vt[None, :]
        d_mj = gf[:, None] * vt[None, :] + gr[:, None] * vh[None, :]
        dv = np.concatenate([mi.T @ gf + mj.T @ gr, mj.T @ gf + mi.T @ gr])
        acc(v, dv[:, None])
        sched = plan if plan is not None else ScatterPlan.build(i_idx, j_idx)
        contrib = np.concatenate([d_mi * xi, d_mj * xj], axis=0)
        sums = np.add.reduceat(contrib[sched.order], sched.starts, axis=0)
        d_px = np.zeros_like(pxd)
        d_px[sched.rows] = sums
        acc(px, d_px)

    return Value(out[:, None], (px, v), bw)


def scatter_symmetric(edge_values: Value, i_idx: np.ndarray, j_idx: np.ndarray, n: int) -> Value:
    """Dense symmetric N x N matrix from per-edge values; zeros elsewhere."""
    dense = np.zeros((n, n))
    if i_idx.size:
        vals = edge_values.data[:, 0]
        dense[i_idx, j_idx] = vals
        dense[j_idx, i_idx] = vals

    def bw(g, acc):
        acc(edge_values, (g[i_idx, j_idx] + g[j_idx, i_idx])[:, None])

    return Value(dense, (edge_values,), bw)


def mask_inputs(features: np.ndarray, adjacency: np.ndarray, masks: ImportanceMasks,
                i_idx: np.ndarray, j_idx: np.ndarray) -> tuple[Value, Value, Value]:
    """(A o P_A, X o P_X, per-edge P_A values); zeros of A stay zero."""
    px = masks.px()
    evec = edge_prob_vector(features, px, masks.v, i_idx, j_idx)
    pa_dense = scatter_symmetric(evec, i_idx, j_idx, adjacency.shape[0])
    a_masked = dc.mul(dc.constant(adjacency), pa_dense)
    x_masked = dc.mul(dc.constant(features), px)
    return a_masked, x_masked, evec


def roi_scores(masks: ImportanceMasks) -> np.ndarray:
    """Per-ROI mean of P_X over the feature dimension."""
    return masks.px_array().mean(axis=1)


def rank_rois(scores: np.ndarray, top: int = 20) -> list[int]:
    """Descending score order, ties broken by node index."""
    return [int(i) for i in np.argsort(-np.asarray(scores), kind="stable")[:top]]


@dataclass
class EdgeTestRow:
    i: int
    j: int
    t: float
    p: float
    p_adj: float
    significant: bool


@dataclass
class BiomarkerReport:
    roi_scores: np.ndarray
    ranked_rois: list[int]
    edge_rows: list[EdgeTestRow]
    top_edges: list[tuple[int, int, float]]
    network_heatmap: np.ndarray          # 7 x 7 mean |t| over significant edges; NaN = empty
    n_nodes: int

    def significant_edges(self) -> set[tuple[int, int]]:
        return {(r.i, r.j) for r in self.edge_rows if r.significant}


def subject_edge_means(adjacencies: list[np.ndarray], edge_probs: list[np.ndarray]) -> np.ndarray:
    """Upper-triangle vector of mean (P_A o A) weight over a subject's timepoints."""
    n = adjacencies[0].shape[0]
    iu, ju = np.triu_indices(n, k=1)
    acc = np.zeros(iu.size)
    for a, p in zip(adjacencies, edge_probs):
        acc += (a * p)[iu, ju]
    return acc / len(adjacencies)


def edge_group_test(edge_means: np.ndarray, labels: np.ndarray, n_nodes: int,
                    roi_score_values: np.ndarray, q: float = 0.05,
                    top_edges: int = 30, top_rois: int = 20) -> BiomarkerReport:
    """Welch t per tested edge, BH-FDR across them, block-level |t| heatmap.

    ``edge_means`` is subjects x pairs (upper-triangle order); an edge is
    tested when any subject carries nonzero weight on it.
    """
    edge_means = np.asarray(edge_means, dtype=np.float64)
    labels = np.asarray(labels)
    group_a = edge_means[labels == 1]
    group_b = edge_means[labels == 0]
    if group_a.shape[0] < 2 or group_b.shape[0] < 2:
        raise stats.StatisticsError("edge_group_test needs >= 2 subjects per group")
    iu, ju = np.triu_indices(n_nodes, k=1)
    tested = np.flatnonzero(np.any(edge_means != 0.0, axis=0))
    t_vals = np.zeros(tested.size)
    p_vals = np.ones(tested.size)
    for pos, col in enumerate(tested):
        t_vals[pos], p_vals[pos] = stats.welch_t(group_a[:, col], group_b[:, col])
    fdr = stats.bh_fdr(p_vals, q=q)
    rows = [
        EdgeTestRow(
            i=int(iu[col]),
            j=int(ju[col]),
            t=float(t_vals[pos]),
            p=float(p_vals[pos]),
            p_adj=float(fdr.p_adjusted[pos]),
            significant=bool(fdr.rejected[pos]),
        )
        for pos, col in enumerate(tested)
    ]
    sig_rows = [r for r in rows if r.significant]
    sig_rows.sort(key=lambda r: (-abs(r.t), r.i, r.j))
    top = [(r.i, r.j, r.t) for r in sig_rows[:top_edges]]
    blocks = network_table(n_nodes)
    heat_sum = np.zeros((N_NETWORKS, N_NETWORKS))
    heat_count = np.zeros((N_NETWORKS, N_NETWORKS))
    for r in sig_rows:
        bi, bj = blocks[r.i], blocks[r.j]
        heat_sum[bi, bj] += abs(r.t)
        heat_count[bi, bj] += 1
        if bi != bj:
            heat_sum[bj, bi] += abs(r.t)
            heat_count[bj, bi] += 1
    with np.errstate(invalid="ignore"):
        heatmap = np.where(heat_count > 0, heat_sum / np.maximum(heat_count, 1), np.nan)
    return BiomarkerReport(
        roi_scores=np.asarray(roi_score_values, dtype=np.float64),
        ranked_rois=rank_rois(roi_score_values, top_rois),
        edge_rows=rows,
        top_edges=top,
        network_heatmap=heatmap,
        n_nodes=n_nodes,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_biomarker_report(report: BiomarkerReport, out_dir: Path) -> dict:
    """Write JSON + edge-table CSV; returns the JSON document."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    edge_csv = out_dir / "edge_table.csv"
    with open(edge_csv, "w", encoding="utf-8", newline="\n") as f:
        f.write("i,j,t,p,p_adj,significant\n")
        for r in report.edge_rows:
            f.write(f"{r.i},{r.j},{repr(r.t)},{repr(r.p)},{repr(r.p_adj)},{int(r.significant)}\n")
    roi_csv = out_dir / "roi_scores.csv"
    with open(roi_csv, "w", encoding="utf-8", newline="\n") as f:
        f.write("roi,network,score,rank\n")
        order = {roi: k for k, roi in enumerate(report.ranked_rois)}
        blocks = network_table(report.n_nodes)
        for roi, score in enumerate(report.roi_scores):
            rank = order.get(roi, -1)
            f.write(f"{roi},{NETWORK_NAMES[blocks[roi]]},{repr(float(score))},{rank}\n")
    heat_csv = out_dir / "network_heatmap.csv"
    with open(heat_csv, "w", encoding="utf-8", newline="\n") as f:
        f.write("," + ",".join(NETWORK_NAMES) + "\n")
        for bi, name in enumerate(NETWORK_NAMES):
            cells = [
                "" if np.isnan(report.network_heatmap[bi, bj]) else repr(float(report.network_heatmap[bi, bj]))
                for bj in range(N_NETWORKS)
            ]
            f.write(name + "," + ",".join(cells) + "\n")
    doc = {
        "roi_scores": [float(s) for s in report.roi_scores],
        "ranked_rois": report.ranked_rois,
        "top_edges": [[i, j, t] for i, j, t in report.top_edges],
        "n_significant": sum(1 for r in report.edge_rows if r.significant),
        "n_tested": len(report.edge_rows),
        "files": {
            "edge_table": edge_csv.name,
            "roi_scores": roi_csv.name,
            "network_heatmap": heat_csv.name,
        },
    }
    (out_dir / "biomarkers.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return doc
