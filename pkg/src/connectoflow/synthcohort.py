"""Deterministic longitudinal cohorts with planted ROI/edge biomarkers.

Signal model per visit window (N nodes x D samples):

  x_n = slow_subject_curve(block(n), t) + fast_block_factor + white noise

The fast per-visit block factors give the correlation graphs a 7-community
structure; the slow per-subject curves give the reconstruction model real
temporal dynamics to learn. Progressive subjects additionally carry

  * a mean shift on the planted ROI set S, growing with follow-up time, and
  * a shared pair factor on each planted edge (i, j) in E that shifts the
    pair's correlation by effect_size * (t / horizon).

Everything is a pure function of the config (seeds spawn per subject).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ConfigError

NETWORK_NAMES = ("VIS", "SMN", "DAN", "VAN", "LIM", "CON", "DMN")
N_NETWORKS = len(NETWORK_NAMES)


def network_of(node: int, n_nodes: int) -> int:
    """Block assignment: ~N/7 contiguous nodes per network."""
    return min(node * N_NETWORKS // n_nodes, N_NETWORKS - 1)


def network_table(n_nodes: int) -> np.ndarray:
    return np.array([network_of(i, n_nodes) for i in range(n_nodes)])


def default_planted_rois(n_nodes: int, count: int | None = None) -> tuple[int, ...]:
    if count is None:
        count = max(1, min(10, n_nodes // 10)) if n_nodes >= 10 else 1
    return tuple(sorted({int((i + 0.5) * n_nodes / count) for i in range(count)}))


def default_planted_edges(
    n_nodes: int, rois: tuple[int, ...], count: int | None = None
) -> tuple[tuple[int, int], ...]:
    """Cross-network pairs among nodes outside the planted ROI set.

    Nodes may repeat across pairs on small graphs; pairs never repeat. The
    derived default count caps itself at what is placeable; an explicit count
    that cannot be met raises.
    """
    strict = count is not None
    if count is None:
        count = max(1, min(12, n_nodes // 8)) if n_nodes >= 8 else 1
    blocks = network_table(n_nodes)
    taken = set(rois)
    by_block: list[list[int]] = [[] for _ in range(N_NETWORKS)]
    for node in range(n_nodes):
        if node not in taken:
            by_block[blocks[node]].append(node)
    edges: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    k = 0
    while len(edges) < count:
        ba = k % N_NETWORKS
        bb = (ba + 3) % N_NETWORKS
        if by_block[ba] and by_block[bb] and ba != bb:
            i = by_block[ba][(k // N_NETWORKS) % len(by_block[ba])]
            j = by_block[bb][(k // N_NETWORKS) % len(by_block[bb])]
            pair = (min(i, j), max(i, j))
            if i != j and pair not in seen:
                seen.add(pair)
                edges.append(pair)
        k += 1
        if k > 100 * count + N_NETWORKS:
            if strict:
                raise ConfigError("cannot place the requested number of planted edges")
            break
    return tuple(edges)


@dataclass
class SynthConfig:
    n_stable: int = 120
    n_progressive: int = 60
    n_nodes: int = 100
    n_samples: int = 32          # samples per visit window
    max_visits: int = 6
    horizon_months: float = 105.0
    planted_rois: tuple[int, ...] | None = None
    planted_edges: tuple[tuple[int, int], ...] | None = None
    effect_size: float = 0.3     # correlation shift delta at t = horizon
    roi_gain: float = 1.2        # scales the planted-ROI mean shift
    slow_amp: float = 1.0        # amplitude of the slow per-subject curves
    noise_sd: float = 1.0
    seed: int = 7

    def resolved_rois(self) -> tuple[int, ...]:
        if self.planted_rois is not None:
            return tuple(int(r) for r in self.planted_rois)
        return default_planted_rois(self.n_nodes)

    def resolved_edges(self) -> tuple[tuple[int, int], ...]:
        if self.planted_edges is not None:
            return tuple((int(i), int(j)) for i, j in self.planted_edges)
        return default_planted_edges(self.n_nodes, self.resolved_rois())

    def validate(self) -> None:
        if self.n_stable < 1 or self.n_progressive < 0:
            raise ConfigError("cohort sizes must be positive")
        if self.n_samples < 3:
            raise ConfigError("need at least 3 samples per visit")
        if self.max_visits < 1 or self.horizon_months <= 0:
            raise ConfigError("invalid visit schedule parameters")
        if not 0.0 <= self.effect_size < 0.75:
            raise ConfigError(
                f"effect_size {self.effect_size} infeasible: subject phases up to 1.25x "
                "must keep planted correlations inside (-1, 1)"
            )
        rois = self.resolved_rois()
        if any(not 0 <= r < self.n_nodes for r in rois):
            raise ConfigError("planted ROIs out of node range")
        edges = self.resolved_edges()
        seen = set()
        for i, j in edges:
            if i == j or not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise ConfigError(f"invalid planted edge ({i}, {j})")
            if (i, j) in seen:
                raise ConfigError(f"duplicate planted edge ({i}, {j})")
            seen.add((i, j))


@dataclass
class SubjectRecord:
    """One subject's irregular visit schedule and per-visit signal windows."""

    subject_id: str
    label: int                        # 0 stable, 1 progressive
    visit_months: list[float]
    signals: list[np.ndarray]         # one N x D matrix per visit
    masks: list[np.ndarray]           # per-visit bool (D,), True = observed

    @property
    def n_visits(self) -> int:
        return len(self.visit_months)


@dataclass
class GroundTruth:
    planted_rois: tuple[int, ...]
    planted_edges: tuple[tuple[int, int], ...]
    visit_months: dict[str, list[float]]
    progression_phase: dict[str, float]   # per progressive subject severity
    config: SynthConfig


@dataclass
class _SlowCurves:
    amps: np.ndarray     # blocks x harmonics
    periods: np.ndarray
    phases: np.ndarray

    def at(self, t: float) -> np.ndarray:
        """Per-block slow level at month t."""
        angles = 2.0 * math.pi * (t / self.periods + self.phases)
        return (self.amps * np.sin(angles)).sum(axis=1)


def _draw_slow_curves(rng: dc.RandomStream, amp: float) -> _SlowCurves:
    n_h = 3
    amps = (0.4 + 0.6 * rng.uniform((N_NETWORKS, n_h))) * amp / n_h * 2.0
    periods = 24.0 + rng.uniform((N_NETWORKS, n_h)) * 72.0
    phases = rng.uniform((N_NETWORKS, n_h))
    return _SlowCurves(amps, periods, phases)


def _subject_record(cfg: SynthConfig, index: int, label: int, phase: float,
                    rng: dc.RandomStream) -> SubjectRecord:
    n, d = cfg.n_nodes, cfg.n_samples
    blocks = network_table(n)
    rois = np.array(cfg.resolved_rois(), dtype=int)
    edges = cfg.resolved_edges()

    n_visits = 1 + int(rng.uniform(1)[0] * cfg.max_visits)
    n_visits = min(n_visits, cfg.max_visits)
    months = np.sort(rng.uniform(n_visits) * cfg.horizon_months)
    curves = _draw_slow_curves(rng, cfg.slow_amp)

    base_var = 1.0 + cfg.noise_sd ** 2
    signals = []
    for t in months:
        fast = rng.normal((N_NETWORKS, d))
        noise = rng.normal((n, d)) * cfg.noise_sd
        x = fast[blocks] + noise + curves.at(float(t))[blocks][:, None]
        if label == 1 and cfg.effect_size > 0.0:
            progress = float(t) / cfg.horizon_months
            shift = cfg.effect_size * cfg.roi_gain * phase * (0.3 + 0.7 * progress)
            x[rois] += shift
            target = min(cfg.effect_size * phase * progress, 0.97)
            if target > 0.0:
                gamma = math.sqrt(base_var * target / (1.0 - target))
                for i, j in edges:
                    shared = rng.normal((1, d)) * gamma
                    x[i] += shared[0]
                    x[j] += shared[0]
            else:
                # consume the same number of draws so schedules stay comparable
                rng.normal((len(edges), d))
        signals.append(x)
    masks = [np.ones(d, dtype=bool) for _ in months]
    return SubjectRecord(
        subject_id=f"subj{index:04d}",
        label=label,
        visit_months=[float(t) for t in months],
        signals=signals,
        masks=masks,
    )


def generate(cfg: SynthConfig) -> tuple[list[SubjectRecord], GroundTruth]:
    """Generate the cohort; bit-identical for identical configs."""
    cfg.validate()
    root = dc.RandomStream(cfg.seed).spawn("synthcohort")
    subjects: list[SubjectRecord] = []
    phases: dict[str, float] = {}
    labels = [0] * cfg.n_stable + [1] * cfg.n_progressive
    for index, label in enumerate(labels):
        sub_rng = root.spawn("subject", index)
        phase = 1.0
        if label == 1:
            phase = 0.75 + 0.5 * sub_rng.uniform(1)[0]
        rec = _subject_record(cfg, index, label, phase, sub_rng)
        subjects.append(rec)
        if label == 1:
            phases[rec.subject_id] = phase
    truth = GroundTruth(
        planted_rois=cfg.resolved_rois(),
        planted_edges=cfg.resolved_edges(),
        visit_months={s.subject_id: list(s.visit_months) for s in subjects},
        progression_phase=phases,
        config=cfg,
    )
    return subjects, truth


def drop_observations(subjects: list[SubjectRecord], missing_rate: float, seed: int) -> list[SubjectRecord]:
    """Mask per-visit samples at the given rate, keeping >= 3 observed per visit."""
    if not 0.0 <= missing_rate <= 0.9:
        raise ConfigError(f"missing_rate must lie in [0, 0.9], got {missing_rate}")
    rng = dc.RandomStream(seed).spawn("drop_observations")
    out = []
    for rec in subjects:
        sub_rng = rng.spawn(rec.subject_id)
        masks = []
        for mask in rec.masks:
            d = mask.size
            if d < 3:
                raise ConfigError("visits need at least 3 samples to mask")
            keep = sub_rng.uniform(d) >= missing_rate
            keep &= mask
            short = 3 - int(keep.sum())
            if short > 0:
                candidates = np.flatnonzero(~keep & mask)
                if candidates.size < short:
                    raise ConfigError("missing_rate leaves fewer than 3 observable samples")
                order = sub_rng.permutation(candidates.size)
                keep[candidates[order[:short]]] = True
            masks.append(keep)
        out.append(
            SubjectRecord(
                subject_id=rec.subject_id,
                label=rec.label,
                visit_months=list(rec.visit_months),
                signals=[s.copy() for s in rec.signals],
                masks=masks,
            )
        )
    return out


def truncate_visits(subjects: list[SubjectRecord], max_timepoints: int) -> list[SubjectRecord]:
    """Restrict every subject to its first k visits (ablation axis)."""
    if max_timepoints < 1:
        raise ConfigError("max_timepoints must be >= 1")
    return [
        SubjectRecord(
            subject_id=r.subject_id,
            label=r.label,
            visit_months=list(r.visit_months[:max_timepoints]),
            signals=[s.copy() for s in r.signals[:max_timepoints]],
            masks=[m.copy() for m in r.masks[:max_timepoints]],
        )
        for r in subjects
    ]


def score_recovery(roi_scores: np.ndarray, significant_edges: set[tuple[int, int]],
                   truth: GroundTruth) -> dict[str, float]:
    """Precision@|S| for ROI ranking, recall of planted edges in the significant set."""
    rois = truth.planted_rois
    k = len(rois)
    top_k = np.argsort(-np.asarray(roi_scores), kind="stable")[:k]
    precision = len(set(int(i) for i in top_k) & set(rois)) / k
    planted = {(min(i, j), max(i, j)) for i, j in truth.planted_edges}
    sig = {(min(i, j), max(i, j)) for i, j in significant_edges}
    recall = len(planted & sig) / len(planted) if planted else 1.0
    return {"roi_precision_at_k": precision, "edge_recall": recall}


# ---------------------------------------------------------------------------
# Cohort serialization (shared subject format + ground truth JSON)
# ---------------------------------------------------------------------------

def save_cohort(subjects: list[SubjectRecord], truth: GroundTruth | None, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    (out_dir / "subjects").mkdir(parents=True, exist_ok=True)
    written = []
    for rec in subjects:
        sub_dir = out_dir / "subjects" / rec.subject_id
        sub_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "subject_id": rec.subject_id,
            "label": rec.label,
            "times_months": rec.visit_months,
            "signals": [],
            "masks": [],
        }
        for k, (sig, mask) in enumerate(zip(rec.signals, rec.masks)):
            sig_name = f"t{k}_signals.csv"
            mask_name = f"t{k}_mask.csv"
            dc.save_matrix_csv(sig, sub_dir / sig_name)
            dc.save_matrix_csv(mask.astype(np.float64), sub_dir / mask_name)
            manifest["signals"].append(sig_name)
            manifest["masks"].append(mask_name)
        path = sub_dir / "subject.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        written.extend([path] + [sub_dir / f for f in manifest["signals"] + manifest["masks"]])
    if truth is not None:
        cfg = asdict(truth.config)
        truth_doc = {
            "planted_rois": list(truth.planted_rois),
            "planted_edges": [list(e) for e in truth.planted_edges],
            "visit_months": truth.visit_months,
            "progression_phase": truth.progression_phase,
            "config": cfg,
        }
        tpath = out_dir / "ground_truth.json"
        tpath.write_text(json.dumps(truth_doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        written.append(tpath)
    return written


def load_cohort(cohort_dir: Path) -> tuple[list[SubjectRecord], GroundTruth | None]:
    cohort_dir = Path(cohort_dir)
    subjects_dir = cohort_dir / "subjects"
    if not subjects_dir.is_dir():
        raise FileNotFoundError(f"no subjects directory under {cohort_dir}")
    subjects = []
    for sub_dir in sorted(subjects_dir.iterdir()):
        manifest_path = sub_dir / "subject.json"
        if not manifest_path.is_file():
            continue
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        signals = [dc.load_matrix_csv(sub_dir / f) for f in manifest["signals"]]
        masks = [dc.load_matrix_csv(sub_dir / f)[0].astype(bool) for f in manifest["masks"]]
        subjects.append(
            SubjectRecord(
                subject_id=manifest["subject_id"],
                label=int(manifest["label"]),
                visit_months=[float(t) for t in manifest["times_months"]],
                signals=signals,
                masks=masks,
            )
        )
    truth = None
    tpath = cohort_dir / "ground_truth.json"
    if tpath.is_file():
        doc = json.loads(tpath.read_text(encoding="utf-8"))
        cfg_doc = dict(doc["config"])
        if cfg_doc.get("planted_rois") is not None:
            cfg_doc["planted_rois"] = tuple(cfg_doc["planted_rois"])
        if cfg_doc.get("planted_edges") is not None:
            cfg_doc["planted_edges"] = tuple(tuple(e) for e in cfg_doc["planted_edges"])
        truth = GroundTruth(
            planted_rois=tuple(doc["planted_rois"]),
            planted_edges=tuple((int(i), int(j)) for i, j in doc["planted_edges"]),
            visit_months={k: list(v) for k, v in doc["visit_months"].items()},
            progression_phase=dict(doc["progression_phase"]),
            config=SynthConfig(**cfg_doc),
        )
    return subjects, truth
