"""SDE-guided spatio-temporal GNN over per-subject dynamic graphs.

Each graph-convolution weight matrix is treated as a hidden state that
drifts through inter-visit gaps under a learned SDE and is then updated by
a matrix-valued recurrent cell fed a summary of the current node
embeddings. Convolution uses the symmetric-normalized adjacency with self
loops; a max+mean readout at the final timepoint feeds a small MLP head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import sdesolve
from .diffcore import ParamStore, RandomStream, Value
from .graphbuild import DynamicGraph
from .layers import ConstDiag, Linear, MLP, glorot
from .sdesolve import ScheduleError

TRAIN = "train"
EVAL = "eval"

_EYE_CACHE: dict[int, np.ndarray] = {}


def _eye(n: int) -> np.ndarray:
    cached = _EYE_CACHE.get(n)
    if cached is None:
        cached = _EYE_CACHE[n] = np.eye(n)
    return cached


@dataclass
class StgnnConfig:
    n_nodes: int
    n_features: int
    d_l: int = 16
    n_layers: int = 2
    sde_hidden: int = 16
    head_widths: tuple[int, int, int] = (64, 16, 1)
    dropout: float = 0.5
    steps_per_unit: int = 1
    noise: str = sdesolve.DIAGONAL


def normalize_adjacency(a: Value) -> Value:
    """Symmetric normalization D^{-1/2} (A + I) D^{-1/2} as one tape node.

    The input must be symmetric with zero diagonal; weights may be negative
    only to the extent that every row of A + I keeps a positive sum.
    """
    A = a.data
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise dc.ShapeError(f"adjacency must be square, got {A.shape}")
    if np.abs(A - A.T).max() > 1e-9:
        raise dc.ShapeError("adjacency must be symmetric")
    a_tilde = A + _eye(n)
    d = a_tilde.sum(axis=1)
    if np.any(d <= 0.0):
        raise dc.DomainError("A + I has a non-positive row sum; cannot normalize")
    s = 1.0 / np.sqrt(d)
    out = a_tilde * np.outer(s, s)

    def bw(g, acc):
        dpow = -0.5 * d ** -1.5
        core = g * (s[:, None] * s[None, :])
        r = (g * a_tilde * s[None, :]).sum(axis=1) * dpow
        c = (g * a_tilde * s[:, None]).sum(axis=0) * dpow
        acc(a, core + r[:, None] + c[None, :])

    return Value(out, (a,), bw)


def gcn_forward(norm_a: Value, z_in: Value, h: Value) -> Value:
    """One graph convolution: sigmoid(norm_A @ Z @ H)."""
    if norm_a.data.shape[1] != z_in.data.shape[0] or z_in.data.shape[1] != h.data.shape[0]:
        raise dc.ShapeError(
            f"gcn_forward shapes do not conform: {norm_a.data.shape} @ {z_in.data.shape} @ {h.data.shape}"
        )
    return dc.sigmoid(dc.matmul(dc.matmul(norm_a, z_in), h))


def readout(z: Value) -> Value:
    """Concatenated columnwise max and mean: N x d -> 1 x 2d."""
    return dc.concat_cols([dc.col_max(z), dc.col_mean(z)])


class MatrixGRU:
    """GRU over matrix states H (d_in x d_out), gate maps applied on the left.

    Computes r = sig(Wr S + Ur H + br), u likewise, c = tanh(Wc S + r o (Uc H) + bc),
    H' = u o c + (1 - u) o H, fused into a single tape node.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, rng: RandomStream):
        self.Wr = store.register(f"{name}.Wr", glorot(rng, dim, dim))
        self.Ur = store.register(f"{name}.Ur", glorot(rng, dim, dim))
        self.br = store.register(f"{name}.br", np.zeros((dim, 1)))
        self.Wu = store.register(f"{name}.Wu", glorot(rng, dim, dim))
        self.Uu = store.register(f"{name}.Uu", glorot(rng, dim, dim))
        self.bu = store.register(f"{name}.bu", np.zeros((dim, 1)))
        self.Wc = store.register(f"{name}.Wc", glorot(rng, dim, dim))
        self.Uc = store.register(f"{name}.Uc", glorot(rng, dim, dim))
        self.bc = store.register(f"{name}.bc", np.zeros((dim, 1)))

    def __call__(self, summary: Value, h: Value) -> Value:
        S, Hp = summary.data, h.data
        Wr, Ur, br = self.Wr.data, self.Ur.data, self.br.data
        Wu, Uu, bu = self.Wu.data, self.Uu.data, self.bu.data
        Wc, Uc, bc = self.Wc.data, self.Uc.data, self.bc.data
        r = 1.0 / (1.0 + np.exp(-(Wr @ S + Ur @ Hp + br)))
        u = 1.0 / (1.0 + np.exp(-(Wu @ S + Uu @ Hp + bu)))
        uc = Uc @ Hp
        c = np.tanh(Wc @ S + r * uc + bc)
        out = u * c + (1.0 - u) * Hp

        def bw(g, acc):
            du = g * (c - Hp) * u * (1.0 - u)
            dcand = g * u * (1.0 - c * c)
            duc = dcand * r
            dr = dcand * uc * r * (1.0 - r)
            acc(self.Wr, dr @ S.T)
            acc(self.Ur, dr @ Hp.T)
            acc(self.br, dr.sum(axis=1, keepdims=True))
            acc(self.Wu, du @ S.T)
            acc(self.Uu, du @ Hp.T)
            acc(self.bu, du.sum(axis=1, keepdims=True))
            acc(self.Wc, dcand @ S.T)
            acc(self.Uc, duc @ Hp.T)
            acc(self.bc, dcand.sum(axis=1, keepdims=True))
            acc(summary, Wr.T @ dr + Wu.T @ du + Wc.T @ dcand)
            acc(h, g * (1.0 - u) + Ur.T @ dr + Uu.T @ du + Uc.T @ duc)

        parents = (summary, h, self.Wr, self.Ur, self.br, self.Wu, self.Uu,
                   self.bu, self.Wc, self.Uc, self.bc)
        return Value(out, parents, bw)


class EvolvingLayer:
    """Graph-conv weights H evolved by an SDE over time gaps plus a GRU update."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 cfg: StgnnConfig, rng: RandomStream):
        self.d_in = d_in
        self.d_out = d_out
        flat = d_in * d_out
        self.H0 = store.register(f"{name}.H0", glorot(rng, d_in, d_out))
        drift = MLP(store, f"{name}.sde_drift", flat, cfg.sde_hidden, flat, rng)
        diffusion = None
        if cfg.noise == sdesolve.DIAGONAL:
            diffusion = ConstDiag(store, f"{name}.sde_diff", flat, init=-4.0)
        self.sde = sdesolve.NeuralSDE(drift, diffusion, cfg.noise)
        self.gru = MatrixGRU(store, f"{name}.gru", d_in, rng)
        self.proj = store.register(f"{name}.proj", glorot(rng, d_in, d_in))

    def summarize(self, z: Value) -> Value:
        """Learned projection of the top-d_out embedding rows (by norm, rank order)."""
        norms = np.sqrt((z.data * z.data).sum(axis=1))
        k = min(self.d_out, z.data.shape[0])
        idx = np.argsort(-norms, kind="stable")[:k]
        summary = dc.transpose(dc.gather_rows(z, idx))
        if k < self.d_out:
            pad = dc.constant(np.zeros((self.d_in, self.d_out - k)))
            summary = dc.concat_cols([summary, pad])
        return dc.tanh(dc.matmul(self.proj, summary))

    def evolve(self, prior_h: Value, z_summary: Value, delta_t: float,
               steps_per_unit: int, rng: RandomStream | None, stochastic: bool) -> Value:
        if delta_t < 0:
            raise ScheduleError(f"negative time gap {delta_t}")
        sde = self.sde
        if not stochastic and sde.noise != sdesolve.ZERO:
            sde = sdesolve.NeuralSDE(sde.drift, None, sdesolve.ZERO)
        flat = dc.reshape(prior_h, 1, self.d_in * self.d_out)
        drifted = sdesolve.integrate(sde, flat, 0.0, float(delta_t), steps_per_unit, rng)
        h_prime = dc.reshape(drifted, self.d_in, self.d_out)
        return self.gru(z_summary, h_prime)


def evolve_weights(layer: EvolvingLayer, prior_h: Value, z_summary: Value, delta_t: float,
                   steps_per_unit: int, rng: RandomStream | None = None,
                   stochastic: bool = True) -> Value:
    return layer.evolve(prior_h, z_summary, delta_t, steps_per_unit, rng, stochastic)


class ClassifierHead:
    """Three affine layers (tanh hidden) with dropout between; sigmoid output in (0, 1)."""

    def __init__(self, store: ParamStore, name: str, d_in: int,
                 widths: tuple[int, int, int], dropout: float, rng: RandomStream):
        w1, w2, w3 = widths
        self.fc1 = Linear(store, f"{name}.fc1", d_in, w1, rng)
        self.fc2 = Linear(store, f"{name}.fc2", w1, w2, rng)
        self.fc3 = Linear(store, f"{name}.fc3", w2, w3, rng)
        self.dropout = dropout

    def __call__(self, x: Value, mode: str, rng: RandomStream | None) -> Value:
        h = dc.tanh(self.fc1(x))
        if mode == TRAIN and self.dropout > 0:
            h = dc.dropout(h, self.dropout, rng)
        h = dc.tanh(self.fc2(h))
        if mode == TRAIN and self.dropout > 0:
            h = dc.dropout(h, self.dropout, rng)
        return dc.sigmoid(self.fc3(h))


@dataclass
class PreparedSlice:
    time: float
    features: np.ndarray
    adjacency: np.ndarray
    i_idx: np.ndarray
    j_idx: np.ndarray
    plan: object = None


@dataclass
class PreparedSubject:
    subject_id: str
    label: int
    slices: list[PreparedSlice]


def prepare_subject(graph: DynamicGraph) -> PreparedSubject:
    """Cache edge indices and gradient scatter plans for repeated forwards."""
    from .interpret import ScatterPlan

    slices = []
    for s in graph.slices:
        i_idx, j_idx = s.edge_index()
        plan = ScatterPlan.build(i_idx, j_idx) if i_idx.size else None
        slices.append(PreparedSlice(s.time, s.features, s.adjacency, i_idx, j_idx, plan))
    return PreparedSubject(graph.subject_id, graph.label, slices)


class StgnnModel:
    """Stacked evolving GCN layers + importance masks + classifier head."""

    def __init__(self, cfg: StgnnConfig, seed: int = 0):
        from .interpret import ImportanceMasks  # local import to avoid a cycle

        self.cfg = cfg
        self.seed = seed
        self.store = ParamStore()
        rng = RandomStream(seed).spawn("stgnn_init")
        self.layers: list[EvolvingLayer] = []
        d_in = cfg.n_features
        for k in range(cfg.n_layers):
            self.layers.append(EvolvingLayer(self.store, f"layer{k}", d_in, cfg.d_l, cfg, rng))
            d_in = cfg.d_l
        self.head = ClassifierHead(self.store, "head", 2 * cfg.d_l, cfg.head_widths,
                                   cfg.dropout, rng)
        self.masks = ImportanceMasks(self.store, cfg.n_nodes, cfg.n_features, rng)

    def forward_with_aux(self, subject: PreparedSubject, mode: str,
                         rng: RandomStream | None) -> tuple[Value, dict]:
        from . import interpret

        if mode not in (TRAIN, EVAL):
            raise ValueError(f"mode must be '{TRAIN}' or '{EVAL}', got '{mode}'")
        if not subject.slices:
            raise dc.ShapeError(f"subject {subject.subject_id} has an empty dynamic graph")
        if mode == TRAIN and rng is None:
            raise ValueError("train mode requires a random stream")
        cfg = self.cfg
        px = self.masks.px()
        layer_states: list[Value | None] = [None] * len(self.layers)
        prev_t = subject.slices[0].time
        z = None
        pa_edges: list[Value] = []
        stochastic = mode == TRAIN
        for s in subject.slices:
            evec = interpret.edge_prob_vector(s.features, px, self.masks.v, s.i_idx, s.j_idx,
                                              plan=s.plan)
            pa_edges.append(evec)
            pa_dense = interpret.scatter_symmetric(evec, s.i_idx, s.j_idx, cfg.n_nodes)
            a_masked = dc.mul(dc.constant(s.adjacency), pa_dense)
            x_masked = dc.mul(dc.constant(s.features), px)
            norm_a = normalize_adjacency(a_masked)
            delta_t = s.time - prev_t
            z = x_masked
            for li, layer in enumerate(self.layers):
                summary = layer.summarize(z)
                prior = layer_states[li] if layer_states[li] is not None else layer.H0
                h = layer.evolve(prior, summary, delta_t, cfg.steps_per_unit, rng, stochastic)
                layer_states[li] = h
                z = gcn_forward(norm_a, z, h)
            prev_t = s.time
        pooled = readout(z)
        prob = self.head(pooled, mode, rng)
        return prob, {"pa_edges": pa_edges, "px": px}

    def predict(self, subject: PreparedSubject) -> float:
        prob, _ = self.forward_with_aux(subject, EVAL, None)
        return prob.item()

    def edge_prob_matrices(self, subject: PreparedSubject) -> list[np.ndarray]:
        """Deterministic dense P_A per timepoint (eval-mode analytics)."""
        from . import interpret

        px = self.masks.px()
        out = []
        for s in subject.slices:
            evec = interpret.edge_prob_vector(s.features, px, self.masks.v, s.i_idx, s.j_idx)
            out.append(interpret.scatter_symmetric(evec, s.i_idx, s.j_idx, self.cfg.n_nodes).data.copy())
        return out


def forward_subject(model: StgnnModel, subject, masks, mode: str,
                    rng: RandomStream | None = None) -> Value:
    """Probability that the subject is progressive, per the supplied masks."""
    if masks is not model.masks:
        raise ValueError("masks must be the model's own importance masks")
    if isinstance(subject, DynamicGraph):
        subject = prepare_subject(subject)
    prob, _ = model.forward_with_aux(subject, mode, rng)
    return prob


# ---------------------------------------------------------------------------
# Checkpointing: JSON manifest + one CSV per parameter, bit-exact round trip
# ---------------------------------------------------------------------------

def save_checkpoint(model: StgnnModel, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "weights").mkdir(parents=True, exist_ok=True)
    params = {}
    for name, p in model.store.items():
        fname = f"weights/{name.replace('.', '_')}.csv"
        dc.save_matrix_csv(p.data, out_dir / fname)
        params[name] = {"file": fname, "rows": p.data.shape[0], "cols": p.data.shape[1]}
    manifest = {
        "config": asdict(model.cfg),
        "seed": model.seed,
        "params": params,
    }
    path = out_dir / "checkpoint.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(checkpoint_dir: Path) -> StgnnModel:
    checkpoint_dir = Path(checkpoint_dir)
    manifest = json.loads((checkpoint_dir / "checkpoint.json").read_text(encoding="utf-8"))
    cfg_doc = dict(manifest["config"])
    cfg_doc["head_widths"] = tuple(cfg_doc["head_widths"])
    cfg = StgnnConfig(**cfg_doc)
    model = StgnnModel(cfg, seed=int(manifest["seed"]))
    arrays = {}
    for name, meta in manifest["params"].items():
        arr = dc.load_matrix_csv(checkpoint_dir / meta["file"])
        if arr.shape != (meta["rows"], meta["cols"]):
            raise dc.ShapeError(f"checkpoint file for '{name}' has shape {arr.shape}")
        arrays[name] = arr
    model.store.load_arrays(arrays)
    return model
