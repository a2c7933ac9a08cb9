"""Latent-SDE encoder/decoder for irregular signal windows, plus baselines.

A subject's visit windows are encoded (reverse time order) into a posterior
over the latent initial state at t=0; the latent state is integrated to any
requested month and decoded back to an N x D window. Training minimizes
masked MSE at observed times plus a KL pull of the posterior toward N(0, I).

Downstream consumers splice reconstructions into the observed data: observed
samples always pass through untouched, only missing samples take the model
(or baseline) value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import sdesolve
from .diffcore import ParamStore, RandomStream, Value
from .layers import GRUCell, Linear, MLP


class SeriesError(ValueError):
    """An irregular series violates its invariants."""


@dataclass
class IrregularSeries:
    """Irregular visit observations for one subject: times, windows, masks."""

    obs_times: list[float]
    observations: list[np.ndarray]   # one N x D matrix per visit
    mask: list[np.ndarray]           # per-visit (D,) bool, True = observed

    def __post_init__(self):
        if not self.obs_times:
            raise SeriesError("series needs at least one observed time")
        if any(b <= a for a, b in zip(self.obs_times, self.obs_times[1:])):
            raise SeriesError(f"observation times must strictly increase: {self.obs_times}")
        n = self.observations[0].shape[0]
        if any(o.shape[0] != n for o in self.observations):
            raise SeriesError("node count must be constant across visits")
        if len(self.observations) != len(self.obs_times) or len(self.mask) != len(self.obs_times):
            raise SeriesError("times, observations, and masks must align")

    @property
    def n_nodes(self) -> int:
        return self.observations[0].shape[0]

    @property
    def n_samples(self) -> int:
        return self.observations[0].shape[1]

    @classmethod
    def from_subject(cls, record) -> "IrregularSeries":
        return cls(
            obs_times=list(record.visit_months),
            observations=[s for s in record.signals],
            mask=[m for m in record.masks],
        )


@dataclass
class PosteriorState:
    mu: Value      # 1 x L
    sigma: Value   # 1 x L, strictly positive


@dataclass
class ReconConfig:
    n_nodes: int
    n_samples: int
    latent_dim: int = 16
    encoder_hidden: int = 32
    sde_hidden: int = 16
    decoder_hidden: int = 64
    kl_beta: float = 1e-2
    logsig_min: float = -5.0
    logsig_max: float = 2.0
    steps_per_unit: int = 1
    noise: str = sdesolve.DIAGONAL

    @property
    def input_dim(self) -> int:
        return self.n_nodes * self.n_samples + self.n_samples


class ReconModel:
    """RNN encoder -> latent SDE -> MLP decoder over visit windows."""

    def __init__(self, cfg: ReconConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore()
        rng = RandomStream(seed).spawn("recon_init")
        self.encoder = GRUCell(self.store, "enc", cfg.input_dim, cfg.encoder_hidden, rng)
        self.mu_head = Linear(self.store, "mu", cfg.encoder_hidden, cfg.latent_dim, rng)
        self.logsig_head = Linear(self.store, "logsig", cfg.encoder_hidden, cfg.latent_dim, rng)
        drift = MLP(self.store, "sde_drift", cfg.latent_dim, cfg.sde_hidden, cfg.latent_dim, rng)
        diffusion = None
        if cfg.noise == sdesolve.DIAGONAL:
            diffusion = MLP(
                self.store, "sde_diff", cfg.latent_dim, cfg.sde_hidden, cfg.latent_dim, rng,
                out_softplus=True,
            )
        self.sde = sdesolve.NeuralSDE(drift, diffusion, cfg.noise)
        self.dec1 = Linear(self.store, "dec1", cfg.latent_dim, cfg.decoder_hidden, rng)
        self.dec2 = Linear(self.store, "dec2", cfg.decoder_hidden, cfg.n_nodes * cfg.n_samples, rng)

    def decode(self, z: Value) -> Value:
        h = dc.tanh(self.dec1(z))
        flat = self.dec2(h)
        return dc.reshape(flat, self.cfg.n_nodes, self.cfg.n_samples)

    def deterministic_sde(self) -> sdesolve.NeuralSDE:
        return sdesolve.NeuralSDE(self.sde.drift, None, sdesolve.ZERO)


def visit_input(series: IrregularSeries, k: int) -> np.ndarray:
    """Encoder input row: masked samples zeroed, presence flags appended."""
    obs = series.observations[k] * series.mask[k][None, :]
    return np.concatenate([obs.ravel(), series.mask[k].astype(np.float64)])[None, :]


def encode(model: ReconModel, series: IrregularSeries) -> PosteriorState:
    """Run the recurrent cell over observations in reverse time order."""
    cfg = model.cfg
    if series.n_nodes != cfg.n_nodes or series.n_samples != cfg.n_samples:
        raise SeriesError(
            f"series shape ({series.n_nodes}, {series.n_samples}) does not match model "
            f"({cfg.n_nodes}, {cfg.n_samples})"
        )
    h = dc.constant(np.zeros((1, cfg.encoder_hidden)))
    for k in range(len(series.obs_times) - 1, -1, -1):
        h = model.encoder(dc.constant(visit_input(series, k)), h)
    mu = model.mu_head(h)
    logsig = dc.clip(model.logsig_head(h), cfg.logsig_min, cfg.logsig_max)
    return PosteriorState(mu=mu, sigma=dc.exp(logsig))


def sample_initial(posterior: PosteriorState, rng: RandomStream) -> Value:
    """Reparameterized draw z0 = mu + sigma * eps."""
    eps = rng.normal(posterior.mu.data.shape)
    return dc.add(posterior.mu, dc.mul(posterior.sigma, dc.constant(eps)))


def kl_to_standard_normal(posterior: PosteriorState) -> Value:
    """Closed form KL(N(mu, diag sigma^2) || N(0, I))."""
    sigma_sq = dc.mul(posterior.sigma, posterior.sigma)
    mu_sq = dc.mul(posterior.mu, posterior.mu)
    inner = dc.add(dc.add(sigma_sq, mu_sq), dc.scale(dc.log(sigma_sq), -1.0))
    return dc.scale(dc.sum_all(dc.addc(inner, -1.0)), 0.5)


def _latent_states_at(model: ReconModel, z0: Value, times: list[float],
                      rng: RandomStream | None, deterministic: bool) -> list[Value]:
    """Latent states at the requested times, integrating from the t=0 reference."""
    sde = model.deterministic_sde() if deterministic else model.sde
    schedule = list(times)
    prepended = False
    if schedule[0] > 0.0:
        schedule = [0.0] + schedule
        prepended = True
    traj = sdesolve.integrate_schedule(sde, z0, schedule, model.cfg.steps_per_unit, rng)
    return traj.states[1:] if prepended else traj.states


def recon_loss(model: ReconModel, series: IrregularSeries, rng: RandomStream,
               sample: bool = True) -> Value:
    """Masked MSE at observed times + beta * KL(posterior || N(0, I))."""
    posterior = encode(model, series)
    z0 = sample_initial(posterior, rng) if sample else posterior.mu
    states = _latent_states_at(model, z0, series.obs_times, rng, deterministic=not sample)
    total_sq = None
    count = 0
    n = series.n_nodes
    for k, state in enumerate(states):
        mask_row = series.mask[k].astype(np.float64)[None, :]
        target = series.observations[k] * mask_row
        diff = dc.mul(dc.add(model.decode(state), dc.constant(-target)), dc.constant(mask_row))
        sq = dc.sum_all(dc.mul(diff, diff))
        total_sq = sq if total_sq is None else dc.add(total_sq, sq)
        count += int(series.mask[k].sum()) * n
    mse = dc.scale(total_sq, 1.0 / max(count, 1))
    return dc.add(mse, dc.scale(kl_to_standard_normal(posterior), model.cfg.kl_beta))


def reconstruct_at(model: ReconModel, series: IrregularSeries,
                   query_times: list[float]) -> list[np.ndarray]:
    """Posterior-mean reconstructions (deterministic) at the query times."""
    query_times = [float(t) for t in query_times]
    if not query_times:
        raise SeriesError("query_times must be nonempty")
    if any(b <= a for a, b in zip(query_times, query_times[1:])):
        raise SeriesError(f"query_times must strictly increase: {query_times}")
    if query_times[0] < 0.0:
        raise SeriesError("query times precede the latent reference t=0")
    posterior = encode(model, series)
    states = _latent_states_at(model, posterior.mu, query_times, None, deterministic=True)
    return [model.decode(s).data.copy() for s in states]


def train_recon_model(
    model: ReconModel,
    series_list: list[IrregularSeries],
    epochs: int,
    lr: float,
    rng: RandomStream,
    weight_decay: float = 1e-4,
    batch_size: int = 16,
    progress=None,
) -> list[float]:
    """AdamW training over subjects; returns the mean loss per epoch."""
    history = []
    for epoch in range(epochs):
        order = rng.spawn("order", epoch).permutation(len(series_list))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            losses = [
                recon_loss(model, series_list[int(i)], rng.spawn("noise", epoch, int(i)))
                for i in batch
            ]
            total = losses[0]
            for term in losses[1:]:
                total = dc.add(total, term)
            total = dc.scale(total, 1.0 / len(losses))
            dc.backward(total)
            model.store.adamw_step(lr=lr, weight_decay=weight_decay)
            epoch_loss += total.item() * len(losses)
        epoch_loss /= len(series_list)
        history.append(epoch_loss)
        if progress is not None:
            progress(f"phase=recon epoch={epoch} loss={epoch_loss:.6f}")
    return history


# ---------------------------------------------------------------------------
# Baselines and imputation splicing
# ---------------------------------------------------------------------------

def mean_impute(series: IrregularSeries, query_times: list[float]) -> list[np.ndarray]:
    """Per-ROI mean of observed samples, tiled at every query time."""
    num = np.zeros(series.n_nodes)
    den = 0
    for obs, mask in zip(series.observations, series.mask):
        num += obs[:, mask].sum(axis=1)
        den += int(mask.sum())
    roi_mean = num / max(den, 1)
    window = np.tile(roi_mean[:, None], (1, series.n_samples))
    return [window.copy() for _ in query_times]


class RnnBaseline:
    """One-step GRU forecaster; queries decode the nearest-preceding hidden state."""

    def __init__(self, n_nodes: int, n_samples: int, hidden: int = 32, seed: int = 0):
        self.n_nodes = n_nodes
        self.n_samples = n_samples
        self.hidden = hidden
        self.store = ParamStore()
        rng = RandomStream(seed).spawn("rnn_baseline")
        in_dim = n_nodes * n_samples + n_samples
        self.cell = GRUCell(self.store, "cell", in_dim, hidden, rng)
        self.head = Linear(self.store, "head", hidden, n_nodes * n_samples, rng)

    def _hidden_states(self, series: IrregularSeries) -> list[Value]:
        """h_0 (before any visit) then the state after each visit."""
        h = dc.constant(np.zeros((1, self.hidden)))
        states = [h]
        for k in range(len(series.obs_times)):
            h = self.cell(dc.constant(visit_input(series, k)), h)
            states.append(h)
        return states

    def _window(self, h: Value) -> Value:
        return dc.reshape(self.head(h), self.n_nodes, self.n_samples)

    def loss(self, series: IrregularSeries) -> Value:
        """MSE of one-step predictions on observed entries (h_k predicts visit k)."""
        states = self._hidden_states(series)
        total = None
        count = 0
        for k in range(len(series.obs_times)):
            mask_row = series.mask[k].astype(np.float64)[None, :]
            target = series.observations[k] * mask_row
            diff = dc.mul(dc.add(self._window(states[k]), dc.constant(-target)), dc.constant(mask_row))
            sq = dc.sum_all(dc.mul(diff, diff))
            total = sq if total is None else dc.add(total, sq)
            count += int(series.mask[k].sum()) * self.n_nodes
        return dc.scale(total, 1.0 / max(count, 1))

    def fit(self, series_list: list[IrregularSeries], epochs: int, lr: float,
            rng: RandomStream, batch_size: int = 16, progress=None) -> list[float]:
        history = []
        for epoch in range(epochs):
            order = rng.spawn("order", epoch).permutation(len(series_list))
            epoch_loss = 0.0
            for start in range(0, len(order), batch_size):
                batch = order[start : start + batch_size]
                losses = [self.loss(series_list[int(i)]) for i in batch]
                total = losses[0]
                for term in losses[1:]:
                    total = dc.add(total, term)
                total = dc.scale(total, 1.0 / len(losses))
                dc.backward(total)
                self.store.adamw_step(lr=lr, weight_decay=1e-4)
                epoch_loss += total.item() * len(losses)
            history.append(epoch_loss / len(series_list))
            if progress is not None:
                progress(f"phase=rnn_baseline epoch={epoch} loss={history[-1]:.6f}")
        return history

    def impute(self, series: IrregularSeries, query_times: list[float]) -> list[np.ndarray]:
        states = self._hidden_states(series)
        out = []
        for q in query_times:
            idx = 0
            for k, t in enumerate(series.obs_times):
                if t <= q:
                    idx = k + 1
            out.append(self._window(states[idx]).data.copy())
        return out


def baseline_impute(method: str, series: IrregularSeries, query_times: list[float],
                    model: RnnBaseline | None = None) -> list[np.ndarray]:
    """Reconstruction baselines: per-ROI temporal mean or a GRU forecaster.

    The rnn method uses the supplied fitted model, or fits a small one on the
    series itself when none is given.
    """
    if method == "mean":
        return mean_impute(series, query_times)
    if method == "rnn":
        if model is None:
            model = RnnBaseline(series.n_nodes, series.n_samples, hidden=8, seed=13)
            model.fit([series], epochs=150, lr=0.01, rng=RandomStream(13))
        return model.impute(series, query_times)
    raise SeriesError(f"unknown baseline method '{method}'")


def splice_imputed(series: IrregularSeries, imputed: list[np.ndarray]) -> list[np.ndarray]:
    """Observed samples pass through; imputed values fill only masked samples."""
    if len(imputed) != len(series.obs_times):
        raise SeriesError("one imputed window per visit required")
    out = []
    for obs, mask, fill in zip(series.observations, series.mask, imputed):
        keep = mask[None, :]
        out.append(obs * keep + fill * (~mask)[None, :])
    return out
