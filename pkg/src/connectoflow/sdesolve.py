"""Euler-Maruyama integration of neural SDEs, differentiable by unrolling.

The integrator is shared by the signal-reconstruction latent dynamics and
the evolving GCN weight dynamics. Two execution paths produce identical
math: a generic path that builds one tape node per elementary operation
(works for arbitrary drift/diffusion callables on ``Value``s), and a fused
path used when drift and diffusion expose the raw-array ``em_value`` /
``em_vjp`` protocol, which packs the whole unrolled loop into a single tape
node with a hand-derived adjoint sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _fastpath
from . import diffcore as dc
from .diffcore import RandomStream, Value
from .layers import MLP, ConstDiag


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state; carries the failing step index."""

    def __init__(self, step: int, msg: str | None = None):
        self.step = step
        super().__init__(msg or f"non-finite state at integration step {step}")


class ScheduleError(ValueError):
    """Requested integration times are invalid."""


DIAGONAL = "diagonal"
ZERO = "zero"


@dataclass
class NeuralSDE:
    """Drift/diffusion pair over matrix-valued states.

    ``noise='zero'`` ignores the diffusion term entirely (deterministic ODE
    mode). With diagonal noise the diffusion output multiplies independent
    sqrt(h)-scaled Gaussian increments elementwise.
    """

    drift: Callable[[Value], Value]
    diffusion: Callable[[Value], Value] | None = None
    noise: str = DIAGONAL

    def __post_init__(self):
        if self.noise not in (DIAGONAL, ZERO):
            raise ScheduleError(f"unknown noise mode '{self.noise}'")
        if self.noise == DIAGONAL and self.diffusion is None:
            raise ScheduleError("diagonal noise requires a diffusion term")


@dataclass
class Trajectory:
    """States at an increasing sequence of timestamps (months)."""

    times: tuple[float, ...]
    states: list[Value] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.times)


def n_steps(t_start: float, t_end: float, steps_per_unit: int) -> int:
    dt = t_end - t_start
    if dt <= 0.0:
        return 0
    # guard against float fuzz promoting e.g. 2.0000000000000004 to 3 steps
    return max(1, int(math.ceil(steps_per_unit * dt - 1e-9)))


def _has_fast_path(sde: NeuralSDE) -> bool:
    if not hasattr(sde.drift, "em_begin"):
        return False
    if sde.noise == ZERO:
        return True
    return hasattr(sde.diffusion, "em_begin") or getattr(sde.diffusion, "em_constant", False)


def integrate(
    sde: NeuralSDE,
    z0: Value,
    t_start: float,
    t_end: float,
    steps_per_unit: int,
    rng: RandomStream | None = None,
) -> Value:
    """Euler-Maruyama endpoint at t_end, differentiable through every step.

    Step size is h = (t_end - t_start) / ceil(steps_per_unit * (t_end - t_start)).
    t_end == t_start returns z0 unchanged.
    """
    if t_end < t_start:
        raise ScheduleError(f"t_end {t_end} precedes t_start {t_start}")
    if steps_per_unit < 1:
        raise ScheduleError(f"steps_per_unit must be >= 1, got {steps_per_unit}")
    steps = n_steps(t_start, t_end, steps_per_unit)
    if steps == 0:
        return z0
    if sde.noise == DIAGONAL and rng is None:
        raise ScheduleError("diagonal noise requires a random stream")
    h = (t_end - t_start) / steps
    if _has_fast_path(sde):
        return _integrate_fused(sde, z0, h, steps, rng)
    return _integrate_generic(sde, z0, h, steps, rng)


def _integrate_generic(sde: NeuralSDE, z0: Value, h: float, steps: int, rng) -> Value:
    z = z0
    sqrt_h = math.sqrt(h)
    for k in range(steps):
        z_next = dc.add(z, dc.scale(sde.drift(z), h))
        if sde.noise == DIAGONAL:
            eps = rng.normal(z.data.shape) * sqrt_h
            z_next = dc.add(z_next, dc.mul(sde.diffusion(z), dc.constant(eps)))
        if not np.all(np.isfinite(z_next.data)):
            raise DivergenceError(k)
        z = z_next
    return z


def _numba_eligible(sde: NeuralSDE, z0: Value) -> bool:
    if not _fastpath.HAVE_NUMBA or z0.data.shape[0] != 1:
        return False
    if not (isinstance(sde.drift, MLP) and not sde.drift.out_softplus):
        return False
    if sde.noise == ZERO:
        return True
    return isinstance(sde.diffusion, ConstDiag)


def _integrate_numba(sde: NeuralSDE, z0: Value, h: float, steps: int, rng) -> Value:
    drift = sde.drift
    diffusion = sde.diffusion if sde.noise == DIAGONAL else None
    W1, b1 = drift.W1.data, drift.b1.data[0]
    W2, b2 = drift.W2.data, drift.b2.data[0]
    flat = z0.data[0]
    if diffusion is None:
        noise = np.empty((steps, 0))
        noise_term = noise
        has_noise = False
    else:
        noise = rng.normal((steps, flat.size))
        noise *= math.sqrt(h)
        noise_term = noise * diffusion.em_value(z0.data)[0]
        has_noise = True
    states, z, bad = _fastpath.em_mlp_forward(
        flat, W1, b1, W2, b2, h, steps, noise_term, has_noise
    )
    if bad >= 0:
        raise DivergenceError(bad)

    parents = [z0, drift.W1, drift.b1, drift.W2, drift.b2]
    if diffusion is not None:
        parents.append(diffusion.w)

    def bw(g, acc):
        activations = np.tanh(states @ W1 + b1)
        dz, dh1_stack, gout_stack, nw = _fastpath.em_mlp_chain(
            activations, W1, W2, h, noise, g[0], has_noise
        )
        acc(z0, dz[None, :])
        acc(drift.W1, states.T @ dh1_stack)
        acc(drift.b1, dh1_stack.sum(axis=0)[None, :])
        acc(drift.W2, activations.T @ gout_stack)
        acc(drift.b2, gout_stack.sum(axis=0)[None, :])
        if diffusion is not None:
            sig = 1.0 / (1.0 + np.exp(-diffusion.w.data))
            acc(diffusion.w, nw[None, :] * sig)

    return Value(z[None, :], tuple(parents), bw)


def _integrate_fused(sde: NeuralSDE, z0: Value, h: float, steps: int, rng) -> Value:
    if _numba_eligible(sde, z0):
        return _integrate_numba(sde, z0, h, steps, rng)
    drift = sde.drift
    diffusion = sde.diffusion if sde.noise == DIAGONAL else None
    diff_const = diffusion is not None and getattr(diffusion, "em_constant", False)
    z = z0.data
    states = np.empty((steps,) + z.shape)
    if diffusion is None:
        noise = noise_term = None
    else:
        noise = rng.normal((steps,) + z.shape)
        noise *= math.sqrt(h)
        noise_term = noise * diffusion.em_value(z) if diff_const else None
    drift_fn = drift.em_value_fn() if hasattr(drift, "em_value_fn") else drift.em_value
    diff_fn = None
    if diffusion is not None and not diff_const:
        diff_fn = diffusion.em_value_fn() if hasattr(diffusion, "em_value_fn") else diffusion.em_value
    isfinite = math.isfinite
    for k in range(steps):
        states[k] = z
        f = drift_fn(z)
        f *= h
        f += z
        if noise_term is not None:
            f += noise_term[k]
        elif diff_fn is not None:
            f += diff_fn(z) * noise[k]
        z = f
        if not isfinite(z.sum()):  # inf/nan poisons the sum
            raise DivergenceError(k)

    parents = [z0] + list(drift.params())
    if diffusion is not None:
        parents += list(diffusion.params())

    def bw(g, acc):
        drift_cache = drift.em_begin(states)
        drift_step = drift.em_step_fn(drift_cache) if hasattr(drift, "em_step_fn") else None
        diff_cache = None
        diff_step = None
        noise_weighted = None
        if diffusion is not None:
            if diff_const:
                noise_weighted = np.zeros_like(g)
            else:
                diff_cache = diffusion.em_begin(states)
                diff_step = (diffusion.em_step_fn(diff_cache)
                             if hasattr(diffusion, "em_step_fn") else None)
        dz = g
        for k in range(steps - 1, -1, -1):
            if drift_step is not None:
                dz_new = dz + drift_step(k, dz * h)
            else:
                dz_new = dz + drift.em_step(drift_cache, k, dz * h)
            if diff_cache is not None:
                contrib = (diff_step(k, dz * noise[k]) if diff_step is not None
                           else diffusion.em_step(diff_cache, k, dz * noise[k]))
                dz_new = dz_new + contrib
            elif noise_weighted is not None:
                noise_weighted += dz * noise[k]
            dz = dz_new
        drift.em_flush(drift_cache, acc)
        if diff_cache is not None:
            diffusion.em_flush(diff_cache, acc)
        elif noise_weighted is not None:
            diffusion.em_flush_const(noise_weighted, acc)
        acc(z0, dz)

    return Value(z, tuple(parents), bw)


def integrate_schedule(
    sde: NeuralSDE,
    z0: Value,
    times: Sequence[float],
    steps_per_unit: int,
    rng: RandomStream | None = None,
) -> Trajectory:
    """States at each requested time, chaining segment endpoints.

    The first requested time is the reference: its state is z0 itself
    (a zero-length segment).
    """
    times = [float(t) for t in times]
    if not times:
        raise ScheduleError("schedule must contain at least one time")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ScheduleError(f"schedule times must be strictly increasing: {times}")
    traj = Trajectory(tuple(times))
    z = z0
    prev = times[0]
    traj.states.append(z)
    for t in times[1:]:
        z = integrate(sde, z, prev, t, steps_per_unit, rng)
        traj.states.append(z)
        prev = t
    return traj
