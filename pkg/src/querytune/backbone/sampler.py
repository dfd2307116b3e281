"""Deterministic sampling and inversion on the latent grid.

Both directions walk the same timestep grid.  One sampling step from time t
to the next lower time s, given a noise prediction eps:

    x0_hat = (z_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)
    z_s    = sqrt(abar_s) * x0_hat + sqrt(1 - abar_s) * eps

with abar taken to 1 beyond the last grid point, so the final step lands on
the model's clean-latent estimate.  No noise is injected anywhere: the map
from seed noise to sample is a pure function.

Inversion runs the grid upward from a clean latent, conditioning each noise
prediction on the time being stepped *to*.  It returns the whole trajectory,
which is how intermediate diffusion states of a real image are obtained.

The model enters only through ``eps_fn(z_batch, t_batch) -> eps_batch`` so
callers can wrap guidance or adapters around it and tests can substitute
closed-form stubs.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from .schedule import NoiseSchedule


def timestep_grid(schedule: NoiseSchedule, num_steps: int) -> np.ndarray:
    """Strictly decreasing integer timesteps from T-1 toward 0.

    Rounded from an even spacing; duplicates collapse, so the grid can be
    shorter than requested when num_steps approaches the training horizon.
    """
    if num_steps < 1:
        raise InvalidArgument("num_steps must be >= 1")
    if num_steps > schedule.num_train_steps:
        raise InvalidArgument("num_steps cannot exceed the training horizon")
    ts = np.round(np.linspace(schedule.num_train_steps - 1, 0, num_steps)).astype(np.int64)
    return np.unique(ts)[::-1].copy()


def _step(z, eps, abar_from: float, abar_to: float):
    x0 = (z - np.sqrt(1.0 - abar_from) * eps) / np.sqrt(abar_from)
    return np.sqrt(abar_to) * x0 + np.sqrt(1.0 - abar_to) * eps


def sample(eps_fn, schedule: NoiseSchedule, num_steps: int, seed_noise: np.ndarray,
           return_trajectory: bool = False):
    """Seed noise batch -> clean latent batch along the deterministic path."""
    ts = timestep_grid(schedule, num_steps)
    z = np.array(seed_noise, dtype=np.float64)
    b = z.shape[0]
    traj = []
    for i, t in enumerate(ts):
        eps = eps_fn(z, np.full(b, t, dtype=np.int64))
        abar_from = schedule.alpha_bars[t]
        abar_to = schedule.alpha_bars[ts[i + 1]] if i + 1 < len(ts) else 1.0
        z = _step(z, eps, abar_from, abar_to)
        traj.append((int(ts[i + 1]) if i + 1 < len(ts) else -1, z))
    return (z, traj) if return_trajectory else z


def invert(eps_fn, schedule: NoiseSchedule, num_steps: int, z0: np.ndarray):
    """Clean latent batch -> (noised latent at the top of the grid, trajectory).

    The trajectory is a list of (t, z_t) in increasing t, one entry per grid
    point, ending at the top.  Each prediction is conditioned on the target
    time of its step, mirroring the downward pass.
    """
    ts = timestep_grid(schedule, num_steps)[::-1]  # increasing
    z = np.array(z0, dtype=np.float64)
    b = z.shape[0]
    abar_from = 1.0
    traj = []
    for t in ts:
        eps = eps_fn(z, np.full(b, t, dtype=np.int64))
        abar_to = schedule.alpha_bars[t]
        z = _step(z, eps, abar_from, abar_to)
        abar_from = abar_to
        traj.append((int(t), z))
    return z, traj


def guided(eps_cond_fn, eps_null_fn, scale: float):
    """Classifier-free style mix: null + scale * (cond - null).

    scale == 1 short-circuits to the conditional prediction alone.
    """
    if scale == 1.0:
        return eps_cond_fn

    def fn(z, t):
        e_c = eps_cond_fn(z, t)
        e_n = eps_null_fn(z, t)
        return e_n + scale * (e_c - e_n)

    return fn
