"""Noise schedule, v-parameterization algebra, and the stochastic DDIM sampler.

The schedule is variance preserving with alpha(t) = sqrt(1 - t),
sigma(t) = sqrt(t) on a uniform descending grid over [0, 1]. Sampling
starts from pure noise at t = 1 and assembles each update from the
predicted clean latent and predicted noise recovered from the model's
v output:

    z0_hat  = alpha_t * z_t - sigma_t * v
    eps_hat = sigma_t * z_t + alpha_t * v
    z_prev  = alpha_prev * z0_hat + sqrt(sigma_prev^2 - eta^2) * eps_hat
              + eta * noise
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = [
    "NoiseSchedule",
    "schedule_at",
    "v_split",
    "ddim_step",
    "forward_diffuse",
    "renoise",
    "cfg_combine",
    "sample",
    "SampleResult",
    "StepContext",
    "dump_trajectory",
    "load_trajectory",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Uniform variance-preserving schedule with per-step DDIM stochasticity.

    eta_scale in [0, 1] scales the per-step noise injection between the
    deterministic sampler (0) and the fully stochastic one (1, default).
    """

    T: int = 100
    eta_scale: float = 1.0
    grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"need at least one step, got T={self.T}")
        if not 0.0 <= self.eta_scale <= 1.0:
            raise ValueError(f"eta_scale must be in [0, 1], got {self.eta_scale}")
        object.__setattr__(
            self, "grid", np.linspace(1.0, 0.0, self.T + 1, dtype=np.float64)
        )

    def alpha(self, t: float) -> float:
        _check_time(t)
        return float(np.sqrt(1.0 - t))

    def sigma(self, t: float) -> float:
        _check_time(t)
        return float(np.sqrt(t))

    def eta(self, i: int) -> float:
        """Noise injected at step i (grid[i] -> grid[i+1]).

        Full strength is the DDPM-matching DDIM value
        sigma_prev * sqrt(1 - alpha_t^2 sigma_prev^2 / (alpha_prev^2 sigma_t^2)),
        clipped to the feasible range [0, sigma_prev].
        """
        t, t_prev = float(self.grid[i]), float(self.grid[i + 1])
        a_t, s_t = self.alpha(t), self.sigma(t)
        a_p, s_p = self.alpha(t_prev), self.sigma(t_prev)
        if s_p == 0.0:
            return 0.0
        ratio = (a_t * s_p) / (a_p * s_t)
        full = s_p * float(np.sqrt(max(0.0, 1.0 - ratio * ratio)))
        return self.eta_scale * min(full, s_p)

    def step_weights(self) -> np.ndarray:
        """s(t) per step: alpha at the step's destination time, normalized.

        Destination times t_1..t_T keep every weight strictly positive
        (alpha(t_0)=alpha(1) is exactly 0 on this schedule) and the weights
        sum to 1 for any T.
        """
        alphas = np.sqrt(1.0 - self.grid[1:])
        return alphas / alphas.sum()


def _check_time(t: float):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"diffusion time must lie in [0, 1], got {t}")


def schedule_at(sched: NoiseSchedule, t: float) -> tuple[float, float]:
    return sched.alpha(t), sched.sigma(t)


def v_split(z_t, v, t: float, sched: NoiseSchedule):
    """Recover (z0_hat, eps_hat) from a v prediction at time t."""
    if z_t.shape != v.shape:
        raise ValueError(f"z_t shape {z_t.shape} != v shape {v.shape}")
    a, s = schedule_at(sched, t)
    z0_hat = z_t * a - v * s
    eps_hat = z_t * s + v * a
    return z0_hat, eps_hat


def ddim_step(z_t, v, t: float, t_prev: float, eta_t: float, noise, sched: NoiseSchedule):
    """One reverse update from t to t_prev (t > t_prev)."""
    if not t > t_prev:
        raise ValueError(f"ddim_step needs t > t_prev, got {t} -> {t_prev}")
    z0_hat, eps_hat = v_split(z_t, v, t, sched)
    return assemble_step(z0_hat, eps_hat, t_prev, eta_t, noise, sched)


def assemble_step(z0_hat, eps_hat, t_prev: float, eta_t: float, noise, sched: NoiseSchedule):
    """DDIM assembly from already-split estimates (guidance edits z0_hat)."""
    a_p, s_p = schedule_at(sched, t_prev)
    rad = s_p * s_p - eta_t * eta_t
    if rad < -1e-12:
        raise ValueError(
            f"ddim radical is negative: eta_t={eta_t} exceeds sigma(t_prev)={s_p}"
        )
    coef = float(np.sqrt(max(rad, 0.0)))
    out = z0_hat * a_p + eps_hat * coef
    if eta_t != 0.0:
        out = out + noise * eta_t
    return out


def forward_diffuse(z_0, t: float, noise, sched: NoiseSchedule):
    """z_t = alpha_t z_0 + sigma_t noise."""
    if z_0.shape != noise.shape:
        raise ValueError(f"z_0 shape {z_0.shape} != noise shape {noise.shape}")
    a, s = schedule_at(sched, t)
    if s == 0.0:
        return z_0 * a
    return z_0 * a + noise * s


def renoise(z_prev, t_prev: float, t: float, noise, sched: NoiseSchedule):
    """Sample p(z_t | z_{t_prev}) to travel back up the chain (t >= t_prev)."""
    if t < t_prev:
        raise ValueError(f"renoise goes forward in noise: need t >= t_prev, got {t} < {t_prev}")
    a_t, s_t = schedule_at(sched, t)
    a_p, s_p = schedule_at(sched, t_prev)
    if a_p == 0.0:
        raise ValueError("cannot renoise from t=1 (alpha is zero there)")
    coef = a_t / a_p
    var = s_t * s_t - coef * coef * s_p * s_p
    std = float(np.sqrt(max(var, 0.0)))
    out = z_prev * coef
    if std != 0.0:
        out = out + noise * std
    return out


def cfg_combine(v_cond, v_uncond, w: float):
    """Classifier-free extrapolation v_uncond + w (v_cond - v_uncond)."""
    if v_cond.shape != v_uncond.shape:
        raise ValueError(f"shape mismatch {v_cond.shape} vs {v_uncond.shape}")
    return v_uncond + (v_cond - v_uncond) * w


# ---------------------------------------------------------------------------
# sampling loop
# ---------------------------------------------------------------------------

# A denoiser for sampling purposes: (z_t, t, cond, cfg_scale) -> (v, tap).
# `tap` is the intermediate activation some guidance backends consume and
# may be None.
DenoiseFn = Callable[[Tensor, float, object, float], tuple[Tensor, "Tensor | None"]]


@dataclass
class StepContext:
    """Everything a guidance hook needs to run (or replace) one step."""

    i: int
    t: float
    t_prev: float
    eta_t: float
    noise: np.ndarray
    z_t: Tensor
    denoise: DenoiseFn
    sched: NoiseSchedule
    cond: object
    cfg_scale: float
    rng: np.random.Generator  # guidance-only stream; base draws stay aligned

    def default_step(self) -> Tensor:
        """The exact unguided update (bit-identical to a hookless run)."""
        v, _ = self.denoise(self.z_t, self.t, self.cond, self.cfg_scale)
        return ddim_step(
            self.z_t, v, self.t, self.t_prev, self.eta_t, self.noise, self.sched
        )


@dataclass
class SampleResult:
    states: list[np.ndarray]  # z at grid[0..T] (T+1 entries)
    z_0: np.ndarray
    times: np.ndarray


def sample(
    denoise: DenoiseFn,
    sched: NoiseSchedule,
    cond,
    cfg_scale: float,
    *,
    shape: Sequence[int],
    seed: int,
    hook: Callable[[StepContext], Tensor] | None = None,
    keep_states: bool = True,
) -> SampleResult:
    """Run the reverse chain from z_1 ~ N(0, I) down to z_0.

    The base noise stream (initial latent + per-step DDIM noise) is drawn
    from one generator and the hook receives a second, independent stream,
    so guided and unguided runs at the same seed share base draws exactly.
    """
    ss_base, ss_hook = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(ss_base)
    rng_hook = np.random.default_rng(ss_hook)

    z = Tensor(rng.standard_normal(tuple(shape)).astype(np.float32))
    states = [z.numpy()] if keep_states else []
    for i in range(sched.T):
        t = float(sched.grid[i])
        t_prev = float(sched.grid[i + 1])
        eta_t = sched.eta(i)
        noise = rng.standard_normal(tuple(shape)).astype(np.float32)
        ctx = StepContext(
            i, t, t_prev, eta_t, noise, z, denoise, sched, cond, cfg_scale, rng_hook
        )
        z = ctx.default_step() if hook is None else hook(ctx)
        z = z.detach() if z.requires_grad else z
        if keep_states:
            states.append(z.numpy())
    return SampleResult(states=states, z_0=z.numpy(), times=sched.grid.copy())


# ---------------------------------------------------------------------------
# trajectory dump (binary: header T, frames, channels; then f32 LE states)
# ---------------------------------------------------------------------------


def dump_trajectory(path, result: SampleResult):
    T = len(result.states) - 1
    frames, channels = result.states[0].shape[-2], result.states[0].shape[-1]
    with open(path, "wb") as f:
        f.write(struct.pack("<III", T, frames, channels))
        for s in result.states:
            f.write(s.astype("<f4").reshape(-1).tobytes())


def load_trajectory(path) -> tuple[int, list[np.ndarray]]:
    with open(path, "rb") as f:
        T, frames, channels = struct.unpack("<III", f.read(12))
        states = []
        for _ in range(T + 1):
            buf = f.read(frames * channels * 4)
            arr = np.frombuffer(buf, dtype="<f4").reshape(frames, channels)
            states.append(arr.astype(np.float32))
    return T, states
