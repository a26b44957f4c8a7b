"""Selective guidance engine: steer sampling toward control targets.

Per guided step (repeated n_recur times):

1. fresh denoiser forward from z_t (graph on), split into z0_hat/eps_hat
2. mean guidance: n_iter gradient steps on z0_hat through the control
   predictor only (the denoiser is not re-differentiated)
3. DDIM assembly from the guided z0_hat and the original eps_hat
4. variance guidance: subtract rho_t * d(loss)/d(z_t), the gradient
   flowing through the denoiser (both CFG branches)
5. if another recurrence remains, renoise z_{t-1} back up to z_t

Strengths decompose as rho_t = rho * s(t) (same for mu, gamma) with s the
schedule's step weights. Backends: "latch" predicts controls straight
from latents, "end_to_end" decodes and re-extracts, "readout" consumes
tapped denoiser activations (variance guidance only).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tl
from .diffusion import NoiseSchedule, SampleResult, StepContext, renoise, sample, v_split
from .models import VAE, CfgDenoiser, Denoiser, LatchHead, ReadoutHead
from .tensor import Tensor
from .training import bce_with_logits
from .world import CONTROL_DIMS, EXTRACTORS, LATENT_FRAMES

__all__ = [
    "GuidanceError",
    "ControlTarget",
    "GuidanceConfig",
    "GuidanceModels",
    "GuidanceProfile",
    "BACKENDS",
    "backend_defaults",
    "make_mask",
    "control_distance",
    "control_loss",
    "mean_guidance",
    "guided_step",
    "make_hook",
    "guided_sample",
]

BACKENDS = ("latch", "end_to_end", "readout")


class GuidanceError(ValueError):
    pass


@dataclass
class ControlTarget:
    """One named control: target track, implied distance, loss weight."""

    kind: str
    values: np.ndarray  # (frames, dims)
    weight: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.kind not in CONTROL_DIMS:
            raise GuidanceError(f"unknown control kind {self.kind!r}")
        if self.values.shape != (LATENT_FRAMES, CONTROL_DIMS[self.kind]):
            raise GuidanceError(
                f"{self.kind} target must be ({LATENT_FRAMES}, {CONTROL_DIMS[self.kind]}), "
                f"got {self.values.shape}"
            )
        if self.weight <= 0:
            raise GuidanceError("control weight must be positive")


# §3.3 defaults per backend: (rho, mu, gamma, intensity loss weight)
_BACKEND_DEFAULTS = {
    "latch": dict(rho=0.03, mu=0.03, gamma=0.3, intensity_weight=0.0005),
    "end_to_end": dict(rho=0.03, mu=0.03, gamma=1.5, intensity_weight=0.001),
    "readout": dict(rho=0.1, mu=0.0, gamma=0.0, intensity_weight=0.005),
}


def backend_defaults(backend: str) -> dict:
    if backend not in BACKENDS:
        raise GuidanceError(f"unknown backend {backend!r}")
    return dict(_BACKEND_DEFAULTS[backend])


@dataclass
class GuidanceConfig:
    backend: str = "latch"
    rho: float = 0.03
    mu: float = 0.03
    gamma: float = 0.3
    n_iter: int = 4
    n_recur: int = 1
    mask: np.ndarray | None = None  # (T,) booleans; None means all-false
    cfg_scale: float = 7.0
    weights: dict = field(default_factory=dict)  # kind -> loss weight
    gamma_mode: str = "feature"  # "feature" (paper notation) or "latent"

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise GuidanceError(f"unknown backend {self.backend!r}")
        if min(self.rho, self.mu, self.gamma) < 0:
            raise GuidanceError("rho, mu, gamma must be >= 0")
        if self.n_iter < 1 or self.n_recur < 1:
            raise GuidanceError("n_iter and n_recur must be >= 1")
        if self.gamma_mode not in ("feature", "latent"):
            raise GuidanceError(f"unknown gamma_mode {self.gamma_mode!r}")
        if self.backend == "readout" and (self.mu != 0.0 or self.gamma != 0.0):
            # readout features are functions of z_t, not z0_hat: no mean
            # guidance, no feature smoothing
            self.mu = 0.0
            self.gamma = 0.0
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)

    def weight_for(self, kind: str) -> float:
        if kind in self.weights:
            return float(self.weights[kind])
        if kind == "intensity":
            return _BACKEND_DEFAULTS[self.backend]["intensity_weight"]
        return 1.0


def make_mask(T: int, mode: str, value) -> np.ndarray:
    """Selective-step mask: `fraction_front` or `explicit`."""
    if T < 1:
        raise GuidanceError(f"T must be >= 1, got {T}")
    if mode == "fraction_front":
        f = float(value)
        if not 0.0 <= f <= 1.0:
            raise GuidanceError(f"fraction must be in [0, 1], got {f}")
        mask = np.zeros(T, dtype=bool)
        mask[: int(np.ceil(f * T))] = True
        return mask
    if mode == "explicit":
        mask = np.asarray(value, dtype=bool)
        if mask.shape != (T,):
            raise GuidanceError(f"explicit mask must have length {T}, got {mask.shape}")
        return mask.copy()
    raise GuidanceError(f"unknown mask mode {mode!r}")


@dataclass
class GuidanceModels:
    """The frozen predictors guidance differentiates through."""

    vae: VAE | None = None
    latch_heads: dict = field(default_factory=dict)  # kind -> LatchHead
    readout_heads: dict = field(default_factory=dict)  # kind -> ReadoutHead

    def check(self, backend: str, kinds):
        if backend == "latch":
            missing = [k for k in kinds if k not in self.latch_heads]
            if missing:
                raise GuidanceError(f"latch backend needs heads for {missing}")
        elif backend == "end_to_end":
            if self.vae is None:
                raise GuidanceError("end_to_end backend needs the decoder")
        else:
            missing = [k for k in kinds if k not in self.readout_heads]
            if missing:
                raise GuidanceError(f"readout backend needs heads for {missing}")


@dataclass
class GuidanceProfile:
    """Per-run instrumentation (wall time and work counters)."""

    guided_step_seconds: list = field(default_factory=list)
    chain_seconds: list = field(default_factory=list)
    mean_iterations: int = 0
    variance_steps: int = 0
    recurrences: int = 0


# ---------------------------------------------------------------------------
# control losses
# ---------------------------------------------------------------------------


def control_distance(kind: str, pred: Tensor, target: np.ndarray, from_logits: bool) -> Tensor:
    """The per-control distance: MSE for intensity, mean BCE otherwise."""
    if kind == "intensity":
        diff = pred - Tensor(target)
        return (diff * diff).mean()
    if from_logits:
        return bce_with_logits(pred, target).mean()
    p = tl.clamp(pred, 1e-6, 1.0 - 1e-6)
    t = Tensor(target)
    return (-(t * tl.tlog(p) + (1.0 - t) * tl.tlog(1.0 - p))).mean()


def _predict(
    cfg: GuidanceConfig,
    models: GuidanceModels,
    kind: str,
    z: Tensor | None,
    tap: Tensor | None,
    t: float,
) -> tuple[Tensor, bool]:
    """Predicted feature track for one control; returns (track, from_logits)."""
    if cfg.backend == "latch":
        head: LatchHead = models.latch_heads[kind]
        tt = None if head.noise_mode == "clean" else t
        return head(z.reshape(1, *z.shape), tt)[0], True
    if cfg.backend == "end_to_end":
        wave = models.vae.decode(z.reshape(1, *z.shape))
        return EXTRACTORS[kind](wave[0, 0]), False
    return models.readout_heads[kind](tap, t)[0], True


def control_loss(
    cfg: GuidanceConfig,
    models: GuidanceModels,
    targets: list[ControlTarget],
    t: float,
    gamma_t: float,
    rng: np.random.Generator,
    *,
    z: Tensor | None = None,
    tap: Tensor | None = None,
) -> tuple[Tensor, dict]:
    """Weighted control distance at one evaluation point.

    gamma smoothing draws one Gaussian perturbation per control per
    evaluation: on the predicted feature for gamma_mode="feature", on the
    input latent for gamma_mode="latent".
    """
    if gamma_t > 0 and cfg.gamma_mode == "latent" and z is not None:
        xi = rng.standard_normal(z.shape).astype(np.float32)
        z = z + Tensor(xi * np.sqrt(gamma_t, dtype=np.float32))
    total = None
    total_w = 0.0
    per_control = {}
    for target in targets:
        pred, from_logits = _predict(cfg, models, target.kind, z, tap, t)
        if gamma_t > 0 and cfg.gamma_mode == "feature":
            xi = rng.standard_normal(pred.shape).astype(np.float32)
            pred = pred + Tensor(xi * np.sqrt(gamma_t, dtype=np.float32))
        w = cfg.weight_for(target.kind)
        dist = control_distance(target.kind, pred, target.values, from_logits)
        per_control[target.kind] = dist.item()
        term = dist * w
        total = term if total is None else total + term
        total_w += w
    return total * (1.0 / total_w), per_control


# ---------------------------------------------------------------------------
# guidance applications
# ---------------------------------------------------------------------------


def mean_guidance(
    z0_hat: np.ndarray,
    t: float,
    targets: list[ControlTarget],
    cfg: GuidanceConfig,
    models: GuidanceModels,
    s_t: float,
    rng: np.random.Generator,
    profile: GuidanceProfile | None = None,
) -> tuple[np.ndarray, dict]:
    """n_iter descent steps on the predicted clean latent (denoiser untouched)."""
    if cfg.backend == "readout":
        raise GuidanceError("mean guidance is undefined for the readout backend")
    mu_t = cfg.mu * s_t
    gamma_t = cfg.gamma * s_t
    first_losses = {}
    if mu_t == 0.0:
        return z0_hat, first_losses
    z0 = z0_hat.copy()
    for it in range(cfg.n_iter):
        leaf = Tensor(z0, requires_grad=True)
        loss, per = control_loss(cfg, models, targets, t, gamma_t, rng, z=leaf)
        if it == 0:
            first_losses = per
        loss.backward()
        z0 = z0 - mu_t * leaf.grad
        if profile is not None:
            profile.mean_iterations += 1
    return z0, first_losses


def guided_step(
    ctx: StepContext,
    cfg: GuidanceConfig,
    targets: list[ControlTarget],
    models: GuidanceModels,
    weights: np.ndarray,
    profile: GuidanceProfile | None = None,
    diagnostics: list | None = None,
) -> Tensor:
    """One selective-guidance step; falls back to the plain update when the
    step is unmasked or every strength is zero."""
    masked = cfg.mask is not None and bool(cfg.mask[ctx.i])
    if not masked or (cfg.rho == 0.0 and cfg.mu == 0.0 and cfg.gamma == 0.0):
        return ctx.default_step()

    t0 = time.perf_counter()
    chain_time = 0.0
    s_t = float(weights[ctx.i])
    rho_t = cfg.rho * s_t
    gamma_t = cfg.gamma * s_t
    sched = ctx.sched
    a_prev, s_prev = sched.alpha(ctx.t_prev), sched.sigma(ctx.t_prev)
    rad = max(s_prev * s_prev - ctx.eta_t * ctx.eta_t, 0.0)
    eps_coef = float(np.sqrt(rad))

    z_t_np = ctx.z_t.numpy()
    z_prev_np = None
    for r in range(cfg.n_recur):
        if r > 0:
            noise = ctx.rng.standard_normal(z_prev_np.shape).astype(np.float32)
            z_t_np = renoise(z_prev_np, ctx.t_prev, ctx.t, noise, sched)
            if profile is not None:
                profile.recurrences += 1
        needs_variance = cfg.rho > 0.0
        z_leaf = Tensor(z_t_np, requires_grad=needs_variance)
        v, tap = ctx.denoise(z_leaf, ctx.t, ctx.cond, ctx.cfg_scale)
        z0_var, eps_hat = v_split(z_leaf, v, ctx.t, sched)
        z0_np = z0_var.numpy()
        eps_np = eps_hat.numpy()

        first_losses = {}
        if cfg.backend in ("latch", "end_to_end") and cfg.mu > 0.0:
            tm = time.perf_counter()
            z0_np, first_losses = mean_guidance(
                z0_np, ctx.t, targets, cfg, models, s_t, ctx.rng, profile
            )
            chain_time += time.perf_counter() - tm

        z_prev_np = a_prev * z0_np + eps_coef * eps_np
        if ctx.eta_t != 0.0:
            z_prev_np = z_prev_np + ctx.eta_t * ctx.noise

        if needs_variance:
            # two-stage VJP: the control chain down to its input is timed as
            # backend work; the continuation through the denoiser is shared
            tm = time.perf_counter()
            if cfg.backend == "readout":
                tap_cond = tap[0:1] if tap.shape[0] > 1 else tap
                cut = Tensor(tap_cond.numpy(), requires_grad=True)
                loss, per = control_loss(
                    cfg, models, targets, ctx.t, gamma_t, ctx.rng, tap=cut
                )
                loss.backward()
                chain_time += time.perf_counter() - tm
                tap_cond.backward(cut.grad)
            else:
                # evaluated at the step's own clean estimate (where the
                # denoiser Jacobian lives), not the mean-guided one
                cut = Tensor(z0_var.numpy(), requires_grad=True)
                loss, per = control_loss(
                    cfg, models, targets, ctx.t, gamma_t, ctx.rng, z=cut
                )
                loss.backward()
                chain_time += time.perf_counter() - tm
                z0_var.backward(cut.grad)
            if not first_losses:
                first_losses = per
            z_prev_np = z_prev_np - rho_t * z_leaf.grad
            if profile is not None:
                profile.variance_steps += 1

        if diagnostics is not None and r == 0:
            for kind, value in first_losses.items():
                diagnostics.append((ctx.i, kind, value))

    if profile is not None:
        profile.guided_step_seconds.append(time.perf_counter() - t0)
        profile.chain_seconds.append(chain_time)
    return Tensor(z_prev_np)


def make_hook(
    cfg: GuidanceConfig,
    targets: list[ControlTarget],
    models: GuidanceModels,
    sched: NoiseSchedule,
    profile: GuidanceProfile | None = None,
    diagnostics: list | None = None,
):
    if cfg.mask is not None and len(cfg.mask) != sched.T:
        raise GuidanceError(f"mask length {len(cfg.mask)} != T={sched.T}")
    models.check(cfg.backend, [t.kind for t in targets])
    weights = sched.step_weights()

    def hook(ctx: StepContext) -> Tensor:
        return guided_step(ctx, cfg, targets, models, weights, profile, diagnostics)

    return hook


def guided_sample(
    denoiser: Denoiser,
    sched: NoiseSchedule,
    cond,
    cfg: GuidanceConfig,
    targets: list[ControlTarget],
    models: GuidanceModels,
    seed: int,
    profile: GuidanceProfile | None = None,
    diagnostics: list | None = None,
    keep_states: bool = True,
) -> SampleResult:
    """Sampling run with the selective-guidance hook attached."""
    hook = make_hook(cfg, targets, models, sched, profile, diagnostics)
    return sample(
        CfgDenoiser(denoiser),
        sched,
        cond,
        cfg.cfg_scale,
        shape=(LATENT_FRAMES, 8),
        seed=seed,
        hook=hook,
        keep_states=keep_states,
    )
