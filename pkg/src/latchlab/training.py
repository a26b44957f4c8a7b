"""Training loops for the codec, denoiser, and control heads.

Every loop is a plain Adam descent driven by one seeded generator, so a
fixed seed reproduces checkpoints byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tl
from .diffusion import NoiseSchedule, sample
from .models import (
    VAE,
    CfgDenoiser,
    Denoiser,
    LatchHead,
    N_CLASSES,
    NULL_CLASS,
    ReadoutHead,
)
from .tensor import Tensor
from .world import (
    CONTROL_KINDS,
    EXTRACTORS,
    LATENT_FRAMES,
    N_SAMPLES,
    Waveform,
    random_spec,
    synth,
)

__all__ = [
    "TrainConfig",
    "WorldData",
    "TrainingDiverged",
    "make_dataset",
    "encode_dataset",
    "Adam",
    "train_vae",
    "train_denoiser",
    "train_latch",
    "train_readout",
    "sparse_bce",
    "bce_with_logits",
    "TrajectoryDataset",
    "build_trajectory_dataset",
    "save_trajectories",
    "load_trajectories",
]


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the step and last loss for diagnostics."""

    def __init__(self, phase: str, step: int, loss: float):
        super().__init__(f"{phase} training diverged at step {step} (loss={loss})")
        self.phase, self.step, self.loss = phase, step, loss


@dataclass
class TrainConfig:
    dataset_size: int = 4096
    batch_size: int = 16
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    vae_steps: int = 5000
    denoiser_steps: int = 20000
    head_steps: int = 3000
    seed: int = 0
    latent_reg: float = 0.1  # pulls encoder outputs toward zero mean / unit var
    class_dropout: float = 0.1

    def __post_init__(self):
        for name in ("dataset_size", "batch_size", "vae_steps", "denoiser_steps", "head_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class WorldData:
    waves: np.ndarray  # (n, N_SAMPLES) float32
    class_ids: np.ndarray  # (n,) int64
    tracks: dict[str, np.ndarray]  # kind -> (n, frames, dims)
    specs: list = field(default_factory=list)

    def __len__(self):
        return len(self.waves)


def make_dataset(n: int, seed: int) -> WorldData:
    """n synthetic clips with extractor tracks (the heads' training targets)."""
    rng = np.random.default_rng(seed)
    waves = np.zeros((n, N_SAMPLES), dtype=np.float32)
    ids = np.zeros(n, dtype=np.int64)
    tracks = {k: [] for k in CONTROL_KINDS}
    specs = []
    for i in range(n):
        spec = random_spec(rng)
        w, _ = synth(spec)
        waves[i] = w.samples
        ids[i] = spec.class_label
        specs.append(spec)
        for kind in CONTROL_KINDS:
            tracks[kind].append(EXTRACTORS[kind](Tensor(w.samples)).numpy())
    return WorldData(
        waves=waves,
        class_ids=ids,
        tracks={k: np.stack(v) for k, v in tracks.items()},
        specs=specs,
    )


def encode_dataset(vae: VAE, waves: np.ndarray, batch: int = 32) -> np.ndarray:
    """Latent bank (n, 256, 8) for a trained codec (no gradients)."""
    out = np.zeros((len(waves), LATENT_FRAMES, 8), dtype=np.float32)
    for lo in range(0, len(waves), batch):
        chunk = waves[lo : lo + batch]
        z = vae.encode(Tensor(chunk[:, None, :]))
        out[lo : lo + len(chunk)] = z.numpy()
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data[...] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None


def _check_finite(phase: str, step: int, loss: float):
    if not np.isfinite(loss):
        raise TrainingDiverged(phase, step, loss)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross entropy from logits (stable softplus form)."""
    t = Tensor(targets) if not isinstance(targets, Tensor) else targets
    softplus = tl.clamp(logits, lo=0.0) + tl.tlog(tl.texp(-tl.tabs(logits)) + 1.0)
    return softplus - logits * t


def sparse_bce(pred_logits: Tensor, targets: np.ndarray, threshold: float = 0.2) -> Tensor:
    """Average the below- and above-threshold BCE means (sparse features).

    Empty partitions fall back to the mean over the other side.
    """
    targets = np.asarray(targets, dtype=np.float32)
    bce = bce_with_logits(pred_logits, targets)
    below = (targets < threshold).astype(np.float32)
    n_below = float(below.sum())
    n_above = float(below.size - n_below)
    if n_below == 0.0:
        return bce.mean()
    if n_above == 0.0:
        return bce.mean()
    mask = Tensor(below)
    mean_below = (bce * mask).sum() * (1.0 / n_below)
    mean_above = (bce * (1.0 - mask)).sum() * (1.0 / n_above)
    return (mean_below + mean_above) * 0.5


def head_loss(kind: str, pred: Tensor, targets: np.ndarray) -> Tensor:
    """Per-control training loss: MSE on dB, sparse BCE on pitch, BCE on beats."""
    if kind == "intensity":
        diff = pred - Tensor(targets)
        return (diff * diff).mean()
    if kind == "pitch":
        return sparse_bce(pred, targets, threshold=0.2)
    return bce_with_logits(pred, targets).mean()


# ---------------------------------------------------------------------------
# VAE
# ---------------------------------------------------------------------------

_SPEC_SIZES = (256, 512, 1024)


def _stft_kernel(n_fft: int) -> np.ndarray:
    """Conv kernels computing windowed DFT re/im parts: (2*(n/2+1), 1, n)."""
    bins = n_fft // 2 + 1
    t = np.arange(n_fft)
    ang = 2 * np.pi * np.outer(np.arange(bins), t) / n_fft
    window = np.hanning(n_fft)
    re = np.cos(ang) * window
    im = -np.sin(ang) * window
    return np.concatenate([re, im], axis=0)[:, None, :].astype(np.float32)


_STFT_KERNELS = {n: _stft_kernel(n) for n in _SPEC_SIZES}


def _spectral_mags(x: Tensor, n_fft: int) -> Tensor:
    w = Tensor(_STFT_KERNELS[n_fft])
    resp = tl.conv1d(x, w, None, stride=n_fft // 2, pad=0)
    bins = n_fft // 2 + 1
    re = resp[:, :bins, :]
    im = resp[:, bins:, :]
    return tl.tsqrt(re * re + im * im + 1e-10)


def multires_spectral_mse(pred: Tensor, target: Tensor) -> Tensor:
    """Magnitude MSE at FFT sizes 256/512/1024 (hop = size/2)."""
    total = None
    for n_fft in _SPEC_SIZES:
        pm = _spectral_mags(pred, n_fft)
        tm = _spectral_mags(target.detach(), n_fft)
        term = ((pm - tm) * (pm - tm)).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(_SPEC_SIZES))


def vae_loss(vae: VAE, batch: np.ndarray, latent_reg: float) -> Tensor:
    x = Tensor(batch[:, None, :])
    z = vae.encode(x)
    recon = vae.decode(z)
    diff = recon - x
    loss = (diff * diff).mean() + multires_spectral_mse(recon, x)
    if latent_reg > 0:
        mu = z.mean(axis=(0, 1))
        zc = z - mu
        var = (zc * zc).mean(axis=(0, 1))
        reg = (mu * mu).mean() + ((var - 1.0) * (var - 1.0)).mean()
        loss = loss + reg * latent_reg
    return loss


def train_vae(data: WorldData, cfg: TrainConfig) -> tuple[VAE, list]:
    rng = np.random.default_rng(cfg.seed)
    vae = VAE(rng)
    opt = Adam(vae.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    curve = []
    for step in range(cfg.vae_steps):
        idx = rng.integers(0, len(data), cfg.batch_size)
        loss = vae_loss(vae, data.waves[idx], cfg.latent_reg)
        value = loss.item()
        _check_finite("vae", step, value)
        loss.backward()
        opt.step()
        curve.append((step, value))
    return vae, curve


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


def v_target(z0: np.ndarray, eps: np.ndarray, t: np.ndarray) -> np.ndarray:
    """v = alpha_t * eps - sigma_t * z0 (alpha = sqrt(1-t), sigma = sqrt(t))."""
    a = np.sqrt(1.0 - t)[:, None, None].astype(np.float32)
    s = np.sqrt(t)[:, None, None].astype(np.float32)
    return a * eps - s * z0


def train_denoiser(
    latents: np.ndarray, class_ids: np.ndarray, cfg: TrainConfig
) -> tuple[Denoiser, list]:
    rng = np.random.default_rng(cfg.seed + 1)
    model = Denoiser(rng)
    opt = Adam(model.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    curve = []
    for step in range(cfg.denoiser_steps):
        idx = rng.integers(0, len(latents), cfg.batch_size)
        z0 = latents[idx]
        t = rng.uniform(0.0, 1.0, cfg.batch_size)
        eps = rng.standard_normal(z0.shape).astype(np.float32)
        a = np.sqrt(1.0 - t)[:, None, None].astype(np.float32)
        s = np.sqrt(t)[:, None, None].astype(np.float32)
        z_t = a * z0 + s * eps
        target = a * eps - s * z0
        ids = class_ids[idx].copy()
        drop = rng.uniform(size=cfg.batch_size) < cfg.class_dropout
        ids[drop] = NULL_CLASS
        v, _ = model(Tensor(z_t), t, ids)
        diff = v - Tensor(target)
        loss = (diff * diff).mean()
        value = loss.item()
        _check_finite("denoiser", step, value)
        loss.backward()
        opt.step()
        curve.append((step, value))
    return model, curve


def denoiser_heldout_vloss(
    model: Denoiser, latents: np.ndarray, class_ids: np.ndarray, seed: int = 999
) -> tuple[float, float]:
    """(held-out v MSE, variance of the v targets) over one fixed pass."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, 1.0, len(latents))
    eps = rng.standard_normal(latents.shape).astype(np.float32)
    a = np.sqrt(1.0 - t)[:, None, None].astype(np.float32)
    s = np.sqrt(t)[:, None, None].astype(np.float32)
    z_t = a * latents + s * eps
    target = a * eps - s * latents
    losses = []
    for lo in range(0, len(latents), 16):
        sl = slice(lo, min(lo + 16, len(latents)))
        v, _ = model(Tensor(z_t[sl]), t[sl], class_ids[sl])
        losses.append(np.mean((v.numpy() - target[sl]) ** 2))
    return float(np.mean(losses)), float(np.var(target))


# ---------------------------------------------------------------------------
# latch + readout heads
# ---------------------------------------------------------------------------


def train_latch(
    kind: str,
    noise_mode: str,
    cfg: TrainConfig,
    *,
    latents: np.ndarray | None = None,
    targets: np.ndarray | None = None,
    trajectories: "TrajectoryDataset | None" = None,
) -> tuple[LatchHead, list]:
    """Train one control head.

    clean/forward modes need (latents, targets) from real clips; backward
    mode needs a TrajectoryDataset harvested from the sampler.
    """
    rng = np.random.default_rng(cfg.seed + 2)
    head = LatchHead(kind, noise_mode, rng)
    opt = Adam(head.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    if noise_mode == "backward":
        if trajectories is None:
            raise ValueError(
                "backward-mode training needs a trajectory dataset; "
                "run the `trajectories` command first"
            )
        bank_z = trajectories.z
        bank_t = trajectories.t
        bank_y = trajectories.targets[kind]
    else:
        if latents is None or targets is None:
            raise ValueError(f"{noise_mode}-mode training needs latents and targets")
        bank_z, bank_y = latents, targets
        bank_t = None

    curve = []
    for step in range(cfg.head_steps):
        idx = rng.integers(0, len(bank_z), cfg.batch_size)
        y = bank_y[idx]
        if noise_mode == "clean":
            pred = head(Tensor(bank_z[idx]))
        elif noise_mode == "forward":
            t = rng.uniform(0.0, 1.0, cfg.batch_size)
            eps = rng.standard_normal(bank_z[idx].shape).astype(np.float32)
            a = np.sqrt(1.0 - t)[:, None, None].astype(np.float32)
            s = np.sqrt(t)[:, None, None].astype(np.float32)
            pred = head(Tensor(a * bank_z[idx] + s * eps), t)
        else:
            pred = head(Tensor(bank_z[idx]), bank_t[idx])
        loss = head_loss(kind, pred, y)
        value = loss.item()
        _check_finite(f"latch-{kind}-{noise_mode}", step, value)
        loss.backward()
        opt.step()
        curve.append((step, value))
    return head, curve


def train_readout(
    kind: str,
    denoiser: Denoiser,
    latents: np.ndarray,
    class_ids: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
) -> tuple[ReadoutHead, list]:
    """Train a readout on tapped denoiser activations of forward-diffused latents."""
    rng = np.random.default_rng(cfg.seed + 3)
    head = ReadoutHead(kind, rng)
    opt = Adam(head.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    curve = []
    for step in range(cfg.head_steps):
        idx = rng.integers(0, len(latents), cfg.batch_size)
        t = rng.uniform(0.0, 1.0, cfg.batch_size)
        eps = rng.standard_normal(latents[idx].shape).astype(np.float32)
        a = np.sqrt(1.0 - t)[:, None, None].astype(np.float32)
        s = np.sqrt(t)[:, None, None].astype(np.float32)
        z_t = a * latents[idx] + s * eps
        _, tap = denoiser(Tensor(z_t), t, class_ids[idx])
        pred = head(tap.detach(), t)
        loss = head_loss(kind, pred, targets[idx])
        value = loss.item()
        _check_finite(f"readout-{kind}", step, value)
        loss.backward()
        opt.step()
        curve.append((step, value))
    return head, curve


# ---------------------------------------------------------------------------
# trajectory dataset (backward-simulated noise conditioning)
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryDataset:
    z: np.ndarray  # (n_records, frames, channels)
    t: np.ndarray  # (n_records,)
    traj_id: np.ndarray  # (n_records,)
    targets: dict[str, np.ndarray]  # kind -> (n_records, frames, dims)
    T: int = 100
    stride: int = 5


def build_trajectory_dataset(
    denoiser: Denoiser,
    vae: VAE,
    sched: NoiseSchedule,
    n_trajectories: int,
    stride: int,
    seed: int,
    cfg_scale: float = 7.0,
) -> TrajectoryDataset:
    """Unguided sampling runs; every stride-th state is paired with the
    features extracted from that run's own decoded output."""
    rng = np.random.default_rng(seed)
    denoise = CfgDenoiser(denoiser)
    zs, ts, ids = [], [], []
    per_kind = {k: [] for k in CONTROL_KINDS}
    for j in range(n_trajectories):
        cond = int(rng.integers(0, N_CLASSES))
        run_seed = int(rng.integers(0, 2**31 - 1))
        res = sample(
            denoise, sched, cond, cfg_scale, shape=(LATENT_FRAMES, 8), seed=run_seed
        )
        wave = vae.decode(Tensor(res.z_0[None])).numpy()[0, 0]
        tracks = {k: EXTRACTORS[k](Tensor(wave)).numpy() for k in CONTROL_KINDS}
        steps = range(0, sched.T, stride)
        for i in steps:
            zs.append(res.states[i])
            ts.append(float(res.times[i]))
            ids.append(j)
            for k in CONTROL_KINDS:
                per_kind[k].append(tracks[k])
    return TrajectoryDataset(
        z=np.stack(zs).astype(np.float32),
        t=np.asarray(ts, dtype=np.float32),
        traj_id=np.asarray(ids, dtype=np.int64),
        targets={k: np.stack(v).astype(np.float32) for k, v in per_kind.items()},
        T=sched.T,
        stride=stride,
    )


_TRAJ_MAGIC = b"LTRJ"


def save_trajectories(path, ds: TrajectoryDataset):
    n, frames, channels = ds.z.shape
    with open(path, "wb") as f:
        f.write(_TRAJ_MAGIC)
        f.write(struct.pack("<5I", n, frames, channels, ds.T, ds.stride))
        f.write(ds.t.astype("<f4").tobytes())
        f.write(ds.traj_id.astype("<i8").tobytes())
        f.write(ds.z.astype("<f4").tobytes())
        for kind in CONTROL_KINDS:
            arr = ds.targets[kind].astype("<f4")
            f.write(struct.pack("<I", arr.shape[2]))
            f.write(arr.tobytes())


def load_trajectories(path) -> TrajectoryDataset:
    with open(path, "rb") as f:
        if f.read(4) != _TRAJ_MAGIC:
            raise ValueError(f"{path}: not a trajectory dataset")
        n, frames, channels, T, stride = struct.unpack("<5I", f.read(20))
        t = np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float32)
        traj_id = np.frombuffer(f.read(8 * n), dtype="<i8").astype(np.int64)
        z = np.frombuffer(f.read(4 * n * frames * channels), dtype="<f4")
        z = z.reshape(n, frames, channels).astype(np.float32)
        targets = {}
        for kind in CONTROL_KINDS:
            (dims,) = struct.unpack("<I", f.read(4))
            arr = np.frombuffer(f.read(4 * n * frames * dims), dtype="<f4")
            targets[kind] = arr.reshape(n, frames, dims).astype(np.float32)
    return TrajectoryDataset(z=z, t=t, traj_id=traj_id, targets=targets, T=T, stride=stride)
