"""The learnable stack: waveform autoencoder, conditional v-prediction
denoiser with an activation tap, latent control heads, and readout heads.

All models run batch-first: waveforms (B, 1, 16384), latents (B, 256, 8).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tl
from .tensor import Tensor
from .world import CONTROL_DIMS, LATENT_FRAMES, N_SAMPLES

LATENT_CHANNELS = 8
DENOISER_DIM = 128
DENOISER_LAYERS = 4
DENOISER_HEADS = 4
DENOISER_TAP_LAYER = 2  # readouts consume the output of this block (1-based)
HEAD_DIM = 64
HEAD_LAYERS = 2
HEAD_HEADS = 4
N_CLASSES = 3
NULL_CLASS = 3  # CFG dropout target; table holds N_CLASSES + 1 rows
N_TIME_FREQS = 16
MLP_RATIO = 4

CHECKPOINT_MAGIC = b"LCH1"


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear:
    def __init__(self, rng, n_in: int, n_out: int):
        self.w = Tensor(_uniform(rng, (n_in, n_out), n_in), requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return tl.matmul(x, self.w) + self.b

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Conv1d:
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int, pad: int):
        self.stride, self.pad = stride, pad
        self.w = Tensor(_uniform(rng, (c_out, c_in, k), c_in * k), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return tl.conv1d(x, self.w, self.b, self.stride, self.pad)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class ConvT1d:
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int, pad: int):
        self.stride, self.pad = stride, pad
        self.w = Tensor(_uniform(rng, (c_in, c_out, k), c_in * k), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return tl.conv_transpose1d(x, self.w, self.b, self.stride, self.pad)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, dim: int):
        self.g = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return tl.layer_norm(x, self.g, self.b)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.g": self.g, f"{prefix}.b": self.b}


@lru_cache(maxsize=16)
def _rope_tables(seq_len: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    freqs = 10000.0 ** (-np.arange(half) * 2.0 / head_dim)
    ang = np.outer(np.arange(seq_len), freqs)
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def _rope(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotate (even, odd) channel pairs by position: x is (B, H, T, dh)."""
    xe = x[:, :, :, 0::2]
    xo = x[:, :, :, 1::2]
    re = xe * cos - xo * sin
    ro = xe * sin + xo * cos
    stacked = tl.concatenate(
        [re.reshape(*re.shape, 1), ro.reshape(*ro.shape, 1)], axis=-1
    )
    return stacked.reshape(x.shape)


class Attention:
    """Bidirectional multi-head self-attention with rotary positions."""

    def __init__(self, rng, dim: int, heads: int):
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        H, dh = self.heads, self.head_dim

        def split(t):
            return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        cos_np, sin_np = _rope_tables(T, dh)
        cos, sin = Tensor(cos_np), Tensor(sin_np)
        q = _rope(q, cos, sin)
        k = _rope(k, cos, sin)
        logits = tl.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        attn = tl.softmax(logits, axis=-1)
        out = tl.matmul(attn, v)
        out = out.transpose(0, 2, 1, 3).reshape(B, T, D)
        return self.proj(out)

    def params(self, prefix: str) -> dict:
        out = {}
        for name, layer in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("proj", self.proj)):
            out.update(layer.params(f"{prefix}.{name}"))
        return out


class Block:
    """Pre-LN transformer block."""

    def __init__(self, rng, dim: int, heads: int):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, MLP_RATIO * dim)
        self.fc2 = Linear(rng, MLP_RATIO * dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(tl.gelu(self.fc1(self.ln2(x))))

    def params(self, prefix: str) -> dict:
        out = {}
        out.update(self.ln1.params(f"{prefix}.ln1"))
        out.update(self.attn.params(f"{prefix}.attn"))
        out.update(self.ln2.params(f"{prefix}.ln2"))
        out.update(self.fc1.params(f"{prefix}.fc1"))
        out.update(self.fc2.params(f"{prefix}.fc2"))
        return out


def time_features(t) -> np.ndarray:
    """Fourier features of diffusion time: 16 geometric frequencies, sin+cos.

    Scalar t -> (32,), array (B,) -> (B, 32).
    """
    freqs = 1000.0 ** (np.arange(N_TIME_FREQS) / (N_TIME_FREQS - 1))
    t = np.asarray(t, dtype=np.float64)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(np.float32)


# ---------------------------------------------------------------------------
# autoencoder ("VAE" — deterministic by design)
# ---------------------------------------------------------------------------


class VAE:
    """Strided conv codec: 16384 samples <-> 256x8 latents (stride 64)."""

    kind = "vae"

    def __init__(self, rng: np.random.Generator):
        self.enc = [
            Conv1d(rng, 1, 16, 9, 1, 4),
            Conv1d(rng, 16, 32, 16, 4, 6),
            Conv1d(rng, 32, 64, 16, 4, 6),
            Conv1d(rng, 64, LATENT_CHANNELS, 16, 4, 6),
        ]
        self.dec = [
            ConvT1d(rng, LATENT_CHANNELS, 64, 16, 4, 6),
            ConvT1d(rng, 64, 32, 16, 4, 6),
            ConvT1d(rng, 32, 16, 16, 4, 6),
            Conv1d(rng, 16, 1, 9, 1, 4),
        ]

    def encode(self, wave: Tensor) -> Tensor:
        """(B, 1, 16384) -> (B, 256, 8)."""
        if wave.shape[-1] != N_SAMPLES:
            raise tl.ShapeError(f"expected {N_SAMPLES} samples, got {wave.shape}")
        h = wave
        for i, layer in enumerate(self.enc):
            h = layer(h)
            if i < len(self.enc) - 1:
                h = tl.gelu(h)
        return h.transpose(0, 2, 1)

    def decode(self, z: Tensor) -> Tensor:
        """(B, 256, 8) -> (B, 1, 16384)."""
        if z.shape[-2:] != (LATENT_FRAMES, LATENT_CHANNELS):
            raise tl.ShapeError(
                f"expected (*, {LATENT_FRAMES}, {LATENT_CHANNELS}) latents, got {z.shape}"
            )
        h = z.transpose(0, 2, 1)
        for i, layer in enumerate(self.dec):
            h = layer(h)
            if i < len(self.dec) - 1:
                h = tl.gelu(h)
        return tl.tanh(h)

    def params(self) -> dict:
        out = {}
        for i, layer in enumerate(self.enc):
            out.update(layer.params(f"enc{i}"))
        for i, layer in enumerate(self.dec):
            out.update(layer.params(f"dec{i}"))
        return out


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


class Denoiser:
    """v-prediction transformer over latent frames with class + time tokens."""

    kind = "denoiser"

    def __init__(self, rng: np.random.Generator):
        self.proj_in = Linear(rng, LATENT_CHANNELS, DENOISER_DIM)
        self.class_table = Tensor(
            (rng.standard_normal((N_CLASSES + 1, DENOISER_DIM)) * 0.02).astype(np.float32),
            requires_grad=True,
        )
        self.time_proj = Linear(rng, 2 * N_TIME_FREQS, DENOISER_DIM)
        self.blocks = [Block(rng, DENOISER_DIM, DENOISER_HEADS) for _ in range(DENOISER_LAYERS)]
        self.ln_out = LayerNorm(DENOISER_DIM)
        self.proj_out = Linear(rng, DENOISER_DIM, LATENT_CHANNELS)

    def __call__(self, z_t: Tensor, t, class_ids) -> tuple[Tensor, Tensor]:
        """(B, 256, 8), time(s), int class ids -> (v (B, 256, 8), tap (B, 258, D)).

        `t` may be a scalar (shared) or one time per batch row; class id 3 is
        the learned null class for CFG.
        """
        B = z_t.shape[0]
        ids = np.broadcast_to(np.asarray(class_ids, dtype=np.int64), (B,))
        if ids.min() < 0 or ids.max() > NULL_CLASS:
            raise ValueError(f"class ids must be in [0, {NULL_CLASS}], got {ids}")
        feats = time_features(np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)))
        cls_tok = tl.gather_rows(self.class_table, ids).reshape(B, 1, DENOISER_DIM)
        time_tok = self.time_proj(Tensor(feats)).reshape(B, 1, DENOISER_DIM)
        x = self.proj_in(z_t)
        h = tl.concatenate([cls_tok, time_tok, x], axis=1)
        tap = None
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i + 1 == DENOISER_TAP_LAYER:
                tap = h
        v = self.proj_out(self.ln_out(h))[:, 2:, :]
        return v, tap

    def params(self) -> dict:
        out = {"class_table": self.class_table}
        out.update(self.proj_in.params("proj_in"))
        out.update(self.time_proj.params("time_proj"))
        for i, b in enumerate(self.blocks):
            out.update(b.params(f"block{i}"))
        out.update(self.ln_out.params("ln_out"))
        out.update(self.proj_out.params("proj_out"))
        return out


class CfgDenoiser:
    """Sampling adapter: one batched call for the conditional and null branches."""

    def __init__(self, denoiser: Denoiser):
        self.denoiser = denoiser

    def __call__(self, z_t: Tensor, t: float, cond, cfg_scale: float):
        """(256, 8) latents -> (v (256, 8), tap (2, 258, D)); grads flow to z_t."""
        z = z_t.reshape(1, *z_t.shape)
        if cond is None or cfg_scale == 1.0:
            ids = NULL_CLASS if cond is None else int(cond)
            v, tap = self.denoiser(z, t, ids)
            return v.reshape(z_t.shape), tap
        both = tl.concatenate([z, z], axis=0)
        v, tap = self.denoiser(both, t, np.array([int(cond), NULL_CLASS]))
        from .diffusion import cfg_combine

        v = cfg_combine(v[0:1], v[1:2], cfg_scale)
        return v.reshape(z_t.shape), tap


# ---------------------------------------------------------------------------
# control heads
# ---------------------------------------------------------------------------


class LatchHead:
    """Latent -> control predictor (transformer over latent frames).

    noise_mode: "clean" (no time input), "forward", or "backward". The two
    noise-conditioned modes prepend a time token that is stripped before
    the output projection.
    """

    kind = "latch"

    def __init__(self, control: str, noise_mode: str, rng: np.random.Generator):
        if control not in CONTROL_DIMS:
            raise ValueError(f"unknown control {control!r}")
        if noise_mode not in ("clean", "forward", "backward"):
            raise ValueError(f"unknown noise_mode {noise_mode!r}")
        self.control = control
        self.noise_mode = noise_mode
        self.proj_in = Linear(rng, LATENT_CHANNELS, HEAD_DIM)
        self.time_proj = Linear(rng, 2 * N_TIME_FREQS, HEAD_DIM)
        self.blocks = [Block(rng, HEAD_DIM, HEAD_HEADS) for _ in range(HEAD_LAYERS)]
        self.ln_out = LayerNorm(HEAD_DIM)
        self.proj_out = Linear(rng, HEAD_DIM, CONTROL_DIMS[control])

    def __call__(self, z: Tensor, t=None) -> Tensor:
        """(B, 256, 8) -> (B, 256, dims): dB for intensity, logits otherwise."""
        B = z.shape[0]
        h = self.proj_in(z)
        conditioned = self.noise_mode != "clean"
        if conditioned:
            if t is None:
                raise ValueError(
                    f"noise-conditioned head ({self.noise_mode}) needs the diffusion time"
                )
            feats = time_features(np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)))
            tok = self.time_proj(Tensor(feats)).reshape(B, 1, HEAD_DIM)
            h = tl.concatenate([tok, h], axis=1)
        for block in self.blocks:
            h = block(h)
        h = self.ln_out(h)
        if conditioned:
            h = h[:, 1:, :]
        return self.proj_out(h)

    def params(self) -> dict:
        out = {}
        out.update(self.proj_in.params("proj_in"))
        out.update(self.time_proj.params("time_proj"))
        for i, b in enumerate(self.blocks):
            out.update(b.params(f"block{i}"))
        out.update(self.ln_out.params("ln_out"))
        out.update(self.proj_out.params("proj_out"))
        return out


class ReadoutHead:
    """Denoiser-activation -> control predictor (per-frame MLP).

    Consumes the tapped layer activations h_t(z_t) (never a clean-latent
    estimate) plus time features appended to each frame vector.
    """

    kind = "readout"

    def __init__(self, control: str, rng: np.random.Generator):
        if control not in CONTROL_DIMS:
            raise ValueError(f"unknown control {control!r}")
        self.control = control
        self.proj_in = Linear(rng, DENOISER_DIM + 2 * N_TIME_FREQS, DENOISER_DIM)
        self.fc = Linear(rng, DENOISER_DIM, DENOISER_DIM)
        self.proj_out = Linear(rng, DENOISER_DIM, CONTROL_DIMS[control])

    def __call__(self, tap: Tensor, t) -> Tensor:
        """(B, 258, D) tap -> (B, 256, dims)."""
        B, T, D = tap.shape
        h = tap[:, T - LATENT_FRAMES :, :]  # drop the class/time token positions
        feats = time_features(np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)))
        ft = tl.expand(
            Tensor(feats).reshape(B, 1, 2 * N_TIME_FREQS), (B, LATENT_FRAMES, 2 * N_TIME_FREQS)
        )
        h = tl.concatenate([h, ft], axis=2)
        h = tl.gelu(self.proj_in(h))
        h = tl.gelu(self.fc(h))
        return self.proj_out(h)

    def params(self) -> dict:
        out = {}
        out.update(self.proj_in.params("proj_in"))
        out.update(self.fc.params("fc"))
        out.update(self.proj_out.params("proj_out"))
        return out


def param_count(model) -> int:
    return sum(int(p.size) for p in model.params().values())


# ---------------------------------------------------------------------------
# checkpoints: magic LCH1, length-prefixed header, little-endian f32 payload
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, meta: dict | None = None):
    meta = dict(meta or {})
    meta["kind"] = model.kind
    if isinstance(model, LatchHead):
        meta.setdefault("control", model.control)
        meta.setdefault("noise_mode", model.noise_mode)
    if isinstance(model, ReadoutHead):
        meta.setdefault("control", model.control)
    params = model.params()

    header = bytearray()
    header += struct.pack("<I", len(meta))
    for key in sorted(meta):
        kb, vb = key.encode(), str(meta[key]).encode()
        header += struct.pack("<H", len(kb)) + kb
        header += struct.pack("<H", len(vb)) + vb
    header += struct.pack("<I", len(params))
    offset = 0
    payload = bytearray()
    for name, p in params.items():
        nb = name.encode()
        arr = p.data.astype("<f4")
        header += struct.pack("<H", len(nb)) + nb
        header += struct.pack("<B", arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", offset)
        payload += arr.tobytes()
        offset += arr.nbytes
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(bytes(header))
        f.write(bytes(payload))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Returns (meta, {name: array})."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = f.read(hlen)
        payload = f.read()

    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, header, pos)
        pos += size
        return vals

    def take_str():
        (n,) = take("<H")
        nonlocal pos
        s = header[pos : pos + n].decode()
        pos += n
        return s

    meta = {}
    (n_meta,) = take("<I")
    for _ in range(n_meta):
        key = take_str()
        meta[key] = take_str()
    (n_params,) = take("<I")
    params = {}
    for _ in range(n_params):
        name = take_str()
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        (offset,) = take("<Q")
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        params[name] = arr.reshape(shape).astype(np.float32)
    return meta, params


def _load_into(model, arrays: dict):
    params = model.params()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {missing}, extra {extra}")
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise ValueError(
                f"shape mismatch for {name}: model {p.shape} vs file {arrays[name].shape}"
            )
        p.data[...] = arrays[name]
    return model


def load_checkpoint(path):
    """Rebuild the model named in the checkpoint's architecture header."""
    meta, arrays = read_checkpoint(path)
    rng = np.random.default_rng(0)  # values are overwritten immediately
    kind = meta["kind"]
    if kind == "vae":
        model = VAE(rng)
    elif kind == "denoiser":
        model = Denoiser(rng)
    elif kind == "latch":
        model = LatchHead(meta["control"], meta["noise_mode"], rng)
    elif kind == "readout":
        model = ReadoutHead(meta["control"], rng)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return _load_into(model, arrays), meta
