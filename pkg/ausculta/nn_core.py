"""
Model stack for contrastive pretraining: encoder f, affine projector g and the bilinear
similarity matrix W, plus Adam, ABCP checkpoints and a finite-difference gradient check.

Parameters live in a flat ordered dict of named numpy arrays (float32 by default).
`bind()` lifts them into float64 autograd leaves for one forward/backward pass.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol

import numpy as np

from ausculta.autograd import Tensor, conv2d, matmul, mean, relu, reshape, trace_relu_masks, transpose
from ausculta.config import ModelDims
from ausculta.errors import ConfigError, DimMismatch, MalformedContainer, NonFiniteActivation
from ausculta.featurize import LogMelSpectrogram
from ausculta.fileio import FORMAT_VERSION, atomic_write_bytes

logger = logging.getLogger(__name__)

Params = dict[str, np.ndarray]
ABCP_MAGIC = b"ABCP"
W_INIT_SCALE = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = np.sqrt(2.0)) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def bind(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {name: Tensor(value, requires_grad=requires_grad) for name, value in params.items()}


def _dense(p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return matmul(x, p[f"{prefix}.weight"]) + p[f"{prefix}.bias"]


class Encoder(Protocol):
    kind: str
    out_dim: int

    def init(self, rng: np.random.Generator, n_mels: int) -> Params: ...

    def forward(self, p: Mapping[str, Tensor], x: Tensor) -> Tensor: ...


class ConvEncoder:
    """
    Two 3x3 stride-2 conv + ReLU blocks over (time, mel), mean over time, then a dense
    layer over (channels x downsampled mel) to `out_dim`.
    """

    kind = "conv"

    def __init__(self, out_dim: int = 128, channels: tuple[int, int] = (8, 16)):
        self.out_dim = out_dim
        self.channels = tuple(channels)

    @staticmethod
    def pooled_bands(n_mels: int) -> int:
        for _ in range(2):
            n_mels = (n_mels - 1) // 2 + 1
        return n_mels

    def init(self, rng: np.random.Generator, n_mels: int) -> Params:
        c1, c2 = self.channels
        flat = c2 * self.pooled_bands(n_mels)
        return {
            "encoder.conv1.weight": kaiming_uniform(rng, (c1, 1, 3, 3), fan_in=9),
            "encoder.conv1.bias": np.zeros(c1),
            "encoder.conv2.weight": kaiming_uniform(rng, (c2, c1, 3, 3), fan_in=c1 * 9),
            "encoder.conv2.bias": np.zeros(c2),
            "encoder.dense.weight": kaiming_uniform(rng, (flat, self.out_dim), fan_in=flat, gain=1.0),
            "encoder.dense.bias": np.zeros(self.out_dim),
        }

    def forward(self, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
        batch, n_frames, n_mels = x.shape
        h = reshape(x, (batch, 1, n_frames, n_mels))
        h = relu(conv2d(h, p["encoder.conv1.weight"], p["encoder.conv1.bias"]))
        h = relu(conv2d(h, p["encoder.conv2.weight"], p["encoder.conv2.bias"]))
        h = mean(h, axis=2)  # (B, C2, mel')
        h = reshape(h, (batch, h.shape[1] * h.shape[2]))
        return _dense(p, "encoder.dense", h)


class MelPoolEncoder:
    """Mean over time of the spectrogram, then dense + ReLU."""

    kind = "melpool"

    def __init__(self, out_dim: int = 128, channels: tuple[int, int] = (8, 16)):
        self.out_dim = out_dim

    def init(self, rng: np.random.Generator, n_mels: int) -> Params:
        return {
            "encoder.dense.weight": kaiming_uniform(rng, (n_mels, self.out_dim), fan_in=n_mels),
            "encoder.dense.bias": np.zeros(self.out_dim),
        }

    def forward(self, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
        return relu(_dense(p, "encoder.dense", mean(x, axis=1)))


ENCODERS: dict[str, type] = {"conv": ConvEncoder, "melpool": MelPoolEncoder}


def build_encoder(params: Mapping[str, np.ndarray]) -> Encoder:
    """Encoder matching the `encoder.*` tensors present in `params`."""
    d_e = params["encoder.dense.weight"].shape[1]
    if "encoder.conv1.weight" in params:
        channels = (params["encoder.conv1.weight"].shape[0], params["encoder.conv2.weight"].shape[0])
        return ConvEncoder(d_e, channels)
    return MelPoolEncoder(d_e)


def check_feature_bands(params: Mapping[str, np.ndarray], n_mels: int) -> None:
    """Raise ConfigError if the encoder's dense layer was not sized for `n_mels` bands."""
    encoder = build_encoder(params)
    rows = params["encoder.dense.weight"].shape[0]
    if isinstance(encoder, ConvEncoder):
        expected = encoder.channels[1] * encoder.pooled_bands(n_mels)
    else:
        expected = n_mels
    if rows != expected:
        raise ConfigError(
            f"checkpoint encoder expects a different mel band count than the {n_mels} configured "
            f"(dense layer has {rows} inputs, {n_mels} bands give {expected}); "
            "pass the training config used for pretraining"
        )


class ContrastiveModel:
    """f (encoder) -> g (projector) -> s(u, v) = u^T W v."""

    def __init__(self, dims: ModelDims = ModelDims(), n_mels: int = 64):
        self.dims = dims
        self.n_mels = n_mels
        self.encoder: Encoder = ENCODERS[dims.encoder](dims.d_e, dims.channels)

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray]) -> "ContrastiveModel":
        """Rebuild dims from tensor shapes (checkpoints carry no separate metadata)."""
        encoder = build_encoder(params)
        d_p = params["projector.weight"].shape[1]
        channels = getattr(encoder, "channels", (8, 16))
        dims = ModelDims(encoder=encoder.kind, d_e=encoder.out_dim, d_p=d_p, channels=channels)
        return cls(dims)

    def init(self, seed: int, dtype=np.float32) -> Params:
        rng = np.random.default_rng(seed)
        params: Params = dict(self.encoder.init(rng, self.n_mels))
        d_e, d_p = self.dims.d_e, self.dims.d_p
        params["projector.weight"] = kaiming_uniform(rng, (d_e, d_p), fan_in=d_e, gain=1.0)
        params["projector.bias"] = np.zeros(d_p)
        params["bilinear.W"] = W_INIT_SCALE * np.eye(d_p)
        params = {k: v.astype(dtype) for k, v in params.items()}
        logger.info(
            "Initialised %s encoder (d_e=%d, d_p=%d): %d parameters",
            self.dims.encoder, d_e, d_p, count_parameters(params),
        )
        return params

    def encode(self, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
        return self.encoder.forward(p, x)

    def project(self, p: Mapping[str, Tensor], e: Tensor) -> Tensor:
        return _dense(p, "projector", e)

    def embed(self, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
        return self.project(p, self.encode(p, x))

    def similarity(self, p: Mapping[str, Tensor], anchors: Tensor, positives: Tensor) -> Tensor:
        """sims[i, j] = s(x_i, x_j+) for (N, T, F) anchor/positive stacks."""
        za = self.embed(p, anchors)
        zp = self.embed(p, positives)
        return matmul(matmul(za, p["bilinear.W"]), transpose(zp))


def count_parameters(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def encoder_params(params: Mapping[str, np.ndarray]) -> Params:
    return {k: v for k, v in params.items() if k.startswith("encoder.")}


def encode(params: Mapping[str, np.ndarray], spec: LogMelSpectrogram | np.ndarray) -> np.ndarray:
    """Embedding f(x) of one spectrogram (or a (B, T, F) stack) with no gradient tracking."""
    values = spec.values if isinstance(spec, LogMelSpectrogram) else np.asarray(spec)
    single = values.ndim == 2
    x = values[None] if single else values
    if x.shape[1] < 1:
        raise DimMismatch("encode needs at least one frame")
    encoder = build_encoder(params)
    out = encoder.forward(bind(encoder_params(params), requires_grad=False), Tensor(x)).data
    return out[0] if single else out


def project(params: Mapping[str, np.ndarray], emb: np.ndarray) -> np.ndarray:
    w, b = params["projector.weight"], params["projector.bias"]
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape[-1] != w.shape[0]:
        raise DimMismatch(f"embedding dim {emb.shape[-1]} != projector input {w.shape[0]}")
    out = emb @ w.astype(np.float64) + b.astype(np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteActivation("non-finite projector output")
    return out


def bilinear_similarity(u: np.ndarray, v: np.ndarray, W: np.ndarray) -> float:
    u, v, W = (np.asarray(a, dtype=np.float64) for a in (u, v, W))
    if W.ndim != 2 or W.shape[0] != W.shape[1] or u.shape != (W.shape[0],) or v.shape != (W.shape[1],):
        raise DimMismatch(f"bilinear dims u{u.shape} W{W.shape} v{v.shape}")
    return float(u @ W @ v)


# --- optimisation ---

@dataclass
class AdamState:
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: Mapping[str, np.ndarray], lr: float) -> Params:
    """One bias-corrected Adam update, in place; returns `params`."""
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimMismatch(f"gradient for {name}: {g.shape} vs parameter {p.shape}")
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
        params[name] = (p.astype(np.float64) - update).astype(p.dtype)
    return params


def lr_at_epoch(base_lr: float, decay: float, epoch: int) -> float:
    return base_lr * decay ** epoch


def collect_grads(bound: Mapping[str, Tensor]) -> Params:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in bound.items()}


# --- checkpoints ---

def encode_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<4sII", ABCP_MAGIC, FORMAT_VERSION, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path: Path | str, params: Mapping[str, np.ndarray]) -> Path:
    path = atomic_write_bytes(path, encode_checkpoint(params))
    logger.info("Checkpoint saved: %s (%d tensors)", path, len(params))
    return path


def load_checkpoint(path: Path | str) -> Params:
    path = Path(path)
    buf = path.read_bytes()
    try:
        magic, version, count = struct.unpack_from("<4sII", buf, 0)
        if magic != ABCP_MAGIC:
            raise MalformedContainer(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise MalformedContainer(f"{path}: unsupported version {version}")
        pos = 12
        params: Params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise MalformedContainer(f"{path}: truncated or corrupt checkpoint ({e})") from e
    if pos != len(buf):
        raise MalformedContainer(f"{path}: {len(buf) - pos} trailing bytes")
    return params


# --- gradient check ---

@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: dict[str, float]
    n_checked: int
    n_skipped_kinks: int


def gradient_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Params,
    h: float = 1e-3,
    max_per_tensor: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    atol: float = 1e-7,
) -> GradCheckResult:
    """
    Compare reverse-mode gradients with central differences. Coordinates whose
    +-h perturbation flips a ReLU mask are skipped (the loss is not differentiable
    across the kink). Relative error is |a - n| / max(|a|, |n|, atol).
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    bound = bind(params)
    with trace_relu_masks() as base_masks:
        loss = loss_fn(bound)
    loss.backward()
    analytic = collect_grads(bound)

    def evaluate() -> tuple[float, list[np.ndarray]]:
        with trace_relu_masks() as masks:
            value = loss_fn(bind(params, requires_grad=False)).item()
        return value, masks

    def same_masks(masks: list[np.ndarray]) -> bool:
        return len(masks) == len(base_masks) and all(np.array_equal(a, b) for a, b in zip(masks, base_masks))

    per_tensor: dict[str, float] = {}
    checked = skipped = 0
    for name, value in params.items():
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_per_tensor, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus, m_plus = evaluate()
            flat[i] = orig - h
            f_minus, m_minus = evaluate()
            flat[i] = orig
            if not (same_masks(m_plus) and same_masks(m_minus)):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), atol))
            checked += 1
        per_tensor[name] = worst
    return GradCheckResult(
        max_rel_error=max(per_tensor.values(), default=0.0),
        per_tensor=per_tensor,
        n_checked=checked,
        n_skipped_kinks=skipped,
    )
