"""Small convolutional classifier with explicit backward passes.

Activations are kept channels-last (``N, H, W, C``) so each convolution is an
im2col matrix product. The network is a stack of padded, strided 3x3 conv +
ReLU stages, global average pooling, a linear class head and an optional
L2-normalised embedding head.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"WSIRCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkConfig:
    input_size: int = 128
    stages: list[tuple[int, int, int]] = field(
        default_factory=lambda: [(16, 3, 2), (32, 3, 2), (64, 3, 2), (64, 3, 2)]
    )
    num_classes: int = 3
    embed_dim: int = 64  # 0 disables the embedding head
    in_channels: int = 3
    input_shift: float = 0.5  # subtracted inside the network from [0, 1] inputs
    dtype: str = "float32"

    def __post_init__(self):
        self.stages = [tuple(int(v) for v in s) for s in self.stages]
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @property
    def feature_size(self) -> int:
        size = self.input_size
        for _, k, s in self.stages:
            size = (size + 2 * (k // 2) - k) // s + 1
        return size


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. softmax outputs back to the logits."""
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    pad = k // 2
    n, h, w, c = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((n, ho, wo, k * k * c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            idx = (i * k + j) * c
            cols[..., idx:idx + c] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    return cols, ho, wo


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int, stride: int) -> np.ndarray:
    pad = k // 2
    n, h, w, c = x_shape
    _, ho, wo, _ = dcols.shape
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            idx = (i * k + j) * c
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += dcols[..., idx:idx + c]
    return dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp


@dataclass
class ForwardPass:
    logits: np.ndarray
    probs: np.ndarray
    embedding: np.ndarray | None
    features: np.ndarray  # last conv stage, N x H' x W' x C
    cache: dict | None = None

    @property
    def feature_maps(self) -> np.ndarray:
        """Last-stage activations as ``N x C x H' x W'``."""
        return self.features.transpose(0, 3, 1, 2)


class Network:
    def __init__(self, config: NetworkConfig, params: dict[str, np.ndarray], debug: bool = False):
        self.config = config
        self.params = params
        self.debug = debug

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    @classmethod
    def init(cls, config: NetworkConfig, seed: int = 0, debug: bool = False) -> Network:
        return cls(config, init_params(config, seed), debug)

    def param_names(self) -> list[str]:
        return list(self.params)

    def forward(self, x: np.ndarray, keep_cache: bool = True) -> ForwardPass:
        """Run a batch of ``N x H x W x 3`` inputs scaled to [0, 1]."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.input_size, cfg.input_size, cfg.in_channels):
            raise ValueError(
                f"expected batch of shape (N, {cfg.input_size}, {cfg.input_size}, {cfg.in_channels}), got {x.shape}"
            )
        a = np.ascontiguousarray(x, dtype=self.dtype)
        if cfg.input_shift:
            a = a - self.dtype.type(cfg.input_shift)
        stage_cache = []
        for i, (ch, k, s) in enumerate(cfg.stages):
            w = self.params[f"conv{i}.w"]
            cols, ho, wo = _im2col(a, k, s)
            z = cols.reshape(-1, cols.shape[-1]) @ w.reshape(-1, ch)
            z += self.params[f"conv{i}.b"]
            z = z.reshape(a.shape[0], ho, wo, ch)
            out = np.maximum(z, 0)
            stage_cache.append((a.shape, cols, z > 0))
            a = out
        feats = a
        pooled = feats.mean(axis=(1, 2))
        logits = pooled @ self.params["cls.w"] + self.params["cls.b"]
        probs = softmax(logits)
        emb = emb_raw = emb_norm = None
        if cfg.embed_dim:
            emb_raw = pooled @ self.params["emb.w"] + self.params["emb.b"]
            emb_norm = np.sqrt((emb_raw ** 2).sum(axis=1, keepdims=True))
            emb = emb_raw / np.maximum(emb_norm, np.finfo(self.dtype).tiny)
        if self.debug:
            for name, arr in (("logits", logits), ("embedding", emb)):
                if arr is not None and not np.isfinite(arr).all():
                    raise FloatingPointError(f"non-finite {name} in forward pass")
        cache = None
        if keep_cache:
            cache = {"stages": stage_cache, "pooled": pooled, "emb_norm": emb_norm}
        return ForwardPass(logits, probs, emb, feats, cache)

    def backward(
        self,
        fp: ForwardPass,
        dlogits: np.ndarray | None = None,
        dembedding: np.ndarray | None = None,
        return_feature_grad: bool = False,
    ):
        """Parameter gradients given upstream gradients on logits and/or embedding.

        With ``return_feature_grad`` the gradient w.r.t. the last-stage
        activations (``N x H' x W' x C``) is returned alongside.
        """
        if fp.cache is None:
            raise ValueError("forward pass was run without keep_cache; nothing to backpropagate")
        cfg = self.config
        grads: dict[str, np.ndarray] = {}
        pooled = fp.cache["pooled"]
        dpooled = np.zeros_like(pooled)
        if dlogits is None:
            dlogits = np.zeros_like(fp.logits)
        grads["cls.w"] = pooled.T @ dlogits
        grads["cls.b"] = dlogits.sum(axis=0)
        dpooled += dlogits @ self.params["cls.w"].T
        if cfg.embed_dim:
            if dembedding is None:
                dembedding = np.zeros_like(fp.embedding)
            z = fp.embedding
            demb = (dembedding - z * (dembedding * z).sum(axis=1, keepdims=True)) / fp.cache["emb_norm"]
            grads["emb.w"] = pooled.T @ demb
            grads["emb.b"] = demb.sum(axis=0)
            dpooled += demb @ self.params["emb.w"].T

        _, hf, wf, _ = fp.features.shape
        da = np.broadcast_to((dpooled / (hf * wf))[:, None, None, :], fp.features.shape).astype(self.dtype)
        dfeat = da.copy() if return_feature_grad else None
        for i in reversed(range(len(cfg.stages))):
            ch, k, s = cfg.stages[i]
            x_shape, cols, active = fp.cache["stages"][i]
            dz = da * active
            dz2 = dz.reshape(-1, ch)
            grads[f"conv{i}.w"] = (cols.reshape(-1, cols.shape[-1]).T @ dz2).reshape(self.params[f"conv{i}.w"].shape)
            grads[f"conv{i}.b"] = dz2.sum(axis=0)
            if i > 0:
                dcols = (dz2 @ self.params[f"conv{i}.w"].reshape(-1, ch).T).reshape(cols.shape)
                da = _col2im(dcols, x_shape, k, s)
        grads = {name: grads[name] for name in self.params}
        if self.debug:
            for name, g in grads.items():
                if not np.isfinite(g).all():
                    raise FloatingPointError(f"non-finite gradient for {name}")
        return (grads, dfeat) if return_feature_grad else grads


def init_params(config: NetworkConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """He (fan-in) normal initialisation, zero biases."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params: dict[str, np.ndarray] = {}
    cin = config.in_channels
    for i, (ch, k, _) in enumerate(config.stages):
        fan_in = k * k * cin
        params[f"conv{i}.w"] = (rng.standard_normal((k, k, cin, ch)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[f"conv{i}.b"] = np.zeros(ch, dtype=dtype)
        cin = ch
    params["cls.w"] = (rng.standard_normal((cin, config.num_classes)) * np.sqrt(2.0 / cin)).astype(dtype)
    params["cls.b"] = np.zeros(config.num_classes, dtype=dtype)
    if config.embed_dim:
        params["emb.w"] = (rng.standard_normal((cin, config.embed_dim)) * np.sqrt(2.0 / cin)).astype(dtype)
        params["emb.b"] = np.zeros(config.embed_dim, dtype=dtype)
    return params


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for name in params:  # fixed order keeps updates reproducible
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= (scale * m / (np.sqrt(v) + self.eps)).astype(params[name].dtype)


# Checkpoint layout (little-endian):
#   magic(8) version(u32) meta_len(u32) meta_json n_tensors(u32)
#   per tensor: name_len(u16) name ndim(u8) dims(u32 * ndim)
#   float32 payloads in directory order, then sha256 of everything before it.

def save_checkpoint(path: str | Path, net: Network, metadata: dict | None = None) -> None:
    meta = {"config": net.config.to_dict(), "metadata": metadata or {}}
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(net.params)))
    for name, arr in net.params.items():
        nb = name.encode()
        buf.write(struct.pack("<HB", len(nb), arr.ndim))
        buf.write(nb)
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in net.params.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    """Returns ``(network, metadata)``. Parameters come back as float32."""
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 8 + 32 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    (version,) = struct.unpack_from("<I", body, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    off = 12
    (meta_len,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    directory = []
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", body, off)
        off += 3
        name = body[off:off + name_len].decode()
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        directory.append((name, shape))
    params = {}
    for name, shape in directory:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    config = NetworkConfig(**{**meta["config"], "dtype": "float32"})
    return Network(config, params), meta["metadata"]
