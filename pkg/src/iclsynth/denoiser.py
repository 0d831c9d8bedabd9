"""Dual-axis attention denoiser.

Context and (noisy) query latents are projected into a shared model space,
concatenated along the sample axis and processed by a stack of layers. Each
layer holds a feature-wise sublayer, a sample-wise sublayer and a second
feature-wise sublayer. In the sample-wise sublayer every token attends only to
context tokens, so queries never see each other.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ndnum as nd
from .ndnum import ContractError, DimensionError, ParamStore, Tensor
from .schedule import DomainError, ScheduleConfig, precondition

POS_BASE = 10000.0
SUBLAYERS = ("feat_a", "sample", "feat_b")
CHECKPOINT_MAGIC = b"ICLDIFF\0"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int = 32
    model_dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_hidden_multiplier: int = 4
    activation: str = "gelu"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ContractError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if min(self.latent_dim, self.model_dim, self.layers, self.heads, self.ffn_hidden_multiplier) < 1:
            raise ContractError("denoiser sizes must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


PAPER_DENOISER = DenoiserConfig(latent_dim=192, model_dim=512, layers=6, heads=8)
DESK_DENOISER = DenoiserConfig()


@dataclass
class DenoiserModel:
    config: DenoiserConfig
    params: ParamStore
    schedule: ScheduleConfig = ScheduleConfig()

    def num_parameters(self) -> int:
        return int(self.params.flat.size)

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.config, self.params.copy(), self.schedule)


@dataclass(frozen=True)
class AttentionMask:
    """Sample-axis attention pattern. Row i may attend column j iff allowed[i, j]."""
    allowed: np.ndarray
    n_ctx: int

    @property
    def is_context_prefix(self) -> bool:
        n = self.allowed.shape[0]
        ref = np.zeros((n, n), dtype=bool)
        ref[:, :self.n_ctx] = True
        return bool(np.array_equal(self.allowed, ref))


def build_mask(m_ctx: int, m_qry: int) -> AttentionMask:
    if m_ctx < 1:
        raise ContractError("need at least one context row: queries would attend to nothing")
    n = m_ctx + m_qry
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:, :m_ctx] = True
    return AttentionMask(allowed, m_ctx)


# ------------------------------------------------------------------ encodings

def _sinusoid_table(positions: np.ndarray, dim: int) -> np.ndarray:
    # interleaved [sin, cos] pairs; odd dims drop the last cosine
    half = (dim + 1) // 2
    freqs = POS_BASE ** (-2.0 * np.arange(half) / (2 * half))
    ang = positions[:, None].astype(np.float64) * freqs[None, :]
    table = np.empty((len(positions), 2 * half))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return table[:, :dim]


def feature_pos_enc(n_features: int, dim: int) -> np.ndarray:
    if dim % 2:
        raise ContractError("positional encoding width must be even")
    return _sinusoid_table(np.arange(n_features), dim)


def context_pos_enc_2d(m_ctx: int, n_features: int, dim: int) -> np.ndarray:
    """(m_ctx, F, dim): first half of channels encodes the row, second half the feature."""
    if dim % 2:
        raise ContractError("positional encoding width must be even")
    h = dim // 2
    rows = _sinusoid_table(np.arange(m_ctx), h)
    cols = _sinusoid_table(np.arange(n_features), dim - h)
    return np.concatenate([
        np.broadcast_to(rows[:, None, :], (m_ctx, n_features, h)),
        np.broadcast_to(cols[None, :, :], (m_ctx, n_features, dim - h)),
    ], axis=-1)


def noise_features(c_noise: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = POS_BASE ** (-np.arange(half) / half)
    ang = c_noise * freqs
    out = np.zeros(dim)
    out[:half] = np.cos(ang)
    out[half:2 * half] = np.sin(ang)
    return out


def noise_embedding(sigma: float, model_dim: int, params: ParamStore,
                    schedule: ScheduleConfig = ScheduleConfig()) -> Tensor:
    """Sinusoidal features of c_noise(sigma) through the two-layer noise MLP."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    c_noise = precondition(sigma, schedule).c_noise
    feats = Tensor(noise_features(c_noise, model_dim)[None, :].astype(params.flat.dtype))
    h = nd.gelu(nd.linear(feats, params["noise.w1"], params["noise.b1"]))
    return nd.reshape(nd.linear(h, params["noise.w2"], params["noise.b2"]), (model_dim,))


# ------------------------------------------------------------------ init

def init_model(config: DenoiserConfig = DESK_DENOISER, seed: int = 0,
               schedule: ScheduleConfig = ScheduleConfig(), zero_residual: bool = True) -> DenoiserModel:
    """Normal(0, 0.02) projections, unit LayerNorms, zero biases.

    With ``zero_residual`` the last FFN projection of every sublayer starts at
    zero so each sublayer is initially the identity.
    """
    rng = np.random.default_rng(seed)
    d, D = config.latent_dim, config.model_dim
    H = D * config.ffn_hidden_multiplier
    arrays: dict[str, np.ndarray] = {}

    def proj(name, shape, zero=False):
        arrays[name + ".w"] = np.zeros(shape) if zero else rng.normal(0.0, 0.02, shape)
        arrays[name + ".b"] = np.zeros(shape[1])

    def norm(name):
        arrays[name + ".g"] = np.ones(D)
        arrays[name + ".b"] = np.zeros(D)

    proj("q_in", (d, D))
    proj("c_in", (d, D))
    arrays["noise.w1"] = rng.normal(0.0, 0.02, (D, D))
    arrays["noise.b1"] = np.zeros(D)
    arrays["noise.w2"] = rng.normal(0.0, 0.02, (D, D))
    arrays["noise.b2"] = np.zeros(D)
    for layer in range(config.layers):
        for sub in SUBLAYERS:
            p = f"l{layer}.{sub}"
            norm(p + ".ln")
            for qkv in ("wq", "wk", "wv"):
                proj(f"{p}.{qkv}", (D, D))
            proj(p + ".wo", (D, D))
            proj(p + ".ff1", (D, H))
            proj(p + ".ff2", (H, D), zero=zero_residual)
    norm("out_ln")
    proj("out", (D, d))
    return DenoiserModel(config, ParamStore.from_arrays(arrays), schedule)


# ------------------------------------------------------------------ blocks

def _heads(x: Tensor, heads: int) -> Tensor:
    B, L, D = x.shape
    return nd.transpose(nd.reshape(x, (B, L, heads, D // heads)), (0, 2, 1, 3))


def attention(x: Tensor, params: ParamStore, prefix: str, heads: int,
              n_keys: int | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over axis 1 of ``x`` (B, L, D).

    ``n_keys`` restricts keys/values to the first n_keys positions (the
    context-prefix pattern); ``mask`` is a general (L, L) boolean pattern.
    """
    B, L, D = x.shape
    kv_src = x if n_keys is None else nd.getitem(x, (slice(None), slice(0, n_keys)))
    q = _heads(nd.linear(x, params[prefix + ".wq.w"], params[prefix + ".wq.b"]), heads)
    k = _heads(nd.linear(kv_src, params[prefix + ".wk.w"], params[prefix + ".wk.b"]), heads)
    v = _heads(nd.linear(kv_src, params[prefix + ".wv.w"], params[prefix + ".wv.b"]), heads)
    scores = nd.mul(nd.matmul(q, nd.swapaxes(k, -1, -2)), 1.0 / np.sqrt(D // heads))
    weights = nd.softmax(scores, axis=-1, mask=mask)
    o = nd.reshape(nd.transpose(nd.matmul(weights, v), (0, 2, 1, 3)), (B, L, D))
    return nd.linear(o, params[prefix + ".wo.w"], params[prefix + ".wo.b"])


def _act(x: Tensor, kind: str) -> Tensor:
    return nd.gelu(x) if kind == "gelu" else nd.relu(x)


def sublayer(h: Tensor, axis: str, mask: AttentionMask | None, params: ParamStore, prefix: str,
             heads: int, activation: str = "gelu") -> Tensor:
    """h <- h + FFN(Attn(LayerNorm(h))) along ``axis`` of h shaped (M, F, D)."""
    if axis == "sample":
        x = nd.transpose(h, (1, 0, 2))
        if mask is not None and mask.allowed.shape != (x.shape[1], x.shape[1]):
            raise DimensionError(f"mask {mask.allowed.shape} does not match {x.shape[1]} sample tokens")
    elif axis == "feature":
        x = h
        if mask is not None:
            raise ContractError("feature-axis attention is unmasked")
    else:
        raise ContractError(f"unknown attention axis {axis!r}")

    normed = nd.layer_norm(x, params[prefix + ".ln.g"], params[prefix + ".ln.b"])
    if mask is None:
        a = attention(normed, params, prefix, heads)
    elif mask.is_context_prefix:
        a = attention(normed, params, prefix, heads, n_keys=mask.n_ctx)
    else:
        a = attention(normed, params, prefix, heads, mask=mask.allowed)
    f = _act(nd.linear(a, params[prefix + ".ff1.w"], params[prefix + ".ff1.b"]), activation)
    f = nd.linear(f, params[prefix + ".ff2.w"], params[prefix + ".ff2.b"])
    if axis == "sample":
        f = nd.transpose(f, (1, 0, 2))
    return nd.add(h, f)


# ------------------------------------------------------------------ forward

def _as_array(z, dtype) -> np.ndarray:
    return (z.data if isinstance(z, Tensor) else np.asarray(z)).astype(dtype, copy=False)


def network(model: DenoiserModel, x_qry: np.ndarray, sigma: float, z_ctx: np.ndarray) -> Tensor:
    """Raw network output for (already c_in-scaled) query latents."""
    cfg, p = model.config, model.params
    m_q, F, d = x_qry.shape
    m_c = z_ctx.shape[0]
    dtype = p.flat.dtype
    D = cfg.model_dim

    q = nd.linear(Tensor(x_qry), p["q_in.w"], p["q_in.b"])
    q = nd.add(q, Tensor(feature_pos_enc(F, D).astype(dtype)))
    q = nd.add(q, nd.reshape(noise_embedding(sigma, D, p, model.schedule), (1, 1, D)))
    c = nd.linear(Tensor(z_ctx), p["c_in.w"], p["c_in.b"])
    c = nd.add(c, Tensor(context_pos_enc_2d(m_c, F, D).astype(dtype)))
    h = nd.concat([c, q], axis=0)

    mask = build_mask(m_c, m_q)
    for layer in range(cfg.layers):
        for sub in SUBLAYERS:
            axis = "sample" if sub == "sample" else "feature"
            h = sublayer(h, axis, mask if axis == "sample" else None, p, f"l{layer}.{sub}",
                         cfg.heads, cfg.activation)
    hq = nd.getitem(h, slice(m_c, None))
    hq = nd.layer_norm(hq, p["out_ln.g"], p["out_ln.b"])
    return nd.linear(hq, p["out.w"], p["out.b"])


def forward(model: DenoiserModel, z_sigma, sigma: float, z_ctx) -> Tensor:
    """Preconditioned denoised estimate c_skip*Z + c_out*N(c_in*Z; sigma, ctx)."""
    dtype = model.params.flat.dtype
    zs = _as_array(z_sigma, dtype)
    zc = _as_array(z_ctx, dtype)
    if zs.ndim != 3 or zc.ndim != 3:
        raise DimensionError(f"latents must be (M, F, d); got {zs.shape} and {zc.shape}")
    if zs.shape[1:] != zc.shape[1:]:
        raise DimensionError(f"query {zs.shape} and context {zc.shape} disagree on (F, d)")
    if zs.shape[2] != model.config.latent_dim:
        raise DimensionError(f"latent dim {zs.shape[2]} != model latent dim {model.config.latent_dim}")
    if zc.shape[0] < 1:
        raise ContractError("need at least one context row")
    co = precondition(sigma, model.schedule)
    raw = network(model, co.c_in * zs, sigma, zc)
    return nd.add(nd.mul(raw, co.c_out), Tensor(co.c_skip * zs))


def denoise_fn(model: DenoiserModel, z_ctx: np.ndarray, chunk: int = 512):
    """Gradient-free numpy callable (Z, sigma) -> denoised Z for the sampler.

    Query rows are independent given the context, so large query sets are
    processed in chunks without changing the result.
    """
    def denoise(z: np.ndarray, sigma: float) -> np.ndarray:
        with nd.no_grad():
            parts = [forward(model, z[i:i + chunk], sigma, z_ctx).data
                     for i in range(0, len(z), chunk)]
        return np.concatenate(parts, axis=0).astype(np.float64, copy=False)
    return denoise


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path: str | Path, model: DenoiserModel, meta: dict | None = None) -> None:
    """Binary container: magic, u32 version, u64 header length, JSON header,
    then raw float64 little-endian parameters. A sidecar ``.json`` mirrors the header."""
    path = Path(path)
    manifest, off = [], 0
    for name, shape in zip(model.params.names, model.params.shapes):
        size = int(np.prod(shape)) if shape else 1
        manifest.append({"name": name, "shape": list(shape), "offset": off})
        off += size
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "schedule": model.schedule.to_dict(),
        "parameters": manifest,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    data = model.params.flat.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(data)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[DenoiserModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a denoiser checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    flat = np.frombuffer(raw[20 + hlen:], dtype="<f8").astype(np.float64)
    arrays = {}
    for entry in header["parameters"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(shape)
    model = DenoiserModel(DenoiserConfig.from_dict(header["config"]), ParamStore.from_arrays(arrays),
                          ScheduleConfig.from_dict(header["schedule"]))
    return model, header.get("meta", {})
