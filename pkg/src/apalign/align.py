"""Candidate scoring: one cross-attention layer over sampled clouds.

Queries come from encoded candidate actions, keys from positionally
encoded point coordinates, and values from similarity-gated point
features.  Keys and values (not queries) get a rotary rotation driven by
the 3-D point position, so attention logits carry relative geometry.
A small MLP decoder turns each candidate's fused vector into a logit;
softmax over candidates gives the selection distribution.  An optional
residual decoder, blended in after sigmoid, supports post-hoc adaptation
without touching the imitation-trained weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .common import NumericError, ValidationError, require_finite
from .interchange import ACTION_DIM, PolicySnapshot
from .cloudfuse import SampledClouds


@dataclass(frozen=True)
class AlignConfig:
    """Network shape and scoring options.

    ``width`` must be divisible by twice ``heads``.  Rotary rotations pair
    channels per axis; when ``width`` is not divisible by 6, the trailing
    ``width % 6`` channels pass through unrotated.
    """

    width: int = 768
    heads: int = 8
    feature_dim: int = 32
    pe_bands: int = 6
    rope_base: float = 10000.0
    rope_pos_scale: float = 100.0   # rad per meter on the fastest pair
    alpha: float = 0.2              # base-policy share in the adapted blend
    attn_scale: str = "scaled"      # "scaled" (1/sqrt(W/H)) | "paper" (1.0)
    l_max: int = 256
    use_rope: bool = True

    def __post_init__(self) -> None:
        if self.width < 6 or self.width % (2 * self.heads) != 0:
            raise ValidationError("width",
                                  f"width {self.width} not divisible by 2*heads={2 * self.heads}")
        if self.attn_scale not in ("scaled", "paper"):
            raise ValidationError("attn_scale", f"unknown mode {self.attn_scale!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha", "blend weight must lie in [0, 1]")
        if self.pe_bands < 1:
            raise ValidationError("pe_bands", "need at least one frequency band")
        if self.feature_dim < 1:
            raise ValidationError("feature_dim", "feature dim must be positive")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def pe_dim(self) -> int:
        return 3 + 6 * self.pe_bands

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim) if self.attn_scale == "scaled" else 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "AlignConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ValidationError("config", f"unknown config keys {sorted(extra)}")
        return cls(**data)


def desk_config(**overrides) -> AlignConfig:
    """Small preset sized for the synthetic tabletop benchmark."""
    base = dict(width=64, heads=8, feature_dim=32)
    base.update(overrides)
    return AlignConfig(**base)


def param_shapes(config: AlignConfig) -> dict[str, tuple[int, ...]]:
    w, d, p = config.width, config.feature_dim, config.pe_dim
    shapes: dict[str, tuple[int, ...]] = {
        "mlp1.w0": (ACTION_DIM, w), "mlp1.b0": (w,),
        "mlp1.w1": (w, w), "mlp1.b1": (w,),
        "mlp2.w0": (p, w), "mlp2.b0": (w,),
        "mlp2.w1": (w, w), "mlp2.b1": (w,),
        "adapter.w": (d, w), "adapter.b": (w,),
    }
    for name in ("q", "k", "v", "o"):
        shapes[f"attn.w{name}"] = (w, w)
        shapes[f"attn.b{name}"] = (w,)
    for head in ("decoder", "residual"):
        shapes[f"{head}.w0"] = (w, w)
        shapes[f"{head}.b0"] = (w,)
        shapes[f"{head}.w1"] = (w, w)
        shapes[f"{head}.b1"] = (w,)
        shapes[f"{head}.w2"] = (w, 1)
        shapes[f"{head}.b2"] = (1,)
    return shapes


def init_params(config: AlignConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform +-sqrt(1/fan_in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:  # biases start at zero
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def nerf_pe(points: np.ndarray, bands: int) -> np.ndarray:
    """[p, sin(2^k pi p), cos(2^k pi p)] for k = 0..bands-1, concatenated."""
    pts = np.asarray(points, dtype=np.float64)
    parts = [pts]
    for k in range(bands):
        ang = (2.0 ** k) * np.pi * pts
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    return np.concatenate(parts, axis=-1)


def rope_tables(points: np.ndarray, config: AlignConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-point cos/sin tables, shape [n, 3, pairs]; pairs = width // 6."""
    pts = np.asarray(points, dtype=np.float64)
    pairs = config.width // 6
    t = np.arange(pairs, dtype=np.float64)
    freqs = config.rope_base ** (-t / pairs) * config.rope_pos_scale
    angles = pts[:, :, None] * freqs[None, None, :]
    return np.cos(angles), np.sin(angles)


def rope_phase(cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotation factors as unit complex numbers, flattened to [..., 3 * pairs]."""
    ph = cos + 1j * sin
    return ph.reshape(*ph.shape[:-2], ph.shape[-2] * ph.shape[-1])


def _rope_mul(x: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Rotate adjacent channel pairs of ``x`` [..., w] by complex ``phase``.

    Pair (axis, p) lives at channels 2 * (axis * pairs + p) and the one
    after it; channels past 2 * phase.shape[-1] pass through unchanged.
    """
    w = x.shape[-1]
    rot = 2 * phase.shape[-1]
    cplx = np.complex64 if x.dtype == np.float32 else np.complex128
    xc = np.ascontiguousarray(x[..., :rot]).view(cplx)
    prod = xc * phase
    if prod.dtype != cplx:
        prod = prod.astype(cplx)
    if rot == w:
        return prod.view(x.dtype)
    out = np.empty_like(x)
    out[..., :rot] = prod.view(x.dtype)
    out[..., rot:] = x[..., rot:]
    return out


def rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray,
               inverse: bool = False) -> np.ndarray:
    """Rotate channel pairs by the tabulated angles; inverse transposes.

    Accepts any leading batch shape: ``x`` is [..., w] with matching
    [..., 3, pairs] tables.
    """
    phase = rope_phase(cos, sin)
    if inverse:
        phase = np.conj(phase)
    return _rope_mul(x, phase)


def rope_rotate(x: np.ndarray, points: np.ndarray, config: AlignConfig,
                inverse: bool = False) -> np.ndarray:
    """Rotate vectors by their point's per-axis angles (see rope_tables)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.width:
        raise ValidationError("rope", f"expected [n, {config.width}], got {x.shape}")
    cos, sin = rope_tables(points, config)
    return rope_apply(x, cos, sin, inverse=inverse)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    length, width = x.shape
    return x.reshape(length, heads, width // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, length, dh = x.shape
    return x.transpose(1, 0, 2).reshape(length, heads * dh)


def attention_core(qh: np.ndarray, kh: np.ndarray, vh: np.ndarray,
                   scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-softmax attention per head: inputs [H, L|N, dh].

    The scale is folded into the queries; [H, L, dh] is the smaller side.
    """
    logits = (scale * qh) @ kh.transpose(0, 2, 1)
    logits = logits - logits.max(axis=2, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=2, keepdims=True)
    return weights @ vh, weights


@dataclass
class ActionDistribution:
    logits: np.ndarray                    # [L]
    omegas: np.ndarray                    # [L], sums to 1
    omega_residual: np.ndarray | None = None
    omega_prime: np.ndarray | None = None


def blend(omegas: np.ndarray, residual: np.ndarray, alpha: float) -> np.ndarray:
    """Adapted scores: alpha * base + (1 - alpha) * residual probabilities."""
    return alpha * omegas + (1 - alpha) * residual


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _mlp2(params: dict, prefix: str, x: np.ndarray):
    a1 = x @ params[f"{prefix}.w0"] + params[f"{prefix}.b0"]
    h1 = np.maximum(a1, 0.0)
    out = h1 @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]
    return out, (a1, h1)


def _decoder(params: dict, prefix: str, x: np.ndarray):
    a1 = x @ params[f"{prefix}.w0"] + params[f"{prefix}.b0"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]
    h2 = np.maximum(a2, 0.0)
    out = (h2 @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"])[:, 0]
    return out, (a1, h1, a2, h2)


@dataclass
class ForwardCache:
    """Intermediates needed by the analytic backward pass."""

    encoded: np.ndarray
    pe: np.ndarray
    fs: np.ndarray
    cos: np.ndarray | None
    sin: np.ndarray | None
    phase: np.ndarray | None
    mlp1: tuple
    mlp2: tuple
    q_in: np.ndarray
    k_pre: np.ndarray
    k_in: np.ndarray
    v_pre: np.ndarray
    v_in: np.ndarray
    qp: np.ndarray
    kp: np.ndarray
    vp: np.ndarray
    attn: np.ndarray
    heads_out: np.ndarray
    fusion: np.ndarray
    decoder: tuple
    logits: np.ndarray
    omegas: np.ndarray
    residual: tuple | None = None
    res_logits: np.ndarray | None = None
    omega_residual: np.ndarray | None = None
    omega_prime: np.ndarray | None = None


def forward(params: dict, config: AlignConfig, encoded: np.ndarray,
            sampled: SampledClouds, adapted: bool = False,
            precomputed: dict | None = None) -> tuple[ActionDistribution, ForwardCache]:
    """Score candidates against a sampled cloud.

    ``precomputed`` may carry "pe", "cos", "sin", and "fs" entries (they
    depend only on the sample) to skip redundant trigonometry in training
    loops.
    """
    dtype = params["attn.wq"].dtype
    if dtype not in (np.float32, np.float64):
        dtype = np.dtype(np.float64)
    encoded = np.asarray(encoded, dtype=dtype)
    if encoded.ndim != 2 or encoded.shape[1] != ACTION_DIM:
        raise ValidationError("candidates", f"expected [L, {ACTION_DIM}], got {encoded.shape}")
    l_count = encoded.shape[0]
    if l_count < 1:
        raise ValidationError("candidates", "no candidates to score")
    if l_count > config.l_max:
        raise ValidationError("candidates", f"{l_count} candidates exceed l_max={config.l_max}")
    feats = np.asarray(sampled.features, dtype=dtype)
    sims = np.asarray(sampled.similarities, dtype=dtype)
    pts = np.asarray(sampled.points, dtype=np.float64)
    if feats.shape[1] != config.feature_dim:
        raise ValidationError("features",
                              f"feature dim {feats.shape[1]} != config {config.feature_dim}")
    if pts.shape[0] < 1:
        raise ValidationError("points", "empty sampled cloud")

    pre = precomputed or {}
    q_in, mlp1_cache = _mlp2(params, "mlp1", encoded)

    pe = pre.get("pe")
    if pe is None:
        pe = nerf_pe(pts, config.pe_bands)
    pe = np.asarray(pe, dtype=dtype)
    k_pre, mlp2_cache = _mlp2(params, "mlp2", pe)

    fs = pre.get("fs")
    if fs is None:
        fs = feats * sims[:, None]
    fs = np.asarray(fs, dtype=dtype)
    v_pre = fs @ params["adapter.w"] + params["adapter.b"]

    cos = sin = phase = None
    if config.use_rope:
        cos, sin = (pre["cos"], pre["sin"]) if "cos" in pre else rope_tables(pts, config)
        phase = pre.get("phase")
        if phase is None:
            phase = rope_phase(cos, sin)
        if dtype == np.float32 and phase.dtype != np.complex64:
            phase = phase.astype(np.complex64)
        k_in = _rope_mul(k_pre, phase)
        v_in = _rope_mul(v_pre, phase)
    else:
        k_in = k_pre
        v_in = v_pre
    require_finite("encoders", q_in, k_in, v_in)

    qp = q_in @ params["attn.wq"] + params["attn.bq"]
    kp = k_in @ params["attn.wk"] + params["attn.bk"]
    vp = v_in @ params["attn.wv"] + params["attn.bv"]
    heads, attn = attention_core(_split_heads(qp, config.heads),
                                 _split_heads(kp, config.heads),
                                 _split_heads(vp, config.heads),
                                 config.scale)
    heads_out = _merge_heads(heads)
    fusion = heads_out @ params["attn.wo"] + params["attn.bo"]
    require_finite("attention", fusion)

    logits, dec_cache = _decoder(params, "decoder", fusion)
    require_finite("decoder", logits)
    omegas = softmax(logits)
    require_finite("softmax", omegas)

    cache = ForwardCache(encoded=encoded, pe=pe, fs=fs, cos=cos, sin=sin,
                         phase=phase,
                         mlp1=mlp1_cache, mlp2=mlp2_cache, q_in=q_in,
                         k_pre=k_pre, k_in=k_in, v_pre=v_pre, v_in=v_in,
                         qp=qp, kp=kp, vp=vp, attn=attn, heads_out=heads_out,
                         fusion=fusion, decoder=dec_cache, logits=logits,
                         omegas=omegas)
    dist = ActionDistribution(logits=logits, omegas=omegas)
    if adapted:
        res_logits, res_cache = _decoder(params, "residual", fusion)
        omega_residual = sigmoid(res_logits)
        omega_prime = blend(omegas, omega_residual, config.alpha)
        require_finite("blend", omega_prime)
        cache.residual = res_cache
        cache.res_logits = res_logits
        cache.omega_residual = omega_residual
        cache.omega_prime = omega_prime
        dist.omega_residual = omega_residual
        dist.omega_prime = omega_prime
    return dist, cache


def select_action(dist: ActionDistribution) -> int:
    """Argmax over the adapted blend when present, else the base softmax.

    Ties resolve to the lowest index.
    """
    scores = dist.omega_prime if dist.omega_prime is not None else dist.omegas
    return int(np.argmax(scores))


def save_policy(path: str | Path, params: dict, config: AlignConfig,
                training_meta: Mapping[str, str] | None = None,
                loss_curve: np.ndarray | None = None) -> None:
    snapshot = PolicySnapshot(
        config=config.to_dict(),
        params={name: params[name] for name in sorted(params)},
        training_meta=dict(training_meta or {}),
        loss_curve=loss_curve,
    )
    snapshot.save(path)


def load_policy(path: str | Path) -> tuple[dict, AlignConfig, PolicySnapshot]:
    """Load and verify a snapshot: exact parameter layout for its config."""
    snapshot = PolicySnapshot.load(path)
    config = AlignConfig.from_dict(snapshot.config)
    expected = param_shapes(config)
    missing = sorted(set(expected) - set(snapshot.params))
    extra = sorted(set(snapshot.params) - set(expected))
    if missing or extra:
        raise ValidationError("params", f"missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        got = snapshot.params[name].shape
        if got != shape:
            raise ValidationError("params", f"{name}: expected {shape}, got {got}")
    params = {name: np.asarray(snapshot.params[name], dtype=np.float64)
              for name in expected}
    return params, config, snapshot


def config_json(config: AlignConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
