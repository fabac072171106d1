"""Imitation training and residual adaptation with analytic gradients.

Every gradient here is hand-derived; finite differences only appear in
``gradcheck``, which exists to audit the analytic path.  Adam runs once
per micro-batch with the mean gradient.  Imitation batches are stacked
into shared matmuls (candidate rows zero-padded to the longest scene);
mixed or adaptation datasets fall back to a per-sample walk, and both
routes compute the same mean gradient up to float summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .align import (
    AlignConfig,
    ForwardCache,
    blend,
    forward,
    nerf_pe,
    rope_apply,
    rope_phase,
    rope_tables,
    sigmoid,
    _decoder,
    _merge_heads,
    _rope_mul,
    _split_heads,
)
from .cloudfuse import SampledClouds
from .common import NumericError, ValidationError, require_finite, stable_seed
from .interchange import SceneBundle


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float | None = None        # None: 1e-3 below width 256, else 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    micro_batch: int = 8
    seed: int = 0
    clamp: float = 1e-12           # probability clamp inside the BCE loss
    schedule: str = "constant"     # "constant" | "cosine" (anneal to lr_min)
    lr_min: float = 1e-4
    # Stacking micro-batches into shared matmuls is slower at desk scale on
    # one core (the padded [B, H, L, n] intermediates fall out of cache while
    # per-sample buffers fit), so the loop is the default.
    stacked: bool = False
    # "float32" runs forward/backward in single precision against float64
    # master weights in Adam; snapshots always store float64.
    dtype: str = "float64"
    # Residual-adaptation regularizers (ignored by the imitation loop):
    # decoupled weight decay on the trained head, and Gaussian noise added
    # to its standardized inputs each visit so the head cannot memorize
    # single renders of the adaptation scenes.
    weight_decay: float = 0.0
    input_noise: float = 0.0

    def __post_init__(self) -> None:
        if self.schedule not in ("constant", "cosine"):
            raise ValidationError("schedule", f"unknown schedule {self.schedule!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValidationError("dtype", f"unknown dtype {self.dtype!r}")

    @property
    def compute_dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.dtype == "float32" else np.float64)

    def resolve_lr(self, config: AlignConfig) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-4 if config.width >= 256 else 1e-3

    def epoch_lr(self, config: AlignConfig, epoch: int) -> float:
        """Learning rate for one epoch under the configured schedule."""
        peak = self.resolve_lr(config)
        if self.schedule == "constant" or self.epochs <= 1:
            return peak
        floor = min(self.lr_min, peak)
        frac = epoch / (self.epochs - 1)
        return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))


@dataclass
class ScoreSample:
    """One training sample: a sampled cloud, candidates, and supervision.

    ``label`` (an index) marks imitation samples scored with the softmax
    cross-entropy; ``labels`` (a 0/1 vector over candidates) marks
    relation-feasibility samples scored with the blended BCE.
    """

    kind: str
    encoded: np.ndarray
    points: np.ndarray
    features: np.ndarray
    similarities: np.ndarray
    label: int | None = None
    labels: np.ndarray | None = None
    instruction_text: str = ""
    instruction_embedding: np.ndarray | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def sampled(self) -> SampledClouds:
        return SampledClouds(points=self.points, features=self.features,
                             similarities=self.similarities,
                             indices=np.arange(self.points.shape[0]))

    def to_bundle(self) -> SceneBundle:
        if self.label is not None:
            labels = np.zeros(self.encoded.shape[0], dtype=np.uint8)
            labels[self.label] = 1
            mode = "choice"
        elif self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.uint8)
            mode = "valid_set"
        else:
            raise ValidationError("labels", "sample carries no supervision")
        emb = self.instruction_embedding
        if emb is None:
            emb = np.zeros(self.features.shape[1])
        return SceneBundle(
            points=self.points.astype(np.float32),
            features=self.features.astype(np.float32),
            similarities=np.clip(self.similarities, -1, 1).astype(np.float32),
            candidates=self.encoded.astype(np.float32),
            candidate_kind=self.kind,
            instruction_text=self.instruction_text,
            instruction_embedding=np.asarray(emb, dtype=np.float32),
            labels=labels,
            meta={**self.meta, "label_mode": mode},
        )

    @classmethod
    def from_bundle(cls, bundle: SceneBundle) -> "ScoreSample":
        if bundle.labels is None:
            raise ValidationError("labels", "bundle carries no labels")
        meta = dict(bundle.meta)
        mode = meta.pop("label_mode", "choice")
        labels = np.asarray(bundle.labels)
        label = None
        multi = None
        if mode == "choice":
            if int(labels.sum()) != 1:
                raise ValidationError("labels", "choice bundles need exactly one positive")
            label = int(np.argmax(labels))
        else:
            multi = labels
        return cls(kind=bundle.candidate_kind,
                   encoded=np.asarray(bundle.candidates, dtype=np.float64),
                   points=np.asarray(bundle.points, dtype=np.float64),
                   features=np.asarray(bundle.features, dtype=np.float64),
                   similarities=np.asarray(bundle.similarities, dtype=np.float64),
                   label=label, labels=multi,
                   instruction_text=bundle.instruction_text,
                   instruction_embedding=np.asarray(bundle.instruction_embedding,
                                                    dtype=np.float64),
                   meta=meta)


def build_score_dataset(demos: Sequence) -> tuple[list[ScoreSample], list[int]]:
    """Turn recorded expert steps into labeled samples.

    The label is recovered by matching the executed action's position
    against the candidate rows; a demo whose action matches nothing
    within 1e-6 is rejected and its index reported.
    """
    samples: list[ScoreSample] = []
    rejected: list[int] = []
    for i, demo in enumerate(demos):
        encoded = np.asarray(demo.encoded, dtype=np.float64)
        row = np.asarray(demo.action_row, dtype=np.float64)
        dist = np.linalg.norm(encoded[:, :3] - row[:3], axis=1)
        label = int(np.argmin(dist))
        if dist[label] > 1e-6:
            rejected.append(i)
            continue
        samples.append(ScoreSample(
            kind=demo.kind,
            encoded=encoded,
            points=np.asarray(demo.points, dtype=np.float64),
            features=np.asarray(demo.features, dtype=np.float64),
            similarities=np.asarray(demo.similarities, dtype=np.float64),
            label=label,
            instruction_text=demo.instruction_text,
            instruction_embedding=np.asarray(demo.instruction_embedding,
                                             dtype=np.float64),
            meta=dict(demo.meta)))
    return samples, rejected


@dataclass
class PreparedSample:
    """Sample plus cached encoder inputs that never change during training."""

    sample: ScoreSample
    sampled: SampledClouds
    precomputed: dict
    adapted: bool


def prepare_samples(samples: Sequence[ScoreSample], config: AlignConfig,
                    dtype: np.dtype = np.float64) -> list[PreparedSample]:
    dtype = np.dtype(dtype)
    out = []
    for sample in samples:
        sampled = sample.sampled()
        pre = {
            "pe": nerf_pe(sampled.points, config.pe_bands).astype(dtype, copy=False),
            "fs": (np.asarray(sample.features, dtype=np.float64)
                   * np.asarray(sample.similarities, dtype=np.float64)[:, None]
                   ).astype(dtype, copy=False),
        }
        if config.use_rope:
            pre["cos"], pre["sin"] = rope_tables(sampled.points, config)
            phase = rope_phase(pre["cos"], pre["sin"])
            if dtype == np.float32:
                phase = phase.astype(np.complex64)
            pre["phase"] = phase
        if dtype == np.float32:
            sampled = SampledClouds(
                points=sampled.points,
                features=np.asarray(sampled.features, dtype=dtype),
                similarities=np.asarray(sampled.similarities, dtype=dtype),
                indices=sampled.indices)
        out.append(PreparedSample(sample=sample, sampled=sampled, precomputed=pre,
                                  adapted=sample.labels is not None))
    return out


def ce_loss(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of the softmax over candidates; returns d/dlogits.

    The log is floored at 1e-12, capping the loss when the chosen
    candidate's mass has fully collapsed.
    """
    z = logits - logits.max()
    lse = np.log(np.exp(z).sum())
    omegas = np.exp(z - lse)
    loss = float(min(lse - z[label], -math.log(1e-12)))
    grad = omegas.copy()
    grad[label] -= 1.0
    return loss, grad


def bce_loss(omega_prime: np.ndarray, labels: np.ndarray,
             clamp: float = 1e-12) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on blended scores; returns d/domega_prime."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(omega_prime, clamp, 1.0 - clamp)
    loss = float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))
    inside = (omega_prime > clamp) & (omega_prime < 1.0 - clamp)
    grad = np.where(inside, (p - y) / (p * (1.0 - p)), 0.0) / y.shape[0]
    return loss, grad


def _decoder_backward(params: dict, prefix: str, cache: tuple, fusion: np.ndarray,
                      dout: np.ndarray, grads: dict) -> np.ndarray:
    a1, h1, a2, h2 = cache
    grads[f"{prefix}.w2"] = h2.T @ dout[:, None]
    grads[f"{prefix}.b2"] = np.array([dout.sum()])
    dh2 = np.outer(dout, params[f"{prefix}.w2"][:, 0])
    da2 = dh2 * (a2 > 0)
    grads[f"{prefix}.w1"] = h1.T @ da2
    grads[f"{prefix}.b1"] = da2.sum(axis=0)
    dh1 = da2 @ params[f"{prefix}.w1"].T
    da1 = dh1 * (a1 > 0)
    grads[f"{prefix}.w0"] = fusion.T @ da1
    grads[f"{prefix}.b0"] = da1.sum(axis=0)
    return da1 @ params[f"{prefix}.w0"].T


def _mlp_backward(params: dict, prefix: str, cache: tuple, x: np.ndarray,
                  dout: np.ndarray, grads: dict) -> None:
    a1, h1 = cache
    grads[f"{prefix}.w1"] = h1.T @ dout
    grads[f"{prefix}.b1"] = dout.sum(axis=0)
    dh1 = dout @ params[f"{prefix}.w1"].T
    da1 = dh1 * (a1 > 0)
    grads[f"{prefix}.w0"] = x.T @ da1
    grads[f"{prefix}.b0"] = da1.sum(axis=0)


def backward(params: dict, config: AlignConfig, cache: ForwardCache,
             dlogits: np.ndarray,
             dres_logits: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Analytic gradients of a scalar loss given head-level gradients."""
    grads: dict[str, np.ndarray] = {}
    dfusion = _decoder_backward(params, "decoder", cache.decoder, cache.fusion,
                                dlogits, grads)
    if dres_logits is not None:
        dfusion = dfusion + _decoder_backward(params, "residual", cache.residual,
                                              cache.fusion, dres_logits, grads)
    else:
        for suffix in ("w0", "b0", "w1", "b1", "w2", "b2"):
            grads[f"residual.{suffix}"] = np.zeros_like(params[f"residual.{suffix}"])

    # attention output projection
    grads["attn.wo"] = cache.heads_out.T @ dfusion
    grads["attn.bo"] = dfusion.sum(axis=0)
    d_heads = _split_heads(dfusion @ params["attn.wo"].T, config.heads)

    attn = cache.attn
    vh = _split_heads(cache.vp, config.heads)
    kh = _split_heads(cache.kp, config.heads)
    qh = _split_heads(cache.qp, config.heads)
    d_attn = d_heads @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ d_heads
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=2, keepdims=True))
    scale = config.scale
    dqh = scale * (d_scores @ kh)
    dkh = scale * (d_scores.transpose(0, 2, 1) @ qh)

    dqp = _merge_heads(dqh)
    dkp = _merge_heads(dkh)
    dvp = _merge_heads(dvh)
    grads["attn.wq"] = cache.q_in.T @ dqp
    grads["attn.bq"] = dqp.sum(axis=0)
    grads["attn.wk"] = cache.k_in.T @ dkp
    grads["attn.bk"] = dkp.sum(axis=0)
    grads["attn.wv"] = cache.v_in.T @ dvp
    grads["attn.bv"] = dvp.sum(axis=0)

    dq_in = dqp @ params["attn.wq"].T
    dk_in = dkp @ params["attn.wk"].T
    dv_in = dvp @ params["attn.wv"].T
    if config.use_rope:
        conj = np.conj(cache.phase)
        dk_pre = _rope_mul(dk_in, conj)
        dv_pre = _rope_mul(dv_in, conj)
    else:
        dk_pre = dk_in
        dv_pre = dv_in

    grads["adapter.w"] = cache.fs.T @ dv_pre
    grads["adapter.b"] = dv_pre.sum(axis=0)
    _mlp_backward(params, "mlp2", cache.mlp2, cache.pe, dk_pre, grads)
    _mlp_backward(params, "mlp1", cache.mlp1, cache.encoded, dq_in, grads)
    return grads


def loss_and_grads(params: dict, config: AlignConfig, prepared: PreparedSample,
                   clamp: float = 1e-12) -> tuple[float, dict[str, np.ndarray]]:
    sample = prepared.sample
    dist, cache = forward(params, config, sample.encoded, prepared.sampled,
                          adapted=prepared.adapted, precomputed=prepared.precomputed)
    if prepared.adapted:
        loss, d_prime = bce_loss(dist.omega_prime, sample.labels, clamp)
        d_omega = config.alpha * d_prime
        dlogits = cache.omegas * (d_omega - d_omega @ cache.omegas)
        dres = ((1.0 - config.alpha) * cache.omega_residual
                * (1.0 - cache.omega_residual) * d_prime)
        return loss, backward(params, config, cache, dlogits, dres)
    if sample.label is None:
        raise ValidationError("labels", "sample carries no supervision")
    loss, dlogits = ce_loss(cache.logits, sample.label)
    return loss, backward(params, config, cache, dlogits)


def _pad_rows(arrays: Sequence[np.ndarray], rows: int) -> np.ndarray:
    """Stack [L_i, d] arrays into [B, rows, d], zero-filling short ones."""
    out = np.zeros((len(arrays), rows, arrays[0].shape[1]))
    for i, arr in enumerate(arrays):
        out[i, : arr.shape[0]] = arr
    return out


def _split_heads_stacked(x: np.ndarray, heads: int) -> np.ndarray:
    b, length, width = x.shape
    return x.reshape(b, length, heads, width // heads).transpose(0, 2, 1, 3)


def _merge_heads_stacked(x: np.ndarray) -> np.ndarray:
    b, heads, length, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, length, heads * dh)


def _sum_bl(x: np.ndarray, d: np.ndarray) -> np.ndarray:
    """sum_b x_b^T d_b for stacked [B, L, i] x and [B, L, j] d."""
    return np.tensordot(x, d, axes=([0, 1], [0, 1]))


def stacked_ce_grads(params: dict, config: AlignConfig,
                     batch: Sequence[PreparedSample],
                     ) -> tuple[float, dict[str, np.ndarray]]:
    """Summed CE loss and mean gradients for one micro-batch, stacked.

    Candidate rows are zero-padded to the longest scene in the batch;
    padded rows get zero logit gradients, so they contribute nothing to
    any parameter gradient.  All samples in the batch must share a cloud
    size.  Gradients match the per-sample path up to float summation
    order.
    """
    b = len(batch)
    lens = [prep.sample.encoded.shape[0] for prep in batch]
    l_pad = max(lens)
    if l_pad > config.l_max:
        raise ValidationError("candidates", f"{l_pad} candidates exceed l_max={config.l_max}")
    enc = _pad_rows([prep.sample.encoded for prep in batch], l_pad)
    pe = np.stack([prep.precomputed["pe"] for prep in batch])
    fs = np.stack([prep.precomputed["fs"] for prep in batch])

    # encoders
    a1q = enc @ params["mlp1.w0"] + params["mlp1.b0"]
    h1q = np.maximum(a1q, 0.0)
    q_in = h1q @ params["mlp1.w1"] + params["mlp1.b1"]
    a1k = pe @ params["mlp2.w0"] + params["mlp2.b0"]
    h1k = np.maximum(a1k, 0.0)
    k_pre = h1k @ params["mlp2.w1"] + params["mlp2.b1"]
    v_pre = fs @ params["adapter.w"] + params["adapter.b"]
    if config.use_rope:
        cos = np.stack([prep.precomputed["cos"] for prep in batch])
        sin = np.stack([prep.precomputed["sin"] for prep in batch])
        k_in = rope_apply(k_pre, cos, sin)
        v_in = rope_apply(v_pre, cos, sin)
    else:
        k_in = k_pre
        v_in = v_pre

    # attention
    qp = q_in @ params["attn.wq"] + params["attn.bq"]
    kp = k_in @ params["attn.wk"] + params["attn.bk"]
    vp = v_in @ params["attn.wv"] + params["attn.bv"]
    qh = _split_heads_stacked(qp, config.heads)
    kh = _split_heads_stacked(kp, config.heads)
    vh = _split_heads_stacked(vp, config.heads)
    scale = config.scale
    scores = scale * (qh @ kh.swapaxes(-1, -2))
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    heads_out = _merge_heads_stacked(attn @ vh)
    fusion = heads_out @ params["attn.wo"] + params["attn.bo"]
    require_finite("attention", fusion)

    # decoder head
    a1d = fusion @ params["decoder.w0"] + params["decoder.b0"]
    h1d = np.maximum(a1d, 0.0)
    a2d = h1d @ params["decoder.w1"] + params["decoder.b1"]
    h2d = np.maximum(a2d, 0.0)
    logits = (h2d @ params["decoder.w2"] + params["decoder.b2"][None, None, :])[..., 0]
    require_finite("decoder", logits)

    total = 0.0
    dlogits = np.zeros_like(logits)
    for i, prep in enumerate(batch):
        if prep.sample.label is None:
            raise ValidationError("labels", "sample carries no supervision")
        loss, grad = ce_loss(logits[i, : lens[i]], prep.sample.label)
        total += loss
        dlogits[i, : lens[i]] = grad / b

    grads: dict[str, np.ndarray] = {}
    for suffix in ("w0", "b0", "w1", "b1", "w2", "b2"):
        grads[f"residual.{suffix}"] = np.zeros_like(params[f"residual.{suffix}"])
    grads["decoder.w2"] = _sum_bl(h2d, dlogits[..., None])
    grads["decoder.b2"] = np.array([dlogits.sum()])
    dh2 = dlogits[..., None] * params["decoder.w2"][:, 0]
    da2 = dh2 * (a2d > 0)
    grads["decoder.w1"] = _sum_bl(h1d, da2)
    grads["decoder.b1"] = da2.sum(axis=(0, 1))
    dh1 = da2 @ params["decoder.w1"].T
    da1 = dh1 * (a1d > 0)
    grads["decoder.w0"] = _sum_bl(fusion, da1)
    grads["decoder.b0"] = da1.sum(axis=(0, 1))
    dfusion = da1 @ params["decoder.w0"].T

    grads["attn.wo"] = _sum_bl(heads_out, dfusion)
    grads["attn.bo"] = dfusion.sum(axis=(0, 1))
    d_heads = _split_heads_stacked(dfusion @ params["attn.wo"].T, config.heads)
    d_attn = d_heads @ vh.swapaxes(-1, -2)
    dvh = attn.swapaxes(-1, -2) @ d_heads
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
    dqh = scale * (d_scores @ kh)
    dkh = scale * (d_scores.swapaxes(-1, -2) @ qh)

    dqp = _merge_heads_stacked(dqh)
    dkp = _merge_heads_stacked(dkh)
    dvp = _merge_heads_stacked(dvh)
    grads["attn.wq"] = _sum_bl(q_in, dqp)
    grads["attn.bq"] = dqp.sum(axis=(0, 1))
    grads["attn.wk"] = _sum_bl(k_in, dkp)
    grads["attn.bk"] = dkp.sum(axis=(0, 1))
    grads["attn.wv"] = _sum_bl(v_in, dvp)
    grads["attn.bv"] = dvp.sum(axis=(0, 1))

    dq_in = dqp @ params["attn.wq"].T
    dk_in = dkp @ params["attn.wk"].T
    dv_in = dvp @ params["attn.wv"].T
    if config.use_rope:
        dk_pre = rope_apply(dk_in, cos, sin, inverse=True)
        dv_pre = rope_apply(dv_in, cos, sin, inverse=True)
    else:
        dk_pre = dk_in
        dv_pre = dv_in

    grads["adapter.w"] = _sum_bl(fs, dv_pre)
    grads["adapter.b"] = dv_pre.sum(axis=(0, 1))
    grads["mlp2.w1"] = _sum_bl(h1k, dk_pre)
    grads["mlp2.b1"] = dk_pre.sum(axis=(0, 1))
    dh1k = dk_pre @ params["mlp2.w1"].T
    da1k = dh1k * (a1k > 0)
    grads["mlp2.w0"] = _sum_bl(pe, da1k)
    grads["mlp2.b0"] = da1k.sum(axis=(0, 1))
    grads["mlp1.w1"] = _sum_bl(h1q, dq_in)
    grads["mlp1.b1"] = dq_in.sum(axis=(0, 1))
    dh1q = dq_in @ params["mlp1.w1"].T
    da1q = dh1q * (a1q > 0)
    grads["mlp1.w0"] = _sum_bl(enc, da1q)
    grads["mlp1.b0"] = da1q.sum(axis=(0, 1))
    return total, grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def like(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()})


def adam_step(state: AdamState, params: dict, grads: dict, lr: float,
              betas: tuple[float, float], eps: float) -> None:
    b1, b2 = betas
    state.t += 1
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, grad in grads.items():
        state.m[name] = b1 * state.m[name] + (1 - b1) * grad
        state.v[name] = b2 * state.v[name] + (1 - b2) * grad * grad
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _apply_freeze(grads: dict, freeze: Iterable[str]) -> None:
    for name in freeze:
        grads[name] = np.zeros_like(grads[name])


def resolve_freeze(params: dict, freeze: Iterable[str]) -> set[str]:
    """Expand prefixes ("residual" or "residual.*") to full parameter names."""
    frozen: set[str] = set()
    for spec in freeze:
        prefix = spec[:-2] if spec.endswith(".*") else spec
        hits = [name for name in params if name == spec or name.startswith(prefix + ".")]
        if not hits:
            raise ValidationError("freeze", f"no parameters match {spec!r}")
        frozen.update(hits)
    return frozen


def train_policy(params: dict, config: AlignConfig, samples: Sequence[ScoreSample],
                 train_config: TrainConfig, freeze: Iterable[str] = (),
                 epoch_callback: Callable[[int, float], None] | None = None,
                 ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Run the imitation/adaptation loop; returns (new params, loss curve)."""
    if not samples:
        raise ValidationError("samples", "no training samples")
    params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    frozen = resolve_freeze(params, freeze)
    dtype = train_config.compute_dtype
    prepared = prepare_samples(samples, config, dtype)
    cloud_sizes = {prep.sampled.points.shape[0] for prep in prepared}
    stack = (train_config.stacked and len(cloud_sizes) == 1
             and not any(prep.adapted for prep in prepared))
    halved = dtype == np.float32

    def working() -> dict[str, np.ndarray]:
        if not halved:
            return params
        return {k: v.astype(np.float32) for k, v in params.items()}

    state = AdamState.like(params)
    work = working()
    curve = np.zeros(train_config.epochs)
    for epoch in range(train_config.epochs):
        order = np.random.default_rng(
            stable_seed(train_config.seed, "shuffle", epoch)).permutation(len(prepared))
        lr = train_config.epoch_lr(config, epoch)
        epoch_loss = 0.0
        if stack:
            for start in range(0, len(order), train_config.micro_batch):
                chunk = [prepared[idx] for idx in order[start:start + train_config.micro_batch]]
                loss_sum, grads = stacked_ce_grads(work, config, chunk)
                epoch_loss += loss_sum
                _apply_freeze(grads, frozen)
                adam_step(state, params, grads, lr, train_config.betas,
                          train_config.adam_eps)
                work = working()
        else:
            accum: dict[str, np.ndarray] | None = None
            accum_count = 0
            for pos, idx in enumerate(order):
                loss, grads = loss_and_grads(work, config, prepared[idx],
                                             train_config.clamp)
                epoch_loss += loss
                if accum is None:
                    accum = grads
                else:
                    for name in accum:
                        accum[name] += grads[name]
                accum_count += 1
                if accum_count == train_config.micro_batch or pos == len(order) - 1:
                    for name in accum:
                        accum[name] /= accum_count
                    _apply_freeze(accum, frozen)
                    adam_step(state, params, accum, lr, train_config.betas,
                              train_config.adam_eps)
                    work = working()
                    accum = None
                    accum_count = 0
        curve[epoch] = epoch_loss / len(prepared)
        if not np.isfinite(curve[epoch]):
            raise NumericError("train", f"loss diverged at epoch {epoch}")
        if epoch_callback is not None:
            epoch_callback(epoch, curve[epoch])
    return params, curve


def adapt_policy(params: dict, config: AlignConfig, samples: Sequence[ScoreSample],
                 train_config: TrainConfig, full_finetune: bool = False,
                 ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Fit the residual decoder on relation-feasibility samples.

    By default everything except the residual decoder is frozen, so the
    fused vectors are constant and get precomputed once.  With
    ``full_finetune`` all parameters move (the baseline the residual
    route is compared against).
    """
    for sample in samples:
        if sample.labels is None:
            raise ValidationError("labels", "adaptation samples need multi-labels")
    if full_finetune:
        return train_policy(params, config, samples, train_config)
    if not samples:
        raise ValidationError("samples", "no adaptation samples")

    params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    prepared = prepare_samples(samples, config)
    frozen_caches = []
    for prep in prepared:
        _, cache = forward(params, config, prep.sample.encoded, prep.sampled,
                           adapted=False, precomputed=prep.precomputed)
        frozen_caches.append((cache.fusion, cache.omegas, prep.sample.labels))

    # Start the residual head from a copy of the trained action decoder:
    # its sigmoid then reproduces the base policy's candidate ordering on
    # unseen scenes, and the binary loss only has to recalibrate it toward
    # every relation-valid candidate instead of learning scoring from
    # scratch off 100 scenes.  The copied output layer is centered and
    # rescaled because cross-entropy logits sit deep in sigmoid saturation,
    # where no gradient would reach the head.
    for layer in ("w0", "b0", "w1", "b1", "w2", "b2"):
        params[f"residual.{layer}"] = params[f"decoder.{layer}"].copy()
    raw_rows = np.vstack([fusion for fusion, _, _ in frozen_caches])
    probe_logits = _decoder(params, "residual", raw_rows)[0]
    spread = max(float(np.std(probe_logits)), 1e-6)
    temper = 2.0 / spread
    params["residual.w2"] = temper * params["residual.w2"]
    params["residual.b2"] = temper * (params["residual.b2"]
                                      - float(np.mean(probe_logits)))

    # The fused rows are dominated by the base policy's scoring direction,
    # which leaves the discriminative directions orders of magnitude
    # smaller.  Training in per-feature standardized coordinates and
    # folding the affine map back afterwards is exactly equivalent at
    # inference but conditions the problem well enough for the head to
    # actually separate valid from invalid candidates.
    pooled = np.vstack([fusion for fusion, _, _ in frozen_caches])
    mu = pooled.mean(axis=0)
    sd = np.maximum(pooled.std(axis=0), 1e-12)
    frozen_caches = [((fusion - mu) / sd, omegas, labels)
                     for fusion, omegas, labels in frozen_caches]
    w0_raw = params["residual.w0"]
    params["residual.b0"] = params["residual.b0"] + mu @ w0_raw
    params["residual.w0"] = sd[:, None] * w0_raw

    res_params = {k: params[k] for k in params if k.startswith("residual.")}
    state = AdamState.like(res_params)
    curve = np.zeros(train_config.epochs)
    for epoch in range(train_config.epochs):
        order = np.random.default_rng(
            stable_seed(train_config.seed, "shuffle", epoch)).permutation(len(prepared))
        lr = train_config.epoch_lr(config, epoch)
        epoch_loss = 0.0
        accum = None
        accum_count = 0
        for pos, idx in enumerate(order):
            fusion, omegas, labels = frozen_caches[idx]
            if train_config.input_noise > 0.0:
                jitter = np.random.default_rng(
                    stable_seed(train_config.seed, "adapt-noise", epoch, int(idx)))
                fusion = fusion + train_config.input_noise * jitter.standard_normal(
                    fusion.shape)
            a1 = fusion @ params["residual.w0"] + params["residual.b0"]
            h1 = np.maximum(a1, 0.0)
            a2 = h1 @ params["residual.w1"] + params["residual.b1"]
            h2 = np.maximum(a2, 0.0)
            res_logits = (h2 @ params["residual.w2"] + params["residual.b2"])[:, 0]
            omega_residual = sigmoid(res_logits)
            omega_prime = blend(omegas, omega_residual, config.alpha)
            loss, d_prime = bce_loss(omega_prime, labels, train_config.clamp)
            dres = (1.0 - config.alpha) * omega_residual * (1 - omega_residual) * d_prime
            grads: dict[str, np.ndarray] = {}
            _decoder_backward(params, "residual", (a1, h1, a2, h2), fusion, dres, grads)
            grads = {k: grads[k] for k in res_params}
            epoch_loss += loss
            if accum is None:
                accum = grads
            else:
                for name in accum:
                    accum[name] += grads[name]
            accum_count += 1
            if accum_count == train_config.micro_batch or pos == len(order) - 1:
                for name in accum:
                    accum[name] /= accum_count
                adam_step(state, params, accum, lr, train_config.betas,
                          train_config.adam_eps)
                if train_config.weight_decay > 0.0:
                    for name in res_params:
                        params[name] -= lr * train_config.weight_decay * params[name]
                accum = None
                accum_count = 0
        curve[epoch] = epoch_loss / len(prepared)
        if not np.isfinite(curve[epoch]):
            raise NumericError("adapt", f"loss diverged at epoch {epoch}")
    w0_std = params["residual.w0"]
    params["residual.b0"] = params["residual.b0"] - (mu / sd) @ w0_std
    params["residual.w0"] = w0_std / sd[:, None]
    return params, curve


def gradcheck(params: dict, config: AlignConfig, sample: ScoreSample,
              h: float = 1e-5) -> tuple[float, dict[str, float]]:
    """Compare analytic gradients against central differences.

    Returns the worst relative error and the per-tensor breakdown.  The
    relative error uses max(|ga| + |gn|, 1e-6) as denominator so unused
    parameters (both sides zero) score zero.  A coordinate whose +-h
    stencil lands in two different piecewise-linear regions (a relu sign
    or probability clamp flips) has no derivative there; such coordinates
    are excluded and counted in the report under "<name>:skipped".
    """
    prepared = prepare_samples([sample], config)[0]

    def region(cache: ForwardCache, omega_prime) -> tuple:
        marks = [cache.mlp1[0] > 0, cache.mlp2[0] > 0,
                 cache.decoder[0] > 0, cache.decoder[2] > 0]
        if prepared.adapted:
            marks.extend([cache.residual[0] > 0, cache.residual[2] > 0,
                          (omega_prime > 1e-12) & (omega_prime < 1 - 1e-12)])
        return tuple(m.tobytes() for m in marks)

    def total_loss() -> tuple[float, tuple]:
        dist, cache = forward(params, config, sample.encoded, prepared.sampled,
                              adapted=prepared.adapted,
                              precomputed=prepared.precomputed)
        if prepared.adapted:
            return bce_loss(dist.omega_prime, sample.labels)[0], \
                region(cache, dist.omega_prime)
        return ce_loss(cache.logits, sample.label)[0], region(cache, None)

    _, analytic = loss_and_grads(params, config, prepared)
    report: dict[str, float] = {}
    worst = 0.0
    for name in sorted(params):
        tensor = params[name]
        ga = analytic[name]
        err = 0.0
        skipped = 0
        flat = tensor.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + h
            lp, region_p = total_loss()
            flat[i] = orig - h
            lm, region_m = total_loss()
            flat[i] = orig
            if region_p != region_m:
                skipped += 1
                continue
            gn = (lp - lm) / (2 * h)
            rel = abs(ga_flat[i] - gn) / max(abs(ga_flat[i]) + abs(gn), 1e-6)
            err = max(err, rel)
        report[name] = err
        if skipped:
            report[f"{name}:skipped"] = float(skipped)
        worst = max(worst, err)
    return worst, report
