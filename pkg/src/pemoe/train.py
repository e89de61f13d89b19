"""Two-stage trainer: contrastive pretraining, hard-negative mining, triplet refinement.

Stage 1 phase A fits each expert head on its own platform subset with a
symmetric in-batch contrastive loss; phase B fits the gate on mixed batches
over fused scores with the experts frozen. Mining then ranks the gallery per
training query and keeps the highest-scoring wrong items. Stage 2 minimizes a
hinge triplet loss over fused scores, updating experts and gate jointly and
re-mining the negative set after every epoch so pressure stays on the
currently hardest items.

Gradients are computed analytically in float64 by reverse-mode accumulation
through the affine layers, ReLU, L2 normalization, cosine scores, gate
softmax, and fusion. `finite_diff_check` compares them against central finite
differences. Updates use AdamW with decoupled weight decay.

Batch permutations draw from per-purpose PRNG streams derived from the config
seed, so training is bit-reproducible for a fixed config.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .corpus import PLATFORMS, Corpus, Platform
from .model import (
    GATE_PARAM_NAMES,
    DegenerateEmbeddingError,
    DimensionMismatchError,
    ExpertHead,
    PeMoeModel,
    expert_param_names,
    init_model,
    named_params,
    normalize_rows,
    relu,
    score_matrix,
    softmax_rows,
)
from .rng import derive_rng


class ConfigError(ValueError):
    """A configuration value violates its constraints."""


class TrainError(RuntimeError):
    """Numeric failure during training (non-finite loss or gradient)."""


class MiningError(ValueError):
    """Hard-negative mining cannot satisfy its preconditions."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Optimizer and schedule hyperparameters.

    Desk-scale defaults; epochs of 0 are allowed and make the corresponding
    stage a no-op.
    """

    stage1_epochs: int = 30
    stage2_epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    temperature: float = 0.05
    triplet_margin: float = 0.2
    negatives_per_query: int = 4
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.stage1_epochs < 0:
            raise ConfigError(f"stage1_epochs must be >= 0, got {self.stage1_epochs}")
        if self.stage2_epochs < 0:
            raise ConfigError(f"stage2_epochs must be >= 0, got {self.stage2_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not self.triplet_margin > 0:
            raise ConfigError(f"triplet_margin must be positive, got {self.triplet_margin}")
        if self.negatives_per_query < 1:
            raise ConfigError(f"negatives_per_query must be positive, got {self.negatives_per_query}")
        return self


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def info_nce_loss(scores: np.ndarray, tau: float) -> float:
    """Symmetric in-batch contrastive loss over a square score matrix.

    Diagonal entries are the positive pairs. Averages the row-wise and
    column-wise cross-entropies of scores/tau, each computed with
    max-subtraction for stability. A 1x1 matrix gives exactly 0.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionMismatchError(f"score matrix must be square, got shape {s.shape}")
    b = s.shape[0]
    a = s / tau
    diag = np.diagonal(a)
    lse_rows = _logsumexp(a, axis=1)
    lse_cols = _logsumexp(a, axis=0)
    loss_rows = float(np.mean(lse_rows - diag))
    loss_cols = float(np.mean(lse_cols - diag))
    return 0.5 * (loss_rows + loss_cols) if b > 1 else 0.0


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis)
    return m + np.log(np.exp(a - np.expand_dims(m, axis)).sum(axis=axis))


def _info_nce_grad(scores: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Loss and dLoss/dScores for the symmetric in-batch objective."""
    loss = info_nce_loss(scores, tau)
    b = scores.shape[0]
    if b == 1:
        return loss, np.zeros_like(scores)
    a = scores / tau
    p_rows = softmax_rows(a)
    p_cols = softmax_rows(a.T).T
    eye = np.eye(b)
    d_scores = ((p_rows - eye) + (p_cols - eye)) / (2.0 * b * tau)
    return loss, d_scores


def triplet_loss(s_pos: float, s_neg: float, margin: float) -> float:
    """Hinge penalty max(0, margin - s_pos + s_neg)."""
    if not margin > 0:
        raise ValueError(f"margin must be positive, got {margin}")
    return max(0.0, margin - s_pos + s_neg)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

def _batch_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DimensionMismatchError(f"{name} must be a non-empty 2-d array, got shape {arr.shape}")
    return arr


@dataclass
class ContrastiveBatch:
    """Aligned (query text, positive image) shared embeddings, one pair per row."""

    texts: np.ndarray
    images: np.ndarray

    def __post_init__(self):
        self.texts = _batch_matrix(self.texts, "texts")
        self.images = _batch_matrix(self.images, "images")
        if self.texts.shape[0] != self.images.shape[0]:
            raise DimensionMismatchError(
                f"texts and images disagree on batch size: {self.texts.shape[0]} vs {self.images.shape[0]}"
            )

    @property
    def size(self) -> int:
        return self.texts.shape[0]


@dataclass
class TripletBatch:
    """(query text, positive image, negative image) rows plus the hinge margin."""

    texts: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    margin: float = 0.2

    def __post_init__(self):
        self.texts = _batch_matrix(self.texts, "texts")
        self.positives = _batch_matrix(self.positives, "positives")
        self.negatives = _batch_matrix(self.negatives, "negatives")
        if not (self.texts.shape[0] == self.positives.shape[0] == self.negatives.shape[0]):
            raise DimensionMismatchError("triplet batch arrays disagree on batch size")
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")

    @property
    def size(self) -> int:
        return self.texts.shape[0]


# ---------------------------------------------------------------------------
# Forward / backward building blocks
# ---------------------------------------------------------------------------

class _TextCache:
    __slots__ = ("T", "z1", "a1", "u", "t_hat", "norms")


def _expert_text_fwd(head: ExpertHead, T: np.ndarray) -> _TextCache:
    c = _TextCache()
    c.T = T
    c.z1 = T @ head.adapter1.W.T + head.adapter1.b
    c.a1 = relu(c.z1)
    c.u = c.a1 @ head.adapter2.W.T + head.adapter2.b
    c.t_hat, c.norms = normalize_rows(c.u)
    return c


class _ImageCache:
    __slots__ = ("V", "p", "v_hat", "norms")


def _expert_image_fwd(head: ExpertHead, V: np.ndarray) -> _ImageCache:
    c = _ImageCache()
    c.V = V
    c.p = V @ head.projection.W.T + head.projection.b
    c.v_hat, c.norms = normalize_rows(c.p)
    return c


def _normalize_bwd(d_hat: np.ndarray, hat: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d/dx of x/||x||: remove the component of the upstream gradient along
    # the unit vector, then rescale by the norm.
    return (d_hat - (d_hat * hat).sum(axis=1, keepdims=True) * hat) / norms[:, None]


def _expert_text_bwd(head: ExpertHead, c: _TextCache, d_t_hat: np.ndarray, grads: dict, prefix: str) -> None:
    du = _normalize_bwd(d_t_hat, c.t_hat, c.norms)
    grads[f"{prefix}.adapter2.b"] += du.sum(axis=0)
    grads[f"{prefix}.adapter2.W"] += du.T @ c.a1
    da1 = du @ head.adapter2.W
    dz1 = da1 * (c.z1 > 0)
    grads[f"{prefix}.adapter1.b"] += dz1.sum(axis=0)
    grads[f"{prefix}.adapter1.W"] += dz1.T @ c.T


def _expert_image_bwd(c: _ImageCache, d_v_hat: np.ndarray, grads: dict, prefix: str) -> None:
    dp = _normalize_bwd(d_v_hat, c.v_hat, c.norms)
    grads[f"{prefix}.projection.b"] += dp.sum(axis=0)
    grads[f"{prefix}.projection.W"] += dp.T @ c.V


class _GateCache:
    __slots__ = ("T", "z", "h", "weights")


def _gate_fwd(model: PeMoeModel, T: np.ndarray) -> _GateCache:
    c = _GateCache()
    c.T = T
    c.z = T @ model.gate.layer1.W.T + model.gate.layer1.b
    c.h = relu(c.z)
    c.weights = softmax_rows(c.h @ model.gate.layer2.W.T + model.gate.layer2.b)
    return c


def _gate_bwd(model: PeMoeModel, c: _GateCache, d_weights: np.ndarray, grads: dict) -> None:
    g = c.weights
    d_logits = g * (d_weights - (d_weights * g).sum(axis=1, keepdims=True))
    grads["gate.layer2.b"] += d_logits.sum(axis=0)
    grads["gate.layer2.W"] += d_logits.T @ c.h
    dh = d_logits @ model.gate.layer2.W
    dz = dh * (c.z > 0)
    grads["gate.layer1.b"] += dz.sum(axis=0)
    grads["gate.layer1.W"] += dz.T @ c.T


def _zero_grads(model: PeMoeModel) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in named_params(model)}


def _check_batch_dims(model: PeMoeModel, batch) -> None:
    if batch.texts.shape[1] != model.d_t:
        raise DimensionMismatchError(f"batch texts have dim {batch.texts.shape[1]}, model expects {model.d_t}")
    images = [batch.images] if isinstance(batch, ContrastiveBatch) else [batch.positives, batch.negatives]
    for arr in images:
        if arr.shape[1] != model.d_v:
            raise DimensionMismatchError(f"batch images have dim {arr.shape[1]}, model expects {model.d_v}")


# ---------------------------------------------------------------------------
# Fused losses: forward and gradients
# ---------------------------------------------------------------------------

LOSS_INFONCE = "infonce"
LOSS_TRIPLET = "triplet"


def forward_loss(model: PeMoeModel, batch, loss_kind: str) -> float:
    """Loss of the fused model on a batch, forward pass only."""
    _check_batch_dims(model, batch)
    gate_c = _gate_fwd(model, batch.texts)
    heads = [model.experts[p] for p in PLATFORMS]
    if loss_kind == LOSS_INFONCE:
        if not isinstance(batch, ContrastiveBatch):
            raise TypeError("infonce loss requires a ContrastiveBatch")
        s = np.zeros((batch.size, batch.size))
        for k, head in enumerate(heads):
            t_hat = _expert_text_fwd(head, batch.texts).t_hat
            v_hat = _expert_image_fwd(head, batch.images).v_hat
            s += gate_c.weights[:, k : k + 1] * (t_hat @ v_hat.T)
        return info_nce_loss(s, model.temperature)
    if loss_kind == LOSS_TRIPLET:
        if not isinstance(batch, TripletBatch):
            raise TypeError("triplet loss requires a TripletBatch")
        s_pos = np.zeros(batch.size)
        s_neg = np.zeros(batch.size)
        for k, head in enumerate(heads):
            t_hat = _expert_text_fwd(head, batch.texts).t_hat
            vp = _expert_image_fwd(head, batch.positives).v_hat
            vn = _expert_image_fwd(head, batch.negatives).v_hat
            s_pos += gate_c.weights[:, k] * (t_hat * vp).sum(axis=1)
            s_neg += gate_c.weights[:, k] * (t_hat * vn).sum(axis=1)
        return float(np.mean(np.maximum(0.0, batch.margin - s_pos + s_neg)))
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def compute_gradients(model: PeMoeModel, batch, loss_kind: str) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact analytic gradients for every parameter tensor.

    Reverse-mode accumulation through adapters, projections, L2
    normalization, cosine scores, gate softmax, and fusion. Callers decide
    which subset of the returned gradients to apply.
    """
    _check_batch_dims(model, batch)
    grads = _zero_grads(model)
    gate_c = _gate_fwd(model, batch.texts)
    g = gate_c.weights
    heads = [(model.experts[p], f"expert.{p.value}") for p in PLATFORMS]

    if loss_kind == LOSS_INFONCE:
        if not isinstance(batch, ContrastiveBatch):
            raise TypeError("infonce loss requires a ContrastiveBatch")
        text_caches, image_caches, per_expert = [], [], []
        s = np.zeros((batch.size, batch.size))
        for k, (head, _) in enumerate(heads):
            tc = _expert_text_fwd(head, batch.texts)
            ic = _expert_image_fwd(head, batch.images)
            sk = tc.t_hat @ ic.v_hat.T
            text_caches.append(tc)
            image_caches.append(ic)
            per_expert.append(sk)
            s += g[:, k : k + 1] * sk
        loss, ds = _info_nce_grad(s, model.temperature)
        _require_finite_loss(loss)
        d_gate = np.zeros_like(g)
        for k, (head, prefix) in enumerate(heads):
            d_gate[:, k] = (ds * per_expert[k]).sum(axis=1)
            dsk = g[:, k : k + 1] * ds
            _expert_text_bwd(head, text_caches[k], dsk @ image_caches[k].v_hat, grads, prefix)
            _expert_image_bwd(image_caches[k], dsk.T @ text_caches[k].t_hat, grads, prefix)
        _gate_bwd(model, gate_c, d_gate, grads)
        return loss, grads

    if loss_kind == LOSS_TRIPLET:
        if not isinstance(batch, TripletBatch):
            raise TypeError("triplet loss requires a TripletBatch")
        b = batch.size
        text_caches, pos_caches, neg_caches, sp, sn = [], [], [], [], []
        s_pos = np.zeros(b)
        s_neg = np.zeros(b)
        for k, (head, _) in enumerate(heads):
            tc = _expert_text_fwd(head, batch.texts)
            pc = _expert_image_fwd(head, batch.positives)
            nc = _expert_image_fwd(head, batch.negatives)
            sp_k = (tc.t_hat * pc.v_hat).sum(axis=1)
            sn_k = (tc.t_hat * nc.v_hat).sum(axis=1)
            text_caches.append(tc)
            pos_caches.append(pc)
            neg_caches.append(nc)
            sp.append(sp_k)
            sn.append(sn_k)
            s_pos += g[:, k] * sp_k
            s_neg += g[:, k] * sn_k
        violation = batch.margin - s_pos + s_neg
        loss = float(np.mean(np.maximum(0.0, violation)))
        _require_finite_loss(loss)
        # Hinge subgradient: active strictly above zero, zero at the kink.
        active = (violation > 0).astype(np.float64)
        d_sp = -active / b
        d_sn = active / b
        d_gate = np.zeros_like(g)
        for k, (head, prefix) in enumerate(heads):
            d_gate[:, k] = d_sp * sp[k] + d_sn * sn[k]
            gk = g[:, k : k + 1]
            d_t_hat = gk * (d_sp[:, None] * pos_caches[k].v_hat + d_sn[:, None] * neg_caches[k].v_hat)
            _expert_text_bwd(head, text_caches[k], d_t_hat, grads, prefix)
            _expert_image_bwd(pos_caches[k], gk * d_sp[:, None] * text_caches[k].t_hat, grads, prefix)
            _expert_image_bwd(neg_caches[k], gk * d_sn[:, None] * text_caches[k].t_hat, grads, prefix)
        _gate_bwd(model, gate_c, d_gate, grads)
        return loss, grads

    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _require_finite_loss(loss: float) -> None:
    if not np.isfinite(loss):
        raise TrainError(f"loss is non-finite ({loss})")


def expert_infonce_gradients(
    head: ExpertHead, texts: np.ndarray, images: np.ndarray, tau: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Phase-A objective: contrastive loss of a single expert, no gate."""
    prefix = f"expert.{head.platform.value}"
    grads = {name: None for name in expert_param_names(head.platform)}
    for name in grads:
        grads[name] = np.zeros_like(_param_by_name_expert(head, name))
    tc = _expert_text_fwd(head, texts)
    ic = _expert_image_fwd(head, images)
    s = tc.t_hat @ ic.v_hat.T
    loss, ds = _info_nce_grad(s, tau)
    _require_finite_loss(loss)
    _expert_text_bwd(head, tc, ds @ ic.v_hat, grads, prefix)
    _expert_image_bwd(ic, ds.T @ tc.t_hat, grads, prefix)
    return loss, grads


def _param_by_name_expert(head: ExpertHead, name: str) -> np.ndarray:
    leaf = name.split(".", 2)[2]
    attr, wb = leaf.split(".")
    return getattr(getattr(head, attr), wb)


# ---------------------------------------------------------------------------
# Finite-difference validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_flat_index: int
    checked: int
    per_param: dict[str, float]


def finite_diff_check(
    model: PeMoeModel, batch, loss_kind: str, eps: float, *, sample: int | None = None, seed: int = 0
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Perturbs every parameter scalar by +/-eps (or a seeded random subsample
    of at least `sample` scalars when the model is larger) and compares
    (f(+eps)-f(-eps))/(2 eps) to the analytic value using
    |a-b| / max(1e-8, |a|+|b|).
    """
    return finite_diff_report(model, batch, loss_kind, eps, sample=sample, seed=seed).max_rel_error


def finite_diff_report(
    model: PeMoeModel, batch, loss_kind: str, eps: float, *, sample: int | None = None, seed: int = 0
) -> GradCheckReport:
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    _, analytic = compute_gradients(model, batch, loss_kind)
    params = named_params(model)
    coords = [(name, arr, i) for name, arr in params for i in range(arr.size)]
    if sample is not None and sample < len(coords):
        if sample < 1:
            raise ValueError(f"sample must be positive, got {sample}")
        rng = derive_rng(seed, "gradcheck")
        picked = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[i] for i in np.sort(picked)]

    max_err = 0.0
    worst = (params[0][0], 0)
    per_param: dict[str, float] = {name: 0.0 for name, _ in params}
    for name, arr, i in coords:
        orig = arr.flat[i]
        arr.flat[i] = orig + eps
        f_plus = forward_loss(model, batch, loss_kind)
        arr.flat[i] = orig - eps
        f_minus = forward_loss(model, batch, loss_kind)
        arr.flat[i] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[name].flat[i]
        rel = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
        if rel > per_param[name]:
            per_param[name] = rel
        if rel > max_err:
            max_err = rel
            worst = (name, i)
    return GradCheckReport(max_err, worst[0], worst[1], len(coords), per_param)


#: Pre-activations closer to a ReLU kink than this are resampled before a
#: finite-difference run; the bound grows with eps so the +/-eps window can
#: never straddle the kink.
_KINK_BASE = 1e-5


def _kink_tolerance(eps: float, max_abs_input: float) -> float:
    return max(_KINK_BASE, 4.0 * eps * (1.0 + max_abs_input))


def make_gradcheck_instance(
    seed: int,
    loss_kind: str,
    eps: float,
    *,
    batch_size: int = 8,
    d_t: int = 12,
    d_v: int = 10,
    d_e: int = 8,
    h_g: int = 8,
    h_e: int = 10,
    temperature: float = 0.2,
    margin: float = 0.2,
    grad_floor: float = 1e-5,
    bias_shift: float = 0.0,
) -> tuple[PeMoeModel, ContrastiveBatch | TripletBatch]:
    """Seeded random (model, batch) suitable for finite-difference checks.

    Draws are resampled until the instance is numerically benign: every ReLU
    pre-activation sits outside the eps-scaled kink window, norms are bounded
    away from zero, every hinge term is clearly active or inactive (with at
    least one active), and every analytic gradient entry is either exactly
    zero (dead unit or dead hinge, where the finite difference is exactly
    zero too) or at least `grad_floor` in magnitude.

    `bias_shift` > 0 pushes all ReLU pre-activations positive, giving an
    instance with no active-boundary behavior at all.
    """
    if loss_kind not in (LOSS_INFONCE, LOSS_TRIPLET):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    for attempt in range(1000):
        rng = derive_rng(seed, "gradcheck", attempt)
        model = init_model(d_t, d_v, d_e, h_g, h_e, seed=int(rng.integers(2**31)), temperature=temperature)
        if bias_shift:
            for name, arr in named_params(model):
                if name.endswith(("adapter1.b", "layer1.b")):
                    arr += bias_shift
        texts = rng.normal(size=(batch_size, d_t))
        if loss_kind == LOSS_INFONCE:
            batch = ContrastiveBatch(texts, rng.normal(size=(batch_size, d_v)))
        else:
            batch = TripletBatch(
                texts,
                rng.normal(size=(batch_size, d_v)),
                rng.normal(size=(batch_size, d_v)),
                margin=margin,
            )
        if _instance_ok(model, batch, loss_kind, eps, grad_floor):
            return model, batch
    raise TrainError(f"could not build a benign gradient-check instance for seed {seed}")


def _instance_ok(model: PeMoeModel, batch, loss_kind: str, eps: float, grad_floor: float) -> bool:
    max_in = float(np.max(np.abs(batch.texts)))
    kink = _kink_tolerance(eps, max_in)
    gate_c = _gate_fwd(model, batch.texts)
    if np.min(np.abs(gate_c.z)) < kink:
        return False
    images = [batch.images] if isinstance(batch, ContrastiveBatch) else [batch.positives, batch.negatives]
    try:
        for p in PLATFORMS:
            head = model.experts[p]
            tc = _expert_text_fwd(head, batch.texts)
            if np.min(np.abs(tc.z1)) < kink or np.min(tc.norms) < 1e-2:
                return False
            for v in images:
                if np.min(_expert_image_fwd(head, v).norms) < 1e-2:
                    return False
    except DegenerateEmbeddingError:
        # A draw with every ReLU unit dead for some row; resample it.
        return False
    if loss_kind == LOSS_TRIPLET:
        s_pos = np.zeros(batch.size)
        s_neg = np.zeros(batch.size)
        for k, p in enumerate(PLATFORMS):
            head = model.experts[p]
            t_hat = _expert_text_fwd(head, batch.texts).t_hat
            s_pos += gate_c.weights[:, k] * (t_hat * _expert_image_fwd(head, batch.positives).v_hat).sum(axis=1)
            s_neg += gate_c.weights[:, k] * (t_hat * _expert_image_fwd(head, batch.negatives).v_hat).sum(axis=1)
        violation = batch.margin - s_pos + s_neg
        # Every hinge term must sit clearly on one side, at least one active.
        if np.min(np.abs(violation)) < max(_KINK_BASE, 50.0 * eps) or not np.any(violation > 0):
            return False
    _, grads = compute_gradients(model, batch, loss_kind)
    for g in grads.values():
        mags = np.abs(g)
        if np.any((mags > 0.0) & (mags < grad_floor)):
            return False
    return True


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def init_adamw_state(params: dict[str, np.ndarray]) -> dict[str, AdamWState]:
    return {name: AdamWState(np.zeros_like(p), np.zeros_like(p)) for name, p in params.items()}


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict[str, AdamWState],
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One AdamW update, in place; decay is decoupled from the moments.

    Weight decay applies uniformly to every tensor passed in, biases
    included.
    """
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise DimensionMismatchError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient in {name}")
        st = state[name]
        st.t += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * (g * g)
        m_hat = st.m / (1.0 - beta1**st.t)
        v_hat = st.v / (1.0 - beta2**st.t)
        theta -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)


# ---------------------------------------------------------------------------
# Train log
# ---------------------------------------------------------------------------

_PHASES = ("A", "B", "stage2", "val")


@dataclass(frozen=True)
class LogRecord:
    epoch: int
    phase: str
    loss: float
    platform: str | None = None  # kept in memory only; the file format has no platform field

    def __post_init__(self):
        if self.phase not in _PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)

    def append(self, record: LogRecord) -> None:
        self.records.append(record)

    def extend(self, other: "TrainLog") -> None:
        self.records.extend(other.records)

    def lines(self) -> list[str]:
        return [f"epoch={r.epoch} phase={r.phase} loss={r.loss!r}" for r in self.records]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")

    def phase_losses(self, phase: str, platform: str | None = None) -> list[float]:
        return [
            r.loss
            for r in self.records
            if r.phase == phase and (platform is None or r.platform == platform)
        ]


def parse_train_log(text: str) -> TrainLog:
    log = TrainLog()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
        try:
            log.append(LogRecord(int(fields["epoch"]), fields["phase"], float(fields["loss"])))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"train log line {lineno}: cannot parse {raw!r} ({exc})") from None
    return log


def load_train_log(path: str | Path) -> TrainLog:
    return parse_train_log(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

class AccessLog:
    """Records which query ids each expert read during phase A."""

    def __init__(self):
        self.reads: list[tuple[Platform, int]] = []

    def record(self, platform: Platform, query_ids) -> None:
        self.reads.extend((platform, int(q)) for q in query_ids)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int):
    """Consecutive slices of a fresh permutation; chunks below min_size dropped."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        chunk = perm[start : start + batch_size]
        if chunk.size >= min_size:
            yield chunk


def _grouped_batches(group_ids: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Random batches that never repeat a group within one batch.

    In-batch contrastive losses treat every other pair in the batch as a
    negative, so two queries of the same gallery item would push identical
    embeddings apart (false negatives). Batches are built round-robin: each
    round takes at most one query per group, shuffles the pool, and slices
    it into chunks of at most batch_size. Chunks below 2 carry no
    contrastive signal and are dropped.
    """
    by_group: dict[int, list[int]] = {}
    for index, g in enumerate(np.asarray(group_ids)):
        by_group.setdefault(int(g), []).append(index)
    members = list(by_group.values())
    if not members:
        return
    for queue in members:
        rng.shuffle(queue)
    depth = max(len(queue) for queue in members)
    for round_no in range(depth):
        pool = np.array([queue[round_no] for queue in members if len(queue) > round_no])
        rng.shuffle(pool)
        for start in range(0, len(pool), batch_size):
            chunk = pool[start : start + batch_size]
            if chunk.size >= 2:
                yield chunk


def train_expert_contrastive(
    head: ExpertHead,
    texts: np.ndarray,
    images: np.ndarray,
    ids: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    on_batch: Callable | None = None,
    group_ids: np.ndarray | None = None,
) -> list[float]:
    """Fit one expert head on aligned (text, positive image) pairs.

    Runs config.stage1_epochs epochs of in-batch contrastive training and
    returns per-epoch mean losses. ``group_ids`` (normally the positive item
    id of each query) keeps same-target queries out of one batch, where they
    would act as false negatives; without it every query is its own group
    and batching is a plain permutation. Chunks with fewer than 2 pairs
    carry no contrastive signal and are dropped.
    """
    params = {name: _param_by_name_expert(head, name) for name in expert_param_names(head.platform)}
    state = init_adamw_state(params)
    groups = np.asarray(ids) if group_ids is None else np.asarray(group_ids)
    epoch_losses = []
    for _ in range(config.stage1_epochs):
        losses = []
        for chunk in _grouped_batches(groups, config.batch_size, rng):
            if on_batch is not None:
                on_batch(ids[chunk])
            loss, grads = expert_infonce_gradients(head, texts[chunk], images[chunk], config.temperature)
            losses.append(loss)
            if loss == 0.0:
                continue
            adamw_step(params, grads, state, config.learning_rate, config.weight_decay)
        epoch_losses.append(float(np.mean(losses)) if losses else 0.0)
    return epoch_losses


def train_stage1(
    model: PeMoeModel, corpus: Corpus, config: TrainConfig, access_log: AccessLog | None = None
) -> TrainLog:
    """Phase A: experts on their platform subsets. Phase B: gate on fused scores.

    Phase B freezes expert parameters; only the gate receives updates. The
    model is updated in place. Platform subsets with fewer than 2 queries are
    skipped with a warning (no in-batch contrastive signal).
    """
    config.validate()
    log = TrainLog()
    query_ids, texts = corpus.query_matrix()
    positives = corpus.positives_matrix()
    positive_ids = np.array([q.positive_item_id for q in corpus.queries], dtype=np.int64)
    platforms = np.array([q.platform.value for q in corpus.queries])

    for index, platform in enumerate(PLATFORMS):
        subset = np.flatnonzero(platforms == platform.value)
        if subset.size < 2:
            warnings.warn(
                f"platform {platform.value!r} has {subset.size} training queries; expert left at initialization",
                stacklevel=2,
            )
            continue
        rng = derive_rng(config.seed, "stage1", index)
        on_batch = None
        if access_log is not None:
            on_batch = lambda ids, p=platform: access_log.record(p, ids)  # noqa: E731
        losses = train_expert_contrastive(
            model.experts[platform],
            texts[subset],
            positives[subset],
            query_ids[subset],
            config,
            rng,
            on_batch=on_batch,
            group_ids=positive_ids[subset],
        )
        for epoch, loss in enumerate(losses, start=1):
            log.append(LogRecord(epoch, "A", loss, platform=platform.value))

    gate_params = {name: arr for name, arr in named_params(model) if name in GATE_PARAM_NAMES}
    state = init_adamw_state(gate_params)
    rng = derive_rng(config.seed, "gate")
    for epoch in range(1, config.stage1_epochs + 1):
        losses = []
        for chunk in _epoch_batches(len(corpus.queries), config.batch_size, rng, min_size=2):
            batch = ContrastiveBatch(texts[chunk], positives[chunk])
            loss, grads = compute_gradients(model, batch, LOSS_INFONCE)
            losses.append(loss)
            if loss == 0.0:
                continue
            adamw_step(gate_params, {n: grads[n] for n in gate_params}, state, config.learning_rate, config.weight_decay)
        log.append(LogRecord(epoch, "B", float(np.mean(losses)) if losses else 0.0))
    return log


# ---------------------------------------------------------------------------
# Hard-negative mining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Triplet:
    query_id: int
    positive_item_id: int
    negative_item_id: int

    def __post_init__(self):
        if self.negative_item_id == self.positive_item_id:
            raise ValueError(f"triplet for query {self.query_id} has negative == positive ({self.positive_item_id})")


def mine_hard_negatives(
    model: PeMoeModel,
    corpus: Corpus,
    n_neg: int,
    *,
    workers: int = 1,
    within_platform: bool = False,
) -> list[Triplet]:
    """Top-scoring wrong gallery items per query, as training triplets.

    Ranks the full gallery by fused score (ties broken by ascending item id),
    drops the positive, keeps the first n_neg. Output is ordered by
    (query_id, rank). `within_platform` restricts candidates to gallery items
    of the query's own platform.
    """
    from .model import score_matrix  # local import to keep module load light

    if n_neg < 1:
        raise MiningError(f"n_neg must be positive, got {n_neg}")
    gallery = corpus.gallery
    if within_platform:
        by_platform = {}
        for p in PLATFORMS:
            members = [item for item in gallery if item.platform is p]
            if len(members) < n_neg + 1:
                raise MiningError(
                    f"platform {p.value!r} gallery has {len(members)} items; need at least n_neg+1 = {n_neg + 1}"
                )
            by_platform[p] = members
    elif len(gallery) < n_neg + 1:
        raise MiningError(f"gallery has {len(gallery)} items; need at least n_neg+1 = {n_neg + 1}")

    queries = sorted(corpus.queries, key=lambda q: q.id)
    triplets: list[Triplet] = []
    if within_platform:
        for p in PLATFORMS:
            qs = [q for q in queries if q.platform is p]
            if not qs:
                continue
            triplets.extend(_mine_block(model, qs, by_platform[p], n_neg, workers, score_matrix))
        triplets.sort(key=lambda t: t.query_id)
        return triplets
    return _mine_block(model, queries, list(gallery), n_neg, workers, score_matrix)


def _mine_block(model, queries, gallery, n_neg, workers, score_matrix) -> list[Triplet]:
    ids = np.array([item.id for item in gallery])
    scores = score_matrix(model, queries, gallery, workers=workers)
    out = []
    for row, query in enumerate(queries):
        order = np.lexsort((ids, -scores[row]))
        kept = 0
        for idx in order:
            if ids[idx] == query.positive_item_id:
                continue
            out.append(Triplet(query.id, query.positive_item_id, int(ids[idx])))
            kept += 1
            if kept == n_neg:
                break
    return out


def save_triplets(triplets: list[Triplet], path: str | Path) -> None:
    lines = [f"T {t.query_id} {t.positive_item_id} {t.negative_item_id}\n" for t in triplets]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_triplets(path: str | Path) -> list[Triplet]:
    out = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4 or parts[0] != "T":
            raise ValueError(f"triplet file line {lineno}: expected 'T <query> <pos> <neg>', got {raw!r}")
        try:
            out.append(Triplet(int(parts[1]), int(parts[2]), int(parts[3])))
        except ValueError as exc:
            raise ValueError(f"triplet file line {lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def _triplet_arrays(corpus: Corpus, triplets: list[Triplet]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Resolve triplet ids against the corpus into (texts, positives, negatives)."""
    queries = {q.id: q for q in corpus.queries}
    items = corpus.item_by_id()
    texts = np.empty((len(triplets), corpus.d_t))
    positives = np.empty((len(triplets), corpus.d_v))
    negatives = np.empty((len(triplets), corpus.d_v))
    for i, t in enumerate(triplets):
        if t.query_id not in queries:
            raise ValueError(f"triplet references unknown query id {t.query_id}")
        for item_id in (t.positive_item_id, t.negative_item_id):
            if item_id not in items:
                raise ValueError(f"triplet references unknown gallery id {item_id}")
        texts[i] = queries[t.query_id].text_embedding
        positives[i] = items[t.positive_item_id].image_embedding
        negatives[i] = items[t.negative_item_id].image_embedding
    return texts, positives, negatives


def _recall_at_1(model: PeMoeModel, corpus: Corpus, workers: int = 1) -> float:
    """Fraction of queries whose fused top-1 item is their positive."""
    if not corpus.queries:
        raise ValueError("recall over zero queries is undefined")
    ids, _ = corpus.gallery_matrix()
    columns = {int(g): i for i, g in enumerate(ids)}
    scores = score_matrix(model, corpus.queries, corpus.gallery, workers=workers)
    top = np.argmax(scores, axis=1)
    hits = sum(top[i] == columns[q.positive_item_id] for i, q in enumerate(corpus.queries))
    return hits / len(corpus.queries)


def train_stage2(
    model: PeMoeModel,
    triplets: list[Triplet],
    corpus: Corpus,
    config: TrainConfig,
    *,
    update_gate: bool = True,
    workers: int = 1,
    within_platform: bool = False,
    val_corpus: Corpus | None = None,
) -> TrainLog:
    """Joint refinement of experts and gate on mined triplets.

    Minimizes the mean hinge triplet loss over fused scores. ``triplets`` is
    the initial mined set and drives the first epoch; every later epoch
    re-mines against the updated model, because a fixed negative set
    saturates as soon as those few items are pushed below the margin while
    the next-ranked offenders remain untouched. A batch whose loss is
    exactly zero (every margin satisfied) is skipped entirely, so it applies
    no update and no weight decay. With ``update_gate`` False the gate is
    frozen (no updates, no decay) and only the experts move; fusion still
    uses whatever weights the frozen gate emits, so a zeroed gate trains the
    experts under exact equal-weight fusion.

    With ``val_corpus`` given, fused R@1 on it is logged (phase "val")
    before refinement and after every epoch, and the parameters that scored
    best are restored at the end, earliest epoch winning ties. Desk-scale
    corpora saturate the margin within an epoch or two, after which further
    hinge steps only drift the heads, so unconditionally keeping the last
    epoch would routinely hand back a worse model than the one passed in.
    """
    config.validate()
    if not triplets:
        raise ValueError("stage 2 requires a non-empty triplet list")
    texts, positives, negatives = _triplet_arrays(corpus, triplets)

    params = dict(named_params(model))
    if not update_gate:
        params = {n: arr for n, arr in params.items() if n not in GATE_PARAM_NAMES}
    state = init_adamw_state(params)
    rng = derive_rng(config.seed, "stage2")
    log = TrainLog()
    best_val = -1.0
    best_snapshot: dict[str, np.ndarray] | None = None
    if val_corpus is not None:
        best_val = _recall_at_1(model, val_corpus, workers)
        best_snapshot = {n: arr.copy() for n, arr in named_params(model)}
        log.append(LogRecord(0, "val", best_val))
    for epoch in range(1, config.stage2_epochs + 1):
        if epoch > 1:
            fresh = mine_hard_negatives(
                model, corpus, config.negatives_per_query,
                workers=workers, within_platform=within_platform,
            )
            texts, positives, negatives = _triplet_arrays(corpus, fresh)
        losses = []
        for chunk in _epoch_batches(texts.shape[0], config.batch_size, rng, min_size=1):
            batch = TripletBatch(texts[chunk], positives[chunk], negatives[chunk], margin=config.triplet_margin)
            loss, grads = compute_gradients(model, batch, LOSS_TRIPLET)
            losses.append(loss)
            if loss == 0.0:
                continue
            adamw_step(params, {n: grads[n] for n in params}, state, config.learning_rate, config.weight_decay)
        log.append(LogRecord(epoch, "stage2", float(np.mean(losses)) if losses else 0.0))
        if val_corpus is not None:
            val = _recall_at_1(model, val_corpus, workers)
            log.append(LogRecord(epoch, "val", val))
            if val > best_val:
                best_val = val
                best_snapshot = {n: arr.copy() for n, arr in named_params(model)}
    if best_snapshot is not None:
        for name, arr in named_params(model):
            arr[...] = best_snapshot[name]
    return log
