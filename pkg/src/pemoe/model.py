"""Forward path of the platform-expert mixture model.

Three lightweight expert heads sit on top of fixed shared embeddings: each
head owns a two-layer ReLU adapter for text (d_t -> h_e -> d_e) and a single
affine projection for images (d_v -> d_e). A two-layer gating MLP maps the
shared text embedding to softmax weights over the three experts, and the
retrieval score of a (query, item) pair is the gate-weighted sum of the
per-expert cosine similarities.

All parameters are float64 numpy arrays. The checkpoint file stores them as
little-endian float32 in a fixed documented order behind an ASCII header, so
round-trips are byte-exact.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import PLATFORMS, GalleryItem, Platform, QueryRecord
from .rng import derive_rng

DEFAULT_TEMPERATURE = 0.05

#: Queries are always scored in fixed blocks of this many rows, regardless of
#: worker count, so results are bit-identical for any parallelism degree.
_SCORE_BLOCK = 64

_ZERO_NORM_TOL = 1e-12


class ModelError(ValueError):
    """Invalid model structure or checkpoint content."""


class DimensionMismatchError(ModelError):
    """An input embedding does not match the model's declared dimensions."""


class DegenerateEmbeddingError(ArithmeticError):
    """A pre-normalization vector has (numerically) zero norm."""


@dataclass(eq=False)
class Affine:
    """Dense affine map y = W x + b with W of shape (out, in)."""

    W: np.ndarray
    b: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.W.T + self.b


@dataclass(eq=False)
class ExpertHead:
    platform: Platform
    adapter1: Affine  # d_t -> h_e
    adapter2: Affine  # h_e -> d_e
    projection: Affine  # d_v -> d_e


@dataclass(eq=False)
class GateNetwork:
    layer1: Affine  # d_t -> h_g
    layer2: Affine  # h_g -> 3


@dataclass(eq=False)
class PeMoeModel:
    gate: GateNetwork
    experts: dict[Platform, ExpertHead]
    temperature: float = DEFAULT_TEMPERATURE

    @property
    def d_t(self) -> int:
        return self.gate.layer1.W.shape[1]

    @property
    def d_v(self) -> int:
        return self.experts[Platform.SATELLITE].projection.W.shape[1]

    @property
    def d_e(self) -> int:
        return self.experts[Platform.SATELLITE].projection.W.shape[0]

    @property
    def h_g(self) -> int:
        return self.gate.layer1.W.shape[0]

    @property
    def h_e(self) -> int:
        return self.experts[Platform.SATELLITE].adapter1.W.shape[0]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; finite for any finite logits."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (unit rows, norms); raise if any row is numerically zero."""
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms < _ZERO_NORM_TOL):
        raise DegenerateEmbeddingError(
            "zero-norm embedding before normalization (dead or collapsed parameters)"
        )
    return x / norms[..., None], norms


def _check_dim(name: str, vec: np.ndarray, expected: int) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != expected:
        raise DimensionMismatchError(f"{name} has shape {vec.shape}, expected ({expected},)")
    return vec


def gate_forward(gate: GateNetwork | PeMoeModel, t_shared: np.ndarray) -> np.ndarray:
    """Softmax gate weights over (sat, drone, ground) for one text embedding."""
    if isinstance(gate, PeMoeModel):
        gate = gate.gate
    t = _check_dim("t_shared", t_shared, gate.layer1.W.shape[1])
    hidden = relu(gate.layer1.apply(t))
    return softmax_rows(gate.layer2.apply(hidden))


def gate_weights_batch(gate: GateNetwork, T: np.ndarray) -> np.ndarray:
    hidden = relu(T @ gate.layer1.W.T + gate.layer1.b)
    return softmax_rows(hidden @ gate.layer2.W.T + gate.layer2.b)


def expert_forward(head: ExpertHead, t_shared: np.ndarray, v_shared: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return the expert's unit-norm text and image embeddings."""
    t = _check_dim("t_shared", t_shared, head.adapter1.W.shape[1])
    v = _check_dim("v_shared", v_shared, head.projection.W.shape[1])
    u = head.adapter2.apply(relu(head.adapter1.apply(t)))
    p = head.projection.apply(v)
    t_k, _ = normalize_rows(u)
    v_k, _ = normalize_rows(p)
    return t_k, v_k


def expert_text_batch(head: ExpertHead, T: np.ndarray) -> np.ndarray:
    u = relu(T @ head.adapter1.W.T + head.adapter1.b) @ head.adapter2.W.T + head.adapter2.b
    return normalize_rows(u)[0]


def expert_image_batch(head: ExpertHead, V: np.ndarray) -> np.ndarray:
    p = V @ head.projection.W.T + head.projection.b
    return normalize_rows(p)[0]


def expert_score(head: ExpertHead, t_shared: np.ndarray, v_shared: np.ndarray) -> float:
    t_k, v_k = expert_forward(head, t_shared, v_shared)
    return float(np.dot(t_k, v_k))


def fuse(weights: np.ndarray, scores: np.ndarray) -> float:
    """Gate-weighted sum of per-expert scores (convex combination)."""
    w = np.asarray(weights, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if w.shape != (3,) or s.shape != (3,):
        raise DimensionMismatchError(f"fuse expects 3-vectors, got {w.shape} and {s.shape}")
    return float(np.dot(w, s))


def _as_matrix(rows, dim: int, extract, what: str) -> np.ndarray:
    if isinstance(rows, np.ndarray):
        mat = np.asarray(rows, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[1] != dim:
            raise DimensionMismatchError(f"{what} matrix has shape {mat.shape}, expected (*, {dim})")
        return mat
    mat = np.stack([extract(r) for r in rows]) if rows else np.zeros((0, dim))
    if mat.shape[1] != dim:
        raise DimensionMismatchError(f"{what} embeddings have {mat.shape[1]} dims, expected {dim}")
    return mat


def score_matrix(
    model: PeMoeModel,
    queries: list[QueryRecord] | np.ndarray,
    gallery: list[GalleryItem] | np.ndarray,
    *,
    workers: int = 1,
    static_weights: np.ndarray | None = None,
) -> np.ndarray:
    """Fused scores for every (query, item) pair, shape (|Q|, |G|).

    ``static_weights`` replaces the gate with fixed expert weights (used by
    the static-ensemble ablation). Scoring runs over fixed-size query blocks
    so the result is identical for every ``workers`` value.
    """
    T = _as_matrix(queries, model.d_t, lambda q: q.text_embedding, "query")
    V = _as_matrix(gallery, model.d_v, lambda g: g.image_embedding, "gallery")
    heads = [model.experts[p] for p in PLATFORMS]
    v_hats = [expert_image_batch(h, V) for h in heads]
    out = np.empty((T.shape[0], V.shape[0]), dtype=np.float64)

    if static_weights is not None:
        w = np.asarray(static_weights, dtype=np.float64)
        if w.shape != (3,):
            raise DimensionMismatchError(f"static_weights must have shape (3,), got {w.shape}")

    def score_block(start: int) -> None:
        stop = min(start + _SCORE_BLOCK, T.shape[0])
        tb = T[start:stop]
        if static_weights is None:
            g = gate_weights_batch(model.gate, tb)
        else:
            g = np.broadcast_to(w, (stop - start, 3))
        block = np.zeros((stop - start, V.shape[0]), dtype=np.float64)
        for k, head in enumerate(heads):
            t_hat = expert_text_batch(head, tb)
            block += g[:, k : k + 1] * (t_hat @ v_hats[k].T)
        out[start:stop] = block

    starts = range(0, T.shape[0], _SCORE_BLOCK)
    if workers <= 1:
        for s in starts:
            score_block(s)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(score_block, starts))
    return out


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _xavier(rng: np.random.Generator, out_dim: int, in_dim: int) -> Affine:
    bound = math.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return Affine(w, np.zeros(out_dim))


def init_model(
    d_t: int,
    d_v: int,
    d_e: int,
    h_g: int,
    h_e: int,
    seed: int,
    *,
    temperature: float = DEFAULT_TEMPERATURE,
) -> PeMoeModel:
    """Scaled-uniform (fan-based) init, zero biases, deterministic in seed.

    Weight tensors are drawn in checkpoint order from the Philox stream for
    (seed, "init").
    """
    for name, val in (("d_t", d_t), ("d_v", d_v), ("d_e", d_e), ("h_g", h_g), ("h_e", h_e)):
        if val <= 0:
            raise ModelError(f"{name} must be positive, got {val}")
    if temperature <= 0:
        raise ModelError(f"temperature must be positive, got {temperature}")
    rng = derive_rng(seed, "init")
    gate = GateNetwork(_xavier(rng, h_g, d_t), _xavier(rng, 3, h_g))
    experts = {}
    for p in PLATFORMS:
        experts[p] = ExpertHead(
            p,
            _xavier(rng, h_e, d_t),
            _xavier(rng, d_e, h_e),
            _xavier(rng, d_e, d_v),
        )
    return PeMoeModel(gate, experts, temperature)


def init_expert(d_t: int, d_v: int, d_e: int, h_e: int, seed: int, platform: Platform) -> ExpertHead:
    """Single expert head initialized like init_model's per-platform heads."""
    rng = derive_rng(seed, "init", 1 + list(PLATFORMS).index(platform))
    return ExpertHead(
        platform,
        _xavier(rng, h_e, d_t),
        _xavier(rng, d_e, h_e),
        _xavier(rng, d_e, d_v),
    )


def named_params(model: PeMoeModel) -> list[tuple[str, np.ndarray]]:
    """Parameter tensors in the canonical (checkpoint) order."""
    out = [
        ("gate.layer1.W", model.gate.layer1.W),
        ("gate.layer1.b", model.gate.layer1.b),
        ("gate.layer2.W", model.gate.layer2.W),
        ("gate.layer2.b", model.gate.layer2.b),
    ]
    for p in PLATFORMS:
        head = model.experts[p]
        tag = f"expert.{p.value}"
        out.extend(
            [
                (f"{tag}.adapter1.W", head.adapter1.W),
                (f"{tag}.adapter1.b", head.adapter1.b),
                (f"{tag}.adapter2.W", head.adapter2.W),
                (f"{tag}.adapter2.b", head.adapter2.b),
                (f"{tag}.projection.W", head.projection.W),
                (f"{tag}.projection.b", head.projection.b),
            ]
        )
    return out


def expert_param_names(platform: Platform) -> tuple[str, ...]:
    tag = f"expert.{platform.value}"
    return (
        f"{tag}.adapter1.W",
        f"{tag}.adapter1.b",
        f"{tag}.adapter2.W",
        f"{tag}.adapter2.b",
        f"{tag}.projection.W",
        f"{tag}.projection.b",
    )


GATE_PARAM_NAMES = ("gate.layer1.W", "gate.layer1.b", "gate.layer2.W", "gate.layer2.b")


def clone_model(model: PeMoeModel) -> PeMoeModel:
    gate = GateNetwork(
        Affine(model.gate.layer1.W.copy(), model.gate.layer1.b.copy()),
        Affine(model.gate.layer2.W.copy(), model.gate.layer2.b.copy()),
    )
    experts = {
        p: ExpertHead(
            p,
            Affine(h.adapter1.W.copy(), h.adapter1.b.copy()),
            Affine(h.adapter2.W.copy(), h.adapter2.b.copy()),
            Affine(h.projection.W.copy(), h.projection.b.copy()),
        )
        for p, h in model.experts.items()
    }
    return PeMoeModel(gate, experts, model.temperature)


def unified_model(head: ExpertHead, temperature: float = DEFAULT_TEMPERATURE) -> PeMoeModel:
    """Wrap one head as a full model with three identical experts.

    With identical experts every gate output fuses to the same score, so the
    wrapped model ranks exactly like the single head. Used by the unified
    baseline rows of the ablation.
    """
    h_g = 1
    gate = GateNetwork(Affine(np.zeros((h_g, head.adapter1.W.shape[1])), np.zeros(h_g)), Affine(np.zeros((3, h_g)), np.zeros(3)))
    experts = {
        p: ExpertHead(
            p,
            Affine(head.adapter1.W.copy(), head.adapter1.b.copy()),
            Affine(head.adapter2.W.copy(), head.adapter2.b.copy()),
            Affine(head.projection.W.copy(), head.projection.b.copy()),
        )
        for p in PLATFORMS
    }
    return PeMoeModel(gate, experts, temperature)


# ---------------------------------------------------------------------------
# Checkpoint IO
# ---------------------------------------------------------------------------

_MAGIC = "PEMOE v1"


def save_model(model: PeMoeModel, path: str | Path) -> None:
    header = (
        f"{_MAGIC} d_t={model.d_t} d_v={model.d_v} d_e={model.d_e} "
        f"h_g={model.h_g} h_e={model.h_e} tau={model.temperature!r}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for _, arr in named_params(model):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path: str | Path) -> PeMoeModel:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ModelError(f"{path}: missing checkpoint header line")
    header = data[:nl].decode("ascii", errors="replace")
    parts = header.split()
    if len(parts) != 8 or parts[0] != "PEMOE" or parts[1] != "v1":
        raise ModelError(f"{path}: bad checkpoint header {header!r}")
    fields = {}
    for token in parts[2:]:
        key, _, val = token.partition("=")
        fields[key] = val
    try:
        d_t = int(fields["d_t"])
        d_v = int(fields["d_v"])
        d_e = int(fields["d_e"])
        h_g = int(fields["h_g"])
        h_e = int(fields["h_e"])
        tau = float(fields["tau"])
    except (KeyError, ValueError) as exc:
        raise ModelError(f"{path}: malformed header field ({exc})") from None

    shapes = [(h_g, d_t), (h_g,), (3, h_g), (3,)]
    for _ in PLATFORMS:
        shapes += [(h_e, d_t), (h_e,), (d_e, h_e), (d_e,), (d_e, d_v), (d_e,)]
    payload = data[nl + 1 :]
    expected = sum(int(np.prod(s)) for s in shapes) * 4
    if len(payload) != expected:
        raise ModelError(f"{path}: checkpoint payload is {len(payload)} bytes, expected {expected}")

    arrays = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(shape)
        arrays.append(arr)
        offset += count * 4
    gate = GateNetwork(Affine(arrays[0], arrays[1]), Affine(arrays[2], arrays[3]))
    experts = {}
    for i, p in enumerate(PLATFORMS):
        base = 4 + i * 6
        experts[p] = ExpertHead(
            p,
            Affine(arrays[base], arrays[base + 1]),
            Affine(arrays[base + 2], arrays[base + 3]),
            Affine(arrays[base + 4], arrays[base + 5]),
        )
    return PeMoeModel(gate, experts, tau)
