"""Corpus data model, manifest IO, stratification, and the synthetic generator.

A corpus bundles a gallery of captioned image embeddings (one of three
platforms each: satellite, drone, ground) with text-embedding queries that
point at their positive gallery item. Embeddings are fixed inputs: they stand
in for the output of frozen encoder backbones, so nothing in this package
ever touches pixels or raw text encoders.

Manifest format (UTF-8 text, one record per line, ``#`` starts a comment):

    CORPUS v1 d_t=<int> d_v=<int>
    G <id> <sat|drone|ground> "<caption>" <d_v floats>
    Q <id> <positive_item_id> <d_t floats>

Floats are serialized with Python's shortest round-trip ``repr``, so a
save/load cycle reproduces every value bit for bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import derive_rng


class CorpusError(ValueError):
    """Invalid corpus content or manifest text."""


class Platform(enum.Enum):
    SATELLITE = "sat"
    DRONE = "drone"
    GROUND = "ground"

    @classmethod
    def parse(cls, tag: str) -> "Platform":
        for p in cls:
            if p.value == tag:
                return p
        raise CorpusError(f"unknown platform tag {tag!r} (expected sat, drone, or ground)")


#: Canonical platform order used everywhere a per-platform vector appears
#: (gate outputs, score vectors, checkpoint layout).
PLATFORMS = (Platform.SATELLITE, Platform.DRONE, Platform.GROUND)


@dataclass(frozen=True, eq=False)
class GalleryItem:
    id: int
    platform: Platform
    caption: str
    image_embedding: np.ndarray


@dataclass(frozen=True, eq=False)
class QueryRecord:
    id: int
    text_embedding: np.ndarray
    positive_item_id: int
    platform: Platform


@dataclass(eq=False)
class Corpus:
    d_t: int
    d_v: int
    gallery: list[GalleryItem] = field(default_factory=list)
    queries: list[QueryRecord] = field(default_factory=list)

    def item_by_id(self) -> dict[int, GalleryItem]:
        return {g.id: g for g in self.gallery}

    def gallery_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (ids, embeddings) stacked in gallery order."""
        ids = np.array([g.id for g in self.gallery], dtype=np.int64)
        if self.gallery:
            emb = np.stack([g.image_embedding for g in self.gallery])
        else:
            emb = np.zeros((0, self.d_v))
        return ids, emb

    def query_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array([q.id for q in self.queries], dtype=np.int64)
        if self.queries:
            emb = np.stack([q.text_embedding for q in self.queries])
        else:
            emb = np.zeros((0, self.d_t))
        return ids, emb

    def positives_matrix(self) -> np.ndarray:
        """Image embeddings of each query's positive item, in query order."""
        by_id = self.item_by_id()
        if not self.queries:
            return np.zeros((0, self.d_v))
        return np.stack([by_id[q.positive_item_id].image_embedding for q in self.queries])


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


def validate_corpus(corpus: Corpus) -> None:
    """Check all corpus invariants; raise CorpusError on the first violation."""
    if corpus.d_t <= 0 or corpus.d_v <= 0:
        raise CorpusError(f"dimensions must be positive (d_t={corpus.d_t}, d_v={corpus.d_v})")
    seen: set[int] = set()
    for g in corpus.gallery:
        if g.id < 0:
            raise CorpusError(f"gallery id {g.id} is negative")
        if g.id in seen:
            raise CorpusError(f"duplicate gallery id {g.id}")
        seen.add(g.id)
        if g.image_embedding.shape != (corpus.d_v,):
            raise CorpusError(
                f"gallery item {g.id}: embedding has {g.image_embedding.shape[0] if g.image_embedding.ndim == 1 else g.image_embedding.shape} entries, expected d_v={corpus.d_v}"
            )
        if not np.all(np.isfinite(g.image_embedding)):
            raise CorpusError(f"gallery item {g.id}: non-finite embedding entry")
    by_id = corpus.item_by_id()
    qseen: set[int] = set()
    for q in corpus.queries:
        if q.id < 0:
            raise CorpusError(f"query id {q.id} is negative")
        if q.id in qseen:
            raise CorpusError(f"duplicate query id {q.id}")
        qseen.add(q.id)
        if q.text_embedding.shape != (corpus.d_t,):
            raise CorpusError(
                f"query {q.id}: embedding has {q.text_embedding.shape[0] if q.text_embedding.ndim == 1 else q.text_embedding.shape} entries, expected d_t={corpus.d_t}"
            )
        if not np.all(np.isfinite(q.text_embedding)):
            raise CorpusError(f"query {q.id}: non-finite embedding entry")
        item = by_id.get(q.positive_item_id)
        if item is None:
            raise CorpusError(f"query {q.id}: positive item id {q.positive_item_id} not in gallery")
        if q.platform is not item.platform:
            raise CorpusError(
                f"query {q.id}: platform {q.platform.value} does not match positive item's {item.platform.value}"
            )


def stratify(corpus: Corpus) -> dict[Platform, Corpus]:
    """Partition the corpus by platform.

    Queries follow their positive item's platform, so each subset is a valid
    corpus on its own. Subsets may be empty.
    """
    out: dict[Platform, Corpus] = {}
    for p in PLATFORMS:
        out[p] = Corpus(
            d_t=corpus.d_t,
            d_v=corpus.d_v,
            gallery=[g for g in corpus.gallery if g.platform is p],
            queries=[q for q in corpus.queries if q.platform is p],
        )
    return out


# ---------------------------------------------------------------------------
# Manifest IO
# ---------------------------------------------------------------------------

def _escape(caption: str) -> str:
    return caption.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def _format_floats(vec: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in vec)


def corpus_to_text(corpus: Corpus) -> str:
    lines = [f"CORPUS v1 d_t={corpus.d_t} d_v={corpus.d_v}"]
    for g in corpus.gallery:
        lines.append(f'G {g.id} {g.platform.value} "{_escape(g.caption)}" {_format_floats(g.image_embedding)}')
    for q in corpus.queries:
        lines.append(f"Q {q.id} {q.positive_item_id} {_format_floats(q.text_embedding)}")
    return "\n".join(lines) + "\n"


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(corpus_to_text(corpus), encoding="utf-8")


def _parse_caption(rest: str, lineno: int) -> tuple[str, str]:
    """Parse a leading double-quoted caption; return (caption, remainder)."""
    if not rest.startswith('"'):
        raise CorpusError(f"line {lineno}: expected opening quote for caption")
    out: list[str] = []
    i = 1
    while i < len(rest):
        c = rest[i]
        if c == "\\":
            if i + 1 >= len(rest):
                raise CorpusError(f"line {lineno}: dangling backslash in caption")
            nxt = rest[i + 1]
            if nxt == "n":
                out.append("\n")
            elif nxt in ('"', "\\"):
                out.append(nxt)
            else:
                raise CorpusError(f"line {lineno}: unknown escape \\{nxt} in caption")
            i += 2
        elif c == '"':
            return "".join(out), rest[i + 1 :].lstrip(" ")
        else:
            out.append(c)
            i += 1
    raise CorpusError(f"line {lineno}: unterminated caption quote")


def _parse_floats(text: str, expected: int, lineno: int, what: str) -> np.ndarray:
    parts = text.split()
    if len(parts) != expected:
        raise CorpusError(f"line {lineno}: {what} has {len(parts)} values, expected {expected}")
    try:
        vec = np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError as exc:
        raise CorpusError(f"line {lineno}: bad float in {what}: {exc}") from None
    if not np.all(np.isfinite(vec)):
        raise CorpusError(f"line {lineno}: non-finite value in {what}")
    return vec


def parse_corpus(text: str) -> Corpus:
    corpus: Corpus | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if corpus is None:
            parts = line.split()
            if len(parts) != 4 or parts[0] != "CORPUS" or parts[1] != "v1":
                raise CorpusError(f"line {lineno}: expected header 'CORPUS v1 d_t=<int> d_v=<int>'")
            try:
                d_t = int(parts[2].removeprefix("d_t="))
                d_v = int(parts[3].removeprefix("d_v="))
            except ValueError:
                raise CorpusError(f"line {lineno}: malformed header dimensions") from None
            corpus = Corpus(d_t=d_t, d_v=d_v)
            continue
        kind, _, rest = line.partition(" ")
        if kind == "G":
            head = rest.split(None, 2)
            if len(head) != 3:
                raise CorpusError(f"line {lineno}: malformed gallery record")
            try:
                gid = int(head[0])
            except ValueError:
                raise CorpusError(f"line {lineno}: gallery id {head[0]!r} is not an integer") from None
            platform = Platform.parse(head[1])
            caption, tail = _parse_caption(head[2], lineno)
            emb = _parse_floats(tail, corpus.d_v, lineno, f"gallery item {gid}")
            corpus.gallery.append(GalleryItem(gid, platform, caption, _freeze(emb)))
        elif kind == "Q":
            head = rest.split(None, 2)
            if len(head) != 3:
                raise CorpusError(f"line {lineno}: malformed query record")
            try:
                qid = int(head[0])
                pos = int(head[1])
            except ValueError:
                raise CorpusError(f"line {lineno}: malformed query ids") from None
            emb = _parse_floats(head[2], corpus.d_t, lineno, f"query {qid}")
            # Platform is resolved after the gallery is complete.
            corpus.queries.append(QueryRecord(qid, _freeze(emb), pos, Platform.SATELLITE))
        else:
            raise CorpusError(f"line {lineno}: unknown record kind {kind!r}")
    if corpus is None:
        raise CorpusError("empty manifest: missing 'CORPUS v1' header")
    by_id = corpus.item_by_id()
    resolved = []
    for q in corpus.queries:
        item = by_id.get(q.positive_item_id)
        if item is None:
            raise CorpusError(f"query {q.id}: positive item id {q.positive_item_id} not in gallery")
        resolved.append(QueryRecord(q.id, q.text_embedding, q.positive_item_id, item.platform))
    corpus.queries = resolved
    validate_corpus(corpus)
    return corpus


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    return parse_corpus(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    locations_per_platform: int
    d_t: int = 48
    d_v: int = 40
    noise_sigma: float = 0.05
    queries_per_location: int = 48
    platform_rotation: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.locations_per_platform <= 0:
            raise CorpusError(f"locations_per_platform must be positive, got {self.locations_per_platform}")
        if self.d_t <= 0 or self.d_v <= 0:
            raise CorpusError(f"dimensions must be positive (d_t={self.d_t}, d_v={self.d_v})")
        if self.noise_sigma < 0:
            raise CorpusError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if self.queries_per_location <= 0:
            raise CorpusError(f"queries_per_location must be positive, got {self.queries_per_location}")
        if self.platform_rotation < 0:
            raise CorpusError(f"platform_rotation must be non-negative, got {self.platform_rotation}")


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground-truth construction of a synthetic corpus.

    ``centers[p][i]`` is the latent vector of platform p's location i; every
    platform has its own disjoint set of places. Query text renders a latent
    through one shared basis plus a per-platform offset,
    ``text_basis @ z + text_means[p]``; the image side renders the same
    latent through a platform-private rotation of a shared image subspace
    and adds a large constant marker along that platform's private image
    direction (platform_view_map). Aligning text to image therefore takes a
    separate linear map per platform, and because the image rotations are
    mutually unrelated, no single text-to-image map fits all three at once.
    Undoing the right chain is the oracle alignment; see
    oracle_image_embedding.
    """

    latent_dim: int
    text_basis: np.ndarray
    image_basis: np.ndarray
    marker_basis: np.ndarray
    marker_scale: float
    image_twists: dict[Platform, np.ndarray]
    text_means: dict[Platform, np.ndarray]
    centers: dict[Platform, np.ndarray]


# Scale of the per-platform text offset: a fixed shift of all of a platform's
# query texts, orthogonal to the latent content subspace. Latent coordinates
# are distribution-identical across platforms, so this shift is the only part
# of a query a platform classifier can key on.
_MEAN_SCALE = 1.0
_MAX_LATENT_DIM = 16

# Amplitude of the per-platform image marker, a constant offset along one
# private image direction orthogonal to the content subspace. It dwarfs the
# content term on purpose: a head that never trained on a platform keeps an
# untrained (hence roughly constant-image) response to that platform's
# marker, so its scores on foreign gallery blocks are nearly flat and cannot
# outrank its own platform's content-driven scores.
_MARKER_SCALE = 40.0


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(a)
    # Fix signs so the factorization is canonical.
    return q * np.sign(np.diag(r))


def _blended_rotation(rng: np.random.Generator, dim: int, strength: float) -> np.ndarray:
    """Orthogonal map between identity (strength 0) and a random rotation.

    Orthogonalizes I + strength * G for Gaussian G, so small strengths give
    platforms that mostly agree and large strengths make them unrelated.
    """
    g = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(np.eye(dim) + strength * g)
    return q * np.sign(np.diag(r))


def platform_view_map(truth: SyntheticTruth, platform: Platform, z: np.ndarray) -> np.ndarray:
    """Render latent locations ``z`` (shape (..., d_z)) as platform images.

    The latent passes through the platform's private rotation into the
    shared image content subspace, then the platform's constant marker
    offset is added. The map is affine, so a per-platform linear
    text-to-image alignment always exists.
    """
    z = np.asarray(z, dtype=np.float64)
    k = PLATFORMS.index(platform)
    content = (z @ truth.image_twists[platform].T) @ truth.image_basis.T
    if truth.marker_basis.shape[1]:
        content = content + truth.marker_scale * truth.marker_basis[:, k % truth.marker_basis.shape[1]]
    return content


def oracle_image_embedding(truth: SyntheticTruth, platform: Platform, text_embedding: np.ndarray) -> np.ndarray:
    """Exact noiseless image embedding predicted from a query embedding.

    Inverts the text rendering chain (offset, then shared basis) and replays
    the platform's view map. With noise_sigma 0 this reproduces the positive
    item's image embedding bit for bit, so oracle retrieval is perfect.
    """
    coords = truth.text_basis.T @ (text_embedding - truth.text_means[platform])
    return platform_view_map(truth, platform, coords)


_CAPTION_SCENES = {
    Platform.SATELLITE: ("industrial district", "river delta", "airfield", "harbor basin", "farmland grid"),
    Platform.DRONE: ("campus quad", "stadium", "apartment block", "parking structure", "rail yard"),
    Platform.GROUND: ("storefront row", "bus terminal", "fountain plaza", "brick facade", "market street"),
}
_CAPTION_FEATURES = ("a red roof", "a glass tower", "dense tree cover", "a water tank", "white walkways", "a circular court")
_DIRECTIONAL_SENTENCES = (
    "It sits to the north of the main gate.",
    "A canal runs along the left side.",
    "The tallest block is in the upper-left corner.",
    "A depot lies to the south of the tracks.",
    "The entrance faces east toward the bridge.",
    "A garden fills the rightmost strip.",
)


def _make_caption(rng: np.random.Generator, platform: Platform, loc_index: int) -> str:
    scenes = _CAPTION_SCENES[platform]
    scene = scenes[int(rng.integers(len(scenes)))]
    feature = _CAPTION_FEATURES[int(rng.integers(len(_CAPTION_FEATURES)))]
    sentences = [f"Location {loc_index}: a {scene} with {feature}."]
    if rng.random() < 0.5:
        sentences.append(_DIRECTIONAL_SENTENCES[int(rng.integers(len(_DIRECTIONAL_SENTENCES)))])
    return " ".join(sentences)


def generate_synthetic_with_truth(spec: SyntheticSpec) -> tuple[Corpus, SyntheticTruth]:
    """Generate a deterministic synthetic corpus plus its construction truth.

    Construction: every platform draws its own ``locations_per_platform``
    latent centers ``z ~ N(0, I)`` of dimension ``min(16, d_t, d_v - 3)``,
    so the three platforms cover disjoint places. Query text for a location
    is ``T_base @ z + mean_p`` plus noise, with a fixed per-platform offset
    drawn orthogonal to the span of ``T_base``. Its gallery image is the
    platform's own affine rendering of the same latent: a private rotation
    ``R_p`` of the shared image content subspace plus a large constant
    marker along the platform's private image direction (platform_view_map)
    plus noise.

    The rotations ``R_p`` are mutually unrelated at ``platform_rotation``
    1.0, so the text-to-image alignments of the three platforms disagree and
    no single linear map serves all of them; the benefit of one specialist
    head per platform is what the corpus is built to measure. The image
    markers give every platform's gallery block a constant component that
    only matters to heads that never trained on that block: their response
    to it is untrained and item-independent, which keeps their foreign
    scores flat. Gaussian noise with ``noise_sigma`` is added to every
    embedding. All draws come from the Philox stream for (seed, "corpus");
    captions come from (seed, "captions").
    """
    spec.validate()
    n_markers = min(len(PLATFORMS), max(spec.d_v - 1, 0))
    d_z = max(1, min(_MAX_LATENT_DIM, spec.d_t, spec.d_v - n_markers))
    n_markers = min(n_markers, spec.d_v - d_z)
    rng = derive_rng(spec.seed, "corpus")

    t_base = _orthonormal_columns(rng, spec.d_t, d_z)
    v_cols = _orthonormal_columns(rng, spec.d_v, d_z + n_markers)
    v_base, marker_basis = v_cols[:, :d_z], v_cols[:, d_z:]
    image_twists: dict[Platform, np.ndarray] = {
        p: _blended_rotation(rng, d_z, spec.platform_rotation) for p in PLATFORMS
    }

    # Platform offsets live outside the content subspace when there is room;
    # degenerate tiny-d_t corpora fall back to raw random directions.
    raw_dirs = rng.standard_normal((spec.d_t, min(len(PLATFORMS), spec.d_t)))
    ortho = raw_dirs - t_base @ (t_base.T @ raw_dirs)
    basis = ortho if np.linalg.matrix_rank(ortho, tol=1e-8) == raw_dirs.shape[1] else raw_dirs
    q, r = np.linalg.qr(basis)
    mean_dirs = q * np.sign(np.diag(r))
    text_means = {
        p: _MEAN_SCALE * mean_dirs[:, i % mean_dirs.shape[1]] for i, p in enumerate(PLATFORMS)
    }

    loc = spec.locations_per_platform
    qpl = spec.queries_per_location
    centers = {p: rng.standard_normal((loc, d_z)) for p in PLATFORMS}
    caption_rng = derive_rng(spec.seed, "captions")
    truth = SyntheticTruth(
        d_z, t_base, v_base, marker_basis, _MARKER_SCALE, image_twists, text_means, centers,
    )

    corpus = Corpus(d_t=spec.d_t, d_v=spec.d_v)
    next_query_id = 0
    for block, p in enumerate(PLATFORMS):
        gallery_noise = rng.standard_normal((loc, spec.d_v)) * spec.noise_sigma
        query_noise = rng.standard_normal((loc * qpl, spec.d_t)) * spec.noise_sigma
        v_emb = platform_view_map(truth, p, centers[p]) + gallery_noise
        t_emb = np.repeat(centers[p], qpl, axis=0) @ t_base.T + text_means[p] + query_noise
        for i in range(loc):
            gid = block * loc + i
            caption = _make_caption(caption_rng, p, i)
            corpus.gallery.append(GalleryItem(gid, p, caption, _freeze(v_emb[i])))
        for i in range(loc):
            gid = block * loc + i
            for j in range(qpl):
                corpus.queries.append(
                    QueryRecord(next_query_id, _freeze(t_emb[i * qpl + j]), gid, p)
                )
                next_query_id += 1
    validate_corpus(corpus)
    return corpus, truth


def generate_synthetic(spec: SyntheticSpec) -> Corpus:
    return generate_synthetic_with_truth(spec)[0]


def split_train_val(corpus: Corpus, val_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Split queries into train/validation corpora sharing the full gallery.

    The validation size is ``floor(val_fraction * n)`` clamped to
    ``[1, n - 1]``, so both splits are always non-empty.
    """
    if not 0.0 < val_fraction < 1.0:
        raise CorpusError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(corpus.queries)
    if n < 2:
        raise CorpusError(f"need at least 2 queries to split, corpus has {n}")
    n_val = min(max(int(math.floor(val_fraction * n)), 1), n - 1)
    perm = derive_rng(seed, "split").permutation(n)
    val_idx = set(int(i) for i in perm[:n_val])
    train_q = [q for i, q in enumerate(corpus.queries) if i not in val_idx]
    val_q = [q for i, q in enumerate(corpus.queries) if i in val_idx]
    train = Corpus(corpus.d_t, corpus.d_v, corpus.gallery, train_q)
    val = Corpus(corpus.d_t, corpus.d_v, corpus.gallery, val_q)
    return train, val


def split_unseen_items(corpus: Corpus, val_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Split queries so validation targets are never retrieved during training.

    Whole gallery items are held out: every query whose positive is a held-out
    item goes to validation, so validation measures retrieval of places the
    model was never trained to find, not recall of repeated training queries.
    The gallery stays shared. ``floor(val_fraction * n_items)`` items are held
    out, clamped so both query sets are non-empty.
    """
    if not 0.0 < val_fraction < 1.0:
        raise CorpusError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    targets = sorted({q.positive_item_id for q in corpus.queries})
    if len(targets) < 2:
        raise CorpusError(f"need queries for at least 2 gallery items to split, got {len(targets)}")
    n_val = min(max(int(math.floor(val_fraction * len(targets))), 1), len(targets) - 1)
    perm = derive_rng(seed, "split", 1).permutation(len(targets))
    val_items = {targets[int(i)] for i in perm[:n_val]}
    train_q = [q for q in corpus.queries if q.positive_item_id not in val_items]
    val_q = [q for q in corpus.queries if q.positive_item_id in val_items]
    train = Corpus(corpus.d_t, corpus.d_v, corpus.gallery, train_q)
    val = Corpus(corpus.d_t, corpus.d_v, corpus.gallery, val_q)
    return train, val
