"""Ranking, Recall@K, composite score, and the four-row ablation ladder.

Recall values live in [0, 1] internally; rendered tables multiply by 100
with two decimals. The composite "Score" column is the arithmetic mean of
R@1/5/10 — no standard definition of a composite exists for this task, so
the mean is used and labeled as such wherever it appears.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import PLATFORMS, Corpus, GalleryItem, QueryRecord, split_unseen_items
from .model import (
    PeMoeModel,
    clone_model,
    gate_weights_batch,
    init_expert,
    init_model,
    score_matrix,
    unified_model,
)
from .textprep import KeywordList, load_keywords, sanitize_corpus
from .train import TrainConfig, mine_hard_negatives, train_expert_contrastive, train_stage1, train_stage2
from .rng import derive_rng

#: Rendered under every table that shows the Score column.
COMPOSITE_CAVEAT = (
    "Score = mean(R@1, R@5, R@10); there is no standard composite formula, "
    "so the arithmetic mean is used and labeled."
)

STATIC_WEIGHTS = np.full(3, 1.0 / 3.0)


@dataclass(frozen=True)
class Ranking:
    """Full gallery ordering for one query, best first."""

    query_id: int
    ranked_ids: tuple[int, ...]


@dataclass(frozen=True)
class EvalReport:
    r_at: dict[int, float]
    composite_score: float | None
    num_queries: int
    config_label: str


def _order_row(scores: np.ndarray, ids: np.ndarray) -> tuple[int, ...]:
    # Descending score; bit-equal scores fall back to ascending id.
    order = np.lexsort((ids, -scores))
    return tuple(int(i) for i in ids[order])


def rank_gallery(
    model: PeMoeModel,
    query: QueryRecord,
    gallery: list[GalleryItem],
    *,
    static_weights: np.ndarray | None = None,
) -> Ranking:
    if not gallery:
        raise ValueError(f"cannot rank an empty gallery for query {query.id}")
    scores = score_matrix(model, [query], gallery, static_weights=static_weights)[0]
    ids = np.array([g.id for g in gallery])
    return Ranking(query.id, _order_row(scores, ids))


def rank_all(
    model: PeMoeModel,
    queries: list[QueryRecord],
    gallery: list[GalleryItem],
    *,
    workers: int = 1,
    static_weights: np.ndarray | None = None,
) -> list[Ranking]:
    """Rank the gallery for every query with one batched scoring pass."""
    if not gallery:
        raise ValueError("cannot rank an empty gallery")
    scores = score_matrix(model, queries, gallery, workers=workers, static_weights=static_weights)
    ids = np.array([g.id for g in gallery])
    return [Ranking(q.id, _order_row(scores[i], ids)) for i, q in enumerate(queries)]


def recall_at_k(rankings: list[Ranking], truth: dict[int, int], k: int) -> float:
    """Fraction of queries whose positive id appears in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not rankings:
        raise ValueError("recall over zero rankings is undefined")
    hits = 0
    for r in rankings:
        if r.query_id not in truth:
            raise ValueError(f"no ground-truth positive for query {r.query_id}")
        hits += truth[r.query_id] in r.ranked_ids[:k]
    return hits / len(rankings)


def composite_score(r1: float, r5: float, r10: float, weights: tuple[float, float, float] | None = None) -> float:
    """Combine three recalls; default is the plain arithmetic mean.

    Inputs must share a scale: all in [0, 1], or all percentages. Percent
    mode is inferred when any value exceeds 1; a mix of percent values and
    sub-1 fractions is rejected as inconsistent.
    """
    vals = (float(r1), float(r5), float(r10))
    for v in vals:
        if not np.isfinite(v) or v < 0:
            raise ValueError(f"recall values must be finite and non-negative, got {vals}")
    if max(vals) > 1.0:
        if max(vals) > 100.0:
            raise ValueError(f"recall {max(vals)} exceeds 100; no consistent scale")
        if any(0.0 < v < 1.0 for v in vals):
            raise ValueError(f"mixed scales: {vals} combines percentages with [0,1] fractions")
    if weights is None:
        return sum(vals) / 3.0
    w = tuple(float(x) for x in weights)
    if len(w) != 3 or any(x < 0 for x in w) or sum(w) == 0:
        raise ValueError(f"weights must be three non-negative values with positive sum, got {weights}")
    return sum(v * x for v, x in zip(vals, w)) / sum(w)


def evaluate_model(
    model: PeMoeModel,
    queries: list[QueryRecord],
    gallery: list[GalleryItem],
    *,
    ks: tuple[int, ...] = (1, 5, 10),
    label: str = "",
    workers: int = 1,
    static_weights: np.ndarray | None = None,
) -> EvalReport:
    if not queries:
        raise ValueError("evaluation needs at least one query")
    rankings = rank_all(model, queries, gallery, workers=workers, static_weights=static_weights)
    truth = {q.id: q.positive_item_id for q in queries}
    r_at = {k: recall_at_k(rankings, truth, k) for k in sorted(set(ks))}
    composite = None
    if {1, 5, 10} <= set(r_at):
        composite = composite_score(r_at[1], r_at[5], r_at[10])
    return EvalReport(r_at, composite, len(queries), label)


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def report_lines(report: EvalReport) -> list[str]:
    """Machine-readable `metric=<name> k=<int> value=<float>` lines."""
    lines = [f"metric=recall k={k} value={report.r_at[k]!r}" for k in sorted(report.r_at)]
    if report.composite_score is not None:
        lines.append(f"metric=composite k=0 value={report.composite_score!r}")
    lines.append(f"metric=num_queries k=0 value={float(report.num_queries)!r}")
    return lines


def render_table(reports: list[EvalReport]) -> str:
    """Fixed-width table in percent (two decimals), with the Score caveat."""
    ks = sorted({k for r in reports for k in r.r_at})
    header = ["config"] + [f"R@{k}" for k in ks] + ["Score", "queries"]
    rows = [header]
    for r in reports:
        cells = [r.config_label or "-"]
        cells += [f"{100.0 * r.r_at[k]:.2f}" if k in r.r_at else "-" for k in ks]
        cells.append(f"{100.0 * r.composite_score:.2f}" if r.composite_score is not None else "-")
        cells.append(str(r.num_queries))
        rows.append(cells)
    widths = [max(len(row[c]) for row in rows) for c in range(len(header))]
    out = []
    for i, row in enumerate(rows):
        out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    out.append(COMPOSITE_CAVEAT)
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Ablation ladder
# ---------------------------------------------------------------------------

@dataclass
class AblationResult:
    reports: list[EvalReport]
    unified_head_model: PeMoeModel
    static_model: PeMoeModel
    moe_model: PeMoeModel
    moe_stage1_report: EvalReport
    train_corpus: Corpus
    val_corpus: Corpus


#: Batch-stream index for the unified single-expert rows; platform experts
#: use stream indices 0..2.
_UNIFIED_STREAM = 3


def _zero_gate(model: PeMoeModel) -> None:
    """Clamp the gate to emit exactly uniform weights (zero logits)."""
    for layer in (model.gate.layer1, model.gate.layer2):
        layer.W[:] = 0.0
        layer.b[:] = 0.0


def _refine(
    model: PeMoeModel, corpus: Corpus, val_corpus: Corpus, cfg, train_config: TrainConfig, *, update_gate: bool
) -> None:
    """Stage 2 on mined triplets: mining and fusion use the model's own gate.

    Validation R@1 picks the kept epoch (train_stage2 with val_corpus), so
    refinement never hands back a model worse than the stage-1 one.
    """
    triplets = mine_hard_negatives(
        model, corpus, train_config.negatives_per_query,
        workers=cfg.workers, within_platform=cfg.mine_within_platform,
    )
    train_stage2(
        model, triplets, corpus, train_config, update_gate=update_gate,
        workers=cfg.workers, within_platform=cfg.mine_within_platform, val_corpus=val_corpus,
    )


def _train_unified(corpus: Corpus, val_corpus: Corpus, cfg, train_config: TrainConfig) -> PeMoeModel:
    """One expert head fitted on all platforms mixed, then refined on triplets.

    The head is wrapped as a model with three identical expert copies and a
    zeroed gate. Under uniform fusion the copies receive identical stage-2
    gradients, so they stay bit-identical and the wrapped model keeps ranking
    exactly like the single head.
    """
    head = init_expert(corpus.d_t, corpus.d_v, cfg.d_e, cfg.h_e, train_config.seed, PLATFORMS[0])
    ids, texts = corpus.query_matrix()
    positives = corpus.positives_matrix()
    positive_ids = np.array([q.positive_item_id for q in corpus.queries], dtype=np.int64)
    rng = derive_rng(train_config.seed, "stage1", _UNIFIED_STREAM)
    train_expert_contrastive(head, texts, positives, ids, train_config, rng, group_ids=positive_ids)
    model = unified_model(head, train_config.temperature)
    if train_config.stage2_epochs > 0:
        _refine(model, corpus, val_corpus, cfg, train_config, update_gate=False)
    return model


def run_ablation_detailed(corpus: Corpus, config) -> AblationResult:
    """Train and evaluate the four ladder configurations.

    Rows: (1) one expert head trained on all platforms; (2) the same after
    caption preprocessing (embeddings are unchanged by preprocessing, so its
    recall matches row 1 on synthetic corpora by construction); (3) three
    platform experts trained and fused with fixed equal weights; (4) the
    same experts under the trained gate. Every row runs the full two-stage
    pipeline: contrastive stage 1, hard-negative mining, triplet stage 2
    with validation-selected checkpointing. Stage 2 fuses with the weights
    the row evaluates under (uniform for rows 1-3, gated for row 4), which
    is where cross-expert score calibration is learned: stage 1 trains each
    expert only inside its own platform, so the absolute score levels of
    different experts are not comparable until mixed-platform triplets push
    them onto one scale. Rows 3 and 4 share the stage-1 run and diverge at
    stage 2. All rows are scored against the full gallery on validation
    queries whose targets were held out of training entirely
    (split_unseen_items), so a row only scores by generalizing its
    alignment to unseen places.

    `config` is a PipelineConfig (only its training, dim, split, and
    sanitization settings are read; the corpus is passed in explicitly).
    """
    train_config = config.train_config()
    train_corpus, val_corpus = split_unseen_items(corpus, config.val_fraction, config.seed)

    row1_model = _train_unified(train_corpus, val_corpus, config, train_config)
    row1 = evaluate_model(
        row1_model, val_corpus.queries, val_corpus.gallery, label="1-unified", workers=config.workers
    )

    keywords: KeywordList | None = load_keywords(config.keyword_file) if config.keyword_file else None
    sanitized, _ = sanitize_corpus(corpus, config.sanitize_platforms, keywords, config.refiner)
    train2, val2 = split_unseen_items(sanitized, config.val_fraction, config.seed)
    row2_model = _train_unified(train2, val2, config, train_config)
    row2 = evaluate_model(
        row2_model, val2.queries, val2.gallery, label="2-unified-textprep", workers=config.workers
    )

    moe = init_model(corpus.d_t, corpus.d_v, config.d_e, config.h_g, config.h_e, config.seed,
                     temperature=train_config.temperature)
    train_stage1(moe, train_corpus, train_config)
    stage1_report = evaluate_model(
        moe, val_corpus.queries, val_corpus.gallery, label="4-dynamic-gating-stage1", workers=config.workers
    )

    static = clone_model(moe)
    _zero_gate(static)
    if train_config.stage2_epochs > 0:
        _refine(static, train_corpus, val_corpus, config, train_config, update_gate=False)
        _refine(moe, train_corpus, val_corpus, config, train_config, update_gate=True)
    row3 = evaluate_model(
        static, val_corpus.queries, val_corpus.gallery, label="3-static-ensemble",
        workers=config.workers, static_weights=STATIC_WEIGHTS,
    )
    row4 = evaluate_model(
        moe, val_corpus.queries, val_corpus.gallery, label="4-dynamic-gating", workers=config.workers
    )
    return AblationResult(
        [row1, row2, row3, row4], row1_model, static, moe, stage1_report, train_corpus, val_corpus
    )


def run_ablation(corpus: Corpus, config) -> list[EvalReport]:
    return run_ablation_detailed(corpus, config).reports


def gate_platform_share(model: PeMoeModel, queries: list[QueryRecord]) -> float:
    """Mean gate weight assigned to each query's own platform."""
    if not queries:
        raise ValueError("gate share needs at least one query")
    texts = np.stack([q.text_embedding for q in queries])
    weights = gate_weights_batch(model.gate, texts)
    index = {p: i for i, p in enumerate(PLATFORMS)}
    cols = np.array([index[q.platform] for q in queries])
    return float(weights[np.arange(len(queries)), cols].mean())
