"""Platform-expert mixture retrieval engine over fixed cross-modal embeddings.

Three lightweight expert heads (satellite, drone, ground) score text queries
against a shared image gallery; a softmax gate blends their cosine scores
into one fused ranking signal. Training is two-staged: in-batch contrastive
pretraining per platform, then triplet refinement on mined hard negatives.
"""

from .corpus import (
    PLATFORMS,
    Corpus,
    CorpusError,
    GalleryItem,
    Platform,
    QueryRecord,
    SyntheticSpec,
    generate_synthetic,
    load_corpus,
    save_corpus,
    split_train_val,
    stratify,
    validate_corpus,
)
from .config import PipelineConfig, load_pipeline_config
from .estimator import PeMoeRetriever
from .evaluate import (
    EvalReport,
    Ranking,
    composite_score,
    evaluate_model,
    rank_all,
    rank_gallery,
    recall_at_k,
    run_ablation,
)
from .model import (
    DegenerateEmbeddingError,
    ExpertHead,
    GateNetwork,
    ModelError,
    PeMoeModel,
    expert_forward,
    expert_score,
    fuse,
    gate_forward,
    init_model,
    load_model,
    save_model,
    score_matrix,
)
from .textprep import (
    KeywordList,
    SanitizeReport,
    default_keyword_list,
    load_keywords,
    refine_caption,
    sanitize_corpus,
    sanitize_directional,
    split_sentences,
)
from .train import (
    AdamWState,
    ConfigError,
    ContrastiveBatch,
    Triplet,
    TrainConfig,
    TrainError,
    TrainLog,
    TripletBatch,
    adamw_step,
    compute_gradients,
    finite_diff_check,
    info_nce_loss,
    mine_hard_negatives,
    train_stage1,
    train_stage2,
    triplet_loss,
)

__version__ = "0.1.0"

__all__ = [
    "PLATFORMS",
    "AdamWState",
    "ConfigError",
    "ContrastiveBatch",
    "Corpus",
    "CorpusError",
    "DegenerateEmbeddingError",
    "EvalReport",
    "ExpertHead",
    "GalleryItem",
    "GateNetwork",
    "KeywordList",
    "ModelError",
    "PeMoeModel",
    "PeMoeRetriever",
    "PipelineConfig",
    "Platform",
    "QueryRecord",
    "Ranking",
    "SanitizeReport",
    "SyntheticSpec",
    "TrainConfig",
    "TrainError",
    "TrainLog",
    "Triplet",
    "TripletBatch",
    "adamw_step",
    "composite_score",
    "compute_gradients",
    "default_keyword_list",
    "evaluate_model",
    "expert_forward",
    "expert_score",
    "finite_diff_check",
    "fuse",
    "gate_forward",
    "generate_synthetic",
    "info_nce_loss",
    "init_model",
    "load_corpus",
    "load_keywords",
    "load_model",
    "load_pipeline_config",
    "mine_hard_negatives",
    "rank_all",
    "rank_gallery",
    "recall_at_k",
    "refine_caption",
    "run_ablation",
    "sanitize_corpus",
    "sanitize_directional",
    "save_corpus",
    "save_model",
    "score_matrix",
    "split_sentences",
    "split_train_val",
    "stratify",
    "train_stage1",
    "train_stage2",
    "triplet_loss",
    "validate_corpus",
]
