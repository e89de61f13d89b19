"""Scikit-learn style facade over the mixture retriever.

`PeMoeRetriever` wraps the functional training/evaluation pipeline in the
familiar fit/transform/predict surface so it can sit inside sklearn tooling
(`get_params`, `set_params`, `clone` all behave). The unconventional part is
the input: `fit` takes a Corpus, and the query-side methods take either a
Corpus, a list of QueryRecord, or a raw (n, d_t) embedding matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .corpus import Corpus, QueryRecord, validate_corpus
from .evaluate import Ranking, rank_all, recall_at_k
from .model import init_model, score_matrix
from .train import TrainConfig, mine_hard_negatives, train_stage1, train_stage2


class PeMoeRetriever(BaseEstimator):
    """Platform-expert mixture retriever with a two-stage training schedule.

    Parameters mirror TrainConfig plus the model dimensions. `two_stage=False`
    stops after contrastive pretraining (no mining, no triplet refinement).
    """

    def __init__(
        self,
        d_e: int = 128,
        h_g: int = 32,
        h_e: int = 96,
        stage1_epochs: int = 30,
        stage2_epochs: int = 10,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        weight_decay: float = 1e-4,
        temperature: float = 0.05,
        triplet_margin: float = 0.2,
        negatives_per_query: int = 4,
        two_stage: bool = True,
        seed: int = 0,
        workers: int = 1,
    ):
        self.d_e = d_e
        self.h_g = h_g
        self.h_e = h_e
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.temperature = temperature
        self.triplet_margin = triplet_margin
        self.negatives_per_query = negatives_per_query
        self.two_stage = two_stage
        self.seed = seed
        self.workers = workers

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            stage1_epochs=self.stage1_epochs,
            stage2_epochs=self.stage2_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            temperature=self.temperature,
            triplet_margin=self.triplet_margin,
            negatives_per_query=self.negatives_per_query,
            seed=self.seed,
        ).validate()

    def fit(self, X: Corpus, y=None) -> "PeMoeRetriever":
        """Train on a corpus; the fitted gallery becomes the retrieval target."""
        if not isinstance(X, Corpus):
            raise TypeError(f"fit expects a Corpus, got {type(X).__name__}")
        validate_corpus(X)
        config = self._train_config()
        model = init_model(X.d_t, X.d_v, self.d_e, self.h_g, self.h_e, self.seed,
                           temperature=self.temperature)
        train_stage1(model, X, config)
        if self.two_stage:
            triplets = mine_hard_negatives(model, X, self.negatives_per_query, workers=self.workers)
            train_stage2(model, triplets, X, config)
        self.model_ = model
        self.gallery_ = list(X.gallery)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("this PeMoeRetriever is not fitted; call fit first")

    def _queries(self, X) -> list[QueryRecord] | np.ndarray:
        if isinstance(X, Corpus):
            return X.queries
        return X

    def transform(self, X) -> np.ndarray:
        """Fused score matrix of shape (n_queries, n_gallery)."""
        self._check_fitted()
        return score_matrix(self.model_, self._queries(X), self.gallery_, workers=self.workers)

    def predict(self, X) -> np.ndarray:
        """Top-1 gallery id per query (score ties fall to the lower id)."""
        self._check_fitted()
        queries = self._queries(X)
        if isinstance(queries, np.ndarray):
            scores = self.transform(queries)
            ids = np.array([g.id for g in self.gallery_])
            out = np.empty(scores.shape[0], dtype=np.int64)
            for i in range(scores.shape[0]):
                order = np.lexsort((ids, -scores[i]))
                out[i] = ids[order[0]]
            return out
        return np.array([r.ranked_ids[0] for r in self.rank(queries)], dtype=np.int64)

    def rank(self, X) -> list[Ranking]:
        """Full gallery ranking per query."""
        self._check_fitted()
        queries = self._queries(X)
        if isinstance(queries, np.ndarray):
            raise TypeError("rank needs QueryRecord inputs (ids are part of the ranking)")
        return rank_all(self.model_, queries, self.gallery_, workers=self.workers)

    def score(self, X, y=None) -> float:
        """Recall@1 against each query's positive item."""
        self._check_fitted()
        queries = self._queries(X)
        if isinstance(queries, np.ndarray):
            raise TypeError("score needs QueryRecord inputs with positive ids")
        rankings = self.rank(queries)
        truth = {q.id: q.positive_item_id for q in queries}
        return recall_at_k(rankings, truth, 1)
