"""scikit-learn compatible wrappers around the training loop and the PCA projector."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, DatasetHeader, Utterance, validate_utterance
from .evaluation import compute_metrics, fusion_vectors, geometry_score, pca_project, predictions
from .exceptions import DataError
from .losses import LossConfig
from .model import EncoderConfig, init_params
from .training import TrainConfig, fit


def check_utterances(X, header: DatasetHeader | None = None) -> Dataset:
    """Coerce ``X`` (a Dataset or a sequence of Utterances) into a validated Dataset.

    Without a header one is inferred from the first utterance: feature widths
    from its sequences, text mode from the dtype of its text array.
    """
    if isinstance(X, Dataset):
        dataset = X if header is None else Dataset(header, X.utterances, X.latent)
    else:
        utterances = list(X)
        if not utterances:
            raise DataError("expected at least one utterance")
        if not all(isinstance(u, Utterance) for u in utterances):
            raise DataError("X must be a Dataset or a sequence of Utterance objects")
        if header is None:
            first = utterances[0]
            tokens = np.issubdtype(first.text.dtype, np.integer)
            header = DatasetHeader(
                d_v=first.visual.shape[1],
                d_a=first.audio.shape[1],
                text_mode="tokens" if tokens else "vectors",
                vocab_size=int(max(u.text.max() for u in utterances)) + 1 if tokens else 0,
                text_dim=None if tokens else first.text.size,
            )
        dataset = Dataset(header, utterances)
    if len(dataset) == 0:
        raise DataError("expected at least one utterance")
    for u in dataset:
        validate_utterance(u, dataset.header)
    return dataset


def _with_labels(dataset: Dataset, y) -> Dataset:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != len(dataset):
        raise DataError(f"got {y.size} labels for {len(dataset)} utterances")
    if not np.all(np.isfinite(y)) or np.any(np.abs(y) > 3.0):
        raise DataError("labels must lie in [-3, 3]")
    utterances = [Utterance(u.id, float(v), u.text, u.visual, u.audio) for u, v in zip(dataset, y)]
    return Dataset(dataset.header, utterances, dataset.latent)


class SupArcRegressor(RegressorMixin, BaseEstimator):
    """Multimodal sentiment regressor trained with MAE + SupArc + triplet-modality terms.

    Parameters mirror the training and loss configuration; ``alpha=beta=0``
    reduces to plain MAE training. ``X`` is a :class:`~suparc.data.Dataset`
    or a list of :class:`~suparc.data.Utterance`; labels come from the
    utterances unless ``y`` is passed.

    Attributes
    ----------
    model_ : FusionModel
        Parameters with the best validation MAE (training loss when no
        ``eval_set`` is given).
    history_ : list of EpochReport
    encoder_config_ : EncoderConfig
    """

    def __init__(self, alpha=0.1, beta=0.1, tau=0.1, margin_m=0.15, threshold_TH=0.5, m_tri=0.2,
                 lr=1e-4, epochs=12, batch_size=32, weight_decay=0.01, grad_clip_norm=5.0,
                 hidden=32, rep_dim=32, text_embed_dim=32, random_state=42):
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.margin_m = margin_m
        self.threshold_TH = threshold_TH
        self.m_tri = m_tri
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.hidden = hidden
        self.rep_dim = rep_dim
        self.text_embed_dim = text_embed_dim
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        loss = LossConfig(tau=self.tau, margin_m=self.margin_m, threshold_TH=self.threshold_TH,
                          m_tri=self.m_tri, alpha=self.alpha, beta=self.beta)
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                           seed=int(self.random_state), loss=loss, weight_decay=self.weight_decay,
                           grad_clip_norm=self.grad_clip_norm)

    def fit(self, X, y=None, eval_set=None):
        train = check_utterances(X)
        if y is not None:
            train = _with_labels(train, y)
        datasets = {"train": train}
        if eval_set is not None:
            datasets["valid"] = check_utterances(eval_set, train.header)
        config = self.train_config()
        self.encoder_config_ = EncoderConfig.from_header(
            train.header, hidden=self.hidden, rep_dim=self.rep_dim, text_embed_dim=self.text_embed_dim
        )
        result = fit(init_params(self.encoder_config_, config.seed), datasets, config)
        self.model_ = result.model
        self.history_ = result.reports
        self.best_epoch_ = result.best_epoch
        self.header_ = train.header
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predictions(self.model_, check_utterances(X, self.header_))

    def transform(self, X, variant: str = "full") -> np.ndarray:
        """Fusion vectors, optionally with modalities masked (``variant='mask-va'`` etc.)."""
        check_is_fitted(self, "model_")
        return fusion_vectors(self.model_, check_utterances(X, self.header_), variant)

    def metrics(self, X, y=None):
        dataset = check_utterances(X, getattr(self, "header_", None))
        labels = dataset.labels if y is None else np.asarray(y, dtype=np.float64)
        return compute_metrics(self.predict(dataset), labels)

    def geometry_score(self, X, y=None) -> float:
        dataset = check_utterances(X, getattr(self, "header_", None))
        labels = dataset.labels if y is None else np.asarray(y, dtype=np.float64)
        return geometry_score(self.transform(dataset), labels).score


class PowerIterationPCA(TransformerMixin, BaseEstimator):
    """PCA whose components come from power iteration with deflation."""

    def __init__(self, n_components=2, tol=1e-9, max_iter=1000, random_state=0):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {X.shape}")
        result = pca_project(X, self.n_components, self.tol, self.max_iter, self.random_state)
        self.mean_ = X.mean(axis=0)
        self.components_ = result.components
        self.explained_variance_ratio_ = result.explained_variance_ratio
        self.n_iter_ = result.iterations
        self.converged_ = result.converged
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected shape (n, {self.n_features_in_}), got {X.shape}")
        return (X - self.mean_) @ self.components_.T
