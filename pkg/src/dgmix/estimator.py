"""scikit-learn compatible wrapper around the multi-source classifier."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import layers as L
from . import model as M
from .data import Episode, RotatedDomainSet
from .exceptions import ValidationError
from .train import TrainConfig, train


def _as_images(X, image_size=None):
    """Accept ``(n, d*d)``, ``(n, d, d)`` or ``(n, 1, d, d)`` arrays."""
    X = np.asarray(X)
    if X.ndim == 2:
        side = int(round(np.sqrt(X.shape[1])))
        if side * side != X.shape[1]:
            raise ValidationError(f"{X.shape[1]} features is not a square image")
        X = X.reshape(-1, 1, side, side)
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4:
        raise ValidationError(f"expected 2-, 3- or 4-D input, got shape {X.shape}")
    if image_size is not None and X.shape[-1] != image_size:
        raise ValidationError(f"fitted on {image_size}x{image_size} images, got {X.shape[-2:]}")
    return X


class DomainMixtureClassifier(ClassifierMixin, BaseEstimator):
    """Per-source classifier heads fused by a learned domain predictor.

    ``fit`` needs the source-domain label of every training sample; at
    prediction time no domain information is used.  Pixel values are
    expected in [0, 1].

    Parameters
    ----------
    alpha : float
        Weight of the domain-agnostic (uniform) component, in [0, 1].
    lam : float
        Weight of the domain-prediction loss.
    batch_size : int
        Must be a multiple of the number of source domains.
    max_iter : int
        SGD iterations.
    random_state : int
        Seeds the batch order, initialization and switch draws.

    The remaining parameters map one-to-one onto :class:`TrainConfig`.
    """

    def __init__(self, alpha=0.25, lam=0.5, batch_size=250, max_iter=10000, learning_rate=0.01,
                 momentum=0.9, weight_decay=0.0005, lr_gamma=0.001, lr_power=0.75,
                 conv1=20, conv2=50, fc1=500, head_scope="classifier", branch_convs="shared",
                 dtype="float64", log_interval=100, random_state=0):
        self.alpha = alpha
        self.lam = lam
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_gamma = lr_gamma
        self.lr_power = lr_power
        self.conv1 = conv1
        self.conv2 = conv2
        self.fc1 = fc1
        self.head_scope = head_scope
        self.branch_convs = branch_convs
        self.dtype = dtype
        self.log_interval = log_interval
        self.random_state = random_state

    def _config(self):
        seed = int(self.random_state or 0)
        return TrainConfig(
            alpha=self.alpha, lam=self.lam, batch_size=self.batch_size, iterations=self.max_iter,
            base_lr=self.learning_rate, momentum=self.momentum, weight_decay=self.weight_decay,
            lr_gamma=self.lr_gamma, lr_power=self.lr_power, data_seed=seed, init_seed=seed,
            switch_seed=seed, log_interval=self.log_interval, conv1=self.conv1, conv2=self.conv2,
            fc1=self.fc1, head_scope=self.head_scope, branch_convs=self.branch_convs, dtype=self.dtype,
        )

    def fit(self, X, y, domains):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        domains = np.asarray(domains)
        if domains.shape != (X.shape[0],):
            raise ValidationError(f"need one domain label per sample, got {domains.shape}")
        images = _as_images(X)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.domains_, d_idx = np.unique(domains, return_inverse=True)
        self.n_features_in_ = int(np.prod(X.shape[1:]))

        sources = [
            RotatedDomainSet(j + 1, dom, images[d_idx == j], y_idx[d_idx == j])
            for j, dom in enumerate(self.domains_)
        ]
        empty = RotatedDomainSet(0, None, images[:0], y_idx[:0])
        config = self._config()
        result = train(config, Episode(sources, empty), n_classes=len(self.classes_))
        self.params_ = result.params
        self.log_ = result.log
        self.image_size_ = images.shape[-1]
        return self

    def _scores(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        return M.predict_scores(_as_images(X, self.image_size_), self.params_, self.alpha)

    def decision_function(self, X):
        return self._scores(X)[0]

    def predict_proba(self, X):
        return L.softmax_rows(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def domain_weights(self, X):
        """Soft assignment of each sample to the training domains (columns follow ``domains_``)."""
        return self._scores(X)[1]

    def predict_domain(self, X):
        w = self.domain_weights(X)
        return self.domains_[np.argmax(w, axis=1)]
