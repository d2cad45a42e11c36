"""scikit-learn style front ends for the search and for genotype evaluation.

Both estimators take image arrays shaped ``(n_samples, channels, height,
width)``; pixels may be floats or ``uint8``.  Inputs are standardised per
channel with statistics learnt in :meth:`fit`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import search_split
from .evaluation import EvalConfig, build_eval_network, fit_network, predict_logits
from .genotype import Genotype, derive, refine_skip_count
from .search import NetworkConfig, OptimizerConfig, SearchData, StagePlan, run_progressive_search


def _check_images(X, y=None):
    if y is None:
        X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    else:
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, channels, height, width), got {X.shape}")
    return X, y


class _Standardiser:
    def fit(self, X):
        self.mean_ = X.mean(axis=(0, 2, 3))
        self.std_ = X.std(axis=(0, 2, 3))
        self.std_[self.std_ == 0] = 1.0
        return self

    def __call__(self, X):
        return (X - self.mean_[None, :, None, None]) / self.std_[None, :, None, None]


class ProgressiveSearch(BaseEstimator):
    """Staged differentiable cell search followed by skip-connect refinement.

    After :meth:`fit`, ``snapshots_`` holds one alpha snapshot per stage,
    ``raw_genotype_`` the plain derivation of the last one and
    ``genotype_`` the refined cell.  Feed ``genotype_`` to
    :class:`GenotypeClassifier` to train the discrete network.
    """

    def __init__(self, plan: str = "desk", dropout: Optional[Sequence[float]] = None,
                 epochs: Optional[int] = None, warm_epochs: Optional[int] = None,
                 init_channels: int = 8, batch_size: int = 32, m_skip: int = 2,
                 seed: int = 0, split_seed: int = 0):
        self.plan = plan
        self.dropout = dropout
        self.epochs = epochs
        self.warm_epochs = warm_epochs
        self.init_channels = init_channels
        self.batch_size = batch_size
        self.m_skip = m_skip
        self.seed = seed
        self.split_seed = split_seed

    def _plan(self) -> StagePlan:
        if isinstance(self.plan, StagePlan):
            return self.plan
        if self.plan not in ("desk", "full"):
            raise ValueError(f"plan must be 'desk', 'full' or a StagePlan, got {self.plan!r}")
        base = StagePlan.desk() if self.plan == "desk" else StagePlan.full_scale()
        s0 = base.stages[0]
        dropout = self.dropout if self.dropout is not None else [s.init_skip_dropout for s in base.stages]
        return StagePlan.from_lists([s.depth for s in base.stages], [s.op_budget for s in base.stages],
                                    dropout, self.epochs or s0.epochs,
                                    s0.warm_epochs if self.warm_epochs is None else self.warm_epochs)

    def fit(self, X, y):
        X, y = _check_images(X, y)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.scaler_ = _Standardiser().fit(X)
        Xs = self.scaler_(X)
        a, b = search_split(y_enc, self.split_seed)
        data = SearchData(Xs[a], y_enc[a], Xs[b], y_enc[b], len(self.classes_))
        result = run_progressive_search(
            self._plan(), data, self.seed,
            optim=OptimizerConfig(batch_size=self.batch_size),
            network=NetworkConfig(init_channels=self.init_channels))
        self.search_result_ = result
        self.snapshots_ = result.snapshots
        self.accounting_ = result.accounting
        self.raw_genotype_ = derive(result.final)
        self.genotype_ = refine_skip_count(result.final, self.m_skip).genotype
        return self


class GenotypeClassifier(ClassifierMixin, BaseEstimator):
    """Train the discrete network of a genotype from scratch and classify with it."""

    def __init__(self, genotype: Optional[Genotype] = None, depth: int = 8, init_channels: int = 16,
                 epochs: int = 10, batch_size: int = 32, drop_path_prob: float = 0.2,
                 cutout_length: int = 0, seed: int = 0):
        self.genotype = genotype
        self.depth = depth
        self.init_channels = init_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.drop_path_prob = drop_path_prob
        self.cutout_length = cutout_length
        self.seed = seed

    def fit(self, X, y):
        if not isinstance(self.genotype, Genotype):
            raise ValueError("GenotypeClassifier needs a Genotype")
        X, y = _check_images(X, y)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.scaler_ = _Standardiser().fit(X)
        config = EvalConfig(depth=self.depth, init_channels=self.init_channels, epochs=self.epochs,
                            batch_size=self.batch_size, drop_path_prob=self.drop_path_prob,
                            cutout_length=self.cutout_length)
        self.network_ = build_eval_network(self.genotype, config, len(self.classes_),
                                           in_channels=X.shape[1], seed=self.seed)
        self.history_ = fit_network(self.network_, self.scaler_(X), y_enc, config, self.seed).history
        self.n_parameters_ = self.network_.num_parameters()
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X, _ = _check_images(X)
        return predict_logits(self.network_, self.scaler_(X))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = self.decision_function(X)
        return self.classes_[np.argmax(z, axis=1)]
