"""Estimator-style wrappers around the training and partition pipelines.

These follow scikit-learn conventions (constructor stores params, fit
returns self, learned state in trailing-underscore attributes) so the
pieces compose with clone/get_params tooling. X is a list of Frame
objects; there is no y.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import RoadblockDataset
from .partition import GeneratorOracle, labeled_dataset, partition_roadblock
from .planner import forward, pool_representation
from .train import TrainConfig, train_clap, train_unconstrained


def _require_weights(weights):
    if weights is None:
        raise ValueError("planner_weights is required; pass the frozen backbone")
    return weights


def _predict_waypoints(weights, frames, prompt_a, prompt_b) -> np.ndarray:
    out = []
    for f in frames:
        traj, _, _ = forward(weights, f.visual_features, f.instruction_tokens,
                             prompt_a, prompt_b)
        out.append(traj.waypoints)
    return np.stack(out)


def _pooled(weights, frames, prompt_a, prompt_b, layer) -> np.ndarray:
    out = []
    for f in frames:
        _, hidden, layout = forward(weights, f.visual_features, f.instruction_tokens,
                                    prompt_a, prompt_b)
        out.append(pool_representation(hidden, layout, layer, normalize=False))
    return np.stack(out)


def _neg_ade(weights, frames, prompt_a, prompt_b) -> float:
    pred = _predict_waypoints(weights, frames, prompt_a, prompt_b)
    gt = np.stack([f.gt_trajectory.waypoints for f in frames])
    return -float(np.linalg.norm(pred - gt, axis=2).mean())


class ClapPromptOptimizer(BaseEstimator):
    """Two-stage contrastive prompt-pair optimization against a frozen
    planner. ``fit`` expects labeled frames (challenging/normal)."""

    def __init__(self, planner_weights=None, m=8, n=8, tau=0.1, k=3,
                 lambda1=0.1, lambda2=0.1, lr=0.03, stage1_epochs=50,
                 stage2_epochs=100, batch_size=None, w0=0.5, init_seed=0,
                 extract_layer=1, variant="full"):
        self.planner_weights = planner_weights
        self.m = m
        self.n = n
        self.tau = tau
        self.k = k
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lr = lr
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.batch_size = batch_size
        self.w0 = w0
        self.init_seed = init_seed
        self.extract_layer = extract_layer
        self.variant = variant

    def _config(self) -> TrainConfig:
        return TrainConfig(m=self.m, n=self.n, tau=self.tau, k=self.k,
                           lambda1=self.lambda1, lambda2=self.lambda2, lr=self.lr,
                           stage1_epochs=self.stage1_epochs,
                           stage2_epochs=self.stage2_epochs,
                           batch_size=self.batch_size, w0=self.w0,
                           init_seed=self.init_seed,
                           extract_layer=self.extract_layer)

    def fit(self, X, y=None):
        weights = _require_weights(self.planner_weights)
        result = train_clap(weights, list(X), self._config(), variant=self.variant)
        self.prompt_pair_ = result.prompt_pair
        self.direction_ = result.direction
        self.stage1_report_ = result.stage1_report
        self.stage2_report_ = result.stage2_report
        return self

    def _check_fitted(self):
        if not hasattr(self, "prompt_pair_"):
            raise RuntimeError("call fit first")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        return _predict_waypoints(self.planner_weights, X,
                                  self.prompt_pair_.prompt_a,
                                  self.prompt_pair_.prompt_b)

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        return _pooled(self.planner_weights, X, self.prompt_pair_.prompt_a,
                       self.prompt_pair_.prompt_b, self.extract_layer)

    def score(self, X, y=None) -> float:
        self._check_fitted()
        return _neg_ade(self.planner_weights, X, self.prompt_pair_.prompt_a,
                        self.prompt_pair_.prompt_b)


class UnconstrainedPromptTuner(BaseEstimator):
    """Single soft prompt trained on MSE trajectory loss only; the
    classic baseline with no representation constraints."""

    def __init__(self, planner_weights=None, m=8, lr=0.03, epochs=100,
                 batch_size=None, init_seed=0, extract_layer=1):
        self.planner_weights = planner_weights
        self.m = m
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.init_seed = init_seed
        self.extract_layer = extract_layer

    def fit(self, X, y=None):
        weights = _require_weights(self.planner_weights)
        config = TrainConfig(m=self.m, lr=self.lr, stage2_epochs=self.epochs,
                             batch_size=self.batch_size, init_seed=self.init_seed,
                             extract_layer=self.extract_layer)
        self.prompt_, self.report_ = train_unconstrained(weights, list(X), config)
        return self

    def _check_fitted(self):
        if not hasattr(self, "prompt_"):
            raise RuntimeError("call fit first")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        return _predict_waypoints(self.planner_weights, X, self.prompt_, None)

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        return _pooled(self.planner_weights, X, self.prompt_, None, self.extract_layer)

    def score(self, X, y=None) -> float:
        self._check_fitted()
        return _neg_ade(self.planner_weights, X, self.prompt_, None)


class HardFramePartitioner(BaseEstimator):
    """Challenging/normal labeling of a roadblock dataset via segment
    proposals, margin validation and spatial clustering."""

    def __init__(self, planner_weights=None, delta=0.5, radius=25.0, oracle=None):
        self.planner_weights = planner_weights
        self.delta = delta
        self.radius = radius
        self.oracle = oracle

    def fit(self, X: RoadblockDataset, y=None):
        weights = _require_weights(self.planner_weights)
        oracle = self.oracle if self.oracle is not None else GeneratorOracle()
        self.result_ = partition_roadblock(X, weights, oracle,
                                           delta=self.delta, radius=self.radius)
        self.labels_ = dict(self.result_.labels)
        return self

    def transform(self, X: RoadblockDataset) -> RoadblockDataset:
        if not hasattr(self, "result_"):
            raise RuntimeError("call fit first")
        return labeled_dataset(X, self.result_)

    def fit_transform(self, X: RoadblockDataset, y=None) -> RoadblockDataset:
        return self.fit(X).transform(X)
