"""scikit-learn style front ends for the partition and the HRGR block."""

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_feature_list, check_feature_map
from .dfp import ChannelReducer, DfpConfig, run_dfp
from .graph import default_threads
from .reasoning import HrgrConfig, HrgrParams, hrgr_block

__all__ = ["DifferentiableFeaturePartition", "HRGRTransformer"]


class DifferentiableFeaturePartition(ClusterMixin, TransformerMixin, BaseEstimator):
    """Soft-cluster the elements of one ``h x w x c`` feature map into regions.

    Parameters
    ----------
    n_regions : int, default=64
        Number of regions; must factor into a grid that fits the map.
    n_iter : int, default=5
        Soft assignment / centre update rounds.
    reduced_channels : int, optional
        Width of the reduced space; defaults to ``min(16, c' - 1)``.
    coord_scale : float, optional
        Multiplier for the appended pixel coordinates.  ``None`` means
        ``sqrt(n_regions / (h * w))``.
    use_coords : bool, default=True
    partition_mode : {"soft-dfp", "regular-grid"}, default="soft-dfp"
    epsilon : float, default=1e-8
    reducer : ChannelReducer, optional
        Fixed reducer weights; drawn from ``random_state`` when omitted.
    random_state : int or None

    Attributes
    ----------
    labels_ : ndarray of shape (h, w)
        1-based hard region of each element.
    association_ : ndarray of shape (h * w, n_regions)
    cluster_centers_ : ndarray of shape (n_regions, reduced_channels)
    reducer_ : ChannelReducer
    """

    def __init__(self, n_regions=64, n_iter=5, reduced_channels=None, coord_scale=None,
                 use_coords=True, partition_mode="soft-dfp", epsilon=1e-8, reducer=None,
                 random_state=None):
        self.n_regions = n_regions
        self.n_iter = n_iter
        self.reduced_channels = reduced_channels
        self.coord_scale = coord_scale
        self.use_coords = use_coords
        self.partition_mode = partition_mode
        self.epsilon = epsilon
        self.reducer = reducer
        self.random_state = random_state

    def _config(self):
        return DfpConfig(n_regions=self.n_regions, n_iter=self.n_iter,
                         coord_scale=self.coord_scale, use_coords=self.use_coords,
                         partition_mode=self.partition_mode, epsilon=self.epsilon)

    def fit(self, X, y=None):
        X = check_feature_map(X)
        cfg = self._config()
        c_in = X.shape[2] + (2 if self.use_coords else 0)
        if self.reducer is not None:
            self.reducer_ = self.reducer
        else:
            c_out = self.reduced_channels or min(16, c_in - 1)
            self.reducer_ = ChannelReducer.init(c_in, c_out, self.random_state)
        if self.reducer_.in_channels != c_in:
            raise ValueError(
                f"reducer expects {self.reducer_.in_channels} channels, map gives {c_in}"
            )
        self.n_features_in_ = X.shape[2]
        self.association_, self.cluster_centers_, self.labels_ = run_dfp(X, self.reducer_, cfg)
        return self

    def _run(self, X):
        check_is_fitted(self, "reducer_")
        X = check_feature_map(X)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"fitted on {self.n_features_in_} channels, got {X.shape[2]}")
        return run_dfp(X, self.reducer_, self._config())

    def predict(self, X):
        """Hard region labels of a new map using the fitted reducer."""
        return self._run(X)[2]

    def transform(self, X):
        """Soft association matrix ``(h * w, n_regions)``."""
        return self._run(X)[0]


class HRGRTransformer(TransformerMixin, BaseEstimator):
    """Enhance a pyramid of feature maps with hierarchical region-graph reasoning.

    ``X`` is a list of ``k`` arrays of shape ``(h_i, w_i, c_i)``.  :meth:`fit`
    only draws the block weights for the given channel layout; it does not
    train them.

    Parameters
    ----------
    n_regions : int or list of int, default=16
    n_iter : int, default=5
    graph_channels : int, optional
        Node width ``C``; defaults to the widest layer.
    reduced_channels : int, optional
    rounds : int, default=1
        Message-passing + regularisation rounds.
    mode : {"full", "grid", "intra", "fc"}, default="full"
    self_loops : bool, default=True
    use_coords : bool, default=True
    coord_scale : float, optional
    params : HrgrParams, optional
        Use these weights instead of drawing new ones.
    n_jobs : int, optional
        Adjacency worker threads; ``None`` reads ``HRGR_THREADS``.
    random_state : int or None
    """

    def __init__(self, n_regions=16, n_iter=5, graph_channels=None, reduced_channels=None,
                 rounds=1, mode="full", self_loops=True, use_coords=True, coord_scale=None,
                 params=None, n_jobs=None, random_state=None):
        self.n_regions = n_regions
        self.n_iter = n_iter
        self.graph_channels = graph_channels
        self.reduced_channels = reduced_channels
        self.rounds = rounds
        self.mode = mode
        self.self_loops = self_loops
        self.use_coords = use_coords
        self.coord_scale = coord_scale
        self.params = params
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _config(self):
        return HrgrConfig(n_regions=self.n_regions, n_iter=self.n_iter, rounds=self.rounds,
                          mode=self.mode, self_loops=self.self_loops,
                          use_coords=self.use_coords, coord_scale=self.coord_scale,
                          threads=self.n_jobs or default_threads())

    def fit(self, X, y=None):
        X = check_feature_list(X)
        self.channels_ = [x.shape[2] for x in X]
        if self.params is not None:
            if self.params.channels != self.channels_:
                raise ValueError(f"params for channels {self.params.channels}, "
                                 f"data has {self.channels_}")
            self.params_ = self.params
        else:
            self.params_ = HrgrParams.init(self.channels_, self.graph_channels,
                                           self.reduced_channels, self.use_coords,
                                           self.random_state)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_feature_list(X)
        out, diag = hrgr_block(X, self.params_, self._config())
        self.labels_ = diag["labels"]
        self.adjacency_ = diag["A"]
        return out
