"""scikit-learn style wrappers around the voxelizer and the classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .features import featurize, load_charge_table, load_radii_table
from .network import MicroEnvNet, ModelConfig
from .structure import ProteinModel, extract_sites, sample_sites, select_chains
from .training import TrainConfig, predict, train
from .voxel import GridDataset, GridSpec, voxelize_sites


def check_grids(X, input_size: int = 20) -> np.ndarray:
    """Accept (n, 7, s, s, s) grids or their (n, 7*s^3) flattening; returns the 5-D float32 view."""
    shape = (7, input_size, input_size, input_size)
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim == 2 and X.shape[1] == int(np.prod(shape)):
        X = X.reshape((-1,) + shape)
    if X.ndim != 5 or X.shape[1:] != shape:
        raise ValueError(f"expected grids of shape (n, {', '.join(map(str, shape))}), got {X.shape}")
    return X


class MicroEnvironmentVoxelizer(TransformerMixin, BaseEstimator):
    """Protein structures -> per-residue microenvironment grids.

    ``transform`` takes a list of :class:`ProteinModel` and returns a
    :class:`GridDataset`; labels and site ids travel with the grids.
    """

    def __init__(self, chains=None, probe_radius=1.4, n_points=960, sample_threshold=200,
                 sample_cap=100, seed=0):
        self.chains = chains
        self.probe_radius = probe_radius
        self.n_points = n_points
        self.sample_threshold = sample_threshold
        self.sample_cap = sample_cap
        self.seed = seed

    def fit(self, X=None, y=None):
        self.charge_table_ = load_charge_table()
        self.radii_table_ = load_radii_table()
        return self

    def transform(self, X) -> GridDataset:
        check_is_fitted(self, "charge_table_")
        models = [X] if isinstance(X, ProteinModel) else list(X)
        parts = []
        for k, model in enumerate(models):
            if self.chains:
                model = select_chains(model, self.chains)
            sites = sample_sites(extract_sites(model), self.sample_threshold, self.sample_cap,
                                 seed=np.random.default_rng([self.seed, k]))
            feats = featurize(model, self.charge_table_, self.radii_table_, self.probe_radius, self.n_points)
            parts.append(GridDataset.from_grids(voxelize_sites(model, feats, sites, GridSpec())))
        return GridDataset.concatenate(parts)


class MicroEnvironmentClassifier(ClassifierMixin, BaseEstimator):
    """20-way residue-type classifier over microenvironment grids."""

    def __init__(self, model_config=None, lr=1e-5, weight_decay=1e-3, batch_size=150, epochs=8,
                 max_steps=None, stop_at_train_accuracy=None, seed=0):
        self.model_config = model_config
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.stop_at_train_accuracy = stop_at_train_accuracy
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        mc = self.model_config
        if mc is None:
            mc = ModelConfig()
        elif isinstance(mc, dict):
            mc = ModelConfig.from_dict(mc)
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                           epochs=self.epochs, max_steps=self.max_steps,
                           stop_at_train_accuracy=self.stop_at_train_accuracy, seed=self.seed, model=mc)

    def fit(self, X, y):
        cfg = self._train_config()
        X = check_grids(X, cfg.model.input_size)
        _, y = check_X_y(X.reshape(len(X), -1), y, dtype=None)
        y = np.asarray(y, dtype=np.int64)
        if y.min() < 0 or y.max() >= 20:
            raise ValueError("labels must lie in [0, 20)")
        data = GridDataset(X, y, [str(i) for i in range(len(y))])
        result = train(cfg, data)
        self.network_ = result.model
        self.history_ = result.history
        self.classes_ = np.arange(20)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_grids(X, self.network_.config.input_size)
        return predict(self.network_, X, self.batch_size)

    def predict(self, X) -> np.ndarray:
        probs = self.predict_proba(X)
        return self.classes_[np.argmax(probs, axis=1)]

    @classmethod
    def from_network(cls, network: MicroEnvNet, **params) -> "MicroEnvironmentClassifier":
        est = cls(model_config=network.config.to_dict(), **params)
        est.network_ = network
        est.classes_ = np.arange(20)
        est.n_features_in_ = int(np.prod((7,) + (network.config.input_size,) * 3))
        return est
