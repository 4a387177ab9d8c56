"""scikit-learn style front end for the whole pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import MODALITIES, RunConfig
from .diffusion import SampleRequest, cosine_schedule, sample_many
from .errors import DataError, UsageError
from .geometry import CameraPose
from .metrics import score
from .pipeline import encode_views, render_features
from .scenes import MultiModalDataset, Rig


@dataclass
class Query:
    """Posed, modality-tagged sources plus the pose and modality to synthesize."""

    sources: list  # (image, pose, modality)
    target_pose: CameraPose
    target_modality: str
    target_image: np.ndarray | None = None


def as_query(item) -> Query:
    if isinstance(item, Query):
        q = item
    elif hasattr(item, "sources") and hasattr(item, "target"):
        q = Query([(s.image, s.pose, s.modality) for s in item.sources], item.target.pose,
                  item.target.modality, item.target.image)
    else:
        raise UsageError(f"cannot interpret {type(item).__name__} as a synthesis query")
    if not q.sources:
        raise UsageError("a query needs at least one source view")
    for img, pose, modality in q.sources:
        if modality not in MODALITIES:
            raise UsageError(f"unknown modality {modality!r}")
        if np.ndim(img) != 3 or np.shape(img)[-1] != 3:
            raise UsageError(f"source images must be (H, W, 3), got {np.shape(img)}")
        if not np.all(np.isfinite(img)):
            raise UsageError("source image contains non-finite values")
    if q.target_modality not in MODALITIES:
        raise UsageError(f"unknown target modality {q.target_modality!r}")
    return q


def check_queries(X) -> list[Query]:
    if isinstance(X, (Query,)) or hasattr(X, "sources"):
        X = [X]
    queries = [as_query(x) for x in X]
    if not queries:
        raise UsageError("no queries given")
    return queries


class CrossModalityDiffusion(TransformerMixin, BaseEstimator):
    """Multi-modal novel view synthesis.

    ``fit`` pretrains on EO views, clones the EO modules into every
    modality and trains all of them jointly. ``transform`` returns the
    rendered feature images (the shared intermediate representation) and
    ``predict`` runs conditional diffusion sampling.
    """

    def __init__(self, pretrain_steps=2000, joint_steps=4000, batch_size=8, lr=2e-4, s_max=3,
                 n_samples=16, seed=0, config=None):
        self.pretrain_steps = pretrain_steps
        self.joint_steps = joint_steps
        self.batch_size = batch_size
        self.lr = lr
        self.s_max = s_max
        self.n_samples = n_samples
        self.seed = seed
        self.config = config

    def _run_config(self, base: RunConfig) -> RunConfig:
        return base.replace(pretrain_steps=self.pretrain_steps, joint_steps=self.joint_steps,
                            batch_size=self.batch_size, lr=self.lr, s_max=self.s_max,
                            n_samples=self.n_samples, seed=self.seed)

    def fit(self, X, y=None):
        from .persistence import load_dataset
        from .training import bootstrap_from_eo, pretrain_eo, train_joint

        ds = X if isinstance(X, MultiModalDataset) else load_dataset(X)
        if not ds.scene_ids:
            raise DataError("empty dataset")
        base = self.config if self.config is not None else ds.config
        cfg = self._run_config(base)
        registry, pre = pretrain_eo(None, ds, cfg)
        registry = bootstrap_from_eo(registry)
        registry, joint = train_joint(registry, ds, cfg)
        self.registry_ = registry
        self.run_config_ = cfg
        self.loss_log_ = {"pretrain": pre, "joint": joint}
        return self

    @classmethod
    def from_registry(cls, registry) -> "CrossModalityDiffusion":
        c = registry.config
        est = cls(c.pretrain_steps, c.joint_steps, c.batch_size, c.lr, c.s_max, c.n_samples, c.seed, c)
        est.registry_ = registry
        est.run_config_ = c
        return est

    def _encode(self, queries):
        rig = Rig(self.run_config_)
        with torch.no_grad():
            vols = encode_views(self.registry_, [q.sources for q in queries], rig)
        return rig, vols

    def transform(self, X) -> np.ndarray:
        """Feature images, shape (n, Hf, Wf, C)."""
        check_is_fitted(self, "registry_")
        queries = check_queries(X)
        rig, vols = self._encode(queries)
        out = []
        with torch.no_grad():
            for i, (q, v) in enumerate(zip(queries, vols)):
                f = render_features(self.registry_, v, q.target_pose, q.target_modality, rig,
                                    np.random.default_rng([self.seed, i]))
                out.append(f.data.cpu().numpy())
        return np.stack(out)

    def predict(self, X) -> np.ndarray:
        """Synthesized target images, shape (n, H, W, 3) in [-1, 1]."""
        check_is_fitted(self, "registry_")
        queries = check_queries(X)
        rig, vols = self._encode(queries)
        reqs = [SampleRequest(v, q.target_pose, q.target_modality, np.random.default_rng([self.seed, i]))
                for i, (q, v) in enumerate(zip(queries, vols))]
        return np.stack(sample_many(self.registry_, reqs, cosine_schedule(self.run_config_.timesteps), rig))

    def score(self, X, y=None) -> float:
        """Mean PSNR of predictions against the queries' target images."""
        queries = check_queries(X)
        if any(q.target_image is None for q in queries):
            raise UsageError("scoring needs target images")
        preds = self.predict(queries)
        return float(np.mean([score(p, q.target_image, q.target_modality)[0] for p, q in zip(preds, queries)]))
