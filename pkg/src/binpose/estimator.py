"""scikit-learn style wrapper around the two-stage pipeline."""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import RunConfig, load_config
from .errors import ContractError
from .evaluation import EvalConfig, evaluate
from .models import load_model
from .pipeline import PoseNetwork, infer, registration_examples, train_heads, train_registration
from .render import DepthImage, FrameAnnotation


def check_depth_images(X, image_size=None):
    """List of DepthImage from DepthImages or a (N, H, W) array of depths."""
    if isinstance(X, np.ndarray):
        if X.ndim != 3:
            raise ContractError(f"depth array must be (N, H, W), got shape {X.shape}")
        X = [DepthImage(x.shape[1], x.shape[0], x) for x in X]
    X = list(X)
    if not X:
        raise ContractError("no depth images")
    for img in X:
        if not isinstance(img, DepthImage):
            raise ContractError(f"expected DepthImage, got {type(img).__name__}")
        if not np.all(np.isfinite(img.depth)):
            raise ContractError("depth image contains non-finite values")
        if image_size is not None and (img.width, img.height) != tuple(image_size):
            raise ContractError(f"image size {img.width}x{img.height} != {tuple(image_size)}")
    return X


def check_annotations(y, n):
    y = list(y)
    if len(y) != n:
        raise ContractError(f"{n} images but {len(y)} annotations")
    for a in y:
        if not isinstance(a, FrameAnnotation):
            raise ContractError(f"expected FrameAnnotation, got {type(a).__name__}")
    return y


class BinPickingPoseEstimator(BaseEstimator):
    """Depth image -> 6D pose hypotheses of every visible instance.

    ``fit`` trains the backbone, detector and pose heads jointly, then the
    registration net on hypotheses of the frozen heads.  ``predict`` returns a
    list of hypotheses per frame; ``score`` is the Sym average precision.
    """

    def __init__(self, config=None, heads_steps=None, jointreg_steps=None, use_offset=True,
                 use_registration=True, random_state=0):
        self.config = config
        self.heads_steps = heads_steps
        self.jointreg_steps = jointreg_steps
        self.use_offset = use_offset
        self.use_registration = use_registration
        self.random_state = random_state

    def _run_config(self):
        if isinstance(self.config, RunConfig):
            cfg = dataclasses.replace(self.config, seed=self.random_state)
        else:
            cfg = load_config(self.config, {"seed": self.random_state})
        return cfg

    def fit(self, X, y):
        cfg = self._run_config()
        X = check_depth_images(X, cfg.views.image_size)
        y = check_annotations(y, len(X))
        self.config_ = cfg
        self.model_ = load_model(dataclasses.asdict(cfg.model))
        self.network_ = PoseNetwork(cfg, self.model_)
        self.loss_trace_ = train_heads(self.network_, X, y, steps=self.heads_steps)
        self.registration_trace_ = []
        if self.use_registration:
            ids = [str(i) for i in range(len(X))]
            examples = registration_examples(self.network_, X, y, ids)
            self.registration_trace_ = train_registration(self.network_, examples,
                                                          steps=self.jointreg_steps)
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("BinPickingPoseEstimator is not fitted")

    def predict(self, X, views):
        self._check_fitted()
        X = check_depth_images(X, self.config_.views.image_size)
        if len(views) != len(X):
            raise ContractError(f"{len(X)} images but {len(views)} views")
        results = infer(self.network_, X, list(views), [str(i) for i in range(len(X))],
                        use_offset=self.use_offset, use_registration=self.use_registration)
        return [r.final for r in results]

    def score(self, X, y):
        """Sym average precision of the predictions against annotations ``y``."""
        self._check_fitted()
        y = check_annotations(y, len(X))
        preds = self.predict(X, [a.view for a in y])
        gt = {str(i): [(a.pose, a.visibility) for a in ann.instances] for i, ann in enumerate(y)}
        pr = {str(i): [(h.pose, h.confidence) for h in hyps] for i, hyps in enumerate(preds)}
        return evaluate(pr, gt, self.model_, EvalConfig("sym")).ap
