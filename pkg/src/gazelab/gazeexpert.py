"""A small convolutional gaze regressor used as a frozen expert.

The expert maps face images to ``(mu, phi)``; it is trained on synthetic
faces by minimising the mean angle between predicted and labelled gaze
directions, then frozen so swap training can differentiate through it without
ever updating it.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import tensorcore as tc
from ._validation import check_gaze, check_images
from .losses import angle_between
from .rng import Rng, derive_seed
from .tensorcore import Adam, ParamSet, Tensor
from .tensorcore.layers import conv, dense, init_conv, init_dense
from .tensorcore.params import write_atomic


class FrozenExpertError(RuntimeError):
    pass


class GazeExpert(BaseEstimator, RegressorMixin):
    """Three stride-2 conv blocks and two dense layers regressing gaze angles.

    Parameters
    ----------
    input_size : int
        Side length images are resized to before the network.
    channels : tuple of int
        Widths of the three conv blocks.
    hidden : int
        Width of the first dense layer.
    epochs, batch_size, lr : training schedule (Adam).
    warmup_epochs : int
        Leading epochs trained on ``(1 - cos dmu) + dphi**2`` instead of the
        angle. The angle alone has a flat region at phi = 0, where mu gets no
        gradient, and a cold start tends to fall into it.
    seed : int
        Seeds weight init and minibatch order.
    degrade_deg : float
        Optional deterministic, input-dependent bias (degrees) added to the
        predicted polar angle, to mimic a less accurate predictor. Off by
        default.
    """

    def __init__(self, input_size=64, channels=(8, 16, 32), hidden=64, kernel_size=3, epochs=20,
                 warmup_epochs=2, batch_size=32, lr=1e-3, seed=0, degrade_deg=0.0, verbose=False):
        self.input_size = input_size
        self.channels = channels
        self.hidden = hidden
        self.kernel_size = kernel_size
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.degrade_deg = degrade_deg
        self.verbose = verbose

    # network

    def _init_params(self) -> ParamSet:
        rng = Rng(derive_seed(self.seed, "expert-init"))
        ps = ParamSet(rng_seed=self.seed)
        c_in = 3
        for i, c in enumerate(self.channels):
            init_conv(ps, f"conv{i}", c_in, c, self.kernel_size, rng)
            c_in = c
        side = self.input_size // 2 ** len(self.channels)
        init_dense(ps, "fc0", c_in * side * side, self.hidden, rng)
        init_dense(ps, "fc1", self.hidden, 2, rng, gain=0.1)
        if self.degrade_deg:
            proj = rng.normal_array((3 * self.input_size * self.input_size,))
            self._degrade_proj = proj / np.linalg.norm(proj) * 8.0
        return ps

    def preprocess(self, images) -> Tensor:
        """Bilinear resize to ``input_size`` then per-channel standardisation."""
        x = tc.as_tensor(images)
        if x.ndim == 3:
            x = tc.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != 3:
            raise tc.ShapeError(f"expert expects (N, 3, H, W) images, got {x.shape}")
        x = tc.resize_bilinear(x, self.input_size)
        mean = np.asarray(self.norm_mean_, dtype=np.float64).reshape(1, 3, 1, 1)
        std = np.asarray(self.norm_std_, dtype=np.float64).reshape(1, 3, 1, 1)
        return (x - mean) / std

    def _param(self, name: str) -> Tensor:
        p = self.params_[name]
        return Tensor(p.data) if self.frozen_ else p

    def _network(self, x: Tensor) -> Tensor:
        view = _ParamView(self)
        for i in range(len(self.channels)):
            x = tc.leaky_relu(conv(x, view, f"conv{i}", stride=2))
        x = tc.reshape(x, (x.shape[0], -1))
        x = tc.leaky_relu(dense(x, view, "fc0"))
        return dense(x, view, "fc1")

    def forward_tensor(self, images) -> tuple[Tensor, Tensor]:
        """Differentiable ``(mu, phi)`` for an image batch; phi lies in [0, pi/2]."""
        check_is_fitted(self, "params_")
        x = self.preprocess(images)
        out = self._network(x)
        mu = out[:, 0]
        phi = tc.sigmoid(out[:, 1]) * (math.pi / 2)
        if self.degrade_deg:
            flat = tc.reshape(x, (x.shape[0], -1))
            bias = tc.sin(tc.matmul(flat, Tensor(self._degrade_proj.reshape(-1, 1))))
            phi = phi + tc.reshape(bias, (-1,)) * math.radians(self.degrade_deg)
        return mu, phi

    # estimator API

    def fit(self, X, y):
        """Train on images ``X`` (n, 3, H, W) with labels ``y`` (n, 2) = (mu, phi)."""
        if y is None:
            raise ValueError("GazeExpert.fit needs gaze labels")
        if getattr(self, "frozen_", False):
            raise FrozenExpertError("cannot fit a frozen expert")
        X = check_images(X)
        y = check_gaze(y, len(X))
        self.params_ = self._init_params()
        self.frozen_ = False
        self.norm_mean_ = X.mean(axis=(0, 2, 3)).tolist()
        self.norm_std_ = (X.std(axis=(0, 2, 3)) + 1e-6).tolist()
        opt = Adam(lr=self.lr)
        order_rng = Rng(derive_seed(self.seed, "expert-batches"))
        n = len(X)
        self.history_ = []
        for epoch in range(self.epochs):
            perm = order_rng.permutation(n)
            losses = []
            for start in range(0, n, self.batch_size):
                idx = np.sort(perm[start:start + self.batch_size])
                self.params_.zero_grad()
                mu, phi = self.forward_tensor(X[idx])
                mu_t, phi_t = Tensor(y[idx, 0]), Tensor(y[idx, 1])
                if epoch < self.warmup_epochs:
                    loss = tc.mean(1.0 - tc.cos(mu - mu_t) + tc.square(phi - phi_t))
                else:
                    loss = tc.mean(angle_between(mu, phi, mu_t, phi_t))
                loss.backward()
                opt.step(self.params_)
                losses.append(loss.item())
            self.history_.append(float(np.mean(losses)))
            if self.verbose:
                print(f"expert epoch {epoch}: mean angle {math.degrees(self.history_[-1]):.2f} deg")
        self.params_.zero_grad()
        return self

    def predict(self, X, batch_size: int = 64) -> np.ndarray:
        """Predicted ``(mu, phi)`` per image, shape (n, 2)."""
        check_is_fitted(self, "params_")
        X = check_images(X)
        out = np.zeros((len(X), 2))
        with tc.no_grad():
            for s in range(0, len(X), batch_size):
                mu, phi = self.forward_tensor(X[s:s + batch_size])
                out[s:s + batch_size, 0] = mu.data
                out[s:s + batch_size, 1] = phi.data
        return out

    def score(self, X, y, sample_weight=None) -> float:
        """Negative mean angular error in degrees (higher is better)."""
        return -float(np.mean(angular_errors_deg(self.predict(X), check_gaze(y, len(X)))))

    def freeze(self) -> "GazeExpert":
        check_is_fitted(self, "params_")
        self.frozen_ = True
        self.params_.zero_grad()
        return self

    # persistence

    def save(self, path) -> None:
        """Write ``<path>`` (GZLB-P1 parameters) and ``<path>.json`` metadata."""
        check_is_fitted(self, "params_")
        path = Path(path)
        self.params_.save(path)
        meta = {
            "estimator": self.get_params(),
            "norm_mean": self.norm_mean_,
            "norm_std": self.norm_std_,
            "frozen": bool(self.frozen_),
            "history_deg": [math.degrees(h) for h in getattr(self, "history_", [])],
        }
        meta["estimator"]["channels"] = list(self.channels)
        write_atomic(Path(str(path) + ".json"), json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "GazeExpert":
        path = Path(path)
        sidecar = Path(str(path) + ".json")
        if not path.exists() or not sidecar.exists():
            raise FileNotFoundError(f"expert checkpoint not found: expected {path} and {sidecar}")
        meta = json.loads(sidecar.read_text())
        kwargs = dict(meta["estimator"])
        kwargs["channels"] = tuple(kwargs["channels"])
        expert = cls(**kwargs)
        expert.params_ = ParamSet.load(path, rng_seed=expert.seed)
        if expert.degrade_deg:
            expert._init_params()  # restores the fixed degradation projection
        expert.norm_mean_ = meta["norm_mean"]
        expert.norm_std_ = meta["norm_std"]
        expert.frozen_ = bool(meta["frozen"])
        return expert

    def digest(self) -> str:
        check_is_fitted(self, "params_")
        return self.params_.digest()


class _ParamView:
    """Name lookup that hands out constants instead of leaves when frozen."""

    def __init__(self, expert: GazeExpert):
        self.expert = expert

    def __getitem__(self, name: str) -> Tensor:
        return self.expert._param(name)


def freeze(expert: GazeExpert) -> GazeExpert:
    return expert.freeze()


def angular_errors_deg(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    with tc.no_grad():
        theta = angle_between(pred[:, 0], pred[:, 1], truth[:, 0], truth[:, 1])
    return np.degrees(theta.data)
