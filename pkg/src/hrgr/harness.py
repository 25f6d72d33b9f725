"""Toy end-to-end detector around the HRGR block, trained with AdamW.

The encoder is one pointwise affine map per pyramid level (level ``i`` is
the image mean-pooled ``i`` times by 2x2), the decoder a pointwise linear
head per level, nearest-upsampled to full resolution, summed and squashed
by a logistic.  Everything is one Wengert list, so the trainer only calls
:func:`~hrgr.autodiff.backprop_chain`.
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import DiffOp, Step, backprop_chain, run_chain
from .loss import FocalConfig, focal_loss_op
from .metrics import evaluate
from .reasoning import HrgrConfig, HrgrParams, block_steps
from .synthetic import SyntheticSpec, gen_forgery
from .tensor import matmul

__all__ = [
    "ToyConfig",
    "AdamW",
    "mean_pool",
    "model_steps",
    "init_model_params",
    "ToyManipulationDetector",
    "train_toy",
]

logger = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    h: int = 64
    w: int = 64
    k: int = 2
    m: int = 16
    T: int = 3
    C: int = 8
    channels: int = 8
    steps: int = 200
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 2
    n_train: int = 8
    n_eval: int = 4
    seed: int = 0
    mode: str = "full"
    freeze_mu: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.h % (2 ** (self.k - 1)) or self.w % (2 ** (self.k - 1)):
            raise ValueError(f"{self.h}x{self.w} is not divisible by 2^{self.k - 1}")
        if self.steps < 0 or self.batch_size < 1 or self.n_train < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and n_train >= 1 required")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


def mean_pool(x, times):
    for _ in range(times):
        h, w, c = x.shape
        x = x[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))
    return x


def _affine_fwd(x, w, b):
    flat = x.reshape(-1, x.shape[-1])
    out = matmul(flat, w) + b[None, :]
    return out.reshape(x.shape[:-1] + (w.shape[1],)), (x.shape, flat, w)


def _affine_vjp(cache, g):
    shape, flat, w = cache
    g2 = g.reshape(-1, w.shape[1])
    return matmul(g2, w.T).reshape(shape), matmul(flat.T, g2), g2.sum(axis=0)


def affine_op(name="affine"):
    def forward(x, w, b):
        out, cache = _affine_fwd(x, w, b)
        return (out,), cache

    return DiffOp(name, forward, _affine_vjp, 3)


def linear_op(name="linear"):
    def forward(x, w):
        flat = x.reshape(-1, x.shape[-1])
        out = matmul(flat, w).reshape(x.shape[:-1] + (w.shape[1],))
        return (out,), (x.shape, flat, w)

    def vjp(cache, g):
        shape, flat, w = cache
        g2 = g.reshape(-1, w.shape[1])
        return matmul(g2, w.T).reshape(shape), matmul(flat.T, g2)

    return DiffOp(name, forward, vjp, 2)


def upsample_op(factor):
    def forward(x):
        return (np.repeat(np.repeat(x, factor, axis=0), factor, axis=1),), x.shape

    def vjp(shape, g):
        h, w, c = shape
        return (g.reshape(h, factor, w, factor, c).sum(axis=(1, 3)),)

    return DiffOp("upsample", forward, vjp, 1)


def sum_sigmoid_op(k):
    """``(u_1..u_k, b) -> sigmoid(sum u_i + b)`` squeezed to ``h x w``."""
    def forward(*args):
        z = args[0][..., 0].copy()
        for u in args[1:k]:
            z = z + u[..., 0]
        z = z + args[k][0]
        y = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (y,), (y, args[0].shape)

    def vjp(cache, g):
        y, shape = cache
        gz = g * y * (1.0 - y)
        gu = gz.reshape(shape)
        return (*[gu] * k, np.array([gz.sum()]))

    return DiffOp("sum_sigmoid", forward, vjp, k + 1)


def model_steps(cfg, hrgr_cfg):
    """Wengert list from pyramid levels ``x{i}`` and ``mask`` to ``loss``."""
    k = cfg.k
    steps = []
    for i in range(k):
        steps.append(Step(affine_op("encoder"), (f"x{i}", f"enc{i}.W", f"enc{i}.b"), (f"f{i}",)))
    steps += block_steps(hrgr_cfg, k)
    for i in range(k):
        steps.append(Step(linear_op("decoder"), (f"out{i}", f"dec{i}.W"), (f"z{i}",)))
        steps.append(Step(upsample_op(2 ** i), (f"z{i}",), (f"u{i}",)))
    steps.append(Step(sum_sigmoid_op(k), tuple(f"u{i}" for i in range(k)) + ("dec.b",), ("y",)))
    return steps


def init_model_params(cfg, rng):
    params = {}
    for i in range(cfg.k):
        bound = 1.0 / math.sqrt(3)
        params[f"enc{i}.W"] = rng.uniform(-bound, bound, size=(3, cfg.channels))
        params[f"enc{i}.b"] = np.zeros(cfg.channels)
    hp = HrgrParams.init([cfg.channels] * cfg.k, graph_channels=cfg.C, rng=rng)
    params.update(hp.to_dict())
    for i in range(cfg.k):
        bound = 1.0 / math.sqrt(cfg.channels)
        params[f"dec{i}.W"] = rng.uniform(-bound, bound, size=(cfg.channels, 1))
    params["dec.b"] = np.zeros(1)
    return params


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, frozen=()):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in sorted(grads):
            if name in frozen or name not in params:
                continue
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.b1 * m + (1.0 - self.b1) * g
            v = self.b2 * v + (1.0 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            p = params[name]
            p = p - self.lr * self.weight_decay * p
            params[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _pyramid(image, k):
    return {f"x{i}": mean_pool(np.asarray(image, dtype=np.float64), i) for i in range(k)}


class ToyManipulationDetector(ClassifierMixin, BaseEstimator):
    """Pixel-wise manipulation detector with an HRGR block in the middle.

    Parameters
    ----------
    n_levels : int
        Pyramid levels fed to the block.
    n_regions, n_iter, graph_channels, channels : int
        Regions per level, partition iterations, graph width ``C`` and
        encoder width.
    mode : {"full", "grid", "intra", "fc"}
        Block ablation.
    steps, lr, weight_decay, batch_size :
        AdamW schedule; ``lr`` is constant.
    freeze_mu : bool
        Keep every fusion weight at 0, which disables the block.
    random_state : int or None
    """

    def __init__(self, n_levels=2, n_regions=16, n_iter=3, graph_channels=8, channels=8,
                 mode="full", steps=200, lr=1e-3, weight_decay=0.05, batch_size=2,
                 freeze_mu=False, random_state=None):
        self.n_levels = n_levels
        self.n_regions = n_regions
        self.n_iter = n_iter
        self.graph_channels = graph_channels
        self.channels = channels
        self.mode = mode
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.freeze_mu = freeze_mu
        self.random_state = random_state

    def _configs(self, h, w):
        cfg = ToyConfig(h=h, w=w, k=self.n_levels, m=self.n_regions, T=self.n_iter,
                        C=self.graph_channels, channels=self.channels, steps=self.steps,
                        lr=self.lr, weight_decay=self.weight_decay,
                        batch_size=self.batch_size, mode=self.mode,
                        freeze_mu=self.freeze_mu)
        hcfg = HrgrConfig(n_regions=self.n_regions, n_iter=self.n_iter, mode=self.mode)
        return cfg, hcfg

    def _check_images(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[-1] != 3:
            raise ValueError(f"expected images of shape (n, h, w, 3), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("images contain non-finite values")
        return X

    def _sample_loss_grads(self, image, mask, with_grads=True):
        values = dict(self.params_)
        values.update(_pyramid(image, self.n_levels))
        steps = self.steps_ + [Step(focal_loss_op(mask, FocalConfig(), "mean"), ("y",), ("loss",))]
        env, saved = run_chain(steps, values)
        loss = float(env["loss"])
        if not with_grads:
            return loss, None
        grads = backprop_chain(steps, env, {"loss": np.asarray(1.0)}, saved=saved)
        return loss, grads

    def loss(self, X, y):
        """Mean focal loss over images."""
        check_is_fitted(self, "params_")
        X = self._check_images(X)
        y = np.asarray(y).reshape(X.shape[:3])
        return float(np.mean([self._sample_loss_grads(img, m, False)[0] for img, m in zip(X, y)]))

    def fit(self, X, y):
        X = self._check_images(X)
        y = np.asarray(y)
        if y.shape != X.shape[:3]:
            raise ValueError(f"masks {y.shape} do not match images {X.shape[:3]}")
        rng = np.random.default_rng(self.random_state)
        cfg, hcfg = self._configs(X.shape[1], X.shape[2])
        self.steps_ = model_steps(cfg, hcfg)
        self.params_ = init_model_params(cfg, rng)
        frozen = ()
        if self.freeze_mu:
            frozen = tuple(f"mu{i}" for i in range(self.n_levels))
            for name in frozen:
                self.params_[name] = np.zeros(1)
        opt = AdamW(lr=self.lr, weight_decay=self.weight_decay)
        self.loss_curve_ = []
        self.first_grads_ = None
        self.initial_loss_ = self.loss(X, y)
        order = rng.permutation(len(X))
        cursor = 0
        for step in range(self.steps):
            batch = []
            for _ in range(self.batch_size):
                if cursor == len(order):
                    order = rng.permutation(len(X))
                    cursor = 0
                batch.append(order[cursor])
                cursor += 1
            total = {}
            losses = []
            for idx in batch:
                loss, grads = self._sample_loss_grads(X[idx], y[idx])
                if not math.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at step {step}")
                losses.append(loss)
                for name, g in grads.items():
                    if name in self.params_:
                        total[name] = total.get(name, 0.0) + g / len(batch)
            if step == 0:
                self.first_grads_ = {k: np.array(v) for k, v in total.items()}
            self.loss_curve_.append(float(np.mean(losses)))
            opt.step(self.params_, total, frozen)
            if step % 20 == 0:
                logger.info("step %d loss %.5f", step, self.loss_curve_[-1])
        return self

    def predict_proba(self, X):
        """Per-pixel manipulation probability, shape ``(n, h, w)``."""
        check_is_fitted(self, "params_")
        X = self._check_images(X)
        out = []
        for image in X:
            values = dict(self.params_)
            values.update(_pyramid(image, self.n_levels))
            env, _ = run_chain(self.steps_, values)
            out.append(env["y"])
        return np.stack(out)

    def predict(self, X):
        return (self.predict_proba(X) > 0.5).astype(np.uint32)

    def score(self, X, y, sample_weight=None):
        """Pixel AUC over all images."""
        return evaluate(self.predict_proba(X), y).auc


def make_forgeries(n, h, w, seed):
    images, masks = [], []
    seeds = np.random.SeedSequence(seed).generate_state(n)
    for s in seeds:
        img, mask = gen_forgery(SyntheticSpec(h=h, w=w, kind="forgery", seed=int(s)))
        images.append(img)
        masks.append(mask)
    return np.stack(images), np.stack(masks)


def train_toy(cfg=None, **overrides):
    """Train :class:`ToyManipulationDetector` on synthetic forgeries.

    Returns a report with the per-step batch losses, the mean focal loss
    over the training set before and after training, held-out AUC/F1 and
    the configuration.
    """
    cfg = ToyConfig(**overrides) if cfg is None else cfg
    X, y = make_forgeries(cfg.n_train, cfg.h, cfg.w, cfg.seed)
    Xe, ye = make_forgeries(cfg.n_eval, cfg.h, cfg.w, cfg.seed + 1_000_003)
    model = ToyManipulationDetector(
        n_levels=cfg.k, n_regions=cfg.m, n_iter=cfg.T, graph_channels=cfg.C,
        channels=cfg.channels, mode=cfg.mode, steps=cfg.steps, lr=cfg.lr,
        weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
        freeze_mu=cfg.freeze_mu, random_state=cfg.seed,
    )
    model.fit(X, y)
    initial = model.initial_loss_
    final = model.loss(X, y)
    result = evaluate(model.predict_proba(Xe), ye)
    mu_grads = [float(model.first_grads_[f"mu{i}"][0])
                for i in range(cfg.k)] if model.first_grads_ else []
    return {
        "losses": model.loss_curve_,
        "initial_loss": initial,
        "final_loss": final,
        "auc": result.auc,
        "f1": result.f1,
        "eer_threshold": result.eer_threshold,
        "mu_grad_step1": mu_grads,
        "config": asdict(cfg),
    }
