"""Test-time objectives and adapt-then-predict procedures.

Objectives work on a ``(B, C)`` tensor of per-copy predictive distributions:

* marginal entropy      ``H(mean_i p_i)``
* conditional entropy   ``mean_i H(p_i)``
* pairwise cross entropy ``mean_{i != j} H(p_i, p_j)``

Every ``log`` of a probability goes through :data:`EPS`: ``p log p := 0`` for
``p <= EPS`` and ``log q := log EPS`` for ``q <= EPS``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .augment import AugmentationPolicy, sample_augmentations
from .nn import Model
from .optim import make_update_rule
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

EPS = 1e-12

STRATEGIES = ("memo", "tta", "ce_single_point", "pce", "tent_batch", "bn_only", "none")
UPDATE_RULES = ("sgd", "sgd_momentum", "adaptive_moments")
PARAM_FILTERS = ("all", "norm_affine_only")
BN_STATS_SOURCES = ("augmented", "original")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class AdaptationConfig:
    strategy: str = "memo"
    B: int = 32
    lr: float = 0.005
    steps: int = 1
    update_rule: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    prior_strength: float = 16.0
    threshold_fraction: Optional[float] = None
    param_filter: str = "all"
    episodic: bool = True
    tent_batch_size: int = 64
    bn_stats_source: str = "augmented"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"unknown update rule {self.update_rule!r}")
        if self.param_filter not in PARAM_FILTERS:
            raise ValueError(f"unknown param filter {self.param_filter!r}")
        if self.bn_stats_source not in BN_STATS_SOURCES:
            raise ValueError(f"unknown bn_stats_source {self.bn_stats_source!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.prior_strength < 0:
            raise ValueError("prior_strength must be >= 0 (inf disables BN mixing)")
        if self.threshold_fraction is not None and not 0 < self.threshold_fraction <= 1:
            raise ValueError("threshold_fraction must lie in (0, 1]")
        if self.tent_batch_size < 1:
            raise ValueError("tent_batch_size must be >= 1")

    def with_(self, **kw) -> "AdaptationConfig":
        return replace(self, **kw)


@dataclass
class EvalRecord:
    index: int
    label: int
    pred: int
    loss_before: float
    loss_after: float
    marginal_entropy: float
    seconds: float
    strategy: str
    adapted: bool = False
    flag: str = ""


# ---------------------------------------------------------------------------
# objectives on probability matrices

def _as_probs(probs) -> Tensor:
    if not isinstance(probs, Tensor):
        probs = Tensor(np.asarray(probs, dtype=np.float64))
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise ValueError(f"expected a (B, C) probability matrix with B >= 1, got {probs.shape}")
    return probs


def entropy(p) -> Tensor:
    """Shannon entropy of one distribution (1-D)."""
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, np.float64))
    return -T.plogp(p, EPS).sum()


def marginal_entropy(probs) -> Tensor:
    probs = _as_probs(probs)
    return entropy(probs.mean(axis=0))


def conditional_entropy(probs) -> Tensor:
    probs = _as_probs(probs)
    return -T.plogp(probs, EPS).sum() / probs.shape[0]


def pairwise_cross_entropy(probs) -> Tensor:
    probs = _as_probs(probs)
    b = probs.shape[0]
    if b < 2:
        raise ValueError(f"pairwise cross entropy needs B >= 2 copies, got {b}")
    logq = T.clamped_log(probs, EPS)
    cross = (probs @ logq.T).sum()            # all ordered pairs incl. i == j
    diag = (probs * logq).sum()
    return -(cross - diag) / (b * (b - 1))


OBJECTIVES = {
    "memo": marginal_entropy,
    "ce_single_point": conditional_entropy,
    "pce": pairwise_cross_entropy,
}


# ---------------------------------------------------------------------------
# BN context

@dataclass
class BNContext:
    """Which BN statistics a forward pass uses: running (``eval``) or supplied (``mixed``)."""
    mode: str = "eval"
    stats: Optional[list] = None

    def forward(self, model: Model, batch) -> Tensor:
        return model.forward(batch, bn_mode=self.mode, bn_stats=self.stats)


def single_point_bn_stats(model: Model, batch, prior_strength: float) -> list:
    """Per-BN-layer ``(mean, var)`` mixing this batch's statistics into the training ones.

    Layer ``l``'s test statistics are measured on activations that were
    themselves normalized with the mixed statistics of layers ``< l``.
    """
    batch = np.asarray(batch, model.dtype)
    if batch.ndim == len(model.input_shape):
        batch = batch[None]
    if len(batch) < 1:
        raise ValueError("need at least one example")
    collected: list = []
    with no_grad():
        model.forward(batch, bn_mode="collect", prior_strength=prior_strength, collect=collected)
    return collected


def bn_context(model: Model, batch, prior_strength: float) -> BNContext:
    if math.isinf(prior_strength) or not model.bn_layers():
        return BNContext("eval")
    return BNContext("mixed", single_point_bn_stats(model, batch, prior_strength))


def predictive(model: Model, batch, ctx: BNContext) -> Tensor:
    return T.softmax(ctx.forward(model, np.asarray(batch, model.dtype)))


def marginal_distribution(model: Model, x, augmented: Sequence, ctx: Optional[BNContext] = None) -> np.ndarray:
    if len(augmented) < 1:
        raise ValueError("marginal distribution needs B >= 1 augmented copies")
    with no_grad():
        return predictive(model, np.stack(augmented), ctx or BNContext()).data.mean(axis=0)


def _check_finite(loss: Tensor, probs: Tensor, what: str) -> Tensor:
    if not math.isfinite(loss.item()):
        raise NonFiniteLoss(f"{what} is not finite; marginal = {probs.data.mean(axis=0)!r}")
    return loss


def marginal_entropy_loss(model, x, augmented, ctx: Optional[BNContext] = None) -> Tensor:
    probs = predictive(model, np.stack(augmented), ctx or BNContext())
    return _check_finite(marginal_entropy(probs), probs, "marginal entropy")


def conditional_entropy_loss(model, x, augmented, ctx: Optional[BNContext] = None) -> Tensor:
    probs = predictive(model, np.stack(augmented), ctx or BNContext())
    return _check_finite(conditional_entropy(probs), probs, "conditional entropy")


def pairwise_cross_entropy_loss(model, x, augmented, ctx: Optional[BNContext] = None) -> Tensor:
    probs = predictive(model, np.stack(augmented), ctx or BNContext())
    return _check_finite(pairwise_cross_entropy(probs), probs, "pairwise cross entropy")


# ---------------------------------------------------------------------------
# updates

def select_parameters(model: Model, param_filter: str) -> list[Tensor]:
    if param_filter == "all":
        return model.parameters()
    if param_filter == "norm_affine_only":
        return model.norm_parameters()
    raise ValueError(f"unknown param filter {param_filter!r}")


def make_rule(config: AdaptationConfig, params):
    return make_update_rule(config.update_rule, params, config.lr, momentum=config.momentum,
                            weight_decay=config.weight_decay)


def apply_update(rule_name: str, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0) -> bool:
    """One fresh-state step of ``rule_name`` using the ``.grad`` already on ``params``."""
    return make_update_rule(rule_name, params, lr, momentum=momentum, weight_decay=weight_decay).step()


def argmax(p: np.ndarray) -> int:
    # np.argmax returns the first maximal index
    return int(np.argmax(p))


# ---------------------------------------------------------------------------
# single-point procedures

def _predict_original(model: Model, x, ctx: BNContext, config: AdaptationConfig) -> int:
    if config.bn_stats_source == "original" and ctx.mode == "mixed":
        ctx = bn_context(model, x, config.prior_strength)
    with no_grad():
        return argmax(ctx.forward(model, np.asarray(x, model.dtype)).data[0])


def memo_adapt_predict(model: Model, x: np.ndarray, config: AdaptationConfig, seed: int,
                       policy: Optional[AugmentationPolicy] = None, index: int = 0, label: int = -1):
    """Augment, adapt a private copy of ``model`` on the chosen objective, predict on ``x``.

    Serves the ``memo``, ``ce_single_point``, ``pce`` and ``bn_only`` strategies;
    ``bn_only`` runs the same pipeline without the update.  Returns
    ``(prediction, EvalRecord, adapted_model)``; ``model`` itself is never modified.
    """
    policy = policy or AugmentationPolicy()
    strategy = config.strategy
    if strategy not in ("memo", "ce_single_point", "pce", "bn_only"):
        raise ValueError(f"memo_adapt_predict does not run strategy {strategy!r}")
    objective = OBJECTIVES.get(strategy, marginal_entropy)
    t0 = time.perf_counter()
    adapted = model.clone()
    x = np.asarray(x, model.dtype)
    loss_before = loss_after = ment = float("nan")
    did_update, flag = False, ""
    ctx = BNContext()
    batch = None
    try:
        batch = np.stack(sample_augmentations(x, config.B, policy, seed))
        ctx = bn_context(adapted, batch, config.prior_strength)
        params = select_parameters(adapted, config.param_filter)
        rule = make_rule(config, params)
        for step in range(config.steps if strategy != "bn_only" else 0):
            adapted.zero_grad()
            probs = predictive(adapted, batch, ctx)
            loss = objective(probs)
            value = loss.item()
            if step == 0:
                loss_before = value
                ment = marginal_entropy(probs.data).item()
            if not math.isfinite(value):
                flag = "nonfinite_loss"
                break
            if step == 0 and config.threshold_fraction is not None and \
                    ment <= config.threshold_fraction * math.log(model.num_classes):
                flag = "below_threshold"
                break
            loss.backward(inputs=params)
            if not rule.step():
                flag = "nonfinite_grad"
                break
            did_update = True
        pred = _predict_original(adapted, x, ctx, config)
    except Exception as exc:  # degrade to the unadapted prediction
        logger.warning("point %d: adaptation failed (%s); using unadapted prediction", index, exc)
        flag = f"error:{type(exc).__name__}"
        adapted = model.clone()
        did_update = False
        try:
            pred = _predict_original(adapted, x, ctx, config)
        except Exception:
            pred = _predict_original(adapted, x, BNContext(), config)
    seconds = time.perf_counter() - t0

    # diagnostics outside the timed region
    if batch is not None and not flag.startswith("error"):
        with no_grad():
            probs = predictive(adapted, batch, ctx)
            after = objective(probs).item()
            if strategy == "bn_only" or math.isnan(loss_before):
                loss_before, ment = after, marginal_entropy(probs.data).item()
        loss_after = after if did_update else loss_before
    rec = EvalRecord(index, int(label), pred, loss_before, loss_after, ment, seconds, strategy,
                     did_update, flag)
    return pred, rec, adapted


def tta_predict(model: Model, x: np.ndarray, config: AdaptationConfig, seed: int,
                policy: Optional[AugmentationPolicy] = None, index: int = 0, label: int = -1):
    """Argmax of the marginal over ``B`` augmented copies; no parameter update."""
    policy = policy or AugmentationPolicy()
    t0 = time.perf_counter()
    x = np.asarray(x, model.dtype)
    batch = np.stack(sample_augmentations(x, config.B, policy, seed))
    ctx = bn_context(model, batch, config.prior_strength)
    with no_grad():
        probs = predictive(model, batch, ctx).data
    pbar = probs.mean(axis=0)
    pred = argmax(pbar)
    seconds = time.perf_counter() - t0
    h = entropy(pbar.astype(np.float64)).item()
    return pred, EvalRecord(index, int(label), pred, h, h, h, seconds, "tta")


def plain_predict(model: Model, x: np.ndarray, index: int = 0, label: int = -1):
    t0 = time.perf_counter()
    with no_grad():
        p = T.softmax(model.forward(np.asarray(x, model.dtype))).data[0]
    pred = argmax(p)
    h = entropy(p.astype(np.float64)).item()
    return pred, EvalRecord(index, int(label), pred, h, h, h, time.perf_counter() - t0, "none")


# ---------------------------------------------------------------------------
# Tent

def tent_adapt(model: Model, images: np.ndarray, config: AdaptationConfig, seed: int = 0,
               policy: Optional[AugmentationPolicy] = None, labels: Optional[Sequence[int]] = None,
               point_seeds: Optional[Sequence[int]] = None):
    """Conditional-entropy adaptation on batches of the test stream.

    ``tent_batch_size > 1``: normalize with the batch's own statistics, take one
    update on the mean prediction entropy, then predict the same batch.
    ``tent_batch_size == 1``: the batch is ``B`` augmented copies of the point,
    BN statistics are mixed with prior strength ``N``, and the prediction is
    made on the original point.  Episodic mode restarts every batch from
    ``model``; online mode carries parameters and optimizer state forward.
    """
    from .augment import point_seed

    policy = policy or AugmentationPolicy(kind="identity")
    images = np.asarray(images, model.dtype)
    n = len(images)
    labels = list(labels) if labels is not None else [-1] * n
    preds: list[int] = []
    records: list[EvalRecord] = []
    if n == 0:
        return preds, records
    bs = config.tent_batch_size
    current = model.clone()
    params = select_parameters(current, config.param_filter)
    rule = make_rule(config, params)
    for start in range(0, n, bs):
        if config.episodic:
            current = model.clone()
            params = select_parameters(current, config.param_filter)
            rule = make_rule(config, params)
        idx = list(range(start, min(start + bs, n)))
        t0 = time.perf_counter()
        flag, did_update = "", False
        if bs == 1:
            i = idx[0]
            s = point_seeds[i] if point_seeds is not None else point_seed(seed, i)
            batch = np.stack(sample_augmentations(images[i], config.B, policy, s))
            ctx = bn_context(current, batch, config.prior_strength)
            fwd = lambda m: ctx.forward(m, batch)
        else:
            batch = images[idx]
            fwd = lambda m: m.forward(batch, bn_mode="batch")
        current.zero_grad()
        probs = T.softmax(fwd(current))
        loss = conditional_entropy(probs)
        before = loss.item()
        ment = marginal_entropy(probs.data).item()
        if math.isfinite(before):
            loss.backward(inputs=params)
            did_update = rule.step()
            flag = "" if did_update else "nonfinite_grad"
        else:
            flag = "nonfinite_loss"
        with no_grad():
            if bs == 1:
                out = ctx.forward(current, images[idx])
                after = conditional_entropy(T.softmax(fwd(current))).item()
            else:
                out = fwd(current)
                after = conditional_entropy(T.softmax(out)).item()
        seconds = (time.perf_counter() - t0) / len(idx)
        for j, i in enumerate(idx):
            pred = argmax(out.data[j])
            preds.append(pred)
            records.append(EvalRecord(i, int(labels[i]), pred, before, after, ment, seconds,
                                      "tent_batch", did_update, flag))
    return preds, records
