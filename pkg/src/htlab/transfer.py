"""End-to-end adaptation protocols: source pre-training, every target
adaptation recipe, and post-hoc ensembles with the source model.

Protocols never see the source dataset: run_protocol receives only the
target splits and the frozen source parameters, which makes the
source-data-free constraint structural. Distillation targets always come
from the original source parameters, never from intermediate checkpoints.

Every run produces a per-epoch evaluation curve whose entry 0 is the
source model itself, so curves from different protocols share an x-axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, HTScenario, ToxicityMap
from .losses import CompositeLoss, LossSpec
from .metrics import EvalReport, evaluate
from .model import (
    FreezeMask,
    MlpSpec,
    ModelParams,
    forward,
    init_model,
    params_axpy,
    recompute_bn_stats,
)
from .numkit import Rng, softmax
from .optim import LolConfig, SgdConfig, SwaConfig, swa_average, train_lolsgd, train_sgd

PROTOCOL_KINDS = (
    "source_only", "naive_ft", "frozen_ft", "lp_ft",
    "bn_affine_only", "bn_stats_only", "in_adapter_only",
    "sgd_distill", "sgd_rank",
    "lolsgd", "lolsgd_distill", "lolsgd_rank", "lolsgd_distill_rank",
    "swa", "swad_lite",
)

_DISTILL_KINDS = {"sgd_distill", "lolsgd_distill", "lolsgd_distill_rank"}
_RANK_KINDS = {"sgd_rank", "lolsgd_rank", "lolsgd_distill_rank"}
_LOL_KINDS = {"lolsgd", "lolsgd_distill", "lolsgd_rank", "lolsgd_distill_rank"}


@dataclass(frozen=True)
class Protocol:
    kind: str
    loss: LossSpec = field(default_factory=LossSpec)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    lol: LolConfig = field(default_factory=LolConfig)
    swa: SwaConfig = field(default_factory=SwaConfig)

    def __post_init__(self):
        if self.kind not in PROTOCOL_KINDS:
            raise ValueError(f"unknown protocol kind {self.kind!r}")
        if self.kind in _DISTILL_KINDS and self.loss.lambda_distill <= 0:
            raise ValueError(f"{self.kind} requires lambda_distill > 0")
        if self.kind in _RANK_KINDS and self.loss.lambda_rank <= 0:
            raise ValueError(f"{self.kind} requires lambda_rank > 0")
        if self.kind in ("swa", "swad_lite") and self.swa.start_epoch >= self.sgd.epochs:
            raise ValueError("swa start_epoch must be below the epoch count")

    def effective_loss(self) -> LossSpec:
        """The protocol's loss weights with terms the kind does not carry
        zeroed out, so one weight config can drive a whole grid."""
        return LossSpec(
            lambda_distill=self.loss.lambda_distill if self.kind in _DISTILL_KINDS else 0.0,
            lambda_rank=self.loss.lambda_rank if self.kind in _RANK_KINDS else 0.0,
            rank_sign=self.loss.rank_sign,
        )


@dataclass
class TransferRun:
    scenario_id: str
    protocol: Protocol
    seed: int
    source_params: ModelParams
    final_params: ModelParams
    curve: list                  # EvalReport per epoch, entry 0 = source
    loss_curve: list
    checkpoints: Optional[list] = None  # ModelParams per epoch when retained


def pretrain_source(scenario: HTScenario, spec: MlpSpec, cfg: SgdConfig,
                    rng: Rng) -> ModelParams:
    """Train the source model from scratch on the source split. After this
    returns, nothing else ever reads the source data."""
    if not np.array_equal(scenario.source_train.classes_present(),
                          np.arange(scenario.num_classes)):
        raise ValueError("source training data must cover every class")
    params = init_model(spec, rng.derive("init"))
    trained, _ = train_sgd(params, scenario.source_train, CompositeLoss(LossSpec()),
                           cfg, FreezeMask.all_trainable(), rng.derive("pretrain"))
    return trained


def _mask_for(kind: str) -> FreezeMask:
    if kind == "naive_ft":
        return FreezeMask.all_trainable()
    if kind == "bn_affine_only":
        return FreezeMask.only("bn_affine", "bn_stats")
    if kind == "in_adapter_only":
        return FreezeMask.only("in_adapter")
    # frozen-classifier family: everything else trains
    return FreezeMask.frozen_classifier()


def _check_model_compat(kind: str, spec: MlpSpec):
    if kind in ("bn_affine_only", "bn_stats_only") and not spec.use_batchnorm:
        raise ValueError(f"{kind} requires a model with batchnorm")
    if kind == "in_adapter_only" and not spec.use_in_adapter:
        raise ValueError(f"{kind} requires a model with the input adapter")


def run_protocol(target_train: Dataset, target_test: Dataset, seen_mask,
                 source_params: ModelParams, protocol: Protocol, seed: int,
                 toxicity: Optional[ToxicityMap] = None, k_spectrum: int = 20,
                 retain_checkpoints: bool = False,
                 scenario_id: str = "scenario") -> TransferRun:
    """Adapt the source model on the target training split with one
    protocol and evaluate after every epoch."""
    kind = protocol.kind
    _check_model_compat(kind, source_params.spec)
    seen_mask = np.asarray(seen_mask, dtype=bool)
    rng = Rng(seed).derive(f"protocol-{kind}")

    def report(params: ModelParams) -> EvalReport:
        return evaluate(params, target_test, seen_mask, toxicity, k_spectrum)

    curve = [report(source_params)]
    checkpoints = [source_params.clone()] if retain_checkpoints else None
    loss_curve: list = []

    def on_epoch(_epoch, params):
        curve.append(report(params))
        if checkpoints is not None:
            checkpoints.append(params.clone())

    if kind == "source_only":
        final = source_params.clone()

    elif kind == "bn_stats_only":
        final = recompute_bn_stats(source_params, target_train)
        on_epoch(0, final)

    elif kind == "lp_ft":
        # linear probe first, then end-to-end; epochs split evenly
        e1 = protocol.sgd.epochs // 2
        e2 = protocol.sgd.epochs - e1
        loss = CompositeLoss(protocol.effective_loss(), source_params, seen_mask)
        cfg1 = SgdConfig(lr=protocol.sgd.lr, momentum=protocol.sgd.momentum,
                         weight_decay=protocol.sgd.weight_decay,
                         batch_size=protocol.sgd.batch_size, epochs=e1)
        cfg2 = SgdConfig(lr=protocol.sgd.lr, momentum=protocol.sgd.momentum,
                         weight_decay=protocol.sgd.weight_decay,
                         batch_size=protocol.sgd.batch_size, epochs=e2)
        probe, lc1 = train_sgd(source_params, target_train, loss, cfg1,
                               FreezeMask.only("classifier"), rng.derive("probe"),
                               on_epoch=on_epoch)
        final, lc2 = train_sgd(probe, target_train, loss, cfg2,
                               FreezeMask.all_trainable(), rng.derive("ft"),
                               on_epoch=on_epoch)
        loss_curve = lc1 + lc2

    elif kind in _LOL_KINDS:
        loss = CompositeLoss(protocol.effective_loss(), source_params, seen_mask)
        final, loss_curve = train_lolsgd(
            source_params, target_train, loss, protocol.sgd, protocol.lol,
            _mask_for(kind), rng.derive("train"), on_round=on_epoch)

    elif kind in ("swa", "swad_lite"):
        loss = CompositeLoss(protocol.effective_loss(), source_params, seen_mask)
        mask = _mask_for(kind)
        swa_cfg = protocol.swa
        tail: dict = {"avg": None, "count": 0, "epoch": 0}

        def fold(params):
            if tail["avg"] is None:
                tail["avg"] = params.clone()
                tail["count"] = 1
            else:
                k = tail["count"]
                tail["avg"] = params_axpy(k / (k + 1.0), tail["avg"],
                                          1.0 / (k + 1.0), params)
                tail["count"] = k + 1

        def on_step(params):
            if swa_cfg.cadence == "per_iteration" and tail["epoch"] >= swa_cfg.start_epoch:
                fold(params)

        def swa_epoch(epoch, params):
            if swa_cfg.cadence == "per_epoch" and epoch >= swa_cfg.start_epoch:
                fold(params)
            tail["epoch"] = epoch + 1
            current = tail["avg"] if tail["avg"] is not None else params
            on_epoch(epoch, current)

        _, loss_curve = train_sgd(source_params, target_train, loss, protocol.sgd,
                                  mask, rng.derive("train"),
                                  on_epoch=swa_epoch, on_step=on_step)
        final = tail["avg"]

    else:  # naive_ft, frozen_ft, bn_affine_only, in_adapter_only, sgd_distill, sgd_rank
        loss = CompositeLoss(protocol.effective_loss(), source_params, seen_mask)
        final, loss_curve = train_sgd(source_params, target_train, loss,
                                      protocol.sgd, _mask_for(kind),
                                      rng.derive("train"), on_epoch=on_epoch)

    return TransferRun(
        scenario_id=scenario_id,
        protocol=protocol,
        seed=seed,
        source_params=source_params,
        final_params=final,
        curve=curve,
        loss_curve=loss_curve,
        checkpoints=checkpoints,
    )


def wise_merge(source_params: ModelParams, target_params: ModelParams,
               alpha: float) -> ModelParams:
    """Weight-space ensemble: alpha * source + (1 - alpha) * target."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must be in [0, 1]")
    return params_axpy(alpha, source_params, 1.0 - alpha, target_params)


def se_predict(source_params: ModelParams, target_params: ModelParams,
               X: np.ndarray, alpha: float) -> np.ndarray:
    """Prediction-space ensemble: convex mix of the two models' softmax
    outputs, rowwise."""
    if not source_params.same_spec(target_params):
        raise ValueError("parameter spec mismatch")
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must be in [0, 1]")
    ps = softmax(forward(source_params, X, mode="eval").logits, axis=1)
    pt = softmax(forward(target_params, X, mode="eval").logits, axis=1)
    return alpha * ps + (1.0 - alpha) * pt
