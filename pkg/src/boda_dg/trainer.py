"""Training variants, the leave-one-domain-out protocol and k-fold orchestration."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .config import TrainConfig
from .data import Dataset, augment_features, make_batches, stratified_kfold
from .errors import DivergedLoss, SingleDomain, UnknownDomain
from .losses import (
    CalibrationTable,
    DomainClassStats,
    LossOutput,
    boda_loss,
    coral_multi_domain,
    cross_entropy,
    domain_class_statistics,
    total_objective,
)
from .metrics import MetricsReport, aggregate, evaluate
from .model import SGD, ModelParams, backward, forward, init_params, reinit_classifier
from .numerics import derive_seed

log = logging.getLogger(__name__)

# Stream tags derived from the run seed.
TAG_INIT = 11
TAG_BATCHES = 12
TAG_AUGMENT = 13
TAG_HEAD_INIT = 14
TAG_HEAD_BATCHES = 15
TAG_HEAD_AUGMENT = 16
TAG_TARGET_SPLIT = 17

ALIGNING_VARIANTS = ("coral", "boda_coupled", "boda_decoupled")


@dataclass
class RunResult:
    params: ModelParams
    config: TrainConfig
    history: list[dict]  # one entry per phase-1 epoch
    head_history: list[dict]  # one entry per decoupled head epoch
    metrics: dict[str, MetricsReport]
    skipped_anchors: int = 0
    single_domain_batches: int = 0
    trained_indices: NDArray | None = None  # rows of the training set that entered a batch
    trained_domains: set = field(default_factory=set)
    phase1_metrics: dict[str, MetricsReport] = field(default_factory=dict)
    phase1_params: ModelParams | None = None
    splits: dict[str, NDArray] = field(default_factory=dict)  # indices into the parent dataset


class _RunningStats:
    """Exponential moving average of per-pair prototypes (experimental)."""

    def __init__(self, decay: float):
        self.decay = decay
        self.means: dict = {}
        self.covs: dict = {}
        self.counts: dict = {}

    def update(self, batch_stats: DomainClassStats) -> DomainClassStats:
        for i, pair in enumerate(batch_stats.pairs):
            if pair in self.means:
                self.means[pair] = self.decay * self.means[pair] + (1 - self.decay) * batch_stats.means[i]
                if batch_stats.covs is not None:
                    self.covs[pair] = self.decay * self.covs[pair] + (1 - self.decay) * batch_stats.covs[i]
            else:
                self.means[pair] = batch_stats.means[i].copy()
                if batch_stats.covs is not None:
                    self.covs[pair] = batch_stats.covs[i].copy()
            self.counts[pair] = int(batch_stats.counts[i])
        pairs = sorted(self.means)
        means = np.array([self.means[p] for p in pairs])
        counts = np.array([self.counts[p] for p in pairs])
        covs = chols = None
        if batch_stats.covs is not None:
            covs = np.array([self.covs[p] for p in pairs])
            chols = np.linalg.cholesky(covs)
        return DomainClassStats(pairs, means, counts, covs, chols)


def _check_finite(out: LossOutput, what: str, epoch: int) -> None:
    if not math.isfinite(out.value):
        raise DivergedLoss(f"{what} loss became non-finite at epoch {epoch}")


def _decay(grads: ModelParams, params: ModelParams, wd: float, first_layer: int = 0) -> None:
    """L2 penalty on weight matrices (biases excluded), added to the gradients in place."""
    if wd == 0:
        return
    for l in range(first_layer, len(params.weights)):
        grads.weights[l] += wd * params.weights[l]


def _alignment_term(cfg, batch, Z, calib, running) -> LossOutput | None:
    """Alignment loss for one batch, or None when the batch has a single domain."""
    if len(np.unique(batch.domains)) < 2:
        return None
    if cfg.variant == "coral":
        return coral_multi_domain(Z, batch.domains)
    stats = domain_class_statistics(
        Z, batch.labels, batch.domains, with_covariance=cfg.distance == "mahalanobis", ridge=cfg.ridge
    )
    if running is not None:
        stats = running.update(stats)
    table = calib if calib is not None else CalibrationTable.from_stats(stats, cfg.gamma)
    return boda_loss(Z, batch.labels, batch.domains, stats, table, cfg.distance)


def _evaluate_all(params, evals: dict[str, Dataset], meta: dict) -> dict[str, MetricsReport]:
    out = {}
    for name, ds in evals.items():
        if len(ds):
            out[name] = evaluate(params, ds.features, ds.labels, ds.num_classes, {**meta, "split": name})
    return out


def _epoch_scores(params, train: Dataset, val: Dataset | None) -> dict:
    row = {}
    tr = evaluate(params, train.features, train.labels, train.num_classes)
    row["train_f1_micro"], row["train_f1_macro"] = tr.f1_micro, tr.f1_macro
    if val is not None and len(val):
        va = evaluate(params, val.features, val.labels, val.num_classes)
        row["val_f1_micro"], row["val_f1_macro"] = va.f1_micro, va.f1_macro
    return row


def run_training(
    config: TrainConfig,
    train: Dataset,
    val: Dataset | None = None,
    evals: dict[str, Dataset] | None = None,
    forbidden_domains=(),
    track_scores: bool = True,
    run_meta: dict | None = None,
    on_step=None,
) -> RunResult:
    """Train one model according to ``config.variant``.

    ``evals`` maps split names to datasets evaluated once training ends;
    ``val`` (if given) is also scored every epoch for the history and is
    evaluated as split ``"val"`` unless ``evals`` already names it.
    ``forbidden_domains`` are asserted absent from every training batch.
    ``on_step(epoch, batch, params)`` is called after every phase-1 update.
    """
    cfg = config
    if len(train) == 0:
        raise ValueError("training set is empty")
    forbidden = {int(d) for d in forbidden_domains}
    if forbidden & set(train.present_domains()):
        raise ValueError("training set contains a held-out domain")
    if cfg.variant in ALIGNING_VARIANTS and len(train.present_domains()) < 2:
        raise SingleDomain(f"variant {cfg.variant} needs at least two training domains")

    evals = dict(evals or {})
    if val is not None and "val" not in evals and not any(ds is val for ds in evals.values()):
        evals["val"] = val
    meta = {"seed": cfg.seed, "variant": cfg.variant, **(run_meta or {})}

    dims = [train.feature_dim, *cfg.hidden_dims, train.num_classes]
    params = init_params(dims, derive_seed(cfg.seed, TAG_INIT))
    opt = SGD(cfg.lr, cfg.momentum)
    aligning = cfg.variant in ALIGNING_VARIANTS
    calib = None
    if cfg.variant.startswith("boda") and cfg.calibration_counts == "dataset":
        calib = CalibrationTable.from_count_table(train.counts, cfg.gamma)
    running = _RunningStats(cfg.stats_decay) if cfg.stats == "running" else None
    scale = (cfg.scale_lo, cfg.scale_hi)

    seen = np.zeros(len(train), dtype=bool)
    seen_domains: set = set()
    history: list[dict] = []
    skipped_total = 0
    single_domain_total = 0

    for epoch in range(cfg.epochs):
        batches = make_batches(train, cfg.batch_size, "standard", derive_seed(cfg.seed, TAG_BATCHES, epoch))
        sums = {"ce": 0.0, "align": 0.0, "total": 0.0}
        n_align = 0
        for b, batch in enumerate(batches):
            batch_domains = set(np.unique(batch.domains).tolist())
            assert not (batch_domains & forbidden), "held-out domain leaked into a training batch"
            seen[batch.indices] = True
            seen_domains |= batch_domains
            batch = augment_features(batch, cfg.jitter_sigma, scale, derive_seed(cfg.seed, TAG_AUGMENT, epoch, b))

            cache = forward(params, batch.inputs)
            ce = cross_entropy(cache.logits, batch.labels, cfg.ce_form)
            _check_finite(ce, "cross-entropy", epoch)
            align = None
            if aligning:
                align = _alignment_term(cfg, batch, cache.Z, calib, running)
                if align is None:
                    single_domain_total += 1
                    log.warning("epoch %d batch %d has a single domain; alignment skipped", epoch, b)
                else:
                    _check_finite(align, "alignment", epoch)
                    skipped_total += align.skipped
                    sums["align"] += align.value
                    n_align += 1
            total = total_objective(ce, align, cfg.lam) if align is not None else ce
            sums["ce"] += ce.value
            sums["total"] += total.value
            grads = backward(params, cache, total.grad_logits, total.grad_Z)
            _decay(grads, params, cfg.weight_decay)
            opt.step(params, grads)
            if on_step is not None:
                on_step(epoch, batch, params)

        row = {
            "epoch": epoch,
            "ce": sums["ce"] / len(batches),
            "align": sums["align"] / n_align if n_align else 0.0,
            "total": sums["total"] / len(batches),
        }
        if track_scores:
            row.update(_epoch_scores(params, train, val))
        history.append(row)

    result = RunResult(
        params=params,
        config=cfg,
        history=history,
        head_history=[],
        metrics={},
        skipped_anchors=skipped_total,
        single_domain_batches=single_domain_total,
    )

    if cfg.variant == "boda_decoupled":
        result.phase1_params = params.copy()
        result.phase1_metrics = _evaluate_all(params, evals, {**meta, "phase": 1})
        params = _train_head(cfg, params, train, val, forbidden, seen, seen_domains, result.head_history, track_scores)
        result.params = params

    result.metrics = _evaluate_all(params, evals, meta)
    result.trained_indices = np.nonzero(seen)[0]
    result.trained_domains = seen_domains
    return result


def _train_head(cfg, params, train, val, forbidden, seen, seen_domains, history, track_scores) -> ModelParams:
    """Phase 2 of the decoupled variant: frozen encoder, class-balanced CE on the head."""
    if cfg.head_reinit:
        params = reinit_classifier(params, derive_seed(cfg.seed, TAG_HEAD_INIT))
    else:
        params = params.copy()
    frozen = params.encoder_depth
    opt = SGD(cfg.lr, cfg.momentum)
    scale = (cfg.scale_lo, cfg.scale_hi)
    for epoch in range(cfg.decoupled_head_epochs):
        batches = make_batches(
            train, cfg.batch_size, "class_balanced", derive_seed(cfg.seed, TAG_HEAD_BATCHES, epoch)
        )
        ce_sum = 0.0
        for b, batch in enumerate(batches):
            batch_domains = set(np.unique(batch.domains).tolist())
            assert not (batch_domains & forbidden), "held-out domain leaked into a training batch"
            seen[batch.indices] = True
            seen_domains |= batch_domains
            batch = augment_features(
                batch, cfg.jitter_sigma, scale, derive_seed(cfg.seed, TAG_HEAD_AUGMENT, epoch, b)
            )
            cache = forward(params, batch.inputs)
            ce = cross_entropy(cache.logits, batch.labels, cfg.ce_form)
            _check_finite(ce, "cross-entropy", epoch)
            ce_sum += ce.value
            grads = backward(params, cache, ce.grad_logits, None, frozen_layers=frozen)
            _decay(grads, params, cfg.weight_decay, first_layer=frozen)
            opt.step(params, grads, frozen_layers=frozen)
        row = {"epoch": epoch, "ce": ce_sum / len(batches)}
        if track_scores:
            row.update(_epoch_scores(params, train, val))
        history.append(row)
    return params


# ---------------------------------------------------------------------------
# Protocols


@dataclass
class DomainSplit:
    train: NDArray
    val: NDArray
    target: NDArray


def domain_split(dataset: Dataset, target_domain: int, seed: int, k: int = 5, val_fold: int = 0) -> DomainSplit:
    """Indices for source-train / source-val (fold ``val_fold`` of ``k``) and the
    fixed target test subset (fold 0 of a stratified split of the target domain)."""
    if not 0 <= target_domain < dataset.num_domains or dataset.counts[target_domain].sum() == 0:
        raise UnknownDomain(f"domain {target_domain} has no samples")
    src_idx = np.nonzero(dataset.domains != target_domain)[0]
    tgt_idx = np.nonzero(dataset.domains == target_domain)[0]
    if src_idx.size == 0:
        raise SingleDomain("no source domains left after holding out the target")
    src_folds = stratified_kfold(dataset.subset(src_idx), k, seed)
    tgt_folds = stratified_kfold(dataset.subset(tgt_idx), k, derive_seed(seed, TAG_TARGET_SPLIT))
    return DomainSplit(
        train=src_idx[src_folds.complement(val_fold)],
        val=src_idx[src_folds.indices(val_fold)],
        target=tgt_idx[tgt_folds.indices(0)],
    )


def leave_one_domain_out(
    config: TrainConfig,
    dataset: Dataset,
    target_domain: int,
    seed: int | None = None,
    k: int = 5,
    val_fold: int = 0,
    track_scores: bool = True,
) -> RunResult:
    """Train on the source domains, evaluate on source-val and the unseen target.

    ``seed`` drives the splits (defaults to ``config.seed``).
    """
    seed = config.seed if seed is None else seed
    if len(dataset.present_domains()) < 3:
        log.warning("fewer than three domains: only one source domain remains for training")
    split = domain_split(dataset, target_domain, seed, k, val_fold)
    train = dataset.subset(split.train)
    val = dataset.subset(split.val)
    target = dataset.subset(split.target)
    result = run_training(
        config,
        train,
        val=val,
        evals={"source_val": val, "target": target},
        forbidden_domains={target_domain},
        track_scores=track_scores,
        run_meta={"fold": val_fold, "target_domain": target_domain},
    )
    result.splits = {"train": split.train, "val": split.val, "target": split.target}
    return result


@dataclass
class CrossValResult:
    runs: list[RunResult]
    aggregate: dict  # split -> metric -> {mean, std}


def summarize(runs: list[RunResult], phase1: bool = False) -> dict:
    out: dict = {}
    for split in ("source_val", "target"):
        reports = [(r.phase1_metrics if phase1 else r.metrics).get(split) for r in runs]
        reports = [m for m in reports if m is not None]
        if reports:
            out[split] = {
                "f1_micro": aggregate(m.f1_micro for m in reports),
                "f1_macro": aggregate(m.f1_macro for m in reports),
            }
    return out


def _lodo_job(args):
    config, dataset, target_domain, seed, k, fold, track = args
    return leave_one_domain_out(config, dataset, target_domain, seed, k, fold, track)


def cross_validate(
    config: TrainConfig,
    dataset: Dataset,
    k: int = 5,
    target_domain: int = 0,
    seed: int | None = None,
    jobs: int = 1,
    track_scores: bool = True,
) -> CrossValResult:
    """k leave-one-domain-out runs, fold ``i`` serving as source validation in run ``i``.

    The target test subset is the same for every fold.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    seed = config.seed if seed is None else seed
    tasks = [(config, dataset, target_domain, seed, k, fold, track_scores) for fold in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_lodo_job, tasks))
    else:
        runs = [_lodo_job(t) for t in tasks]
    return CrossValResult(runs, summarize(runs))


def rarest_shared_class(counts, source_domains) -> int:
    """Class with the fewest source samples among those present in >= 2 source domains.

    Only such classes have cross-domain partners for the alignment term.
    """
    sub = np.asarray(counts)[sorted(source_domains)]
    shared = np.nonzero((sub > 0).sum(axis=0) >= 2)[0]
    if shared.size == 0:
        raise ValueError("no class is populated in two source domains")
    totals = sub[:, shared].sum(axis=0)
    return int(shared[np.argmin(totals)])
