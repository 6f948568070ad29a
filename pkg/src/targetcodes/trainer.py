"""End-to-end training loop with three branches (plain cross-entropy,
fixed Hadamard codes, learnable codes), evaluation metrics, retrieval
Recall@K, correlation-matrix export, and checkpointing.

Every run is a pure function of its config: the single seed fans out into
fixed per-component streams (codes, model init, batch order), so reruns
and checkpoint resumption reproduce results bit for bit.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import codes as codes_mod
from . import data as data_mod
from . import losses as losses_mod
from . import network as net_mod
from .core import Rng, derive_seed
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    NumericError,
    TrainingDiverged,
)
from .losses import BASELINE, HTC, LTC, MODES, Hyperparams

log = logging.getLogger("targetcodes")

STREAM_CODES = 1
STREAM_MODEL = 2
STREAM_BATCHES = 3

METRIC_KEYS = ("epoch", "ce", "mse", "triplet", "corr", "total", "top1", "top5", "code_corr")


@dataclass
class TrainConfig:
    """One training run: branch, hyperparameters, model dims, and outputs.

    ``out_dir`` of None keeps the run entirely in memory (no metrics file,
    no checkpoints). Loss-component metrics are recorded as weighted
    contributions to the total, so a regularizer with weight zero reports
    exactly 0.0.
    """

    mode: str
    hp: Hyperparams
    feature_widths: tuple[int, ...] = (256, 128)
    encoder_hidden: int = 256
    activation: str = codes_mod.SIGN
    ste_rule: str = codes_mod.STE_CLIPPED
    decay_codes: bool = True
    eval_every: int = 1
    checkpoint_every: int = 0
    out_dir: Optional[str] = None
    train_data: Optional[str] = None
    test_data: Optional[str] = None


@dataclass(frozen=True)
class EpochMetrics:
    """Metrics for one evaluated epoch; epoch numbers are 1-based.

    Loss components are the weighted contributions to the total. The
    ``code_corr`` field is the mean absolute normalized off-diagonal
    correlation of the activated code bank.
    """

    epoch: int
    ce: float
    mse: float
    triplet: float
    corr: float
    total: float
    top1: float
    top5: float
    code_corr: float
    wall_clock_seconds: float

    def json_line(self) -> str:
        """Deterministic JSON for metrics.jsonl; wall-clock time is excluded
        so identical runs produce byte-identical files."""
        return json.dumps({k: getattr(self, k) for k in METRIC_KEYS})


@dataclass(frozen=True)
class RetrievalReport:
    """Recall@K over a gallery of embeddings, query excluded from candidates."""

    recall_at: dict[int, float]
    num_queries: int
    skipped_queries: int


@dataclass
class TrainResult:
    model: net_mod.ModelParams
    bank: codes_mod.CodeBank
    optimizer: net_mod.Optimizer
    metrics: list[EpochMetrics] = field(default_factory=list)
    final_checkpoint: Optional[str] = None


def validate_config(config: TrainConfig, num_classes: int) -> None:
    """Fail fast on invalid configs, before any compute."""
    hp = config.hp
    if config.mode not in MODES:
        raise ConfigError(f"unknown mode {config.mode!r}, expected one of {MODES}")
    if hp.num_classes != num_classes:
        raise ConfigError(
            f"config says {hp.num_classes} classes but the dataset has {num_classes}"
        )
    if config.mode == HTC:
        length = hp.code_length
        if length < 2 or (length & (length - 1)) != 0:
            raise ConfigError(
                f"Hadamard codes need a power-of-two length, got {length}"
            )
        if num_classes > length - 1:
            raise ConfigError(
                f"Hadamard codes of length {length} support at most {length - 1} classes, "
                f"got {num_classes}"
            )
    if config.activation not in (codes_mod.SIGN, codes_mod.TANH_SCALED):
        raise ConfigError(f"unknown activation {config.activation!r}")
    if config.ste_rule not in (codes_mod.STE_CLIPPED, codes_mod.STE_PASSTHROUGH):
        raise ConfigError(f"unknown STE rule {config.ste_rule!r}")
    if hp.epochs < 1:
        raise ConfigError(f"epochs must be positive, got {hp.epochs}")
    if hp.batch_size < 1:
        raise ConfigError(f"batch size must be positive, got {hp.batch_size}")
    if config.eval_every < 1:
        raise ConfigError(f"eval_every must be positive, got {config.eval_every}")
    if not config.feature_widths:
        raise ConfigError("feature_widths must name at least one layer")


def _init_bank(config: TrainConfig, num_classes: int) -> codes_mod.CodeBank:
    # Every mode gets a bank from the same derived stream so the correlation
    # diagnostic is comparable across modes; only htc/ltc actually use it.
    rng = Rng(derive_seed(config.hp.seed, STREAM_CODES))
    if config.mode == HTC:
        return codes_mod.select_hadamard_codes(config.hp.code_length, num_classes, rng)
    return codes_mod.init_learnable_codes(
        num_classes,
        config.hp.code_length,
        rng,
        activation=config.activation,
        tanh_scale=config.hp.tanh_scale,
    )


def _expected_layer_shapes(config: TrainConfig, input_dim: int) -> list[tuple[int, int]]:
    shapes = []
    width = input_dim
    for w in config.feature_widths:
        shapes.append((width, int(w)))
        width = int(w)
    shapes.append((width, config.hp.num_classes))
    h = config.encoder_hidden
    shapes.extend([(width, h), (h, h), (h, config.hp.code_length)])
    return shapes


def _check_resume_state(
    state: net_mod.CheckpointState, config: TrainConfig, input_dim: int
) -> None:
    if state.mode != config.mode:
        raise ConfigError(
            f"checkpoint was written in mode {state.mode!r}, config says {config.mode!r}"
        )
    if state.seed != config.hp.seed:
        raise ConfigError(
            f"checkpoint seed {state.seed} does not match config seed {config.hp.seed}"
        )
    got = [tuple(l.weight.shape) for l in state.model.all_layers()]
    want = _expected_layer_shapes(config, input_dim)
    if got != want:
        raise DimensionError(
            f"checkpoint layer shapes {got} do not match config {want}"
        )
    if state.epoch > config.hp.epochs:
        raise ConfigError(
            f"checkpoint is at epoch {state.epoch}, config trains only {config.hp.epochs}"
        )


def _save_state(path, config, epoch, model, optimizer, bank) -> str:
    state = net_mod.CheckpointState(
        mode=config.mode,
        seed=config.hp.seed,
        rng_state=derive_seed(config.hp.seed, STREAM_BATCHES),
        epoch=epoch,
        model=model,
        optimizer=optimizer,
        bank=bank,
    )
    net_mod.save_checkpoint(path, state)
    return str(path)


def train(
    config: TrainConfig,
    train_ds: Optional[data_mod.Dataset] = None,
    test_ds: Optional[data_mod.Dataset] = None,
    batch_hook: Optional[Callable[[int, np.ndarray, losses_mod.LossBundle], None]] = None,
    resume_from: Optional[str] = None,
) -> TrainResult:
    """Run the configured training branch end to end.

    Per batch: forward the trunk and classifier, plus the semantic encoder
    when regularizing; compose the mode's objective; backprop; apply the
    grouped momentum-SGD step; and, for learnable codes, push the clipped
    straight-through gradient into the code bank. Metrics are emitted at
    ``eval_every`` cadence using only the inference path (trunk+classifier).
    """
    if train_ds is None:
        if not config.train_data:
            raise ConfigError("no training dataset: set train_data or pass one in")
        train_ds = data_mod.load_csv(config.train_data)
    if test_ds is None:
        if not config.test_data:
            raise ConfigError("no test dataset: set test_data or pass one in")
        test_ds = data_mod.load_csv(config.test_data)
    hp = config.hp
    validate_config(config, train_ds.num_classes)
    if test_ds.y.max() >= hp.num_classes:
        raise ConfigError(
            f"test labels reach {int(test_ds.y.max())}, config has {hp.num_classes} classes"
        )
    input_dim = train_ds.X.shape[1]
    if test_ds.X.shape[1] != input_dim:
        raise ConfigError(
            f"train dim {input_dim} does not match test dim {test_ds.X.shape[1]}"
        )

    start_epoch = 0
    if resume_from is not None:
        state = net_mod.load_checkpoint(resume_from)
        _check_resume_state(state, config, input_dim)
        model, optimizer, bank = state.model, state.optimizer, state.bank
        if bank is None:
            raise ConfigError("checkpoint is missing the code bank")
        start_epoch = state.epoch
    else:
        bank = _init_bank(config, hp.num_classes)
        model = net_mod.init_model(
            input_dim,
            tuple(config.feature_widths),
            hp.num_classes,
            config.encoder_hidden,
            hp.code_length,
            Rng(derive_seed(hp.seed, STREAM_MODEL)),
        )
        optimizer = net_mod.init_optimizer(model, hp, decay_codes=config.decay_codes)

    out_dir = config.out_dir
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        export_code_correlation(bank, os.path.join(out_dir, "corr_init.csv"))

    plan = data_mod.BatchPlan(
        batch_size=hp.batch_size, seed=derive_seed(hp.seed, STREAM_BATCHES)
    )
    regularized = config.mode in (HTC, LTC)
    result = TrainResult(model=model, bank=bank, optimizer=optimizer)

    def abort(reason: str) -> None:
        path = None
        if out_dir is not None:
            path = _save_state(
                os.path.join(out_dir, "ckpt_diverged_last_good.ltck"),
                config, epoch, model, optimizer, bank,
            )
        if metrics_fh is not None:
            metrics_fh.close()
        raise TrainingDiverged(f"training diverged at epoch {epoch + 1}: {reason}", path)

    try:
        for epoch in range(start_epoch, hp.epochs):
            tick = time.perf_counter()
            sums = {"ce": 0.0, "mse": 0.0, "triplet": 0.0, "corr": 0.0, "total": 0.0}
            seen = 0
            for idx in data_mod.batches(train_ds, plan, epoch):
                xb = train_ds.X[idx]
                yb = train_ds.y[idx]
                if regularized:
                    _, logits, v, cache = net_mod.forward(model, xb, semantic=True)
                    s = codes_mod.activate(bank)
                    ce = losses_mod.cross_entropy(logits, yb)
                    mse = losses_mod.mse_codes(v, s, yb)
                    if config.mode == LTC:
                        triplet = losses_mod.triplet_global(v, s, yb, hp.margin)
                        corr = losses_mod.corr_consistency(s)
                        bundle = losses_mod.compose_objective(LTC, hp, ce, mse, triplet, corr)
                    else:
                        bundle = losses_mod.compose_objective(HTC, hp, ce, mse)
                else:
                    _, logits, _, cache = net_mod.forward(model, xb, semantic=False)
                    ce = losses_mod.cross_entropy(logits, yb)
                    bundle = losses_mod.compose_objective(BASELINE, hp, ce)
                if not np.isfinite(bundle.total):
                    abort(f"non-finite loss {bundle.total}")
                grads = net_mod.backward(
                    model, cache, bundle.grad_logits, bundle.grad_semantic
                )
                try:
                    net_mod.sgd_step(optimizer, model, grads, epoch)
                    if config.mode == LTC:
                        grad_w = codes_mod.ste_backward(
                            bank, bundle.grad_codes, config.ste_rule
                        )
                        codes_mod.update_codes(
                            bank, grad_w, optimizer.lr(net_mod.GROUP_CODES, epoch)
                        )
                except TrainingDiverged:
                    raise
                except NumericError as exc:  # grads validated before any mutation
                    abort(str(exc))
                nb = len(idx)
                seen += nb
                sums["ce"] += bundle.ce * nb
                sums["mse"] += hp.mse_weight * bundle.mse * nb
                sums["triplet"] += hp.triplet_weight * bundle.triplet * nb
                sums["corr"] += hp.corr_weight * bundle.corr * nb
                sums["total"] += bundle.total * nb
                if batch_hook is not None:
                    batch_hook(epoch, idx, bundle)

            epoch_no = epoch + 1
            if epoch_no % config.eval_every == 0 or epoch_no == hp.epochs:
                top1, top5 = evaluate(model, test_ds)
                code_corr = codes_mod.mean_abs_off_diagonal(
                    codes_mod.normalized_correlation(codes_mod.activate(bank))
                )
                entry = EpochMetrics(
                    epoch=epoch_no,
                    ce=sums["ce"] / seen,
                    mse=sums["mse"] / seen,
                    triplet=sums["triplet"] / seen,
                    corr=sums["corr"] / seen,
                    total=sums["total"] / seen,
                    top1=top1,
                    top5=top5,
                    code_corr=code_corr,
                    wall_clock_seconds=time.perf_counter() - tick,
                )
                result.metrics.append(entry)
                log.info(
                    "epoch %d: total %.4f ce %.4f top1 %.4f top5 %.4f corr %.4f",
                    epoch_no, entry.total, entry.ce, entry.top1, entry.top5, entry.code_corr,
                )
                if metrics_fh is not None:
                    metrics_fh.write(entry.json_line() + "\n")
                    metrics_fh.flush()
                if out_dir is not None:
                    export_code_correlation(
                        bank, os.path.join(out_dir, f"corr_epoch{epoch_no}.csv")
                    )
            if (
                out_dir is not None
                and config.checkpoint_every > 0
                and epoch_no % config.checkpoint_every == 0
            ):
                _save_state(
                    os.path.join(out_dir, f"ckpt_epoch{epoch_no}.ltck"),
                    config, epoch_no, model, optimizer, bank,
                )
        if out_dir is not None:
            result.final_checkpoint = _save_state(
                os.path.join(out_dir, "ckpt_final.ltck"),
                config, hp.epochs, model, optimizer, bank,
            )
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return result


def evaluate(model: net_mod.ModelParams, ds: data_mod.Dataset) -> tuple[float, float]:
    """Top-1 and top-k accuracy using only the trunk and the classifier.

    k is min(5, K). Ties rank the lower class index first. The semantic
    encoder and the code bank play no part at inference time.
    """
    _, logits, _, _ = net_mod.forward(model, ds.X, semantic=False)
    k = logits.shape[1]
    order = np.argsort(-logits, axis=1, kind="stable")
    top1 = float((order[:, 0] == ds.y).mean())
    kk = min(5, k)
    topk = float((order[:, :kk] == ds.y[:, None]).any(axis=1).mean())
    return top1, topk


def retrieval_eval(
    model: net_mod.ModelParams, ds: data_mod.Dataset, ks: tuple[int, ...] = (1, 2, 4, 8)
) -> RetrievalReport:
    """Recall@K with L2-normalized trunk embeddings and cosine ranking.

    Each sample queries all the others; a query counts as a hit at K when
    any of its K nearest candidates shares its class. Queries whose class
    has no second sample are skipped and counted.
    """
    n = ds.num_samples
    if max(ks) >= n:
        raise DomainError(f"recall depth {max(ks)} needs more than {max(ks)} samples")
    z, _, _, _ = net_mod.forward(model, ds.X, semantic=False)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    z = np.divide(z, norms, out=np.zeros_like(z), where=norms > 0)
    sim = z @ z.T
    np.fill_diagonal(sim, -np.inf)
    counts = np.bincount(ds.y, minlength=int(ds.y.max()) + 1)
    valid = counts[ds.y] >= 2
    order = np.argsort(-sim, axis=1, kind="stable")
    same = ds.y[order] == ds.y[:, None]
    recall = {}
    n_valid = int(valid.sum())
    for k in sorted(ks):
        hits = same[:, :k].any(axis=1)
        recall[int(k)] = float(hits[valid].mean()) if n_valid else 0.0
    return RetrievalReport(
        recall_at=recall, num_queries=n_valid, skipped_queries=int(n - n_valid)
    )


def export_code_correlation(bank: codes_mod.CodeBank, path) -> None:
    """Write the K x K normalized codeword correlation matrix as CSV,
    six decimal places."""
    corr = codes_mod.normalized_correlation(codes_mod.activate(bank))
    with open(path, "w") as fh:
        for row in corr:
            fh.write(",".join("%.6f" % v for v in row) + "\n")


def read_correlation_csv(path) -> np.ndarray:
    """Read a matrix written by :func:`export_code_correlation`."""
    with open(path) as fh:
        rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    return np.array(rows)


def group_correlation_split(corr: np.ndarray, groups: np.ndarray) -> tuple[float, float]:
    """Mean absolute off-diagonal correlation within vs. across superclass
    groups. Returns (intra_mean, inter_mean)."""
    k = corr.shape[0]
    intra, inter = [], []
    for a in range(k):
        for b in range(k):
            if a == b:
                continue
            (intra if groups[a] == groups[b] else inter).append(abs(corr[a, b]))
    if not intra or not inter:
        raise DomainError("need at least two groups with two classes each")
    return float(np.mean(intra)), float(np.mean(inter))


def checkpoint_save(path, config: TrainConfig, epoch: int, result: TrainResult) -> str:
    """Persist a finished or in-progress run to ``path``."""
    return _save_state(path, config, epoch, result.model, result.optimizer, result.bank)


def checkpoint_load(path) -> net_mod.CheckpointState:
    """Load a checkpoint written by this module or by a training run."""
    return net_mod.load_checkpoint(path)
