"""MLM and P2G objectives, AdamW, and the deterministic training loop."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax
from tqdm import tqdm

from .checkpoint import (
    Checkpoint,
    checkpoint_name,
    cleanup_checkpoints,
    discard_checkpoints_after,
    load_checkpoint,
    save_checkpoint,
)
from .config import MaskPolicy, ModelConfig, TrainConfig
from .corpus import ExampleRecord
from .errors import ConfigError, DataError, NumericError
from .masking import BatchTensors, collate, mask_records
from .model import EncoderParams, ParamGrads, backward, forward, heads, init_params, is_decayed

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.log"
FINAL_CHECKPOINT = "final.ckpt"


def cross_entropy(logits: Sequence[float], label: int) -> float:
    """-log softmax(logits)[label], stable for large logits."""
    logits = np.asarray(logits, dtype=np.float64)
    return float(logsumexp(logits) - logits[label])


def _masked_cross_entropy(
    logits: np.ndarray,
    labels: np.ndarray,
    positions: np.ndarray,
) -> Tuple[float, int, np.ndarray]:
    """Mean CE over `positions` and its gradient with respect to `logits`.

    Returns (0.0, 0, zeros) when no position is selected.
    """
    logits = np.asarray(logits, dtype=np.float64)
    positions = np.asarray(positions, dtype=bool)
    grad = np.zeros_like(logits)
    count = int(positions.sum())
    if count == 0:
        return 0.0, 0, grad
    selected = logits[positions]
    targets = np.asarray(labels)[positions]
    if targets.min() < 0 or targets.max() >= logits.shape[-1]:
        raise DataError(f"label out of range [0, {logits.shape[-1]}) at a scored position")
    rows = np.arange(count)
    losses = logsumexp(selected, axis=-1) - selected[rows, targets]
    d_selected = softmax(selected, axis=-1)
    d_selected[rows, targets] -= 1.0
    grad[positions] = d_selected / count
    return float(losses.sum() / count), count, grad


def loss_mlm(logits_mlm: np.ndarray, y_p: np.ndarray, masked: np.ndarray) -> float:
    """Mean CE over masked positions I only; 0 when I is empty."""
    return _masked_cross_entropy(logits_mlm, y_p, masked)[0]


def loss_p2g(logits_p2g: np.ndarray, y_g: np.ndarray, validity: np.ndarray) -> float:
    """Mean CE over every valid position, masked or not; 0 when N = 0."""
    return _masked_cross_entropy(logits_p2g, y_g, validity)[0]


def _top1_accuracy(logits: np.ndarray, labels: np.ndarray, positions: np.ndarray) -> float:
    positions = np.asarray(positions, dtype=bool)
    if not positions.any():
        return 0.0
    return float((logits[positions].argmax(axis=-1) == labels[positions]).mean())


@dataclass
class LossReport:
    """Per-batch objective values and the number of contributing tokens."""

    loss_mlm: float
    loss_p2g: float
    total: float
    n_mlm: int
    n_p2g: int
    mlm_accuracy: float = 0.0
    p2g_accuracy: float = 0.0
    lr: float = 0.0
    grad_norm: float = 0.0


def check_objectives(config: TrainConfig) -> None:
    if not (config.use_mlm or config.use_p2g):
        raise ConfigError("no objective enabled")


def compute_loss_and_grads(
    params: EncoderParams,
    batch: BatchTensors,
    config: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
) -> Tuple[LossReport, ParamGrads]:
    """total = use_mlm * L_MLM + use_p2g * lambda * L_P2G, with exact gradients."""
    check_objectives(config)
    hidden, trace = forward(params, batch.input_ids, batch.validity, rng=rng, train=train)
    logits_mlm, logits_p2g = heads(params, hidden)

    mlm_positions = batch.mlm_targets(config.score_only_msk)
    value_mlm, n_mlm, grad_mlm = _masked_cross_entropy(logits_mlm, batch.phoneme_labels, mlm_positions)
    value_p2g, n_p2g, grad_p2g = _masked_cross_entropy(logits_p2g, batch.grapheme_labels, batch.validity)

    total = 0.0
    if config.use_mlm:
        total += value_mlm
    if config.use_p2g:
        total += config.p2g_weight * value_p2g
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss (loss_mlm={value_mlm}, loss_p2g={value_p2g})")

    grads = backward(
        params,
        trace,
        (
            grad_mlm if config.use_mlm else None,
            grad_p2g * config.p2g_weight if config.use_p2g else None,
        ),
    )
    report = LossReport(
        loss_mlm=value_mlm,
        loss_p2g=value_p2g,
        total=total,
        n_mlm=n_mlm,
        n_p2g=n_p2g,
        mlm_accuracy=_top1_accuracy(logits_mlm, batch.phoneme_labels, mlm_positions),
        p2g_accuracy=_top1_accuracy(logits_p2g, batch.grapheme_labels, batch.validity),
    )
    return report, grads


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup over warmup_ratio * max_steps, then linear decay to 0."""
    warmup = int(round(config.warmup_ratio * config.max_steps))
    if warmup > 0 and step < warmup:
        return config.learning_rate * (step + 1) / warmup
    remaining = config.max_steps - warmup
    if remaining <= 0:
        return 0.0
    return config.learning_rate * max(0.0, (config.max_steps - step) / remaining)


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most max_norm; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class AdamW:
    """Adaptive moments with decoupled weight decay over a dict of named tensors.

    Moments are stored in the tensors' own dtype; the update is computed in float64.
    """

    def __init__(
        self,
        tensors: Dict[str, np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        moments: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None,
    ):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        if moments is None:
            moments = {name: (np.zeros_like(t), np.zeros_like(t)) for name, t in tensors.items()}
        self.moments = moments

    def step(self, tensors: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float, t: int) -> None:
        """Update `tensors` in place; `t` is the 1-based step number."""
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for name, tensor in tensors.items():
            m, v = self.moments[name]
            g = grads[name]
            m64 = self.beta1 * m.astype(np.float64) + (1.0 - self.beta1) * g
            v64 = self.beta2 * v.astype(np.float64) + (1.0 - self.beta2) * g * g
            p = tensor.astype(np.float64)
            if self.weight_decay and is_decayed(name):
                p = p * (1.0 - lr * self.weight_decay)
            p = p - lr * (m64 / correction1) / (np.sqrt(v64 / correction2) + self.eps)
            m[...] = m64
            v[...] = v64
            tensor[...] = p


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically."""

    params: EncoderParams
    optimizer: AdamW
    seed: int
    step: int = 0
    epoch: int = 0
    cursor: int = 0
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @classmethod
    def create(cls, model_config: ModelConfig, train_config: TrainConfig, seed: int, n_records: int) -> "TrainState":
        params = init_params(model_config, seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        return cls(
            params=params,
            optimizer=_make_optimizer(params, train_config),
            seed=seed,
            order=rng.permutation(n_records),
            rng=rng,
        )

    def to_meta(self) -> dict:
        return {
            'seed': self.seed,
            'step': self.step,
            'epoch': self.epoch,
            'cursor': self.cursor,
            'order': [int(i) for i in self.order],
            'rng_state': self.rng.bit_generator.state,
        }

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, train_config: TrainConfig) -> "TrainState":
        meta = checkpoint.state.get('train')
        if checkpoint.moments is None or not meta:
            raise DataError("checkpoint carries no training state to resume from")
        rng = np.random.default_rng()
        rng.bit_generator.state = meta['rng_state']
        return cls(
            params=checkpoint.params,
            optimizer=_make_optimizer(checkpoint.params, train_config, checkpoint.moments),
            seed=int(meta['seed']),
            step=int(meta['step']),
            epoch=int(meta['epoch']),
            cursor=int(meta['cursor']),
            order=np.asarray(meta['order'], dtype=np.int64),
            rng=rng,
        )


def _make_optimizer(params: EncoderParams, config: TrainConfig, moments=None) -> AdamW:
    return AdamW(
        params.tensors,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
        moments=moments,
    )


def train_step(
    state: TrainState,
    batch: BatchTensors,
    config: TrainConfig,
) -> Tuple[TrainState, LossReport]:
    """One clipped AdamW update; `state` is advanced in place and returned."""
    check_objectives(config)
    dropout_rng = np.random.default_rng(np.random.SeedSequence([state.seed, state.step]))
    report, grads = compute_loss_and_grads(state.params, batch, config, rng=dropout_rng, train=True)
    report.grad_norm = clip_by_global_norm(grads, config.clip_norm)
    report.lr = lr_at(state.step, config)
    state.optimizer.step(state.params.tensors, grads, report.lr, state.step + 1)
    state.params.check_finite()
    state.step += 1
    return state, report


def next_batch_indices(state: TrainState, batch_size: int) -> np.ndarray:
    """Take the next slice of the shuffled order, reshuffling at epoch end."""
    n = len(state.order)
    if state.cursor >= n:
        state.epoch += 1
        state.cursor = 0
        state.order = state.rng.permutation(n)
    indices = state.order[state.cursor:state.cursor + batch_size]
    state.cursor += len(indices)
    return indices


def save_train_state(
    path: Path,
    state: TrainState,
    train_config: TrainConfig,
    mask_policy: MaskPolicy,
) -> Path:
    meta = {
        'train': state.to_meta(),
        'train_config': train_config.model_dump(mode="json"),
        'mask_policy': mask_policy.model_dump(mode="json"),
    }
    return save_checkpoint(path, state.params, state.optimizer.moments, meta)


def format_metrics_line(step: int, report: LossReport) -> str:
    return f"step={step} loss_mlm={report.loss_mlm:.6f} loss_p2g={report.loss_p2g:.6f} lr={report.lr:.8f}"


@dataclass
class TrainResult:
    final_checkpoint: Path
    metrics_path: Path
    reports: List[LossReport]


def train(
    records: Sequence[ExampleRecord],
    model_config: ModelConfig,
    mask_policy: MaskPolicy,
    train_config: TrainConfig,
    seed: int,
    out_dir: Path,
    resume_from: Optional[Path] = None,
    progress: bool = False,
) -> TrainResult:
    """Run (or resume) training up to train_config.max_steps.

    Masking is re-drawn every epoch from per-record seeds, so the batches
    seen after a resume are the batches an uninterrupted run would see.
    """
    check_objectives(train_config)
    if not records:
        raise DataError("no training records")
    longest = max(r.N for r in records)
    if longest > model_config.max_len:
        raise DataError(f"record of length {longest} exceeds max_len {model_config.max_len}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / METRICS_FILE

    if resume_from is not None:
        state = TrainState.from_checkpoint(load_checkpoint(resume_from), train_config)
        if state.params.config != model_config:
            raise ConfigError("model config differs from the checkpoint being resumed")
        if len(state.order) != len(records):
            raise DataError(f"checkpoint was trained on {len(state.order)} records, got {len(records)}")
        logger.info("Resuming from %s at step %d", resume_from, state.step)
    else:
        state = TrainState.create(model_config, train_config, seed, len(records))
    discard_checkpoints_after(out_dir, state.step)

    # resumed runs append to the existing log
    with open(metrics_path, 'a' if resume_from is not None else 'w') as f:
        config_json = json.dumps(train_config.model_dump(mode='json'), sort_keys=True)
        f.write(f"# run seed={state.seed} from_step={state.step} config={config_json}\n")

    reports = []
    bar = tqdm(total=train_config.max_steps, initial=state.step, desc="train", disable=not progress)
    with open(metrics_path, 'a') as metrics:
        while state.step < train_config.max_steps:
            indices = next_batch_indices(state, train_config.batch_size)
            examples = mask_records(
                [records[i] for i in indices], indices, mask_policy,
                state.seed, state.epoch, model_config.phoneme_vocab_size,
            )
            state, report = train_step(state, collate(examples), train_config)
            reports.append(report)
            metrics.write(format_metrics_line(state.step, report) + "\n")
            bar.update(1)
            bar.set_postfix(mlm=f"{report.loss_mlm:.3f}", p2g=f"{report.loss_p2g:.3f}")

            if state.step % train_config.checkpoint_every == 0 and state.step < train_config.max_steps:
                metrics.flush()
                save_train_state(out_dir / checkpoint_name(state.step), state, train_config, mask_policy)
                cleanup_checkpoints(out_dir, train_config.keep_last_n)
    bar.close()

    final = save_train_state(out_dir / FINAL_CHECKPOINT, state, train_config, mask_policy)
    if reports:
        logger.info(
            "Finished at step %d: loss_mlm=%.4f loss_p2g=%.4f", state.step, reports[-1].loss_mlm, reports[-1].loss_p2g
        )
    return TrainResult(final_checkpoint=final, metrics_path=metrics_path, reports=reports)
