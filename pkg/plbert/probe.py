"""Frozen-encoder probes: a logistic-regression P2G predictor and masked-phoneme accuracy."""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax
from tqdm import tqdm

from .config import MaskPolicy, ProbeConfig
from .corpus import ExampleRecord
from .errors import DataError
from .masking import collate, mask_records
from .model import EncoderParams, forward, heads
from .training import AdamW

logger = logging.getLogger(__name__)


@dataclass
class ProbeParams:
    """Linear P2G predictor plus the record indices it was fit on."""

    weight: np.ndarray
    bias: np.ndarray
    train_indices: np.ndarray

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight + self.bias


@dataclass
class ProbeReport:
    top1: float
    top5: float
    majority_baseline: float
    n_eval: int

    def to_line(self) -> str:
        return (
            f"top1={self.top1:.4f} top5={self.top5:.4f} "
            f"majority_baseline={self.majority_baseline:.4f} n_eval={self.n_eval}"
        )


@dataclass
class MlmReport:
    accuracy: float
    unigram_baseline: float
    n_eval: int

    def to_line(self) -> str:
        return f"mlm_accuracy={self.accuracy:.4f} unigram_baseline={self.unigram_baseline:.4f} n_mlm={self.n_eval}"


def _select(records: Sequence[ExampleRecord], indices: Sequence[int]) -> Sequence[ExampleRecord]:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise DataError("empty split")
    return [records[i] for i in indices]


def extract_features(
    encoder: EncoderParams,
    records: Sequence[ExampleRecord],
    batch_size: int = 32,
) -> Tuple[np.ndarray, np.ndarray]:
    """Final-layer hidden states of unmasked inputs at every valid position, with grapheme labels."""
    features, labels = [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        width = max(r.N for r in chunk)
        ids = np.zeros((len(chunk), width), dtype=np.int64)
        validity = np.zeros((len(chunk), width), dtype=bool)
        for row, record in enumerate(chunk):
            ids[row, :record.N] = record.phoneme_ids
            validity[row, :record.N] = True
        hidden, _ = forward(encoder, ids, validity, train=False)
        features.append(hidden[validity])
        labels.append(np.concatenate([r.grapheme_targets() for r in chunk]))
    return np.concatenate(features), np.concatenate(labels)


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label ranks within the k highest logits.

    Ties are broken towards the lower id, so a label tied with a lower id
    ranks below it.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] == 0:
        raise DataError("no rows to score")
    label_logit = logits[np.arange(len(labels)), labels][:, None]
    ids = np.arange(logits.shape[1])[None, :]
    rank = (logits > label_logit).sum(axis=1) + ((logits == label_logit) & (ids < labels[:, None])).sum(axis=1)
    return float((rank < k).mean())


def probe_train(
    encoder: EncoderParams,
    records: Sequence[ExampleRecord],
    train_indices: Sequence[int],
    config: ProbeConfig,
    seed: int,
    progress: bool = False,
) -> ProbeParams:
    """Fit a multinomial logistic regression from frozen hidden states to grapheme ids.

    Full-batch gradient descent (adaptive moments) on CE over all valid,
    unmasked positions. The encoder is only read.
    """
    train_records = _select(records, train_indices)
    features, labels = extract_features(encoder, train_records, config.batch_size)
    n_classes = encoder.config.grapheme_vocab_size
    if labels.max() >= n_classes:
        raise DataError(f"grapheme id {labels.max()} outside the encoder's vocabulary of {n_classes}")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    tensors = {
        'probe.weight': rng.normal(0.0, config.init_std, size=(features.shape[1], n_classes)),
        'probe.bias': np.zeros(n_classes),
    }
    optimizer = AdamW(tensors, weight_decay=config.weight_decay)
    rows = np.arange(len(labels))
    for step in tqdm(range(config.steps), desc="probe", disable=not progress):
        probs = softmax(features @ tensors['probe.weight'] + tensors['probe.bias'], axis=-1)
        probs[rows, labels] -= 1.0
        probs /= len(labels)
        grads = {'probe.weight': features.T @ probs, 'probe.bias': probs.sum(axis=0)}
        optimizer.step(tensors, grads, config.learning_rate, step + 1)

    logger.info("Probe fit on %d positions from %d records", len(labels), len(train_records))
    return ProbeParams(
        weight=tensors['probe.weight'],
        bias=tensors['probe.bias'],
        train_indices=np.sort(np.asarray(train_indices, dtype=np.int64)),
    )


def probe_eval(
    probe: ProbeParams,
    encoder: EncoderParams,
    records: Sequence[ExampleRecord],
    eval_indices: Sequence[int],
    batch_size: int = 32,
) -> ProbeReport:
    """Top-1/top-5 accuracy on held-out positions plus the majority-class baseline."""
    eval_indices = np.asarray(eval_indices, dtype=np.int64)
    if np.intersect1d(eval_indices, probe.train_indices).size:
        raise DataError("splits must be disjoint")
    features, labels = extract_features(encoder, _select(records, eval_indices), batch_size)
    logits = probe.logits(features)
    counts = np.bincount(labels)
    return ProbeReport(
        top1=topk_accuracy(logits, labels, 1),
        top5=topk_accuracy(logits, labels, min(5, logits.shape[1])),
        majority_baseline=float(counts.max() / len(labels)),
        n_eval=int(len(labels)),
    )


def masked_phoneme_eval(
    params: EncoderParams,
    records: Sequence[ExampleRecord],
    indices: Sequence[int],
    policy: MaskPolicy,
    seed: int,
    batch_size: int = 32,
) -> MlmReport:
    """Top-1 accuracy of the MLM head at masked positions versus the most frequent phoneme."""
    indices = np.asarray(indices, dtype=np.int64)
    selected = _select(records, indices)
    correct, total = 0, 0
    targets = []
    for start in range(0, len(selected), batch_size):
        chunk = selected[start:start + batch_size]
        examples = mask_records(
            chunk, indices[start:start + batch_size], policy, seed, 0, params.config.phoneme_vocab_size
        )
        batch = collate(examples)
        hidden, _ = forward(params, batch.input_ids, batch.validity, train=False)
        logits_mlm, _ = heads(params, hidden)
        predicted = logits_mlm[batch.masked].argmax(axis=-1)
        gold = batch.phoneme_labels[batch.masked]
        correct += int((predicted == gold).sum())
        total += len(gold)
        targets.append(gold)
    if total == 0:
        raise DataError("no masked positions to evaluate; raise select_prob or add records")

    all_phonemes = np.concatenate([np.asarray(r.phoneme_ids) for r in selected])
    most_frequent = np.bincount(all_phonemes).argmax()
    gold = np.concatenate(targets)
    return MlmReport(
        accuracy=correct / total,
        unigram_baseline=float((gold == most_frequent).mean()),
        n_eval=total,
    )


def write_report(path: Path, probe_report: ProbeReport, mlm_report: Optional[MlmReport] = None) -> None:
    payload = {'probe': asdict(probe_report)}
    if mlm_report is not None:
        payload['mlm'] = asdict(mlm_report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
