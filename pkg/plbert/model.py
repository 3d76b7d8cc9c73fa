"""Shared-layer (ALBERT-style) phoneme encoder with MLM and P2G heads.

Forward and backward passes are written out by hand over numpy arrays. One
transformer block is applied `n_layers` times; its gradients accumulate the
contributions of every application. All arithmetic runs in float64; tensors
are stored in the configured precision.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import erf
from scipy.stats import truncnorm

from .config import ModelConfig
from .errors import ConfigError, DataError, NumericError, TraceMismatchError

ParamGrads = Dict[str, np.ndarray]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

BLOCK_LINEARS = (
    "block.attention.query",
    "block.attention.key",
    "block.attention.value",
    "block.attention.output",
)
ENCODER_PREFIXES = ("embeddings.", "block.")
HEAD_PREFIX = "heads."


def tensor_shapes(config: ModelConfig, with_heads: bool = True) -> "OrderedDict[str, Tuple[int, ...]]":
    """Named tensors in the fixed order used by checkpoints."""
    H, F, E = config.hidden, config.intermediate, config.embed
    shapes = OrderedDict()
    shapes["embeddings.token"] = (config.phoneme_vocab_size, E)
    shapes["embeddings.position"] = (config.max_len, E)
    shapes["embeddings.projection"] = (E, H)
    for name in BLOCK_LINEARS:
        shapes[f"{name}.weight"] = (H, H)
        shapes[f"{name}.bias"] = (H,)
    shapes["block.attention_norm.gain"] = (H,)
    shapes["block.attention_norm.bias"] = (H,)
    shapes["block.ffn.intermediate.weight"] = (H, F)
    shapes["block.ffn.intermediate.bias"] = (F,)
    shapes["block.ffn.output.weight"] = (F, H)
    shapes["block.ffn.output.bias"] = (H,)
    shapes["block.ffn_norm.gain"] = (H,)
    shapes["block.ffn_norm.bias"] = (H,)
    if with_heads:
        if not config.tie_mlm_weights:
            shapes["heads.mlm.weight"] = (H, config.phoneme_vocab_size)
        shapes["heads.mlm.bias"] = (config.phoneme_vocab_size,)
        shapes["heads.p2g.weight"] = (H, config.grapheme_vocab_size)
        shapes["heads.p2g.bias"] = (config.grapheme_vocab_size,)
    return shapes


def parameter_count(config: ModelConfig, with_heads: bool = True) -> int:
    return sum(int(np.prod(shape)) for shape in tensor_shapes(config, with_heads).values())


def is_decayed(name: str) -> bool:
    """Weight decay applies to matrices and embeddings, not to biases or norm gains."""
    return not (name.endswith(".bias") or name.endswith(".gain"))


@dataclass
class EncoderParams:
    """All learnable tensors of the encoder E plus (optionally) P_MLM and P_P2G."""

    config: ModelConfig
    tensors: "OrderedDict[str, np.ndarray]"

    def __post_init__(self):
        expected = tensor_shapes(self.config, with_heads=self.has_heads)
        if list(self.tensors) != list(expected):
            raise ConfigError(f"tensor names do not match config: {list(self.tensors)} vs {list(expected)}")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ConfigError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    @property
    def has_heads(self) -> bool:
        return any(name.startswith(HEAD_PREFIX) for name in self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def encoder_only(self) -> "EncoderParams":
        """Drop the pre-training heads (the exported artifact)."""
        return EncoderParams(
            self.config,
            OrderedDict((k, v.copy()) for k, v in self.tensors.items() if not k.startswith(HEAD_PREFIX)),
        )

    def as_float64(self) -> Dict[str, np.ndarray]:
        return {k: v.astype(np.float64, copy=False) for k, v in self.tensors.items()}

    def check_finite(self) -> None:
        for name, tensor in self.tensors.items():
            if not np.all(np.isfinite(tensor)):
                raise NumericError(f"non-finite values in {name}")


def init_params(config: ModelConfig, seed: int) -> EncoderParams:
    """Truncated-normal weights (std init_std, cut at 2 std), zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in tensor_shapes(config).items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            value = truncnorm.rvs(-2.0, 2.0, scale=config.init_std, size=shape, random_state=rng)
        tensors[name] = np.asarray(value, dtype=config.dtype)
    return EncoderParams(config, tensors)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _layer_norm(x, gain, bias, eps):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, xhat, inv_std


def _layer_norm_backward(dy, xhat, inv_std, gain, grads, prefix):
    grads[f"{prefix}.gain"] += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    grads[f"{prefix}.bias"] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * gain
    width = xhat.shape[-1]
    return inv_std / width * (
        width * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )


def _linear_backward(x, dy, weight, grads, prefix):
    """y = x @ W + b; accumulates dW, db and returns dx."""
    grads[f"{prefix}.weight"] += x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    grads[f"{prefix}.bias"] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ weight.T


class _Dropout:
    """Draws inverted-dropout masks, or replays masks recorded in a trace."""

    def __init__(self, rate: float, rng: Optional[np.random.Generator], replay: Optional[List] = None):
        self.rate = rate
        self.rng = rng
        self.replay = list(replay) if replay is not None else None
        self.masks: List[Optional[np.ndarray]] = []

    def __call__(self, x: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        if self.replay is not None:
            mask = self.replay[len(self.masks)]
        elif self.rate > 0.0 and self.rng is not None:
            keep = self.rng.random(x.shape) >= self.rate
            mask = keep / (1.0 - self.rate)
        else:
            mask = None
        self.masks.append(mask)
        return (x if mask is None else x * mask), mask


@dataclass
class LayerCache:
    h_in: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    attn_mask: Optional[np.ndarray]
    context: np.ndarray
    attn_out_mask: Optional[np.ndarray]
    xhat1: np.ndarray
    inv_std1: np.ndarray
    h_mid: np.ndarray
    pre_act: np.ndarray
    act: np.ndarray
    ffn_out_mask: Optional[np.ndarray]
    xhat2: np.ndarray
    inv_std2: np.ndarray


@dataclass
class ForwardTrace:
    """Activations cached by `forward`, sufficient for exact gradients."""

    config: ModelConfig
    shapes: Dict[str, Tuple[int, ...]]
    input_ids: np.ndarray
    validity: np.ndarray
    embedded: np.ndarray
    embed_mask: Optional[np.ndarray]
    layers: List[LayerCache] = field(default_factory=list)
    dropout_masks: List[Optional[np.ndarray]] = field(default_factory=list)
    hidden: Optional[np.ndarray] = None


def _split_heads(x, heads):
    b, l, h = x.shape
    return x.reshape(b, l, heads, h // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, a, l, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, a * d)


def _block_forward(W, h, key_valid, config, dropout) -> Tuple[np.ndarray, LayerCache]:
    heads = config.heads
    q = _split_heads(h @ W["block.attention.query.weight"] + W["block.attention.query.bias"], heads)
    k = _split_heads(h @ W["block.attention.key.weight"] + W["block.attention.key.bias"], heads)
    v = _split_heads(h @ W["block.attention.value.weight"] + W["block.attention.value.bias"], heads)

    scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(config.head_dim)
    scores = np.where(key_valid, scores, -np.inf)
    row_max = scores.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    expd = np.exp(scores - row_max)
    total = expd.sum(axis=-1, keepdims=True)
    probs = expd / np.where(total > 0.0, total, 1.0)

    dropped, attn_mask = dropout(probs)
    context = _merge_heads(dropped @ v)
    attn_out = context @ W["block.attention.output.weight"] + W["block.attention.output.bias"]
    attn_out, attn_out_mask = dropout(attn_out)
    h_mid, xhat1, inv_std1 = _layer_norm(
        h + attn_out, W["block.attention_norm.gain"], W["block.attention_norm.bias"], config.layernorm_eps
    )

    pre_act = h_mid @ W["block.ffn.intermediate.weight"] + W["block.ffn.intermediate.bias"]
    act = gelu(pre_act)
    ffn_out = act @ W["block.ffn.output.weight"] + W["block.ffn.output.bias"]
    ffn_out, ffn_out_mask = dropout(ffn_out)
    h_out, xhat2, inv_std2 = _layer_norm(
        h_mid + ffn_out, W["block.ffn_norm.gain"], W["block.ffn_norm.bias"], config.layernorm_eps
    )

    cache = LayerCache(
        h_in=h, q=q, k=k, v=v, probs=probs, attn_mask=attn_mask, context=context,
        attn_out_mask=attn_out_mask, xhat1=xhat1, inv_std1=inv_std1, h_mid=h_mid,
        pre_act=pre_act, act=act, ffn_out_mask=ffn_out_mask, xhat2=xhat2, inv_std2=inv_std2,
    )
    return h_out, cache


def _block_backward(W, cache: LayerCache, d_out, config, grads) -> np.ndarray:
    d_r2 = _layer_norm_backward(d_out, cache.xhat2, cache.inv_std2, W["block.ffn_norm.gain"], grads, "block.ffn_norm")
    d_ffn = d_r2 if cache.ffn_out_mask is None else d_r2 * cache.ffn_out_mask
    d_act = _linear_backward(cache.act, d_ffn, W["block.ffn.output.weight"], grads, "block.ffn.output")
    d_pre = d_act * gelu_grad(cache.pre_act)
    d_mid = d_r2 + _linear_backward(cache.h_mid, d_pre, W["block.ffn.intermediate.weight"], grads, "block.ffn.intermediate")

    d_r1 = _layer_norm_backward(d_mid, cache.xhat1, cache.inv_std1, W["block.attention_norm.gain"], grads, "block.attention_norm")
    d_attn = d_r1 if cache.attn_out_mask is None else d_r1 * cache.attn_out_mask
    d_context = _linear_backward(cache.context, d_attn, W["block.attention.output.weight"], grads, "block.attention.output")
    d_context = _split_heads(d_context, config.heads)

    dropped = cache.probs if cache.attn_mask is None else cache.probs * cache.attn_mask
    d_dropped = d_context @ cache.v.transpose(0, 1, 3, 2)
    d_v = dropped.transpose(0, 1, 3, 2) @ d_context
    d_probs = d_dropped if cache.attn_mask is None else d_dropped * cache.attn_mask
    d_scores = cache.probs * (d_probs - (d_probs * cache.probs).sum(axis=-1, keepdims=True))
    d_scores = d_scores / math.sqrt(config.head_dim)
    d_q = d_scores @ cache.k
    d_k = d_scores.transpose(0, 1, 3, 2) @ cache.q

    d_h = d_r1
    for name, d_proj in (
        ("block.attention.query", d_q),
        ("block.attention.key", d_k),
        ("block.attention.value", d_v),
    ):
        d_h = d_h + _linear_backward(cache.h_in, _merge_heads(d_proj), W[f"{name}.weight"], grads, name)
    return d_h


def _check_inputs(config: ModelConfig, input_ids: np.ndarray, validity: np.ndarray) -> None:
    if input_ids.ndim != 2:
        raise DataError(f"input ids must be (batch, length), got shape {input_ids.shape}")
    if validity.shape != input_ids.shape:
        raise DataError(f"validity mask shape {validity.shape} does not match ids {input_ids.shape}")
    if input_ids.shape[1] > config.max_len:
        raise DataError(f"sequence length {input_ids.shape[1]} exceeds max_len {config.max_len}")
    if input_ids.size and (input_ids.min() < 0 or input_ids.max() >= config.phoneme_vocab_size):
        raise DataError(f"phoneme id out of range [0, {config.phoneme_vocab_size})")


def _forward(params: EncoderParams, input_ids, validity, dropout: _Dropout) -> ForwardTrace:
    config = params.config
    input_ids = np.asarray(input_ids, dtype=np.int64)
    validity = np.asarray(validity, dtype=bool)
    _check_inputs(config, input_ids, validity)
    W = params.as_float64()
    length = input_ids.shape[1]

    embedded = W["embeddings.token"][input_ids] + W["embeddings.position"][:length][None, :, :]
    h, embed_mask = dropout(embedded @ W["embeddings.projection"])
    trace = ForwardTrace(
        config=config,
        shapes={k: v.shape for k, v in params.tensors.items() if not k.startswith(HEAD_PREFIX)},
        input_ids=input_ids,
        validity=validity,
        embedded=embedded,
        embed_mask=embed_mask,
    )
    key_valid = validity[:, None, None, :]
    for _ in range(config.n_layers):
        h, cache = _block_forward(W, h, key_valid, config, dropout)
        trace.layers.append(cache)
    trace.hidden = h * validity[:, :, None]
    trace.dropout_masks = dropout.masks
    return trace


def forward(
    params: EncoderParams,
    input_ids: np.ndarray,
    validity: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
) -> Tuple[np.ndarray, ForwardTrace]:
    """Encode a padded batch of phoneme ids.

    Args:
        params: Encoder parameters
        input_ids: (B, L) phoneme ids
        validity: (B, L) True at valid positions; invalid keys get zero attention
        rng: Dropout generator, required when training with dropout > 0
        train: Apply dropout

    Returns:
        (hidden (B, L, H) with padded rows zeroed, trace)
    """
    rate = params.config.dropout if train else 0.0
    if rate > 0.0 and rng is None:
        raise ConfigError("training forward with dropout needs an rng")
    trace = _forward(params, input_ids, validity, _Dropout(rate, rng))
    return trace.hidden, trace


def replay_forward(params: EncoderParams, trace: ForwardTrace) -> np.ndarray:
    """Recompute hidden states from a trace's inputs and recorded dropout masks."""
    _check_trace(params, trace)
    replayed = _forward(params, trace.input_ids, trace.validity, _Dropout(0.0, None, replay=trace.dropout_masks))
    return replayed.hidden


def heads(params: EncoderParams, hidden: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Affine P_MLM and P_P2G projections; softmax is left to the loss."""
    if not params.has_heads:
        raise ConfigError("parameters have no prediction heads (encoder-only export)")
    W = params.as_float64()
    if params.config.tie_mlm_weights:
        logits_mlm = (hidden @ W["embeddings.projection"].T) @ W["embeddings.token"].T + W["heads.mlm.bias"]
    else:
        logits_mlm = hidden @ W["heads.mlm.weight"] + W["heads.mlm.bias"]
    logits_p2g = hidden @ W["heads.p2g.weight"] + W["heads.p2g.bias"]
    return logits_mlm, logits_p2g


def _check_trace(params: EncoderParams, trace: ForwardTrace) -> None:
    if trace.config != params.config:
        raise TraceMismatchError("trace was produced with a different model config")
    shapes = {k: v.shape for k, v in params.tensors.items() if not k.startswith(HEAD_PREFIX)}
    if shapes != trace.shapes:
        raise TraceMismatchError("trace tensor shapes do not match the parameters")
    if len(trace.layers) != params.config.n_layers:
        raise TraceMismatchError(f"trace has {len(trace.layers)} layers, config has {params.config.n_layers}")


def backward(
    params: EncoderParams,
    trace: ForwardTrace,
    grad_logits: Tuple[Optional[np.ndarray], Optional[np.ndarray]],
) -> ParamGrads:
    """Exact reverse-mode gradients of every parameter.

    Args:
        params: Parameters the trace was computed with
        trace: Output of `forward`
        grad_logits: (d loss / d logits_mlm, d loss / d logits_p2g); None means zero

    Returns:
        float64 gradient per tensor name
    """
    _check_trace(params, trace)
    config = params.config
    W = params.as_float64()
    grads = OrderedDict((k, np.zeros(v.shape, dtype=np.float64)) for k, v in params.tensors.items())
    hidden = trace.hidden
    d_hidden = np.zeros_like(hidden)
    grad_mlm, grad_p2g = grad_logits

    if grad_mlm is not None:
        grad_mlm = np.asarray(grad_mlm, dtype=np.float64)
        flat = grad_mlm.reshape(-1, grad_mlm.shape[-1])
        if config.tie_mlm_weights:
            grads["heads.mlm.bias"] += flat.sum(axis=0)
            reduced = hidden @ W["embeddings.projection"].T
            grads["embeddings.token"] += flat.T @ reduced.reshape(-1, reduced.shape[-1])
            d_reduced = grad_mlm @ W["embeddings.token"]
            grads["embeddings.projection"] += d_reduced.reshape(-1, d_reduced.shape[-1]).T @ hidden.reshape(-1, hidden.shape[-1])
            d_hidden += d_reduced @ W["embeddings.projection"]
        else:
            d_hidden += _linear_backward(hidden, grad_mlm, W["heads.mlm.weight"], grads, "heads.mlm")
    if grad_p2g is not None:
        grad_p2g = np.asarray(grad_p2g, dtype=np.float64)
        d_hidden += _linear_backward(hidden, grad_p2g, W["heads.p2g.weight"], grads, "heads.p2g")

    d_h = d_hidden * trace.validity[:, :, None]
    for cache in reversed(trace.layers):
        d_h = _block_backward(W, cache, d_h, config, grads)

    if trace.embed_mask is not None:
        d_h = d_h * trace.embed_mask
    grads["embeddings.projection"] += trace.embedded.reshape(-1, config.embed).T @ d_h.reshape(-1, config.hidden)
    d_embedded = d_h @ W["embeddings.projection"].T
    np.add.at(grads["embeddings.token"], trace.input_ids.reshape(-1), d_embedded.reshape(-1, config.embed))
    length = trace.input_ids.shape[1]
    grads["embeddings.position"][:length] += d_embedded.sum(axis=0)
    return grads
