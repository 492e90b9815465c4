"""Sequence representation learning.

A stack of account-aware self-attention blocks turns the propagated item
representations of one sequence into position-wise vectors z, which are
then pooled into a single sequence vector, either by smoothed attention
against the most recent item or by per-dimension max pooling.

Queries are account-conditioned: q_i = (x_i + e_account) @ Wq, so each
position attends from its own content shifted by the account profile.
The literal_query flag drops the x_i term (a constant query per
sequence) for comparison runs.

The batched kernels right-pad sequences and mask padded keys with a
large negative additive constant; padded positions therefore receive
zero attention and contribute nothing to pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .numeric import Tensor
from .params import ModelParameters

MASK_NEG = -1e30


@dataclass
class EncodedSequence:
    """Position-wise vectors plus the pooled sequence representation."""

    z: Tensor
    pooled: Tensor
    pooling_weights: np.ndarray


def positional_encoding(n_positions: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table: sin on even dims, cos on odd dims."""
    pos = np.arange(n_positions, dtype=float)[:, None]
    dim = np.arange(d, dtype=float)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(dim / 2.0) / d)
    table = np.zeros((n_positions, d))
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


def positional_encode(items: Tensor, max_len: int = 50) -> Tensor:
    """Add position encodings to a (length x d) sequence of item vectors."""
    length, d = items.shape
    if length > max_len:
        raise ValueError(f"sequence of length {length} exceeds max_len {max_len}; "
                         "truncate upstream before encoding")
    return nm.add(items, positional_encoding(length, d))


def _attention_block(x: Tensor, accounts: Tensor, params: ModelParameters,
                     stack: int, d_k: int, mask_add: np.ndarray | None,
                     literal_query: bool) -> Tensor:
    """One self-attention + FFN sub-layer: LN(attn_out + FFN(attn_out))."""
    if literal_query:
        q_in = nm.broadcast_to(nm.reshape(accounts, accounts.shape[:-1] + (1,) + accounts.shape[-1:]),
                               x.shape)
    else:
        q_in = nm.add(x, nm.reshape(accounts, accounts.shape[:-1] + (1,) + accounts.shape[-1:]))
    q = nm.matmul(q_in, params["enc_wq"])
    kv = nm.matmul(x, params["enc_wk"])
    scores = nm.mul(nm.matmul(q, nm.transpose_last(kv)), 1.0 / np.sqrt(d_k))
    if mask_add is not None:
        scores = nm.add(scores, mask_add)
    attn = nm.matmul(nm.softmax_rows(scores), kv)
    hidden = nm.relu(nm.add(nm.matmul(attn, params["ffn_w1"]), params["ffn_b1"]))
    ffn = nm.add(nm.matmul(hidden, params["ffn_w2"]), params["ffn_b2"])
    return nm.layer_norm(nm.add(attn, ffn),
                         params[f"ln_gain_{stack}"], params[f"ln_bias_{stack}"])


def encode_batch(items: Tensor, lengths: np.ndarray, accounts: Tensor,
                 params: ModelParameters, *, n_stacks: int, d_k: int,
                 causal: bool = False, literal_query: bool = False) -> Tensor:
    """Run the attention stack over right-padded (B x L x d) item blocks."""
    b, length, _ = items.shape
    lengths = np.asarray(lengths)
    key_mask = np.arange(length)[None, :] < lengths[:, None]          # (B, L)
    mask_add = np.where(key_mask, 0.0, MASK_NEG)[:, None, :]          # queries x keys
    if causal:
        causal_add = np.where(np.tril(np.ones((length, length), dtype=bool)), 0.0, MASK_NEG)
        mask_add = np.minimum(mask_add, causal_add[None, :, :])
    x = items
    for stack in range(n_stacks):
        x = _attention_block(x, accounts, params, stack, d_k, mask_add, literal_query)
    return x


def self_attention_layer(items: Tensor, account: Tensor, params: ModelParameters,
                         *, n_stacks: int = 2, d_k: int | None = None,
                         literal_query: bool = False) -> Tensor:
    """Stack applied to a single unpadded (length x d) sequence."""
    length, d = items.shape
    d_k = d if d_k is None else d_k
    batched = encode_batch(nm.reshape(items, (1, length, d)), np.array([length]),
                           nm.reshape(account, (1, d)), params,
                           n_stacks=n_stacks, d_k=d_k, literal_query=literal_query)
    return nm.reshape(batched, (length, d))


def _pool_scores(z_candidates: Tensor, z_target: Tensor, params: ModelParameters) -> Tensor:
    """MLP score for each candidate against the target: relu(cat @ W1 + b) @ W2."""
    pair = nm.concat([z_candidates, z_target], axis=-1)
    hidden = nm.relu(nm.add(nm.matmul(pair, params["pool_w1"]), params["pool_b"]))
    return nm.matmul(hidden, params["pool_w2"])


def _smoothed_weights(scores: Tensor, beta: float) -> Tensor:
    """exp(f) / (sum exp(f))^beta over the last axis, computed in log space."""
    shift = scores.data.max(axis=-1, keepdims=True)  # constant; exact for any shift
    lse = nm.add(nm.log(nm.tsum(nm.exp(nm.sub(scores, shift)), axis=-1, keepdims=True)), shift)
    return nm.exp(nm.sub(scores, nm.mul(lse, beta)))


def target_attention_pool_batch(z: Tensor, lengths: np.ndarray,
                                params: ModelParameters, beta: float):
    """Pool each padded row of z against its last valid position."""
    b, length, d = z.shape
    lengths = np.asarray(lengths)
    flat = nm.reshape(z, (b * length, d))
    target = nm.gather_rows(flat, np.arange(b) * length + (lengths - 1))
    target_rows = nm.broadcast_to(nm.reshape(target, (b, 1, d)), (b, length, d))
    scores = nm.reshape(_pool_scores(z, target_rows, params), (b, length))
    masked = nm.add(scores, np.where(np.arange(length)[None, :] < lengths[:, None], 0.0, MASK_NEG))
    weights = _smoothed_weights(masked, beta)
    pooled = nm.tsum(nm.mul(z, nm.reshape(weights, (b, length, 1))), axis=1)
    return pooled, weights


def target_attention_pool(z: Tensor, z_target: Tensor, params: ModelParameters,
                          beta: float) -> EncodedSequence:
    """Pool one (length x d) sequence against a target vector.

    The target must be the sequence's last encoded position (the most
    recent observed item).
    """
    length, d = z.shape
    target_rows = nm.broadcast_to(nm.reshape(z_target, (1, d)), (length, d))
    scores = nm.reshape(_pool_scores(z, target_rows, params), (1, length))
    weights = _smoothed_weights(scores, beta)
    pooled = nm.reshape(nm.matmul(weights, z), (d,))
    return EncodedSequence(z, pooled, weights.data.reshape(-1).copy())


def target_attention_pool_causal(z: Tensor, lengths: np.ndarray,
                                 params: ModelParameters, beta: float) -> Tensor:
    """Per-position pooling over each prefix, target = the position itself."""
    b, length, d = z.shape
    lengths = np.asarray(lengths)
    cand = nm.broadcast_to(nm.reshape(z, (b, 1, length, d)), (b, length, length, d))
    targ = nm.broadcast_to(nm.reshape(z, (b, length, 1, d)), (b, length, length, d))
    scores = nm.reshape(_pool_scores(cand, targ, params), (b, length, length))
    valid = np.arange(length)[None, :] < lengths[:, None]              # (B, L) keys
    allowed = np.tril(np.ones((length, length), dtype=bool))[None] & valid[:, None, :]
    masked = nm.add(scores, np.where(allowed, 0.0, MASK_NEG))
    weights = _smoothed_weights(masked, beta)
    return nm.matmul(weights, z)


def max_pool(items: Tensor) -> Tensor:
    """Per-dimension maximum over the positions of one sequence."""
    return nm.reduce_max(items, axis=0)


def max_pool_batch(z: Tensor, lengths: np.ndarray) -> Tensor:
    """Per-dimension maximum over valid positions of each padded row."""
    b, length, _ = z.shape
    valid = np.arange(length)[None, :] < np.asarray(lengths)[:, None]
    masked = nm.add(z, np.where(valid, 0.0, MASK_NEG)[:, :, None])
    return nm.reduce_max(masked, axis=1)
