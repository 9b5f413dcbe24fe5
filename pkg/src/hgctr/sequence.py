"""Temporal user encoder: multi-head self-attention over behavior sequences.

Sequences are padded to a fixed length l and processed as contiguous blocks
of a (B*l) x d matrix so one tape node covers the whole batch. Padding
positions are zeroed at embedding time and masked out of the attention
scores; the per-user representation is the encoder output at the most recent
valid position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import Tape, Tensor


@dataclass
class AttentionParams:
    """Weights of one post-norm residual attention block."""
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    num_heads: int = 4

    def __post_init__(self):
        d = self.wq.value.shape[0]
        if d % self.num_heads != 0:
            raise ContractError(
                f"model width {d} not divisible by {self.num_heads} heads")


ATTENTION_PARAM_NAMES = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
                         "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal position table (length x dim)."""
    pos = np.arange(length)[:, None]
    j = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (j // 2)) / dim)
    table = np.where(j % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def embed_sequence(tape: Tape, item_ids, valid, item_table: Tensor,
                   user_rows: Tensor | None = None,
                   user_valid=None) -> Tensor:
    """Summed sequence embedding for a padded id matrix: every valid position
    holds the item-table row (the table carries the id and content terms)
    plus, when `user_rows` is given, the owning user's row broadcast into the
    position. Padding rows become zero.

    `item_ids` is (B, l) with arbitrary values at invalid positions; `valid`
    is the matching boolean mask. `user_rows` is B x d, one row per sequence;
    `user_valid` (default: `valid`) marks the positions that receive the user
    row — a strict superset admits positions carrying the user row alone,
    e.g. a fallback slot for users with no history. Returns (B*l) x d.
    """
    ids = np.asarray(item_ids, dtype=np.int64)
    mask = np.asarray(valid, dtype=bool)
    if ids.shape != mask.shape or ids.ndim != 2:
        raise ShapeError("item_ids and valid must be matching 2-D arrays")
    b, l = ids.shape
    safe = np.where(mask, ids, 0).ravel()
    rows = tape.rows(item_table, safe)
    keep = tape.const(mask.reshape(-1, 1).astype(np.float64))
    out = tape.mul(rows, keep)
    if user_rows is not None:
        umask = mask if user_valid is None else np.asarray(user_valid, bool)
        if umask.shape != ids.shape:
            raise ShapeError("user_valid must match item_ids")
        if user_rows.value.shape[0] != b:
            raise ShapeError("user_rows must hold one row per sequence")
        owners = tape.rows(user_rows, np.repeat(np.arange(b), l))
        ukeep = tape.const(umask.reshape(-1, 1).astype(np.float64))
        out = tape.add(out, tape.mul(owners, ukeep))
    return out


def multi_head_attention(tape: Tape, x: Tensor, params: AttentionParams,
                         key_mask: np.ndarray | None = None,
                         block: int | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated, then W^O."""
    q = tape.matmul(x, params.wq)
    k = tape.matmul(x, params.wk)
    v = tape.matmul(x, params.wv)
    n = x.value.shape[0]
    att = tape.attention(q, k, v, num_heads=params.num_heads,
                         block=block or n, key_mask=key_mask)
    return tape.matmul(att, params.wo)


def ffn(tape: Tape, x: Tensor, params: AttentionParams) -> Tensor:
    """Position-wise feed-forward: relu(x W1 + b1) W2 + b2."""
    hidden = tape.relu(tape.add(tape.matmul(x, params.w1), params.b1))
    return tape.add(tape.matmul(hidden, params.w2), params.b2)


def encoder_block(tape: Tape, x: Tensor, params: AttentionParams,
                  key_mask: np.ndarray | None = None,
                  block: int | None = None) -> Tensor:
    """Residual attention + layer norm, then residual FFN + layer norm."""
    h = tape.layer_norm(tape.add(multi_head_attention(
        tape, x, params, key_mask, block), x),
        params.ln1_gain, params.ln1_bias)
    return tape.layer_norm(tape.add(ffn(tape, h, params), h),
                           params.ln2_gain, params.ln2_bias)


def encode_batch(tape: Tape, x: Tensor, valid, block_len: int,
                 blocks: list[AttentionParams]) -> Tensor:
    """Run encoder blocks over (B*block_len) x d inputs and return the row at
    each sequence's most recent valid position: a B x d matrix."""
    mask = np.asarray(valid, dtype=bool).ravel()
    n = x.value.shape[0]
    if mask.size != n or n % block_len != 0:
        raise ShapeError("valid mask must cover B*block_len rows")
    if not blocks:
        raise ContractError("need at least one encoder block")
    out = x
    for params in blocks:
        out = encoder_block(tape, out, params, key_mask=mask, block=block_len)
    grid = mask.reshape(-1, block_len)
    if not grid.any(axis=1).all():
        raise ContractError("sequence with no valid positions")
    last = block_len - 1 - np.argmax(grid[:, ::-1], axis=1)
    take = np.arange(grid.shape[0]) * block_len + last
    return tape.rows(out, take)


def encode_user(tape: Tape, item_ids, valid, item_table: Tensor,
                blocks: list[AttentionParams],
                positional: bool = False,
                user_row: Tensor | None = None) -> Tensor:
    """Single-sequence convenience wrapper; returns a 1 x d vector."""
    ids = np.asarray(item_ids, dtype=np.int64).reshape(1, -1)
    mask = np.asarray(valid, dtype=bool).reshape(1, -1)
    x = embed_sequence(tape, ids, mask, item_table, user_rows=user_row)
    if positional:
        pe = positional_encoding(ids.shape[1], x.value.shape[1])
        x = tape.add(x, tape.const(pe))
    return encode_batch(tape, x, mask, ids.shape[1], blocks)
