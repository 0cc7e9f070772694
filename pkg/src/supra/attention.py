"""Attention between functions, computed on their subspace coordinates.

Once functions are represented by coordinate vectors in an orthonormal basis,
the bilinear form behind the attention weights and the linear operator behind
the values reduce to N x N matrices.  The weight matrix is kept factored as
W_Q^T W_K so the computation follows the usual query/key/value path; splitting
the coordinates into head slices gives the multi-head variant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "HeadParams",
    "attention_weights",
    "supra_attention",
    "supra_attention_ndarray",
    "function_space_attention_oracle",
]


@dataclass
class HeadParams:
    """Query/key/value matrices of one head, each d x d on the head's slice."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    @property
    def dim(self) -> int:
        return self.w_q.value.shape[0]


def wrap_heads(tape: ad.Tape, heads: Sequence[dict | tuple]) -> list[HeadParams]:
    """Wrap per-head numpy matrices as constants on ``tape``."""
    out = []
    for h in heads:
        if isinstance(h, dict):
            q, k, v = h["w_q"], h["w_k"], h["w_v"]
        else:
            q, k, v = h
        out.append(HeadParams(tape.constant(q), tape.constant(k), tape.constant(v)))
    return out


def attention_weights(coords_head: Tensor, head: HeadParams) -> Tensor:
    """Pre-softmax weights (1/sqrt(d)) * U_h W_Q^T W_K U_h^T for one head slice."""
    d = head.dim
    if coords_head.value.shape[1] != d:
        raise ad.ShapeError(
            f"head expects {d} coordinates, got {coords_head.value.shape[1]}")
    queries = ad.matmul(coords_head, ad.transpose(head.w_q))
    keys = ad.matmul(coords_head, ad.transpose(head.w_k))
    return ad.matmul(queries, ad.transpose(keys)) * (1.0 / np.sqrt(d))


def supra_attention(coords: Tensor, heads: Sequence[HeadParams]) -> Tensor:
    """Multi-head attention on C x N coordinate vectors; heads are concatenated.

    Per head: softmax rows of the bilinear weights mix the value-transformed
    coordinate slices.  Fully differentiable through the tape.
    """
    n = coords.value.shape[1]
    n_heads = len(heads)
    if n_heads < 1 or n % n_heads != 0:
        raise ad.ShapeError(f"{n} coordinates not divisible into {n_heads} heads")
    d = n // n_heads
    outputs = []
    for i, head in enumerate(heads):
        if head.dim != d:
            raise ad.ShapeError(f"head {i} is {head.dim}x{head.dim}, expected {d}x{d}")
        slice_i = ad.slice_cols(coords, i * d, (i + 1) * d)
        mixing = ad.softmax_rows(attention_weights(slice_i, head))
        values = ad.matmul(slice_i, ad.transpose(head.w_v))
        outputs.append(ad.matmul(mixing, values))
    return outputs[0] if n_heads == 1 else ad.concat_cols(outputs)


def supra_attention_ndarray(coords: np.ndarray, heads_np: Sequence[tuple]) -> np.ndarray:
    """Convenience wrapper: run the attention on plain arrays."""
    tape = ad.Tape()
    out = supra_attention(tape.constant(coords), wrap_heads(tape, heads_np))
    return out.value


def function_space_attention_oracle(fields: np.ndarray, basis, heads_np) -> np.ndarray:
    """Attention between sampled functions via their subspace coordinates.

    Projects the C x M fields to coordinates, applies the coordinate-space
    attention, and reconstructs point samples: the function-space and
    coordinate-space formulations are the same computation.
    """
    coords = basis.project(np.asarray(fields, dtype=np.float64))
    return basis.reconstruct(supra_attention_ndarray(coords, heads_np))
