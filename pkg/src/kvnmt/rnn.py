"""GRU cell and bidirectional encoder.

Row-vector convention throughout: states and inputs are (batch, dim) rows
and weight matrices right-multiply, so ``x @ w`` maps input_dim to
hidden_dim.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .errors import DimensionError, EmptyInputError


@dataclass
class GruParams:
    """Update gate (z), reset gate (r), and candidate (h) weights.

    w_* map input_dim -> hidden_dim, u_* map hidden_dim -> hidden_dim,
    b_* are hidden_dim bias rows.
    """

    w_z: DiffArray
    u_z: DiffArray
    b_z: DiffArray
    w_r: DiffArray
    u_r: DiffArray
    b_r: DiffArray
    w_h: DiffArray
    u_h: DiffArray
    b_h: DiffArray
    input_dim: int
    hidden_dim: int

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator,
               dtype=np.float32, init_range: float = 0.08) -> "GruParams":
        def w(rows, cols):
            return DiffArray(
                rng.uniform(-init_range, init_range, size=(rows, cols)),
                tracked=True, dtype=dtype,
            )

        def b(cols):
            return DiffArray(
                rng.uniform(-init_range, init_range, size=(cols,)),
                tracked=True, dtype=dtype,
            )

        return cls(
            w_z=w(input_dim, hidden_dim), u_z=w(hidden_dim, hidden_dim), b_z=b(hidden_dim),
            w_r=w(input_dim, hidden_dim), u_r=w(hidden_dim, hidden_dim), b_r=b(hidden_dim),
            w_h=w(input_dim, hidden_dim), u_h=w(hidden_dim, hidden_dim), b_h=b(hidden_dim),
            input_dim=input_dim, hidden_dim=hidden_dim,
        )

    def named(self, prefix: str) -> dict[str, DiffArray]:
        return {
            f"{prefix}.w_z": self.w_z, f"{prefix}.u_z": self.u_z, f"{prefix}.b_z": self.b_z,
            f"{prefix}.w_r": self.w_r, f"{prefix}.u_r": self.u_r, f"{prefix}.b_r": self.b_r,
            f"{prefix}.w_h": self.w_h, f"{prefix}.u_h": self.u_h, f"{prefix}.b_h": self.b_h,
        }


def gru_cell(p: GruParams, x: DiffArray, h: DiffArray) -> DiffArray:
    """One GRU step.

    z = sigmoid(x w_z + h u_z + b_z)
    r = sigmoid(x w_r + h u_r + b_r)
    c = tanh(x w_h + (r * h) u_h + b_h)
    h' = (1 - z) * h + z * c, computed as h + z * (c - h)
    """
    if x.shape[-1] != p.input_dim or h.shape[-1] != p.hidden_dim:
        raise DimensionError(
            f"gru_cell expects input {p.input_dim} and state {p.hidden_dim}, "
            f"got {x.shape} and {h.shape}"
        )
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p.w_z), ad.matmul(h, p.u_z)), p.b_z))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p.w_r), ad.matmul(h, p.u_r)), p.b_r))
    c = ad.tanh(ad.add(ad.add(ad.matmul(x, p.w_h), ad.matmul(ad.mul(r, h), p.u_h)), p.b_h))
    return ad.add(h, ad.mul(z, ad.sub(c, h)))


def _masked_select(new: DiffArray, old: DiffArray, keep_new: np.ndarray) -> DiffArray:
    # exact per-row select: rows with keep_new stay bitwise equal to `new`
    m = keep_new.astype(new.dtype).reshape(-1, 1)
    return ad.add(
        ad.scale_rows(new, ad.constant(m)),
        ad.scale_rows(old, ad.constant(1.0 - m)),
    )


def encode_batch(
    p_fwd: GruParams,
    p_bwd: GruParams,
    emb_table: DiffArray,
    src: np.ndarray,
    src_mask: np.ndarray,
) -> tuple[DiffArray, DiffArray]:
    """Bidirectional scan over a padded id matrix of shape (batch, n).

    Returns (annotations, first_backward_state). Annotations are flattened
    sentence-major to shape (batch * n, 2 * hidden_dim); row b*n + j holds
    [forward_j ; backward_j] of sentence b. Padded positions carry frozen
    states and must be masked out of any later attention.
    """
    src = np.asarray(src, dtype=np.int64)
    if src.ndim != 2 or src.shape[1] == 0:
        raise EmptyInputError(f"source batch must be (batch, n>0), got {src.shape}")
    batch, n = src.shape
    mask = np.asarray(src_mask, dtype=bool)
    d = p_fwd.hidden_dim
    dtype = emb_table.dtype

    xs = [ad.embed(emb_table, src[:, t]) for t in range(n)]

    def scan(p: GruParams, order) -> list[DiffArray]:
        h = ad.constant(np.zeros((batch, d)), dtype=dtype)
        states: dict[int, DiffArray] = {}
        for t in order:
            hn = gru_cell(p, xs[t], h)
            col = mask[:, t]
            h = hn if col.all() else _masked_select(hn, h, col)
            states[t] = h
        return [states[t] for t in range(n)]

    fwd = scan(p_fwd, range(n))
    bwd = scan(p_bwd, range(n - 1, -1, -1))

    fwd_flat = ad.reshape(ad.concat(fwd, axis=1), (batch * n, d))
    bwd_flat = ad.reshape(ad.concat(bwd, axis=1), (batch * n, d))
    ann = ad.concat([fwd_flat, bwd_flat], axis=1)
    return ann, bwd[0]


def encode(p_fwd: GruParams, p_bwd: GruParams, emb_table: DiffArray,
           src_ids) -> DiffArray:
    """Annotations for one sentence: row j = [forward_j ; backward_j].

    ``src_ids`` must already end with the source end-of-sentence id, so the
    row count equals the tokenized length plus one.
    """
    ids = np.asarray(src_ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise EmptyInputError("cannot encode an empty source")
    ann, _ = encode_batch(
        p_fwd, p_bwd, emb_table, ids.reshape(1, -1), np.ones((1, ids.size), dtype=bool)
    )
    return ann


def init_decoder_state(ann: DiffArray, w_init: DiffArray) -> DiffArray:
    """s0 = tanh(backward half of the first annotation row @ w_init)."""
    if ann.shape[0] == 0:
        raise EmptyInputError("cannot initialize decoder state from empty annotations")
    d = ann.shape[1] // 2
    first_bwd = ad.slice_cols(ad.slice_rows(ann, 0, 1), d, 2 * d)
    return ad.tanh(ad.matmul(first_bwd, w_init))


def init_decoder_state_batch(first_bwd: DiffArray, w_init: DiffArray) -> DiffArray:
    """Batched form taking the encoder's first backward state directly."""
    return ad.tanh(ad.matmul(first_bwd, w_init))
