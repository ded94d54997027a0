"""Key-value memory attention: addressing, reading, and key updates.

Both memories hold one slot per source position (end-of-sentence slot
included). The value memory is a frozen copy of the encoder annotations;
the key memory starts as the same copy and is rewritten after every access
round to record attention history. All ops are functional: an update
produces a new key matrix and never mutates its inputs, so hypotheses that
branch during search share nothing mutable.

Batched layout: memories of a batch are stacked sentence-major, shape
(batch * slots, dim), with row b * slots + j holding slot j of sentence b.
A single sentence is simply batch = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .errors import ConfigError, DimensionError
from .rnn import GruParams, gru_cell


@dataclass
class AddressWeights:
    """Content addressing: v' tanh(probe @ w + key_j @ u) per slot."""

    w: DiffArray  # probe_dim x attn_dim
    u: DiffArray  # key_dim x attn_dim
    v: DiffArray  # attn_dim x 1


@dataclass
class RoundParams:
    """Weights for one access round.

    ``update_addr``, ``forget_w`` and ``add_w`` are None for models that
    never rewrite the key memory (the plain attention baseline).
    """

    query_addr: AddressWeights
    update_addr: AddressWeights | None = None
    forget_w: DiffArray | None = None   # state_dim x key_dim
    add_w: DiffArray | None = None      # state_dim x key_dim
    forget_b: DiffArray | None = None
    add_b: DiffArray | None = None


@dataclass
class AttnParams:
    rounds: list[RoundParams]


@dataclass
class MemoryPair:
    """Key memory (rewritten per round) and frozen value memory."""

    key: DiffArray      # (batch * slots, key_dim)
    value: DiffArray    # (batch * slots, key_dim), read-only buffer
    slots: int
    batch: int
    mask: np.ndarray    # (batch, slots) bool, False at padding

    def with_key(self, key: DiffArray) -> "MemoryPair":
        return MemoryPair(key=key, value=self.value, slots=self.slots,
                          batch=self.batch, mask=self.mask)


@dataclass
class UpdateRecord:
    """Internals of one key update, kept for diagnostics and invariants."""

    weights: DiffArray        # (batch, slots) update addressing
    forget_gate: DiffArray    # (batch, key_dim)
    add_gate: DiffArray       # (batch, key_dim)
    forgotten: DiffArray      # key after the forget phase


@dataclass
class RoundRecord:
    attn: DiffArray
    context: DiffArray
    state: DiffArray
    update: UpdateRecord | None = None
    key_after: DiffArray | None = None


@dataclass
class StepResult:
    """Final-round state, context and attention of one decoding step."""

    state: DiffArray
    context: DiffArray
    attn: DiffArray
    memory: MemoryPair
    rounds: list[RoundRecord] = field(default_factory=list)


def init_memories(ann: DiffArray, slots: int | None = None, batch: int = 1,
                  mask: np.ndarray | None = None) -> MemoryPair:
    """Copy annotations into both memories and freeze the value buffer."""
    n = slots if slots is not None else ann.shape[0]
    if ann.shape[0] != batch * n:
        raise DimensionError(f"annotations {ann.shape} do not hold {batch} x {n} slots")
    if mask is None:
        mask = np.ones((batch, n), dtype=bool)
    key = ad.clone(ann)
    value = ad.clone(ann)
    value.data.setflags(write=False)
    return MemoryPair(key=key, value=value, slots=n, batch=batch, mask=mask)


def address(probe: DiffArray, key: DiffArray, weights: AddressWeights,
            mask: np.ndarray | None = None, slots: int | None = None) -> DiffArray:
    """Normalized slot weights for a probe, shape (batch, slots).

    score_j = v' tanh(probe w + key_j u), then a masked softmax per
    sentence. ``slots`` defaults to all key rows (single sentence).
    """
    batch = probe.shape[0]
    n = slots if slots is not None else key.shape[0] // batch
    if key.shape[0] != batch * n:
        raise DimensionError(f"key {key.shape} does not hold {batch} x {n} slots")
    if mask is None:
        mask = np.ones((batch, n), dtype=bool)
    probe_part = ad.repeat_rows(ad.matmul(probe, weights.w), n)
    scores = ad.matmul(ad.tanh(ad.add(probe_part, ad.matmul(key, weights.u))), weights.v)
    return ad.softmax_masked(ad.reshape(scores, (batch, n)), mask)


def read(attn: DiffArray, value: DiffArray, slots: int | None = None) -> DiffArray:
    """Convex combination of value slots under the attention weights."""
    batch = attn.shape[0] if attn.ndim == 2 else 1
    a2 = attn if attn.ndim == 2 else ad.reshape(attn, (1, attn.shape[0]))
    n = slots if slots is not None else a2.shape[1]
    flat = ad.reshape(a2, (batch * n, 1))
    return ad.sum_row_blocks(ad.scale_rows(value, flat), n)


def update_key(state: DiffArray, key: DiffArray, rp: RoundParams,
               mask: np.ndarray | None = None, slots: int | None = None,
               force_identity: bool = False) -> tuple[DiffArray, UpdateRecord]:
    """Forget then add on every slot, gated by an addressing distribution.

    w = address(state, key); F = sigmoid(state forget_w); A = sigmoid(state add_w)
    forget: k_j <- k_j * (1 - w_j F);  add: k_j <- k_j + w_j A

    ``force_identity`` zeroes F and A exactly (a test hook; the sigmoid
    alone cannot produce 0), which leaves the key bitwise unchanged.
    """
    if rp.update_addr is None or rp.forget_w is None or rp.add_w is None:
        raise ConfigError("this round has no key-update parameters")
    batch = state.shape[0]
    n = slots if slots is not None else key.shape[0] // batch
    w = address(state, key, rp.update_addr, mask, n)
    f_pre = ad.matmul(state, rp.forget_w)
    a_pre = ad.matmul(state, rp.add_w)
    if rp.forget_b is not None:
        f_pre = ad.add(f_pre, rp.forget_b)
    if rp.add_b is not None:
        a_pre = ad.add(a_pre, rp.add_b)
    f = ad.sigmoid(f_pre)
    a = ad.sigmoid(a_pre)
    if force_identity:
        f = ad.scale(f, 0.0)
        a = ad.scale(a, 0.0)
    w_flat = ad.reshape(w, (batch * n, 1))
    ones = ad.constant(np.ones((batch * n, key.shape[1])), dtype=key.dtype)
    erase = ad.scale_rows(ad.repeat_rows(f, n), w_flat)
    forgotten = ad.mul(key, ad.sub(ones, erase))
    write = ad.scale_rows(ad.repeat_rows(a, n), w_flat)
    new_key = ad.add(forgotten, write)
    return new_key, UpdateRecord(weights=w, forget_gate=f, add_gate=a,
                                 forgotten=forgotten)


def memory_step(
    query_gru: GruParams,
    state_gru: GruParams,
    attn_params: AttnParams,
    state: DiffArray,
    y_emb: DiffArray,
    mem: MemoryPair,
    rounds: int,
    update_enabled: bool = True,
    force_identity_update: bool = False,
    collect: str = "final",
) -> StepResult:
    """One decoding step: query, then ``rounds`` address/read/update passes.

    The query q = GRU(prev_state, prev_word_embedding) probes the key
    memory in every round; reads always hit the frozen value memory; each
    round's intermediate state rewrites the keys seen by the next round.
    Round-R results are the step's outputs and the updated key memory
    carries over to the next step. ``collect``: "final" keeps no per-round
    records, "rounds" keeps attention/context/state, "full" adds the update
    internals.
    """
    if rounds < 1:
        raise ConfigError(f"round count must be >= 1, got {rounds}")
    if rounds > len(attn_params.rounds):
        raise ConfigError(
            f"model has weights for {len(attn_params.rounds)} rounds, asked for {rounds}"
        )
    q = gru_cell(query_gru, y_emb, state)
    key = mem.key
    records: list[RoundRecord] = []
    attn = context = s_r = None
    for r in range(rounds):
        rp = attn_params.rounds[r]
        attn = address(q, key, rp.query_addr, mem.mask, mem.slots)
        context = read(attn, mem.value, mem.slots)
        s_r = gru_cell(state_gru, context, q)
        update = None
        if update_enabled:
            key, update = update_key(s_r, key, rp, mem.mask, mem.slots,
                                     force_identity=force_identity_update)
        if collect != "final":
            records.append(RoundRecord(
                attn=attn, context=context, state=s_r,
                update=update if collect == "full" else None,
                key_after=key if collect == "full" else None,
            ))
    return StepResult(state=s_r, context=context, attn=attn,
                      memory=mem.with_key(key), rounds=records)


def baseline_attention(probe: DiffArray, ann: DiffArray, weights: AddressWeights,
                       mask: np.ndarray | None = None,
                       slots: int | None = None) -> tuple[DiffArray, DiffArray]:
    """Plain soft attention over fixed annotations: weights and context."""
    batch = probe.shape[0]
    n = slots if slots is not None else ann.shape[0] // batch
    attn = address(probe, ann, weights, mask, n)
    return attn, read(attn, ann, n)
