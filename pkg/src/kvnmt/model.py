"""Encoder-decoder model: parameters, teacher forcing, greedy and beam search.

The decoder runs one memory_step per target position. The "kvmem" variant
rewrites its key memory every round; the "baseline" variant keeps both
memories frozen at the annotations, sharing the rest of the architecture so
the two are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .attention import (
    AddressWeights,
    AttnParams,
    MemoryPair,
    RoundParams,
    StepResult,
    init_memories,
    memory_step,
)
from .autodiff import DiffArray
from .data import BOS_ID, EOS_ID, EOS_TOKEN
from .errors import CheckpointError, ConfigError
from .evaluation import AttentionTrace
from .rnn import GruParams, encode_batch, init_decoder_state_batch

VARIANTS = ("baseline", "kvmem")


@dataclass
class ModelConfig:
    src_vocab: int
    trg_vocab: int
    embed_dim: int = 64
    hidden_dim: int = 64
    attn_dim: int = 0      # 0 means hidden_dim
    readout_dim: int = 0   # 0 means hidden_dim
    rounds: int = 1
    variant: str = "kvmem"
    beam: int = 4
    max_decode_len: int = 50
    penalty_weight: float = 1.0
    dropout: float = 0.0
    length_norm: bool = True
    share_update_addressing: bool = False
    update_gate_bias: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.variant == "baseline" and self.rounds != 1:
            raise ConfigError("the baseline variant has a single access round")
        if self.beam < 1:
            raise ConfigError("beam must be >= 1")
        if self.penalty_weight < 0:
            raise ConfigError("penalty_weight must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if min(self.src_vocab, self.trg_vocab, self.embed_dim, self.hidden_dim) < 1:
            raise ConfigError("vocab sizes and dimensions must be positive")

    @property
    def attn_width(self) -> int:
        return self.attn_dim or self.hidden_dim

    @property
    def readout_width(self) -> int:
        return self.readout_dim or self.hidden_dim

    @property
    def key_dim(self) -> int:
        return 2 * self.hidden_dim

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ModelParams(Mapping[str, DiffArray]):
    """Ordered name -> DiffArray mapping of all trainable tensors."""

    def __init__(self, arrays: dict[str, DiffArray]):
        self._arrays = dict(arrays)

    def __getitem__(self, name: str) -> DiffArray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def zero_grads(self) -> None:
        for p in self._arrays.values():
            p.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {k: v.grad for k, v in self._arrays.items()}

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({
            k: DiffArray(v.data.astype(dtype), tracked=True)
            for k, v in self._arrays.items()
        })


def _tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    e, d, dk = cfg.embed_dim, cfg.hidden_dim, cfg.key_dim
    a, ro = cfg.attn_width, cfg.readout_width
    shapes: dict[str, tuple[int, ...]] = {
        "src_emb": (cfg.src_vocab, e),
        "trg_emb": (cfg.trg_vocab, e),
    }
    for prefix, in_dim in (("enc_fwd", e), ("enc_bwd", e), ("dec_query", e),
                           ("dec_state", dk)):
        for gate in ("z", "r", "h"):
            shapes[f"{prefix}.w_{gate}"] = (in_dim, d)
            shapes[f"{prefix}.u_{gate}"] = (d, d)
            shapes[f"{prefix}.b_{gate}"] = (d,)
    shapes["init_state.w"] = (d, d)
    for r in range(1, cfg.rounds + 1):
        shapes[f"attn{r}.w"] = (d, a)
        shapes[f"attn{r}.u"] = (dk, a)
        shapes[f"attn{r}.v"] = (a, 1)
        if cfg.variant == "kvmem":
            if not cfg.share_update_addressing:
                shapes[f"upd_attn{r}.w"] = (d, a)
                shapes[f"upd_attn{r}.u"] = (dk, a)
                shapes[f"upd_attn{r}.v"] = (a, 1)
            shapes[f"forget{r}.w"] = (d, dk)
            shapes[f"add{r}.w"] = (d, dk)
            if cfg.update_gate_bias:
                shapes[f"forget{r}.b"] = (dk,)
                shapes[f"add{r}.b"] = (dk,)
    shapes["out.w"] = (d + dk + e, ro)
    shapes["out.b"] = (ro,)
    shapes["out.wv"] = (ro, cfg.trg_vocab)
    return shapes


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32,
                init_range: float = 0.08) -> ModelParams:
    """Fresh parameters, every tensor uniform in [-init_range, init_range]."""
    rng = np.random.default_rng(seed)
    arrays = {
        name: DiffArray(rng.uniform(-init_range, init_range, size=shape),
                        tracked=True, dtype=dtype)
        for name, shape in _tensor_shapes(cfg).items()
    }
    return ModelParams(arrays)


# tensors specific to the key-update machinery; everything else is shared
# with the baseline and copied over by init_from_pretrained
def is_kv_specific(name: str, rounds_shared: int = 1) -> bool:
    if name.startswith(("upd_attn", "forget", "add")):
        return True
    if name.startswith("attn"):
        r = int(name[4 : name.index(".")])
        return r > rounds_shared
    return False


@dataclass
class Hypothesis:
    """A finished (or truncated) decode with its score and trace."""

    tokens: list[int]
    logprob: float
    score: float
    trace: AttentionTrace | None = None


@dataclass
class EncodedBatch:
    ann: DiffArray        # (batch * n, 2d) sentence-major
    first_bwd: DiffArray  # (batch, d)
    batch: int
    slots: int
    mask: np.ndarray


@dataclass
class TeacherForcedResult:
    dists: list[DiffArray]        # per step, (batch, trg_vocab)
    attns: list[DiffArray]        # per step, (batch, slots) final round
    steps: list[StepResult]
    final_state: DiffArray
    slots: int


class Seq2Seq:
    def __init__(self, cfg: ModelConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params
        self._bind_views()

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "Seq2Seq":
        return cls(cfg, init_params(cfg, seed, dtype=dtype))

    @property
    def dtype(self):
        return self.params["src_emb"].dtype

    def _gru(self, prefix: str, in_dim: int) -> GruParams:
        p = self.params
        return GruParams(
            w_z=p[f"{prefix}.w_z"], u_z=p[f"{prefix}.u_z"], b_z=p[f"{prefix}.b_z"],
            w_r=p[f"{prefix}.w_r"], u_r=p[f"{prefix}.u_r"], b_r=p[f"{prefix}.b_r"],
            w_h=p[f"{prefix}.w_h"], u_h=p[f"{prefix}.u_h"], b_h=p[f"{prefix}.b_h"],
            input_dim=in_dim, hidden_dim=self.cfg.hidden_dim,
        )

    def _bind_views(self) -> None:
        cfg, p = self.cfg, self.params
        expected = _tensor_shapes(cfg)
        missing = [k for k in expected if k not in p]
        if missing:
            raise CheckpointError(f"parameters missing tensors: {missing}")
        for name, shape in expected.items():
            if p[name].shape != shape:
                raise CheckpointError(
                    f"tensor {name} has shape {p[name].shape}, expected {shape}"
                )
        self.enc_fwd = self._gru("enc_fwd", cfg.embed_dim)
        self.enc_bwd = self._gru("enc_bwd", cfg.embed_dim)
        self.dec_query = self._gru("dec_query", cfg.embed_dim)
        self.dec_state = self._gru("dec_state", cfg.key_dim)
        rounds = []
        for r in range(1, cfg.rounds + 1):
            query_addr = AddressWeights(
                w=p[f"attn{r}.w"], u=p[f"attn{r}.u"], v=p[f"attn{r}.v"]
            )
            rp = RoundParams(query_addr=query_addr)
            if cfg.variant == "kvmem":
                if cfg.share_update_addressing:
                    rp.update_addr = query_addr
                else:
                    rp.update_addr = AddressWeights(
                        w=p[f"upd_attn{r}.w"], u=p[f"upd_attn{r}.u"], v=p[f"upd_attn{r}.v"]
                    )
                rp.forget_w = p[f"forget{r}.w"]
                rp.add_w = p[f"add{r}.w"]
                if cfg.update_gate_bias:
                    rp.forget_b = p[f"forget{r}.b"]
                    rp.add_b = p[f"add{r}.b"]
            rounds.append(rp)
        self.attn_params = AttnParams(rounds=rounds)

    # ---------------------------------------------------------------- encode

    def encode(self, src: np.ndarray, src_mask: np.ndarray) -> EncodedBatch:
        ann, first_bwd = encode_batch(self.enc_fwd, self.enc_bwd,
                                      self.params["src_emb"], src, src_mask)
        return EncodedBatch(ann=ann, first_bwd=first_bwd, batch=src.shape[0],
                            slots=src.shape[1], mask=np.asarray(src_mask, bool))

    def init_memory(self, enc: EncodedBatch) -> MemoryPair:
        return init_memories(enc.ann, slots=enc.slots, batch=enc.batch, mask=enc.mask)

    def initial_state(self, enc: EncodedBatch) -> DiffArray:
        return init_decoder_state_batch(enc.first_bwd, self.params["init_state.w"])

    # ---------------------------------------------------------------- predict

    def predict_distribution(self, state: DiffArray, context: DiffArray,
                             y_emb: DiffArray,
                             dropout_rng: np.random.Generator | None = None) -> DiffArray:
        """softmax(readout @ wv) with readout = tanh([s; c; emb] @ w + b).

        Dropout (inverted scaling) applies to the readout activation only
        and only when a generator is passed.
        """
        p = self.params
        readout = ad.tanh(ad.add(
            ad.matmul(ad.concat([state, context, y_emb], axis=1), p["out.w"]),
            p["out.b"],
        ))
        if dropout_rng is not None and self.cfg.dropout > 0.0:
            keep = 1.0 - self.cfg.dropout
            mask = (dropout_rng.random(readout.shape) < keep) / keep
            readout = ad.mul(readout, ad.constant(mask, dtype=self.dtype))
        logits = ad.matmul(readout, p["out.wv"])
        full = np.ones(logits.shape, dtype=bool)
        return ad.softmax_masked(logits, full)

    # ---------------------------------------------------------------- steps

    def decode_step(self, state: DiffArray, y_prev: np.ndarray, mem: MemoryPair,
                    collect: str = "final", force_identity_update: bool = False,
                    dropout_rng: np.random.Generator | None = None,
                    ) -> tuple[StepResult, DiffArray]:
        """One decoding step from previous state and previous token ids."""
        y_emb = ad.embed(self.params["trg_emb"], y_prev)
        res = memory_step(
            self.dec_query, self.dec_state, self.attn_params,
            state, y_emb, mem, self.cfg.rounds,
            update_enabled=(self.cfg.variant == "kvmem"),
            force_identity_update=force_identity_update,
            collect=collect,
        )
        dist = self.predict_distribution(res.state, res.context, y_emb, dropout_rng)
        return res, dist

    def teacher_forced(self, src: np.ndarray, src_mask: np.ndarray,
                       trg: np.ndarray, trg_mask: np.ndarray,
                       collect: str = "final",
                       force_identity_update: bool = False,
                       dropout_rng: np.random.Generator | None = None,
                       ) -> TeacherForcedResult:
        """Run the decoder over gold prefixes, one step per target position."""
        src = np.asarray(src, dtype=np.int64)
        trg = np.asarray(trg, dtype=np.int64)
        enc = self.encode(src, src_mask)
        mem = self.init_memory(enc)
        state = self.initial_state(enc)
        batch, m = trg.shape
        inputs = np.concatenate(
            [np.full((batch, 1), BOS_ID, dtype=np.int64), trg[:, :-1]], axis=1
        )
        dists, attns, steps = [], [], []
        for t in range(m):
            res, dist = self.decode_step(
                state, inputs[:, t], mem, collect=collect,
                force_identity_update=force_identity_update,
                dropout_rng=dropout_rng,
            )
            state, mem = res.state, res.memory
            dists.append(dist)
            attns.append(res.attn)
            steps.append(res)
        return TeacherForcedResult(dists=dists, attns=attns, steps=steps,
                                   final_state=state, slots=enc.slots)

    # ---------------------------------------------------------------- search

    def _encode_single(self, src_ids) -> tuple[EncodedBatch, MemoryPair, DiffArray]:
        ids = np.asarray(src_ids, dtype=np.int64).reshape(1, -1)
        mask = np.ones(ids.shape, dtype=bool)
        enc = self.encode(ids, mask)
        return enc, self.init_memory(enc), self.initial_state(enc)

    def greedy_decode(self, src_ids, max_len: int | None = None,
                      collect: str = "rounds") -> Hypothesis:
        """Argmax decoding; ties break toward the lowest token id."""
        max_len = max_len or self.cfg.max_decode_len
        if max_len < 1:
            raise ConfigError("max_len must be >= 1")
        _, mem, state = self._encode_single(src_ids)
        y_prev = np.array([BOS_ID], dtype=np.int64)
        tokens: list[int] = []
        logprob = 0.0
        round_attns: list[list[np.ndarray]] = []
        for _ in range(max_len):
            res, dist = self.decode_step(state, y_prev, mem, collect=collect)
            probs = dist.data[0]
            tok = int(np.argmax(probs))
            tokens.append(tok)
            logprob += float(np.log(max(probs[tok], 1e-38)))
            round_attns.append(self._step_round_attns(res))
            if tok == EOS_ID:
                break
            state, mem = res.state, res.memory
            y_prev = np.array([tok], dtype=np.int64)
        trace = AttentionTrace(
            src_tokens=_id_marks(np.asarray(src_ids).reshape(-1)),
            trg_tokens=_id_marks(tokens),
            attn=round_attns,
        )
        score = logprob / len(tokens) if self.cfg.length_norm else logprob
        return Hypothesis(tokens=tokens, logprob=logprob, score=score, trace=trace)

    def _step_round_attns(self, res: StepResult) -> list[np.ndarray]:
        if res.rounds:
            return [rec.attn.data[0].copy() for rec in res.rounds]
        return [res.attn.data[0].copy()]

    def greedy_decode_batch(self, src: np.ndarray, src_mask: np.ndarray,
                            max_len: int | None = None) -> list[list[int]]:
        """Lockstep greedy over a padded batch; tokens only, no traces."""
        max_len = max_len or self.cfg.max_decode_len
        src = np.asarray(src, dtype=np.int64)
        batch = src.shape[0]
        enc = self.encode(src, src_mask)
        mem = self.init_memory(enc)
        state = self.initial_state(enc)
        y_prev = np.full(batch, BOS_ID, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        outs: list[list[int]] = [[] for _ in range(batch)]
        for _ in range(max_len):
            res, dist = self.decode_step(state, y_prev, mem)
            toks = dist.data.argmax(axis=1)
            for b in range(batch):
                if not done[b]:
                    outs[b].append(int(toks[b]))
                    if toks[b] == EOS_ID:
                        done[b] = True
            if done.all():
                break
            state, mem = res.state, res.memory
            y_prev = toks.astype(np.int64)
        return outs

    def beam_decode(self, src_ids, beam: int | None = None,
                    max_len: int | None = None,
                    length_norm: bool | None = None,
                    collect: str = "rounds") -> list[Hypothesis]:
        """Beam search; every live hypothesis carries its own key memory.

        Finished hypotheses are ranked by total logprob, divided by length
        under length normalization; ties break on lexicographic token ids.
        """
        beam = beam or self.cfg.beam
        max_len = max_len or self.cfg.max_decode_len
        if length_norm is None:
            length_norm = self.cfg.length_norm
        if beam < 1:
            raise ConfigError("beam must be >= 1")
        _, mem, state = self._encode_single(src_ids)
        src_marks = _id_marks(np.asarray(src_ids).reshape(-1))

        live = [{"tokens": [], "logprob": 0.0, "state": state, "mem": mem,
                 "attn": []}]
        finished: list[Hypothesis] = []

        def norm(lp: float, length: int) -> float:
            return lp / length if length_norm else lp

        for _ in range(max_len):
            candidates = []
            for hyp in live:
                y_prev = np.array([hyp["tokens"][-1] if hyp["tokens"] else BOS_ID],
                                  dtype=np.int64)
                res, dist = self.decode_step(hyp["state"], y_prev, hyp["mem"],
                                             collect=collect)
                logs = np.log(np.maximum(dist.data[0], 1e-38))
                attns = hyp["attn"] + [self._step_round_attns(res)]
                for tok in range(logs.shape[0]):
                    candidates.append((
                        hyp["logprob"] + float(logs[tok]),
                        hyp["tokens"] + [tok],
                        res, attns,
                    ))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            next_live = []
            for lp, toks, res, attns in candidates[:beam]:
                if toks[-1] == EOS_ID:
                    finished.append(Hypothesis(
                        tokens=toks, logprob=lp, score=norm(lp, len(toks)),
                        trace=AttentionTrace(src_tokens=src_marks,
                                             trg_tokens=_id_marks(toks),
                                             attn=attns),
                    ))
                else:
                    next_live.append({"tokens": toks, "logprob": lp,
                                      "state": res.state, "mem": res.memory,
                                      "attn": attns})
            live = next_live
            if not live:
                break
        for hyp in live:  # truncated at max_len
            finished.append(Hypothesis(
                tokens=hyp["tokens"], logprob=hyp["logprob"],
                score=norm(hyp["logprob"], len(hyp["tokens"])),
                trace=AttentionTrace(src_tokens=src_marks,
                                     trg_tokens=_id_marks(hyp["tokens"]),
                                     attn=hyp["attn"]),
            ))
        finished.sort(key=lambda h: (-h.score, h.tokens))
        return finished[:beam]


def _id_marks(ids) -> list[str]:
    """Placeholder token strings when no vocabulary is at hand."""
    return [EOS_TOKEN if i == EOS_ID else f"#{int(i)}" for i in ids]


def collect_traces(result: TeacherForcedResult, src: np.ndarray,
                   src_mask: np.ndarray, trg: np.ndarray, trg_mask: np.ndarray,
                   src_tokens: list[list[str]] | None = None,
                   trg_tokens: list[list[str]] | None = None) -> list[AttentionTrace]:
    """Per-sentence traces out of a batched teacher-forced pass.

    Needs the pass to have been run with collect="rounds" or "full".
    Attention vectors are cut back to each sentence's real slot count.
    """
    batch, n = np.asarray(src_mask).shape
    traces = []
    for b in range(batch):
        n_b = int(np.asarray(src_mask)[b].sum())
        m_b = int(np.asarray(trg_mask)[b].sum())
        attn = []
        for t in range(m_b):
            step = result.steps[t]
            recs = step.rounds if step.rounds else []
            if recs:
                attn.append([rec.attn.data[b, :n_b].copy() for rec in recs])
            else:
                attn.append([step.attn.data[b, :n_b].copy()])
        traces.append(AttentionTrace(
            src_tokens=(src_tokens[b] if src_tokens else _id_marks(src[b, :n_b])),
            trg_tokens=(trg_tokens[b] if trg_tokens else _id_marks(trg[b, :m_b])),
            attn=attn,
        ))
    return traces


def forward_teacher_forced(model: Seq2Seq, src_ids, trg_ids,
                           collect: str = "final",
                           force_identity_update: bool = False,
                           ) -> tuple[list[DiffArray], list[DiffArray], DiffArray]:
    """Single-pair teacher forcing: distributions, attentions, final state."""
    src = np.asarray(src_ids, dtype=np.int64).reshape(1, -1)
    trg = np.asarray(trg_ids, dtype=np.int64).reshape(1, -1)
    res = model.teacher_forced(
        src, np.ones(src.shape, bool), trg, np.ones(trg.shape, bool),
        collect=collect, force_identity_update=force_identity_update,
    )
    return res.dists, res.attns, res.final_state


def greedy_decode(model: Seq2Seq, src_ids, max_len: int | None = None) -> Hypothesis:
    return model.greedy_decode(src_ids, max_len=max_len)


def beam_decode(model: Seq2Seq, src_ids, beam: int | None = None,
                max_len: int | None = None,
                length_norm: bool | None = None) -> list[Hypothesis]:
    return model.beam_decode(src_ids, beam=beam, max_len=max_len,
                             length_norm=length_norm)
