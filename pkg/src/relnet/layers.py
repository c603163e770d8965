"""Neural building blocks for the relation model.

MLPs, a peephole LSTM used as sentence and question encoder, one-hot
position encodings, and the assembly of per-sentence object vectors.

Layers are pure functions of (parameters, input). The batch encoder
deduplicates identical token sequences and runs same-length sequences in
lockstep; within one batch a sentence therefore has exactly one encoding.
Across differently composed batches the encoding of the same sentence can
move by float rounding (BLAS kernels pick different accumulation paths for
different matrix sizes), which is why whole-pipeline reproducibility is
stated per seed, not per sentence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import relnet.autodiff as ad
from relnet.autodiff import Graph, ParameterStore, ShapeError, Tensor, Var


@dataclass
class MlpSpec:
    """Layer widths of an MLP; ReLU on inner layers, the last one optional.

    ``widths`` follows the convention of listing every layer's output
    width, e.g. (256, 512, 7) is a three-layer net ending in 7 units.
    """

    widths: tuple[int, ...]
    final_relu: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"MlpSpec needs at least one positive width, got {self.widths}")

    @property
    def out_width(self) -> int:
        return self.widths[-1]


@dataclass
class LstmState:
    """Hidden and cell activations; one row per lockstepped sequence."""

    h: Var
    c: Var


@dataclass
class ObjectSet:
    """The n object vectors plus the question vector one forward consumes.

    ``objects`` is [n x width] (equal widths by construction), ``question``
    is [q_width]. Payloads may be Tensors or graph Vars; Vars keep the
    encoder differentiable end to end.
    """

    objects: Var | Tensor
    question: Var | Tensor

    @property
    def count(self) -> int:
        n = self.objects.shape[0]
        if n < 1:
            raise ShapeError("ObjectSet needs at least one object")
        return n


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


# ---------------------------------------------------------------------------
# MLP


def init_mlp_params(store: ParameterStore, prefix: str, in_width: int,
                    spec: MlpSpec, rng: np.random.Generator,
                    regularize: bool = False) -> None:
    """Register weight and bias entries ``<prefix>.<i>.w`` / ``.b``.

    ``regularize`` marks the weight matrices (never the biases) for the
    L2 penalty.
    """
    prev = in_width
    for i, width in enumerate(spec.widths):
        store.add(f"{prefix}.{i}.w", glorot_uniform(rng, prev, width, (prev, width)),
                  regularize=regularize)
        store.add(f"{prefix}.{i}.b", np.zeros(width))
        prev = width


def mlp_forward(graph: Graph, store: ParameterStore, prefix: str,
                spec: MlpSpec, x: Var) -> Var:
    for i, _ in enumerate(spec.widths):
        w = graph.parameter(store, f"{prefix}.{i}.w")
        if x.shape[1] != w.shape[0]:
            raise ShapeError(
                f"mlp {prefix!r} layer {i}: input width {x.shape[1]} != weight rows {w.shape[0]}"
            )
        x = ad.add_bias(ad.matmul(x, w), graph.parameter(store, f"{prefix}.{i}.b"))
        if i < len(spec.widths) - 1 or spec.final_relu:
            x = ad.relu(x)
    return x


# ---------------------------------------------------------------------------
# peephole LSTM (Gers-Schmidhuber form: input and forget gates peek at the
# previous cell, the output gate at the current cell, through diagonal
# peephole vectors)

_GATE_ORDER = "i, f, g, o"  # column blocks of the fused kernels


def init_lstm_params(store: ParameterStore, prefix: str, in_width: int,
                     units: int, rng: np.random.Generator) -> None:
    """Register ``<prefix>.w|u|b|p_i|p_f|p_o``.

    w is [in x 4*units], u is [units x 4*units], gate blocks ordered i,f,g,o.
    Forget-gate bias starts at 1.0; peepholes start at zero.
    """
    store.add(f"{prefix}.w", glorot_uniform(rng, in_width, units, (in_width, 4 * units)))
    store.add(f"{prefix}.u", glorot_uniform(rng, units, units, (units, 4 * units)))
    b = np.zeros(4 * units)
    b[units:2 * units] = 1.0
    store.add(f"{prefix}.b", b)
    for gate in ("p_i", "p_f", "p_o"):
        store.add(f"{prefix}.{gate}", np.zeros(units))


def _lstm_cell(graph: Graph, weights: dict[str, Var], x: Var, state: LstmState,
               units: int) -> LstmState:
    z = ad.add_bias(ad.add(ad.matmul(x, weights["w"]), ad.matmul(state.h, weights["u"])),
                    weights["b"])
    zi = ad.slice_cols(z, 0, units)
    zf = ad.slice_cols(z, units, 2 * units)
    zg = ad.slice_cols(z, 2 * units, 3 * units)
    zo = ad.slice_cols(z, 3 * units, 4 * units)
    i = ad.sigmoid(ad.add(zi, ad.mul_rowvec(state.c, weights["p_i"])))
    f = ad.sigmoid(ad.add(zf, ad.mul_rowvec(state.c, weights["p_f"])))
    c = ad.add(ad.mul(f, state.c), ad.mul(i, ad.tanh(zg)))
    o = ad.sigmoid(ad.add(zo, ad.mul_rowvec(c, weights["p_o"])))
    return LstmState(h=ad.mul(o, ad.tanh(c)), c=c)


def _lstm_weights(graph: Graph, store: ParameterStore, prefix: str) -> tuple[dict[str, Var], int]:
    weights = {k: graph.parameter(store, f"{prefix}.{k}")
               for k in ("w", "u", "b", "p_i", "p_f", "p_o")}
    units = weights["u"].shape[0]
    return weights, units


def lstm_step(graph: Graph, store: ParameterStore, prefix: str, x: Var,
              state: LstmState) -> LstmState:
    """One peephole LSTM step on a [rows x in] input batch."""
    weights, units = _lstm_weights(graph, store, prefix)
    if x.shape[1] != weights["w"].shape[0]:
        raise ShapeError(
            f"lstm {prefix!r}: input width {x.shape[1]} != kernel rows {weights['w'].shape[0]}"
        )
    if state.h.shape != (x.shape[0], units) or state.c.shape != (x.shape[0], units):
        raise ShapeError(
            f"lstm {prefix!r}: state shapes {state.h.shape}/{state.c.shape} "
            f"do not match ({x.shape[0]}, {units})"
        )
    return _lstm_cell(graph, weights, x, state, units)


def zero_state(graph: Graph, rows: int, units: int) -> LstmState:
    zeros = np.zeros((rows, units))
    return LstmState(h=graph.constant(zeros), c=graph.constant(zeros))


def encode_sequences(graph: Graph, store: ParameterStore, lstm_prefix: str,
                     embed: Var, seqs: list) -> Var:
    """Encode token-id sequences to final LSTM hidden states, [len(seqs) x units].

    Identical sequences are encoded once; distinct sequences are grouped by
    length and run in lockstep. Grouping depends only on the token ids, so
    results are reproducible run to run.
    """
    if not seqs:
        raise ValueError("encode_sequences needs at least one sequence")
    uniq: dict[tuple[int, ...], int] = {}
    for s in seqs:
        key = tuple(int(t) for t in s)
        if not key:
            raise ValueError("cannot encode an empty token sequence")
        uniq.setdefault(key, len(uniq))

    weights, units = _lstm_weights(graph, store, lstm_prefix)
    by_len: dict[int, list[tuple[int, ...]]] = {}
    for key in uniq:
        by_len.setdefault(len(key), []).append(key)

    chunks: list[Var] = []
    row_of_uid = np.empty(len(uniq), dtype=np.int64)
    row = 0
    for length in sorted(by_len):
        group = by_len[length]
        ids = np.array(group, dtype=np.int64)  # [g x length]
        state = zero_state(graph, len(group), units)
        for t in range(length):
            x = ad.gather_rows(embed, ids[:, t])
            state = _lstm_cell(graph, weights, x, state, units)
        chunks.append(state.h)
        for key in group:
            row_of_uid[uniq[key]] = row
            row += 1
    stacked = chunks[0] if len(chunks) == 1 else ad.concat(chunks, axis=0)
    order = [row_of_uid[uniq[tuple(int(t) for t in s)]] for s in seqs]
    return ad.gather_rows(stacked, order)


def encode_sentence(graph: Graph, store: ParameterStore, lstm_prefix: str,
                    embed: Var, token_ids) -> Var:
    """Final hidden state for one sentence, as a [units] vector."""
    rows = encode_sequences(graph, store, lstm_prefix, embed, [token_ids])
    return ad.reshape(rows, (rows.shape[1],))


# ---------------------------------------------------------------------------
# position encoding and object assembly


def encode_position(context_len: int, index: int, offset: int, size: int = 40) -> np.ndarray:
    """One-hot of length ``size`` at ``offset + index``.

    ``offset`` is the randomized padding drawn per sample; legal offsets
    satisfy offset + context_len <= size.
    """
    if not 0 <= index < context_len:
        raise ValueError(f"sentence index {index} out of range for context of {context_len}")
    if offset < 0 or offset + context_len > size:
        raise ValueError(
            f"offset {offset} illegal for context {context_len} and size {size}"
        )
    out = np.zeros(size)
    out[offset + index] = 1.0
    return out


def position_block(context_len: int, offset: int, size: int = 40) -> np.ndarray:
    """Stacked one-hots for a whole context, [context_len x size]."""
    block = np.zeros((context_len, size))
    if offset < 0 or offset + context_len > size:
        raise ValueError(
            f"offset {offset} illegal for context {context_len} and size {size}"
        )
    block[np.arange(context_len), offset + np.arange(context_len)] = 1.0
    return block


@dataclass
class EncoderConfig:
    """Text-side dimensions: embedding, the two LSTMs, position vectors."""

    vocab_size: int
    embed_dim: int = 256
    lstm_units: int = 32
    pos_size: int = 40
    context_size: int = 20
    share_question_encoder: bool = False  # variant: reuse sentence LSTM weights for questions

    @property
    def object_width(self) -> int:
        return self.lstm_units + self.pos_size

    @property
    def question_prefix(self) -> str:
        return "sent_lstm" if self.share_question_encoder else "q_lstm"

    def validate(self) -> None:
        for name in ("vocab_size", "embed_dim", "lstm_units", "pos_size", "context_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.context_size > self.pos_size:
            raise ValueError(
                f"context_size {self.context_size} exceeds position size {self.pos_size}"
            )


def init_encoder_params(store: ParameterStore, cfg: EncoderConfig,
                        rng: np.random.Generator) -> None:
    cfg.validate()
    store.add("embed.table",
              glorot_uniform(rng, cfg.vocab_size, cfg.embed_dim,
                             (cfg.vocab_size, cfg.embed_dim)))
    init_lstm_params(store, "sent_lstm", cfg.embed_dim, cfg.lstm_units, rng)
    if not cfg.share_question_encoder:
        init_lstm_params(store, "q_lstm", cfg.embed_dim, cfg.lstm_units, rng)


def encode_batch(graph: Graph, store: ParameterStore, cfg: EncoderConfig,
                 samples: list, offsets: list[int]) -> tuple[Var, Var]:
    """Objects and questions for a batch of encoded samples.

    Every sample must carry ``sentences`` (context_size token-id lists) and
    ``question``. Returns (objects [batch*context_size x object_width],
    questions [batch x units]); object rows are sample-major.
    """
    n = cfg.context_size
    if len(offsets) != len(samples):
        raise ValueError(f"{len(samples)} samples but {len(offsets)} offsets")
    for s in samples:
        if len(s.sentences) != n:
            raise ValueError(
                f"sample has {len(s.sentences)} sentences, expected exactly {n}; "
                "preprocess contexts first"
            )
    embed = graph.parameter(store, "embed.table")
    sent_rows = encode_sequences(
        graph, store, "sent_lstm", embed,
        [sent for s in samples for sent in s.sentences],
    )
    positions = np.concatenate([position_block(n, r, cfg.pos_size) for r in offsets])
    objects = ad.concat([sent_rows, graph.constant(positions)], axis=1)
    questions = encode_sequences(graph, store, cfg.question_prefix, embed,
                                 [s.question for s in samples])
    return objects, questions


def build_objects(graph: Graph, store: ParameterStore, cfg: EncoderConfig,
                  sample, offset: int) -> ObjectSet:
    """ObjectSet for one sample: o_i = [sentence encoding | position one-hot]."""
    objects, questions = encode_batch(graph, store, cfg, [sample], [offset])
    return ObjectSet(objects=objects,
                     question=ad.reshape(questions, (questions.shape[1],)))
