"""Single and stacked relation layers over object sets.

A zero-layer network applies the relation MLP g to every ordered object
pair (o_i, o_j, q), including i == j, sums the n^2 relation vectors and
maps the sum through the output MLP f. Each stacked layer d first groups
the previous layer's pair outputs by their first index and sums, yielding
one refined object per original object, then relates those n aggregates
pairwise again with its own MLP h_d. Aggregating before pairing keeps the
per-layer cost at n^2 relation evaluations instead of materializing
higher-order tuples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import relnet.autodiff as ad
from relnet.autodiff import Graph, ParameterStore, Tensor, Var
from relnet.layers import (EncoderConfig, MlpSpec, ObjectSet, encode_batch,
                           init_encoder_params, init_mlp_params, mlp_forward)


@dataclass
class RelNetConfig:
    """Shapes of the relation stack: g, the per-depth h_d, and f.

    ``layers`` is the number of stacked aggregation layers; zero means the
    plain pairwise network. Relation MLP input widths must chain: g reads
    2*object_width + question_width, h_1 reads 2*g_out + question_width,
    and so on; f reads the final relation width.
    """

    n_classes: int
    object_width: int
    question_width: int
    layers: int = 0
    g_spec: MlpSpec = field(default_factory=lambda: MlpSpec((256, 256, 256, 256)))
    h_specs: tuple[MlpSpec, ...] = ()
    f_spec: MlpSpec = field(default_factory=lambda: MlpSpec((256, 512, 2), final_relu=False))
    include_self_pairs: bool = True
    share_relation_weights: bool = False  # single h reused at every depth

    def relation_prefix(self, depth: int) -> str:
        if self.share_relation_weights:
            return "h"
        return f"h{depth}"

    def relation_spec(self, depth: int) -> MlpSpec:
        return self.h_specs[0] if self.share_relation_weights else self.h_specs[depth - 1]

    def validate(self) -> None:
        if self.layers < 0:
            raise ValueError(f"layer count must be non-negative, got {self.layers}")
        if self.n_classes < 2:
            raise ValueError(f"need at least two answer classes, got {self.n_classes}")
        if len(self.h_specs) != (1 if self.share_relation_weights and self.layers else self.layers):
            raise ValueError(
                f"{self.layers} layers need {self.layers} h specs "
                f"(or one shared), got {len(self.h_specs)}"
            )
        width = self.g_spec.out_width
        for d in range(1, self.layers + 1):
            spec = self.relation_spec(d)
            if self.share_relation_weights and spec.out_width != width:
                raise ValueError("shared relation weights need equal widths at every depth")
            width = spec.out_width
        if self.f_spec.final_relu:
            raise ValueError("output MLP must end linear (softmax happens in the loss)")
        if self.f_spec.out_width != self.n_classes:
            raise ValueError(
                f"output MLP ends in {self.f_spec.out_width} units, expected {self.n_classes}"
            )


@dataclass
class RelationTrace:
    """What one forward pass did: per-layer relation-MLP row counts and the
    Frobenius norm of the aggregate each layer feeds forward (refined
    objects below the top layer, the final sum vector at the top)."""

    object_count: int
    layer_count: int
    batch: int
    evaluations: list[int] = field(default_factory=list)   # per sample, per layer
    aggregate_norms: list[float] = field(default_factory=list)

    @property
    def total_evaluations(self) -> int:
        return sum(self.evaluations)

    def to_csv(self) -> str:
        lines = ["layer,evaluations_per_sample,aggregate_norm"]
        for d, (count, norm) in enumerate(zip(self.evaluations, self.aggregate_norms)):
            lines.append(f"{d},{count},{norm!r}")
        return "\n".join(lines) + "\n"


def _pair_ids(n: int, batch: int, include_self: bool) -> tuple[np.ndarray, np.ndarray]:
    # explicit (left, right) row ids for the self-pair-free variant
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = np.ones((n, n), dtype=bool) if include_self else (i != j)
    left = np.concatenate([b * n + i[keep] for b in range(batch)])
    right = np.concatenate([b * n + j[keep] for b in range(batch)])
    return left, right


def _pair_inputs(config: RelNetConfig, objects: Var, questions: Var,
                 n: int, batch: int) -> Var:
    """Rows concat(o_i, o_j, q) for all ordered pairs, sample-major, i-major."""
    if config.include_self_pairs:
        pairs = n * n
        left = ad.repeat_rows(objects, n)
        right = ad.tile_block_rows(objects, n, n)
    else:
        pairs = n * (n - 1)
        left_ids, right_ids = _pair_ids(n, batch, include_self=False)
        left = ad.gather_rows(objects, left_ids)
        right = ad.gather_rows(objects, right_ids)
    q = ad.repeat_rows(questions, pairs)
    return ad.concat([left, right, q], axis=1)


def _pairs_per_object(config: RelNetConfig, n: int) -> int:
    return n if config.include_self_pairs else n - 1


def _forward(graph: Graph, store: ParameterStore, config: RelNetConfig,
             objects: Var, questions: Var, n: int, batch: int) -> tuple[Var, RelationTrace]:
    """Logits [batch x classes] plus the evaluation trace.

    ``objects`` is [batch*n x object_width] sample-major, ``questions``
    [batch x question_width].
    """
    config.validate()
    trace = RelationTrace(object_count=n, layer_count=config.layers, batch=batch)
    per_object = _pairs_per_object(config, n)

    relations = mlp_forward(graph, store, "g", config.g_spec,
                            _pair_inputs(config, objects, questions, n, batch))
    for depth in range(1, config.layers + 1):
        refined = ad.block_row_sum(relations, per_object)  # sum over j, grouped by i
        trace.evaluations.append(per_object * n)
        trace.aggregate_norms.append(float(np.linalg.norm(refined.data)))
        relations = mlp_forward(
            graph, store, config.relation_prefix(depth), config.relation_spec(depth),
            _pair_inputs(config, refined, questions, n, batch))
    total = ad.block_row_sum(relations, per_object * n)   # sum over every pair
    trace.evaluations.append(per_object * n)
    trace.aggregate_norms.append(float(np.linalg.norm(total.data)))
    return mlp_forward(graph, store, "f", config.f_spec, total), trace


def _lift(oset: ObjectSet) -> tuple[Graph, Var, Var, int]:
    """Object matrix and question row as Vars on one graph, batch of 1."""
    if isinstance(oset.objects, Var):
        graph = oset.objects.graph
        objects = oset.objects
        question = oset.question
    else:
        graph = Graph()
        objects = graph.constant(oset.objects)
        question = graph.constant(oset.question)
    n = oset.count
    q_row = ad.reshape(question, (1, question.shape[0]))
    return graph, objects, q_row, n


def pair_relations(store: ParameterStore, config: RelNetConfig,
                   oset: ObjectSet) -> Var:
    """Relation vectors g(o_i, o_j, q) for all ordered pairs, as [n x n x d].

    Runs the relation MLP once over n^2 rows (n*(n-1) when self pairs are
    disabled, with zero rows re-inserted on the diagonal for shape parity).
    """
    graph, objects, q_row, n = _lift(oset)
    rows = mlp_forward(graph, store, "g", config.g_spec,
                       _pair_inputs(config, objects, q_row, n, 1))
    d = config.g_spec.out_width
    if config.include_self_pairs:
        return ad.reshape(rows, (n, n, d))
    # re-insert zero rows on the diagonal so the shape contract holds;
    # gathering from [rows | one zero row] keeps gradients flowing
    padded = ad.concat([rows, graph.constant(np.zeros((1, d)))], axis=0)
    zero_row = n * (n - 1)
    ids = np.full(n * n, zero_row, dtype=np.int64)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ids[(i * n + j)[i != j]] = np.arange(n * (n - 1))
    return ad.reshape(ad.gather_rows(padded, ids), (n, n, d))


def aggregate_by_first_index(pairs: Var | Tensor) -> Var | Tensor:
    """Sum pair vectors over their second index: [n x n x d] -> [n x d].

    Row i of the result is the refined object sum_j pairs[i, j].
    """
    if isinstance(pairs, Var):
        n, n2, d = pairs.shape
        if n != n2:
            raise ad.ShapeError(f"expected a square pair tensor, got {pairs.shape}")
        return ad.block_row_sum(ad.reshape(pairs, (n * n, d)), n)
    data = pairs.data if isinstance(pairs, Tensor) else np.asarray(pairs)
    return Tensor(data.sum(axis=1))


def rn_forward(config: RelNetConfig, store: ParameterStore, oset: ObjectSet) -> Var:
    """Zero-layer forward: f applied to the sum of all pair relations.

    Rejects configs with stacked layers; those belong to mlrn_forward.
    """
    if config.layers != 0:
        raise ValueError(
            f"rn_forward handles zero-layer configs only, got {config.layers} layers"
        )
    graph, objects, q_row, n = _lift(oset)
    logits, _ = _forward(graph, store, config, objects, q_row, n, 1)
    return ad.reshape(logits, (config.n_classes,))


def mlrn_forward(config: RelNetConfig, store: ParameterStore,
                 oset: ObjectSet) -> tuple[Var, RelationTrace]:
    """Stacked forward for any layer count; zero layers reproduces rn_forward
    bit for bit (same ops in the same order)."""
    graph, objects, q_row, n = _lift(oset)
    logits, trace = _forward(graph, store, config, objects, q_row, n, 1)
    return ad.reshape(logits, (config.n_classes,)), trace


def predict_answer(logits) -> int:
    """Argmax class id; ties resolve to the lowest index."""
    arr = logits.data if hasattr(logits, "data") else np.asarray(logits)
    return int(np.argmax(arr))


# ---------------------------------------------------------------------------
# whole-model bundle (encoder + relation stack)


@dataclass
class ModelConfig:
    """Every architectural dimension of the full text model."""

    vocab_size: int
    n_classes: int
    layers: int = 0
    embed_dim: int = 256
    lstm_units: int = 32
    pos_size: int = 40
    context_size: int = 20
    g_widths: tuple[int, ...] = (256, 256, 256, 256)
    h_widths: tuple[int, ...] = (256, 256, 256)
    f_hidden: tuple[int, ...] = (256, 512)
    include_self_pairs: bool = True
    share_relation_weights: bool = False
    share_question_encoder: bool = False

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=self.vocab_size, embed_dim=self.embed_dim,
            lstm_units=self.lstm_units, pos_size=self.pos_size,
            context_size=self.context_size,
            share_question_encoder=self.share_question_encoder)

    def relnet(self) -> RelNetConfig:
        enc = self.encoder()
        h_count = 1 if self.share_relation_weights and self.layers else self.layers
        return RelNetConfig(
            n_classes=self.n_classes,
            object_width=enc.object_width,
            question_width=self.lstm_units,
            layers=self.layers,
            g_spec=MlpSpec(self.g_widths),
            h_specs=tuple(MlpSpec(self.h_widths) for _ in range(h_count)),
            f_spec=MlpSpec(tuple(self.f_hidden) + (self.n_classes,), final_relu=False),
            include_self_pairs=self.include_self_pairs,
            share_relation_weights=self.share_relation_weights)

    def validate(self) -> None:
        self.encoder().validate()
        self.relnet().validate()


def init_model_params(store: ParameterStore, cfg: ModelConfig,
                      rng: np.random.Generator) -> None:
    """Register all parameters. The regularize flag lands on exactly the
    weight matrices of g, every h_d and f; on nothing else."""
    cfg.validate()
    enc = cfg.encoder()
    rel = cfg.relnet()
    init_encoder_params(store, enc, rng)
    in_width = 2 * rel.object_width + rel.question_width
    init_mlp_params(store, "g", in_width, rel.g_spec, rng, regularize=True)
    width = rel.g_spec.out_width
    seen = set()
    for depth in range(1, rel.layers + 1):
        prefix = rel.relation_prefix(depth)
        if prefix not in seen:
            seen.add(prefix)
            init_mlp_params(store, prefix, 2 * width + rel.question_width,
                            rel.relation_spec(depth), rng, regularize=True)
        width = rel.relation_spec(depth).out_width
    init_mlp_params(store, "f", width, rel.f_spec, rng, regularize=True)


def batch_logits(graph: Graph, store: ParameterStore, cfg: ModelConfig,
                 samples: list, offsets: list[int]) -> tuple[Var, RelationTrace]:
    """End-to-end forward for a batch of encoded samples: token ids through
    the encoders, objects through the relation stack, out as [batch x classes]."""
    objects, questions = encode_batch(graph, store, cfg.encoder(), samples, offsets)
    return _forward(graph, store, cfg.relnet(), objects, questions,
                    cfg.context_size, len(samples))
