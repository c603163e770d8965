import numpy as np
import numpy.testing as npt
import pytest

import relnet.autodiff as ad
from relnet.autodiff import Graph, ParameterStore, ShapeError, Tensor
from relnet.layers import MlpSpec, ObjectSet
from relnet.model import (ModelConfig, RelNetConfig, aggregate_by_first_index,
                          batch_logits, init_model_params, mlrn_forward,
                          pair_relations, predict_answer, rn_forward)

from conftest import central_diff_grads, max_rel_err


# ---------------------------------------------------------------------------
# straight-line oracles, written against the stored weights only


def mlp_eval(store, prefix, spec, x):
    """Plain-numpy MLP evaluation, no graph involved."""
    for i in range(len(spec.widths)):
        x = x @ store[f"{prefix}.{i}.w"].value.data + store[f"{prefix}.{i}.b"].value.data
        if i < len(spec.widths) - 1 or spec.final_relu:
            x = np.maximum(x, 0.0)
    return x


def single_layer_oracle(store, config, objects, q):
    """Literal transcription of the pairwise sum-then-f network."""
    n = objects.shape[0]
    acc = None
    for i in range(n):
        for j in range(n):
            r = mlp_eval(store, "g", config.g_spec,
                         np.concatenate([objects[i], objects[j], q]))
            acc = r if acc is None else acc + r
    return mlp_eval(store, "f", config.f_spec, acc)


def double_layer_oracle(store, config, objects, q):
    """Quadruple-loop transcription of the one-stack network: for every
    ordered pair (i, k), aggregate over j and l separately, relate, sum."""
    n = objects.shape[0]
    total = None
    for i in range(n):
        for k in range(n):
            si = None
            for j in range(n):
                r = mlp_eval(store, "g", config.g_spec,
                             np.concatenate([objects[i], objects[j], q]))
                si = r if si is None else si + r
            sk = None
            for l in range(n):
                r = mlp_eval(store, "g", config.g_spec,
                             np.concatenate([objects[k], objects[l], q]))
                sk = r if sk is None else sk + r
            h = mlp_eval(store, "h1", config.h_specs[0],
                         np.concatenate([si, sk, q]))
            total = h if total is None else total + h
    return mlp_eval(store, "f", config.f_spec, total)


def micro_config(n_classes=3, layers=0, g=(5, 4), h=(4, 4), f=(4,),
                 object_width=6, question_width=3, **kw):
    return RelNetConfig(
        n_classes=n_classes, object_width=object_width, question_width=question_width,
        layers=layers, g_spec=MlpSpec(g),
        h_specs=tuple(MlpSpec(h) for _ in range(layers)),
        f_spec=MlpSpec(tuple(f) + (n_classes,), final_relu=False), **kw)


def init_relation_only(store, config, rng):
    from relnet.layers import init_mlp_params
    width = 2 * config.object_width + config.question_width
    init_mlp_params(store, "g", width, config.g_spec, rng, regularize=True)
    width = config.g_spec.out_width
    for d in range(1, config.layers + 1):
        prefix = config.relation_prefix(d)
        if f"{prefix}.0.w" not in store:
            init_mlp_params(store, prefix, 2 * width + config.question_width,
                            config.relation_spec(d), rng, regularize=True)
        width = config.relation_spec(d).out_width
    init_mlp_params(store, "f", width, config.f_spec, rng, regularize=True)


def random_oset(rng, n, config):
    return ObjectSet(objects=Tensor(rng.uniform(-1, 1, (n, config.object_width))),
                     question=Tensor(rng.uniform(-1, 1, config.question_width)))


# ---------------------------------------------------------------------------
# pair relations


def test_pair_relations_counts_all_ordered_pairs(rng):
    config = micro_config()
    store = ParameterStore()
    init_relation_only(store, config, rng)
    out = pair_relations(store, config, random_oset(rng, 3, config))
    assert out.shape == (3, 3, config.g_spec.out_width)  # 9 evaluations, self pairs in


def test_pair_relations_identical_objects(rng):
    config = micro_config()
    store = ParameterStore()
    init_relation_only(store, config, rng)
    o = rng.uniform(-1, 1, config.object_width)
    oset = ObjectSet(objects=Tensor(np.tile(o, (4, 1))),
                     question=Tensor(rng.uniform(-1, 1, config.question_width)))
    out = pair_relations(store, config, oset).data.reshape(16, -1)
    for row in out[1:]:
        npt.assert_array_equal(row, out[0])


def test_pair_relations_matches_direct_evaluation(rng):
    config = micro_config()
    store = ParameterStore()
    init_relation_only(store, config, rng)
    oset = random_oset(rng, 4, config)
    out = pair_relations(store, config, oset)
    objects, q = oset.objects.data, oset.question.data
    for i in range(4):
        for j in range(4):
            direct = mlp_eval(store, "g", config.g_spec,
                              np.concatenate([objects[i], objects[j], q]))
            npt.assert_allclose(out.data[i, j], direct, atol=1e-12)


def test_pair_relations_without_self_pairs(rng):
    config = micro_config(include_self_pairs=False)
    store = ParameterStore()
    init_relation_only(store, config, rng)
    out = pair_relations(store, config, random_oset(rng, 3, config))
    assert out.shape == (3, 3, config.g_spec.out_width)
    for i in range(3):
        npt.assert_array_equal(out.data[i, i], np.zeros(config.g_spec.out_width))


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_single_object(rng):
    pairs = Tensor(rng.uniform(-1, 1, (1, 1, 5)))
    npt.assert_array_equal(aggregate_by_first_index(pairs).data, pairs.data[0])


def test_aggregate_equal_pairs():
    v = np.array([1.0, -2.0, 0.5])
    pairs = Tensor(np.tile(v, (4, 4, 1)))
    out = aggregate_by_first_index(pairs)
    npt.assert_array_equal(out.data, np.tile(4.0 * v, (4, 1)))


def test_aggregate_matches_brute_force_loop(rng):
    pairs = rng.uniform(-1, 1, (4, 4, 6))
    expect = np.zeros((4, 6))
    for i in range(4):
        for j in range(4):
            expect[i] += pairs[i, j]
    out = aggregate_by_first_index(Tensor(pairs))
    npt.assert_allclose(out.data, expect, atol=1e-12)
    # graph route agrees with the plain route
    g = Graph()
    var = aggregate_by_first_index(g.constant(pairs))
    npt.assert_array_equal(var.data, out.data)


# ---------------------------------------------------------------------------
# forward passes


def test_rn_forward_single_object(rng):
    config = micro_config()
    store = ParameterStore()
    init_relation_only(store, config, rng)
    oset = random_oset(rng, 1, config)
    got = rn_forward(config, store, oset)
    o, q = oset.objects.data[0], oset.question.data
    expect = mlp_eval(store, "f", config.f_spec,
                      mlp_eval(store, "g", config.g_spec, np.concatenate([o, o, q])))
    npt.assert_allclose(got.data, expect, atol=1e-12)


def test_rn_forward_rejects_stacked_config(rng):
    config = micro_config(layers=1)
    store = ParameterStore()
    init_relation_only(store, config, rng)
    with pytest.raises(ValueError, match="zero-layer"):
        rn_forward(config, store, random_oset(rng, 3, config))


def test_rn_forward_permutation_invariance(rng):
    config = micro_config()
    store = ParameterStore()
    init_relation_only(store, config, rng)
    oset = random_oset(rng, 5, config)
    base = rn_forward(config, store, oset).data
    perm = rng.permutation(5)
    shuffled = ObjectSet(objects=Tensor(oset.objects.data[perm]), question=oset.question)
    npt.assert_allclose(rn_forward(config, store, shuffled).data, base, atol=1e-6)


def test_rn_forward_matches_straight_line_oracle(rng):
    config = micro_config()
    store = ParameterStore()
    init_relation_only(store, config, rng)
    oset = random_oset(rng, 5, config)
    got = rn_forward(config, store, oset).data
    expect = single_layer_oracle(store, config, oset.objects.data, oset.question.data)
    npt.assert_allclose(got, expect, atol=1e-9)


def test_mlrn_zero_layers_equals_rn_bitwise(rng):
    for seed in range(10):
        r = np.random.default_rng(seed)
        config = micro_config()
        store = ParameterStore()
        init_relation_only(store, config, r)
        oset = random_oset(r, 4, config)
        plain = rn_forward(config, store, oset)
        stacked, trace = mlrn_forward(config, store, oset)
        npt.assert_array_equal(plain.data, stacked.data)
        assert trace.evaluations == [16]


def test_mlrn_one_layer_matches_quadruple_loop_oracle(rng):
    for trial in range(5):
        r = np.random.default_rng(100 + trial)
        config = micro_config(layers=1, g=(4, 4), h=(5, 4), f=(4,))
        store = ParameterStore()
        init_relation_only(store, config, r)
        oset = random_oset(r, 3, config)
        got, _ = mlrn_forward(config, store, oset)
        expect = double_layer_oracle(store, config, oset.objects.data, oset.question.data)
        npt.assert_allclose(got.data, expect, atol=1e-9)


def test_mlrn_permutation_invariance_any_depth(rng):
    for layers in (0, 1, 2):
        config = micro_config(layers=layers)
        store = ParameterStore()
        init_relation_only(store, config, rng)
        oset = random_oset(rng, 6, config)
        base, _ = mlrn_forward(config, store, oset)
        perm = rng.permutation(6)
        shuffled = ObjectSet(objects=Tensor(oset.objects.data[perm]), question=oset.question)
        permuted, _ = mlrn_forward(config, store, shuffled)
        npt.assert_allclose(permuted.data, base.data, atol=1e-6)


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_mlrn_trace_counts(layers, rng):
    config = micro_config(layers=layers)
    store = ParameterStore()
    init_relation_only(store, config, rng)
    n = 4
    _, trace = mlrn_forward(config, store, random_oset(rng, n, config))
    assert trace.evaluations == [n * n] * (layers + 1)
    assert trace.total_evaluations == n * n * (layers + 1)
    assert len(trace.aggregate_norms) == layers + 1
    csv = trace.to_csv()
    assert csv.splitlines()[0] == "layer,evaluations_per_sample,aggregate_norm"
    assert len(csv.splitlines()) == layers + 2


def test_mlrn_shared_relation_weights(rng):
    config = micro_config(layers=2, g=(4,), h=(4,), f=(4,), share_relation_weights=True)
    config = RelNetConfig(
        n_classes=3, object_width=6, question_width=3, layers=2,
        g_spec=MlpSpec((4,)), h_specs=(MlpSpec((4,)),),
        f_spec=MlpSpec((4, 3), final_relu=False), share_relation_weights=True)
    store = ParameterStore()
    init_relation_only(store, config, rng)
    assert "h.0.w" in store and "h2.0.w" not in store
    logits, trace = mlrn_forward(config, store, random_oset(rng, 3, config))
    assert logits.shape == (3,)
    assert trace.evaluations == [9, 9, 9]


def test_config_validation_rejects_bad_specs():
    with pytest.raises(ValueError, match="h specs"):
        micro_config(layers=2, h=(4, 4)).__class__(
            n_classes=3, object_width=6, question_width=3, layers=2,
            g_spec=MlpSpec((4,)), h_specs=(MlpSpec((4,)),),
            f_spec=MlpSpec((4, 3), final_relu=False)).validate()
    with pytest.raises(ValueError, match="linear"):
        RelNetConfig(n_classes=3, object_width=6, question_width=3,
                     f_spec=MlpSpec((4, 3), final_relu=True)).validate()
    with pytest.raises(ValueError, match="classes"):
        RelNetConfig(n_classes=1, object_width=6, question_width=3,
                     f_spec=MlpSpec((4, 1), final_relu=False)).validate()


def test_forward_rejects_mismatched_store(rng):
    config = micro_config()
    store = ParameterStore()
    init_relation_only(store, micro_config(object_width=9), rng)
    with pytest.raises(ShapeError):
        rn_forward(config, store, random_oset(rng, 3, config))


# ---------------------------------------------------------------------------
# prediction


def test_predict_answer_argmax():
    assert predict_answer(np.array([0.0, 3.0, 1.0])) == 1


def test_predict_answer_tie_breaks_low():
    assert predict_answer(np.array([2.0, 2.0, 2.0])) == 0


def test_predict_answer_shift_invariant(rng):
    logits = rng.uniform(-1, 1, 7)
    assert predict_answer(logits) == predict_answer(logits + 123.4)


# ---------------------------------------------------------------------------
# whole-model plumbing


class FakeSample:
    def __init__(self, sentences, question):
        self.sentences = sentences
        self.question = question


def micro_model(layers=1, vocab=11, classes=4):
    return ModelConfig(vocab_size=vocab, n_classes=classes, layers=layers,
                       embed_dim=4, lstm_units=4, pos_size=8, context_size=4,
                       g_widths=(6, 6), h_widths=(6, 6), f_hidden=(6,))


def _micro_samples(rng, count, vocab=11):
    samples = []
    for _ in range(count):
        sentences = [list(rng.integers(1, vocab, size=rng.integers(1, 4)))
                     for _ in range(4)]
        question = list(rng.integers(1, vocab, size=2))
        samples.append(FakeSample(sentences, question))
    return samples


def test_regularized_set_is_exactly_relation_and_output_weights(rng):
    cfg = micro_model(layers=2)
    store = ParameterStore()
    init_model_params(store, cfg, rng)
    expect = {f"{p}.{i}.w" for p in ("g", "h1", "h2") for i in range(2)}
    expect |= {"f.0.w", "f.1.w"}
    assert set(store.regularized_names()) == expect


def test_batch_logits_shapes(rng):
    cfg = micro_model(layers=1)
    store = ParameterStore()
    init_model_params(store, cfg, rng)
    samples = _micro_samples(rng, 3)
    g = Graph()
    logits, trace = batch_logits(g, store, cfg, samples, [0, 1, 2])
    assert logits.shape == (3, 4)
    assert trace.evaluations == [16, 16]


@pytest.mark.parametrize("layers", [0, 1, 2])
def test_end_to_end_gradients_vs_central_differences(layers):
    # the full pipeline: embedding -> LSTMs -> objects -> relation stack,
    # every parameter against central finite differences
    rng = np.random.default_rng(42 + layers)
    cfg = micro_model(layers=layers, vocab=9, classes=3)
    store = ParameterStore()
    init_model_params(store, cfg, rng)
    samples = _micro_samples(rng, 2, vocab=9)
    labels = [0, 2]

    def build():
        g = Graph()
        logits, _ = batch_logits(g, store, cfg, samples, [1, 3])
        return g, ad.softmax_cross_entropy(logits, labels)

    g, loss = build()
    store.zero_grads()
    g.backward(loss)
    fd = central_diff_grads(store, lambda: build()[1].tensor.item())
    for name in store.names():
        assert max_rel_err(store[name].grad, fd[name]) < 1e-4, name
