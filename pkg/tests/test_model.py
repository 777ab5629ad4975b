import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from builders import tiny_config
from segorder.errors import CapacityError, ConfigError, DataError, TargetError
from segorder.model import (
    ModelConfig,
    PointerAttention,
    SegmentOrderingModel,
    add_segment_positions,
    classifier_logits,
    classify_multiclass,
    classify_multilabel,
    collate,
    encode,
    gather_sep,
    gru_label_head,
    init_params,
    inverse_frequency_weights,
    mlm_forward,
    multiclass_loss,
    multilabel_loss,
    nsp_forward,
    pointer_attention,
    so_loss,
    so_predict,
)
from segorder.numerics import Tensor, finite_difference_check, finite_difference_report
from segorder.packing import UNMASKED, PackingConfig, build_pretrain_samples, pack_document


def rand(shape, seed, scale=1.0, grad=True):
    return Tensor(np.random.default_rng(seed).normal(0, scale, size=shape), requires_grad=grad)


# configuration ---------------------------------------------------------------


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, d=10, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, max_segments=0)
    assert ModelConfig(vocab_size=10, d=2, heads=1).q == 1
    assert ModelConfig(vocab_size=10, d=768, heads=12).q == 192
    assert ModelConfig(vocab_size=10, d=768, heads=12).weight_std == pytest.approx(0.02)


def test_parameter_names_and_shapes(vocab):
    cfg = tiny_config(vocab)
    params = init_params(cfg, seed=0)
    assert params["encoder.layer0.attn.wq"].shape == (16, 16)
    assert params["pointer.wquery"].shape == (cfg.q, 16)
    assert params["pointer.wkey"].shape == (cfg.q, 16)
    assert params["pointer.segpos"].shape == (8, 16)
    assert params["embeddings.token"].shape == (len(vocab), 16)
    assert "mlm.dense.w" in params and "nsp.w" not in params


def test_mlm_only_model_has_no_pointer_head(vocab):
    model = SegmentOrderingModel(tiny_config(vocab, objective="mlm-only"))
    assert not any(k.startswith("pointer.") for k in model.params)
    nsp = SegmentOrderingModel(tiny_config(vocab, objective="mlm+nsp"))
    assert nsp.params["nsp.w"].shape == (2, 16)


def test_initialisation_is_seeded(vocab):
    a, b, c = (init_params(tiny_config(vocab), seed=s) for s in (1, 1, 2))
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(a["embeddings.token"].data, c["embeddings.token"].data)


# encoder ---------------------------------------------------------------------


def test_single_token_input_shape(vocab):
    cfg = tiny_config(vocab)
    params = init_params(cfg)
    batch = collate(pack_document(_doc(1), vocab, PackingConfig())[:1])
    batch.ids, batch.pad_mask = batch.ids[:, :1], batch.pad_mask[:, :1]
    assert encode(batch, params, cfg).shape == (1, 1, 16)


def _doc(n_segments, words=3):
    from segorder.corpus import Document, Segment

    return Document("x", [Segment("paragraph", " ".join(["bab"] * (words + i))) for i in range(n_segments)])


def test_sequence_longer_than_context_is_a_capacity_error(vocab, ordinal_docs):
    cfg = tiny_config(vocab, context=8)
    samples = pack_document(ordinal_docs[0], vocab, PackingConfig(context=64))
    with pytest.raises(CapacityError):
        encode(collate(samples), init_params(cfg), cfg)


def test_batch_permutation_permutes_outputs(vocab, ordinal_docs):
    cfg = tiny_config(vocab)
    params = init_params(cfg)
    samples = [s for d in ordinal_docs[:3] for s in pack_document(d, vocab, PackingConfig(context=64))]
    h = encode(collate(samples), params, cfg).data
    perm = [2, 0, 1] + list(range(3, len(samples)))
    hp = encode(collate([samples[i] for i in perm]), params, cfg).data
    np.testing.assert_allclose(hp, h[perm], atol=1e-12)


def test_padding_leaves_real_positions_unchanged(vocab, ordinal_docs):
    cfg = tiny_config(vocab, dtype="float32")
    params = init_params(cfg)
    samples = pack_document(ordinal_docs[1], vocab, PackingConfig(context=64))
    short = min(samples, key=lambda s: s.length)
    alone = encode(collate([short]), params, cfg).data[0]
    long = max((s for d in ordinal_docs for s in pack_document(d, vocab, PackingConfig(context=64))),
               key=lambda s: s.length)
    padded = encode(collate([short, long]), params, cfg).data[0, : short.length]
    assert long.length > short.length
    assert np.max(np.abs(alone - padded)) < 1e-5


def test_padding_changes_no_loss(vocab, ordinal_docs):
    model = SegmentOrderingModel(tiny_config(vocab, dtype="float32"), seed=1)
    cfg = PackingConfig(context=64)
    samples = build_pretrain_samples(ordinal_docs[:6], vocab, cfg, seed=0)
    longest = max(samples, key=lambda s: s.length)
    for s in samples[:5]:
        alone = model.pretrain_forward(collate([s]))
        with_pad = model.pretrain_forward(collate([s, longest]))
        other = model.pretrain_forward(collate([longest]))
        assert abs(alone.mlm.loss.item() + other.mlm.loss.item() - with_pad.mlm.loss.item()) < 1e-4
        assert abs(alone.seq.loss.item() + other.seq.loss.item() - with_pad.seq.loss.item()) < 1e-4


# [SEP] gathering and segment positions --------------------------------------


def test_gather_sep_rows_equal_direct_indexing():
    h = rand((10, 4), 0)
    np.testing.assert_array_equal(gather_sep(h, [3]).data, h.data[[3]])
    np.testing.assert_array_equal(gather_sep(h, [2, 5, 9]).data, h.data[[2, 5, 9]])


def test_gather_sep_gradient_only_reaches_gathered_rows():
    h = rand((10, 4), 1)
    gather_sep(h, [2, 5, 9]).sum().backward()
    touched = np.flatnonzero(np.abs(h.grad).sum(axis=1))
    assert touched.tolist() == [2, 5, 9]
    np.testing.assert_array_equal(h.grad[[2, 5, 9]], 1.0)


def test_gather_sep_out_of_range_is_index_error():
    with pytest.raises(IndexError):
        gather_sep(rand((4, 2), 2), [1, 4])


def test_segment_positions():
    h, table = rand((3, 4), 3), rand((5, 4), 4)
    np.testing.assert_array_equal(add_segment_positions(h, Tensor(np.zeros((5, 4)))).data, h.data)
    np.testing.assert_array_equal(add_segment_positions(Tensor(np.zeros((3, 4))), table).data, table.data[:3])
    with pytest.raises(CapacityError):
        add_segment_positions(rand((6, 4), 5), table)


def test_segment_position_gradient():
    h, table, wq, wk = rand((4, 8), 6), rand((6, 8), 7), rand((2, 8), 8), rand((2, 8), 9)
    y = [2, 0, 3, 1]
    err = finite_difference_check(lambda ps: so_loss(pointer_attention(add_segment_positions(h, ps[0]), wq, wk), y),
                                  [table])
    assert err < 1e-4


# pointer attention -----------------------------------------------------------


def test_single_segment_attention_is_one():
    att = pointer_attention(rand((1, 8), 10), rand((2, 8), 11), rand((2, 8), 12))
    np.testing.assert_array_equal(att.A.data, [[1.0]])


def test_identical_inputs_give_identical_rows():
    row = np.random.default_rng(13).normal(size=8)
    att = pointer_attention(Tensor(np.stack([row, row, row])), rand((2, 8), 14), rand((2, 8), 15))
    np.testing.assert_allclose(att.A.data[0], att.A.data[1])
    np.testing.assert_allclose(att.A.data[0], att.A.data[2])


def test_attention_matches_scalar_recomputation():
    h, wq, wk = rand((3, 8), 16), rand((2, 8), 17), rand((2, 8), 18)
    att = pointer_attention(h, wq, wk)
    ref = oracles.pointer_matrix(h.data.tolist(), wq.data.tolist(), wk.data.tolist())
    np.testing.assert_allclose(att.A.data, ref, rtol=1e-12)
    assert np.all(np.abs(att.A.data.sum(axis=1) - 1) < 1e-6)
    assert att.Q.shape == (3, 2) and att.Kmat.shape == (3, 2)


def test_padded_segment_columns_get_no_mass():
    h = rand((2, 4, 8), 19)
    valid = np.array([[True, True, True, True], [True, True, False, False]])
    att = pointer_attention(h, rand((2, 8), 20), rand((2, 8), 21), valid)
    assert np.all(att.A.data[1, :, 2:] < 1e-12)
    np.testing.assert_allclose(att.A.data[1, :2].sum(axis=-1), 1.0)


# ordering loss and decoding --------------------------------------------------


def _attention_from_logits(logits):
    from segorder.numerics import softmax_rows

    t = Tensor(np.asarray(logits, dtype=np.float64), requires_grad=True)
    return PointerAttention(softmax_rows(t), None, None, t)


@pytest.mark.parametrize("k", [2, 4, 8])
def test_uniform_attention_loss_is_k_log_k(k):
    att = _attention_from_logits(np.zeros((k, k)))
    y = np.random.default_rng(k).permutation(k)
    assert so_loss(att, y).item() == pytest.approx(k * math.log(k), abs=1e-6)


def test_uniform_four_segment_loss_value():
    assert so_loss(_attention_from_logits(np.zeros((4, 4))), [1, 0, 3, 2]).item() == pytest.approx(5.5452, abs=1e-4)


def test_perfect_attention_loss_is_zero():
    y = [2, 0, 1]
    logits = np.full((3, 3), -1e3)
    logits[np.arange(3), y] = 0.0
    assert so_loss(_attention_from_logits(logits), y).item() < 1e-6


def test_loss_is_a_sum_matching_the_scalar_oracle():
    h, wq, wk = rand((5, 8), 22), rand((2, 8), 23), rand((2, 8), 24)
    y = [3, 1, 4, 0, 2]
    att = pointer_attention(h, wq, wk)
    ref = oracles.ordering_nll(oracles.pointer_matrix(h.data.tolist(), wq.data.tolist(), wk.data.tolist()), y)
    assert so_loss(att, y).item() == pytest.approx(ref, rel=1e-12)


def test_non_permutation_targets_are_rejected():
    att = _attention_from_logits(np.zeros((3, 3)))
    with pytest.raises(TargetError):
        so_loss(att, [0, 0, 1])


def test_ordering_gradients_for_projections_and_positions():
    h = rand((5, 16), 25)
    wq, wk, table = rand((4, 16), 26), rand((4, 16), 27), rand((6, 16), 28)
    y = [4, 2, 0, 1, 3]

    def f(ps):
        return so_loss(pointer_attention(add_segment_positions(h, ps["E"]), ps["wq"], ps["wk"]), y)

    report = finite_difference_report(f, {"wq": wq, "wk": wk, "E": table})
    assert max(report.values()) < 1e-4, report


def test_batched_loss_equals_sum_of_single_losses():
    wq, wk = rand((2, 8), 29), rand((2, 8), 30)
    h1, h2 = rand((4, 8), 31, grad=False), rand((2, 8), 32, grad=False)
    y1, y2 = [1, 3, 0, 2], [1, 0]
    single = so_loss(pointer_attention(h1, wq, wk), y1).item() + so_loss(pointer_attention(h2, wq, wk), y2).item()
    stacked = np.zeros((2, 4, 8))
    stacked[0], stacked[1, :2] = h1.data, h2.data
    valid = np.array([[True] * 4, [True, True, False, False]])
    batched = so_loss(pointer_attention(Tensor(stacked), wq, wk, valid), [y1, y2 + [0, 0]], valid)
    assert batched.item() == pytest.approx(single, rel=1e-12)


def test_prediction_is_row_argmax_and_may_repeat():
    assert so_predict(np.eye(4)).tolist() == [0, 1, 2, 3]
    a = np.array([[0.1, 0.8, 0.1], [0.2, 0.7, 0.1], [0.5, 0.25, 0.25]])
    assert so_predict(a).tolist() == [1, 1, 0]


def _scan_argmax(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


@settings(max_examples=200, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.integers(-400, 400)),
       st.sampled_from(["exp", "cube", "affine"]))
def test_prediction_agrees_with_scan_and_ignores_monotone_transforms(grid, transform):
    logits = grid / 8.0  # a coarse grid keeps the transforms strictly monotone in floating point
    assert so_predict(logits).tolist() == [_scan_argmax(r) for r in logits]
    f = {"exp": lambda x: np.exp(x / 10), "cube": lambda x: x**3, "affine": lambda x: 3 * x - 7}[transform]
    assert so_predict(f(logits)).tolist() == so_predict(logits).tolist()


# MLM and NSP heads -----------------------------------------------------------


def _head_params(vocab, seed=0):
    cfg = tiny_config(vocab, objective="mlm+nsp")
    return cfg, init_params(cfg, seed)


def test_no_masked_positions_gives_zero_loss(vocab):
    cfg, params = _head_params(vocab)
    out = mlm_forward(rand((1, 5, 16), 33), np.full((1, 5), UNMASKED), params, cfg)
    assert out.loss.item() == 0.0 and out.accuracy is None


def test_forced_correct_logits_give_full_accuracy(vocab):
    cfg, params = _head_params(vocab)
    labels = np.array([[UNMASKED, 7, 9, UNMASKED]])
    params["mlm.bias"].data[:] = -1e3
    params["mlm.bias"].data[[7, 9]] = 1e3  # both positions then prefer 7 or 9
    out = mlm_forward(rand((1, 4, 16), 34), labels, params, cfg)
    assert out.count == 2 and out.correct >= 1
    params["mlm.bias"].data[9] = -1e3
    out = mlm_forward(rand((1, 4, 16), 34), np.array([[UNMASKED, 7, 7, UNMASKED]]), params, cfg)
    assert out.accuracy == 1.0


def test_mlm_loss_matches_scalar_cross_entropy(vocab):
    cfg, params = _head_params(vocab, seed=3)
    h = rand((2, 5, 16), 35)
    labels = np.full((2, 5), UNMASKED)
    labels[0, 1], labels[1, 3], labels[1, 4] = 10, 20, 30
    out = mlm_forward(h, labels, params, cfg)
    rows = h.data.reshape(-1, 16)[[1, 8, 9]]
    p = {k: v.data for k, v in params.items()}
    x = np.array([[oracles.gelu_tanh(v) for v in r] for r in rows @ p["mlm.dense.w"] + p["mlm.dense.b"]])
    x = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + cfg.ln_eps)
    x = x * p["mlm.ln.gamma"] + p["mlm.ln.beta"]
    logits = x @ p["embeddings.token"].T + p["mlm.bias"]
    ref = oracles.cross_entropy(logits.tolist(), [10, 20, 30]) / 3
    assert out.loss.item() == pytest.approx(ref, rel=1e-10)


def test_nsp_balanced_guessing_costs_log_two(vocab):
    _, params = _head_params(vocab)
    params["nsp.w"].data[:] = 0.0
    out = nsp_forward(rand((4, 3, 16), 36), [1, 0, 1, 0], params)
    assert out.loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_nsp_forced_correct_logits(vocab):
    _, params = _head_params(vocab)
    params["nsp.w"].data[:] = 0.0
    params["nsp.b"].data[:] = [-50.0, 50.0]
    out = nsp_forward(rand((3, 3, 16), 37), [1, 1, 1], params)
    assert out.loss.item() < 1e-12 and out.accuracy == 1.0


def test_nsp_gradient_and_missing_label(vocab):
    _, params = _head_params(vocab)
    h = rand((3, 4, 16), 38)
    err = finite_difference_check(lambda ps: nsp_forward(h, [1, 0, 1], ps).loss, {"nsp.w": params["nsp.w"],
                                                                              "nsp.b": params["nsp.b"]})
    assert err < 1e-6
    with pytest.raises(DataError):
        nsp_forward(h, [1, None, 0], params)


# classification heads --------------------------------------------------------


def _linear_head(r, d=6, seed=40):
    return {"head.w": rand((r, d), seed), "head.b": rand((r,), seed + 1)}


def test_multiclass_single_class_and_zero_weights():
    h = rand((3, 6), 41)
    np.testing.assert_allclose(classify_multiclass(h, _linear_head(1)).data, 1.0)
    zero = {"head.w": Tensor(np.zeros((4, 6))), "head.b": Tensor(np.zeros(4))}
    np.testing.assert_allclose(classify_multiclass(h, zero).data, 0.25)


def test_multiclass_loss_matches_scalar_oracle():
    h, head = rand((1, 5, 6), 42), _linear_head(3)
    labels = np.array([[2, -1, 0, 1, -1]])
    logits = classifier_logits(h, head)
    loss = multiclass_loss(logits, labels, labels >= 0)
    rows = logits.data[0, [0, 2, 3]]
    assert loss.item() == pytest.approx(oracles.cross_entropy(rows.tolist(), [2, 0, 1]) / 3, rel=1e-12)
    probs = classify_multiclass(h, head).data[0]
    for row, ref in zip(probs, logits.data[0]):
        np.testing.assert_allclose(row, oracles.softmax_row(list(ref)), rtol=1e-12)


def test_multilabel_zero_logits_score_one_half():
    zero = {"head.w": Tensor(np.zeros((4, 6))), "head.b": Tensor(np.zeros(4))}
    np.testing.assert_allclose(classify_multilabel(rand((3, 6), 43), zero).data, 0.5)


def test_multilabel_weights_of_one_equal_plain_bce():
    h, head = rand((1, 3, 6), 44), _linear_head(4)
    logits = classifier_logits(h, head)
    targets = np.zeros((1, 3, 4))
    mask = np.ones((1, 3), dtype=bool)
    assert multilabel_loss(logits, targets, mask, np.ones(4)).item() == pytest.approx(
        multilabel_loss(logits, targets, mask).item(), rel=1e-14)


def test_weighted_bce_matches_scalar_oracle():
    h, head = rand((1, 4, 6), 45), _linear_head(3)
    logits = classifier_logits(h, head)
    targets = (np.random.default_rng(46).random((1, 4, 3)) < 0.4).astype(float)
    weights = inverse_frequency_weights([(0,), (0, 1), (0,), ()], 3)
    np.testing.assert_allclose(weights.mean(), 1.0)
    loss = multilabel_loss(logits, targets, np.ones((1, 4), dtype=bool), weights)
    ref = oracles.weighted_bce(logits.data[0].tolist(), targets[0].tolist(), weights.tolist())
    assert loss.item() == pytest.approx(ref, rel=1e-12)


def test_inverse_frequency_weights_order_rare_above_common():
    w = inverse_frequency_weights([(0,), (0,), (0,), (1,)], 2)
    assert w[1] == pytest.approx(3 * w[0]) and w.mean() == pytest.approx(1.0)


def test_weight_vector_length_is_checked():
    with pytest.raises(ConfigError):
        classify_multilabel(rand((3, 6), 47), _linear_head(4), class_weights=np.ones(3))


def _gru_params(r=3, d=6, e=4, seed=50):
    names = {"head.label_emb": (r, e), "head.start": (e,), "head.w_ih": (3 * d, d + e), "head.b_ih": (3 * d,),
             "head.w_hh": (3 * d, d), "head.b_hh": (3 * d,), "head.out.w": (r, d), "head.out.b": (r,)}
    return {k: rand(s, seed + i, scale=0.5) for i, (k, s) in enumerate(names.items())}


def _gru_reference(h, labels, p, teacher=True):
    """Scalar re-run of the recurrence; returns (predictions, summed cross-entropy)."""
    g = {k: v.data.tolist() for k, v in p.items()}
    state = [0.0] * len(h[0])
    prev = g["head.start"]
    preds, rows = [], []
    for i, x in enumerate(h):
        state = oracles.gru_step(list(x) + list(prev), state, g["head.w_ih"], g["head.b_ih"], g["head.w_hh"],
                                 g["head.b_hh"])
        logits = [sum(w[c] * state[c] for c in range(len(state))) + b for w, b in zip(g["head.out.w"],
                                                                                     g["head.out.b"])]
        rows.append(logits)
        preds.append(int(np.argmax(logits)))
        prev = g["head.label_emb"][labels[i] if teacher else preds[-1]]
    return preds, oracles.cross_entropy(rows, labels) if labels is not None else None


def test_gru_single_segment_is_one_cell_step():
    p = _gru_params()
    h = rand((1, 6), 60)
    out = gru_label_head(h, [2], p, mode="train")
    preds, ref = _gru_reference(h.data, [2], p)
    assert out.predictions.tolist() == preds
    assert out.loss.item() == pytest.approx(ref, rel=1e-12)


def test_gru_teacher_forced_loss_is_the_per_step_sum():
    p = _gru_params()
    h = rand((5, 6), 61)
    labels = [0, 2, 2, 1, 0]
    out = gru_label_head(h, labels, p, mode="train")
    _, ref = _gru_reference(h.data, labels, p)
    assert out.loss.item() == pytest.approx(ref, rel=1e-12)
    mean = gru_label_head(h, labels, p, mode="train", reduction="mean")
    assert mean.loss.item() == pytest.approx(ref / 5, rel=1e-12)


def test_gru_inference_feeds_back_its_own_predictions():
    p = _gru_params()
    h = rand((6, 6), 62)
    first = gru_label_head(h, None, p, mode="infer")
    second = gru_label_head(h, None, p, mode="infer")
    preds, _ = _gru_reference(h.data, [0] * 6, p, teacher=False)
    assert first.predictions.tolist() == second.predictions.tolist() == preds


def test_gru_gradient_and_mode_check():
    p = _gru_params(seed=70)
    h = rand((4, 6), 63)
    labels = [1, 0, 2, 2]
    assert finite_difference_check(lambda ps: gru_label_head(h, labels, ps).loss, p) < 1e-4
    with pytest.raises(ConfigError):
        gru_label_head(h, labels, p, mode="beam")


# whole model -----------------------------------------------------------------


def test_every_parameter_of_a_small_model_passes_the_gradient_oracle(vocab, ordinal_docs):
    cfg = tiny_config(vocab, d=8, layers=1, heads=2)
    model = SegmentOrderingModel(cfg, seed=2)
    samples = build_pretrain_samples(ordinal_docs[:2], vocab, PackingConfig(context=64, mlm_rate=0.3), seed=0)
    batch = collate(samples[:2])
    report = finite_difference_report(lambda ps: model.pretrain_forward(batch).loss, model.params, max_coords=12)
    assert set(report) == set(model.params)
    assert max(report.values()) < 1e-4, {k: v for k, v in report.items() if v >= 1e-4}


def test_task_heads_drop_the_pretraining_heads(vocab):
    model = SegmentOrderingModel(tiny_config(vocab), seed=0)
    task = model.for_task("multiclass-gru", num_classes=4, seed=1)
    assert not any(k.startswith(("pointer.", "mlm.")) for k in task.params)
    assert task.params["head.label_emb"].shape == (4, 32)
    np.testing.assert_array_equal(task.params["embeddings.token"].data, model.params["embeddings.token"].data)
    assert task.params["embeddings.token"] is not model.params["embeddings.token"]
