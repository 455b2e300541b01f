import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harc import model as M
from harc.corpus import ItemDocument, ItemProfile, UserHistory
from harc.errors import UnknownIdError, ValidationError
from harc.numerics.grad import gradient_check
from harc.numerics.params import make_rng
from harc.numerics.tensor import constant

from conftest import full_graph, random_documents, random_inputs, random_sequences, random_store, tiny_config


def relu(x):
    return np.maximum(x, 0)


def softmax_masked(z, m):
    z = np.where(m, z, -np.inf)
    if not m.any():
        return np.zeros_like(z, dtype=float)
    e = np.where(m, np.exp(z - z[m].max()), 0)
    return e / e.sum()


def ref_pool(store, cfg, prefix, x, m):
    if cfg.pooling == "attention":
        hid = relu(x @ store.value(f"{prefix}.attn.W") + store.value(f"{prefix}.attn.b"))
        w = softmax_masked((hid @ store.value(f"{prefix}.attn.h"))[:, 0], m)
        return w @ x
    if cfg.pooling == "mean":
        return x[m].mean(axis=0) if m.any() else np.zeros(x.shape[1])
    return x[m].max(axis=0) if m.any() else np.zeros(x.shape[1])


def ref_entries(store, cfg, prefix, table, ids, rids, m):
    e = store.value(f"{prefix}.{table}")[np.where(m, ids + 1, 0)]
    if cfg.use_rating_info:
        r = store.value(f"{prefix}.rating_emb")[np.where(m, rids, 0)]
        e = relu(np.concatenate([e, r], axis=1) @ store.value(f"{prefix}.fuse.W") + store.value(f"{prefix}.fuse.b"))
    return e


def ref_user(store, cfg, ids, rids, mask):
    m = mask.astype(bool)
    ctx = ref_pool(store, cfg, "u", ref_entries(store, cfg, "u", "item_emb", ids, rids, m), m)
    return ctx @ store.value("u.out.W") + store.value("u.out.b")


def ref_doc(store, cfg, tokens, length):
    n = min(length, len(tokens))
    words = store.value("doc.word_emb")[tokens[:n]]
    feats = []
    for h in cfg.window_sizes:
        padded = np.vstack([words, np.zeros((h - 1, words.shape[1]))])
        wins = np.stack([padded[i : i + h].reshape(-1) for i in range(n)]) if n else np.zeros((0, h * words.shape[1]))
        act = relu(wins @ store.value(f"doc.conv{h}.W") + store.value(f"doc.conv{h}.b"))
        feats.append(act.max(axis=0) if n else np.zeros(cfg.filters_per_size))
    return relu(np.concatenate(feats) @ store.value("doc.fc.W") + store.value("doc.fc.b"))


def ref_item(store, cfg, ids, rids, mask, tokens, length):
    parts = []
    m = mask.astype(bool)
    if cfg.use_user_info_in_item:
        parts.append(ref_pool(store, cfg, "i", ref_entries(store, cfg, "i", "user_emb", ids, rids, m), m))
    if cfg.use_doc_info:
        parts.append(ref_doc(store, cfg, tokens, length))
    return relu(np.concatenate(parts) @ store.value("i.out.W") + store.value("i.out.b"))


def ref_head(store, cfg, u, i):
    x = np.concatenate([u, i])
    last = len(cfg.mlp_layers) - 1
    for k in range(last):
        x = relu(x @ store.value(f"mlp.{k}.W") + store.value(f"mlp.{k}.b"))
    out = float((x @ store.value(f"mlp.{last}.W") + store.value(f"mlp.{last}.b"))[0])
    return 1 / (1 + math.exp(-out)) if cfg.task == "ranking" else out


# -- config ------------------------------------------------------------------


def test_defaults_follow_the_architecture():
    cfg = M.ModelConfig()
    assert (cfg.d_item, cfg.d_user, cfg.d_rating, cfg.d_attn) == (64, 64, 64, 32)
    assert cfg.word_dim == 300 and cfg.window_sizes == (3, 4, 5) and cfg.filters_per_size == 100
    assert cfg.mlp_layers[-1] == 1 and cfg.mlp_input == 2 * cfg.d_latent


@pytest.mark.parametrize("changes", [
    {"mlp_layers": (8, 2)},
    {"use_user_info_in_item": False, "use_doc_info": False},
    {"pooling": "sum"},
    {"task": "both"},
])
def test_invalid_configs_are_rejected(changes):
    with pytest.raises(ValidationError):
        M.ModelConfig(**changes)


def test_config_json_round_trip_and_unknown_keys():
    cfg = tiny_config(pooling="mean")
    assert M.ModelConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValidationError):
        M.ModelConfig.from_json('{"n_users": 3, "colour": 1}')


def test_cnn_feature_width_is_sizes_times_filters():
    store = M.init_store(M.ModelConfig(n_users=2, n_items=2, vocab_rows=5), seed=0)
    assert store.value("doc.fc.W").shape == (300, 64)


def test_pretrained_table_is_copied_with_zero_pad_row():
    cfg = tiny_config()
    table = make_rng(1).normal(size=(cfg.vocab_rows, cfg.word_dim)).astype(np.float32)
    store = M.init_store(cfg, 0, table)
    np.testing.assert_array_equal(store.value("doc.word_emb")[1:], table[1:])
    assert np.all(store.value("doc.word_emb")[0] == 0)
    with pytest.raises(ValidationError):
        M.init_store(cfg, 0, table[:, :2])


def test_init_is_deterministic():
    a, b = M.init_store(tiny_config(), 5), M.init_store(tiny_config(), 5)
    assert all(np.array_equal(a.value(n), b.value(n)) for n in a.names())


def test_disabled_branches_have_no_parameters():
    names = M.init_store(tiny_config(use_rating_info=False, use_doc_info=False, pooling="mean"), 0).names()
    assert not any("rating" in n or "fuse" in n or "attn" in n or n.startswith("doc.") for n in names)


# -- fusion ------------------------------------------------------------------


def test_fusion_identity_slice_returns_entity():
    e = np.array([0.5, 1.0, 2.0])
    w = np.vstack([np.eye(3), np.zeros((2, 3))])
    np.testing.assert_array_equal(M.fuse_entry(e, np.array([9.0, -9.0]), w, np.zeros(3)), e)


def test_fusion_zero_map():
    out = M.fuse_entry(np.ones(3), np.ones(2), np.zeros((5, 3)), np.zeros(3))
    assert np.all(out == 0)


def test_fusion_matches_matmul_oracle():
    rng = make_rng(3)
    e, r, w, b = rng.normal(size=4), rng.normal(size=2), rng.normal(size=(6, 4)), rng.normal(size=4)
    np.testing.assert_allclose(M.fuse_entry(e, r, w, b), relu(np.concatenate([e, r]) @ w + b), rtol=1e-12)


# -- attention pooling -------------------------------------------------------


def test_single_unmasked_entry_gets_all_weight():
    rng = make_rng(0)
    x = rng.normal(size=(3, 2))
    ctx, w = M.attention_pool(x, [1, 0, 0], rng.normal(size=(2, 2)), np.zeros(2), np.ones(2))
    np.testing.assert_allclose(ctx, x[0])
    assert w.tolist() == [1, 0, 0]


def test_equal_scores_give_midpoint():
    x = np.array([[1.0, 3.0], [3.0, 5.0]])
    ctx, w = M.attention_pool(x, [1, 1], np.zeros((2, 2)), np.zeros(2), np.ones(2))
    assert w.tolist() == [0.5, 0.5] and ctx.tolist() == [2.0, 4.0]


def test_attention_hand_example():
    ctx, w = M.attention_pool(np.eye(2), [1, 1], np.eye(2), np.zeros(2), np.array([1.0, 0.0]))
    e = math.e
    np.testing.assert_allclose(w, [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
    np.testing.assert_allclose(ctx, [0.7311, 0.2689], atol=5e-5)


def test_mean_and_max_pooling():
    x = np.array([[1.0, 5.0], [3.0, 2.0], [100.0, 100.0]])
    mean_cfg = tiny_config(pooling="mean")
    s = M.init_store(mean_cfg, 0, dtype=np.float64)
    mean_ctx, _ = M.pool(s, mean_cfg, "u", constant(x[None]), np.array([[1, 1, 0]]))
    assert mean_ctx.data[0].tolist() == [2.0, 3.5]
    max_cfg = tiny_config(pooling="max")
    max_ctx, _ = M.pool(s, max_cfg, "u", constant(x[None]), np.array([[1, 1, 0]]))
    assert max_ctx.data[0].tolist() == [3.0, 5.0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_attention_permutation_equivariance(seed, h):
    rng = make_rng(seed)
    x = rng.normal(size=(h, 3))
    mask = rng.integers(0, 2, size=h)
    w, b, hv = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4)
    perm = rng.permutation(h)
    ctx, wts = M.attention_pool(x, mask, w, b, hv)
    ctx_p, wts_p = M.attention_pool(x[perm], mask[perm], w, b, hv)
    np.testing.assert_allclose(ctx_p, ctx, atol=1e-6)
    np.testing.assert_allclose(wts_p, wts[perm], atol=1e-6)


# -- encoders ----------------------------------------------------------------


def _hist(ids, rids, mask):
    return UserHistory(np.array(ids), np.array(rids), np.array(mask, dtype=np.uint8))


def test_cold_user_latent_is_bias_image():
    cfg = tiny_config()
    store = random_store(cfg, 1)
    lat = M.encode_user(_hist([-1] * 5, [0] * 5, [0] * 5), store, cfg)
    np.testing.assert_allclose(lat.values, store.value("u.out.b"), atol=1e-12)
    assert lat.source == "user"


def test_single_slot_user_is_affine_of_fused_embedding():
    cfg = tiny_config(history_len=1)
    store = random_store(cfg, 2)
    lat = M.encode_user(_hist([4], [3], [1]), store, cfg).values
    fused = M.fuse_entry(store.value("u.item_emb")[5], store.value("u.rating_emb")[3],
                         store.value("u.fuse.W"), store.value("u.fuse.b"))
    np.testing.assert_allclose(lat, fused @ store.value("u.out.W") + store.value("u.out.b"), atol=1e-12)


@pytest.mark.parametrize("changes", [{}, {"use_rating_info": False}, {"pooling": "mean"}, {"pooling": "max"}])
def test_encoders_match_reference_composition(changes):
    cfg = tiny_config(**changes)
    store = random_store(cfg, 7)
    rng = make_rng(8)
    for _ in range(10):
        ids, rids, mask = (a[0] for a in random_sequences(rng, cfg.n_items, 1, cfg.history_len))
        got = M.encode_user(_hist(ids, rids, mask), store, cfg).values
        np.testing.assert_allclose(got, ref_user(store, cfg, ids, rids, mask), atol=1e-10)

        pids, prids, pmask = (a[0] for a in random_sequences(rng, cfg.n_users, 1, cfg.history_len))
        tokens, lengths = random_documents(rng, cfg.vocab_rows, 1, cfg.doc_len)
        doc = ItemDocument(tokens[0], (np.arange(cfg.doc_len) < lengths[0]).astype(np.uint8), int(lengths[0]))
        item = M.encode_item(ItemProfile(pids, prids, pmask, doc), store, cfg).values
        np.testing.assert_allclose(item, ref_item(store, cfg, pids, prids, pmask, tokens[0], lengths[0]), atol=1e-10)

        u = M.LatentVector(got, "user")
        i = M.LatentVector(item, "item")
        assert M.predict(u, i, store, cfg) == pytest.approx(ref_head(store, cfg, got, item), abs=1e-10)


def test_cnn_hand_case():
    cfg = tiny_config(vocab_rows=5, word_dim=2, window_sizes=(2,), filters_per_size=1, d_doc=1)
    store = M.init_store(cfg, 0, dtype=np.float64)
    store["doc.word_emb"].value[2:5] = [[1, 0], [0, 1], [1, 1]]
    store["doc.conv2.W"].value[...] = 1
    store["doc.conv2.b"].value[...] = 0
    store["doc.fc.W"].value[...] = 1
    store["doc.fc.b"].value[...] = 0
    doc = ItemDocument(np.array([2, 3, 4, 0]), np.array([1, 1, 1, 0]), 3)
    assert M.encode_document_cnn(doc, store, cfg).tolist() == [3.0]


def test_zero_cnn_gives_relu_of_fc_bias():
    cfg = tiny_config()
    store = random_store(cfg, 3)
    for h in cfg.window_sizes:
        store[f"doc.conv{h}.W"].value[...] = 0
        store[f"doc.conv{h}.b"].value[...] = 0
    doc = ItemDocument(np.array([3, 4, 5, 0, 0, 0, 0, 0]), np.array([1, 1, 1, 0, 0, 0, 0, 0]), 3)
    np.testing.assert_allclose(M.encode_document_cnn(doc, store, cfg), relu(store.value("doc.fc.b")))


def test_zero_item_branches_give_relu_of_bias():
    cfg = tiny_config()
    store = random_store(cfg, 4)
    for name in ("i.fuse.W", "i.fuse.b", "doc.fc.W", "doc.fc.b", "i.out.W"):
        store[name].value[...] = 0
    (_, prof, docs), _ = random_inputs(0, cfg)
    out = M.item_latents(store, cfg, *prof, *docs).data
    np.testing.assert_allclose(out, np.tile(relu(store.value("i.out.b")), (len(out), 1)))


def test_unknown_ids_in_live_slots_are_rejected():
    cfg = tiny_config()
    store = M.init_store(cfg, 0)
    with pytest.raises(UnknownIdError):
        M.encode_user(_hist([cfg.n_items, -1, -1, -1, -1], [3, 0, 0, 0, 0], [1, 0, 0, 0, 0]), store, cfg)
    with pytest.raises(ValidationError):
        M.encode_user(_hist([0, -1, -1, -1, -1], [6, 0, 0, 0, 0], [1, 0, 0, 0, 0]), store, cfg)


# -- head and losses ---------------------------------------------------------


def test_zero_head_returns_final_bias():
    for task in ("rating", "ranking"):
        cfg = tiny_config(task=task)
        store = M.init_store(cfg, 0, dtype=np.float64)
        for name, p in store.items():
            if name.startswith("mlp."):
                p.value[...] = 0
        store["mlp.2.b"].value[...] = 0.7
        got = M.head(store, cfg, constant(np.ones((2, 5))), constant(np.ones((2, 5)))).data
        want = 0.7 if task == "rating" else 1 / (1 + math.exp(-0.7))
        np.testing.assert_allclose(got, [want, want])


def test_one_layer_head_matches_matmul():
    cfg = tiny_config(mlp_layers=(1,))
    store = random_store(cfg, 9)
    u, i = make_rng(1).normal(size=(2, 5))
    want = np.concatenate([u, i]) @ store.value("mlp.0.W") + store.value("mlp.0.b")
    got = M.head(store, cfg, constant(u[None]), constant(i[None])).data
    np.testing.assert_allclose(got, want, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000))
def test_ranking_output_is_a_probability(seed):
    cfg = tiny_config(task="ranking")
    store = random_store(cfg, seed, scale=2.0)
    (hist, prof, docs), _ = random_inputs(seed, cfg)
    p = M.head(store, cfg, M.user_latents(store, cfg, *hist), M.item_latents(store, cfg, *prof, *docs)).data
    assert np.all((p >= 0) & (p <= 1))


def test_loss_examples():
    assert M.loss_rating([3.0, 5.0], [3.0, 5.0]) == 0.0
    assert M.loss_rating([3.0, 5.0], [4.0, 5.0]) == 0.5
    assert M.loss_ranking([0.5], [1]) == pytest.approx(math.log(2))


def test_clamp_for_reporting():
    assert M.clamp_rating(np.array([0.2, 3.3, 7.0])).tolist() == [1.0, 3.3, 5.0]


# -- properties --------------------------------------------------------------


def _pad_history(ids, rids, mask, extra):
    b = ids.shape[0]
    return (
        np.hstack([ids, np.full((b, extra), -1)]),
        np.hstack([rids, np.zeros((b, extra), dtype=rids.dtype)]),
        np.hstack([mask, np.zeros((b, extra), dtype=mask.dtype)]),
    )


@pytest.mark.parametrize("pooling", ["attention", "mean", "max"])
def test_padding_invariance(pooling):
    cfg = tiny_config(pooling=pooling)
    store = M.init_store(cfg, 3)
    rng = make_rng(4)
    for seed in range(20):
        (hist, prof, docs), _ = random_inputs(seed, cfg)
        extra = int(rng.integers(1, 6))
        u0 = M.user_latents(store, cfg, *hist).data
        u1 = M.user_latents(store, cfg, *_pad_history(*hist, extra)).data
        np.testing.assert_allclose(u1, u0, atol=1e-6)
        tokens, lengths = docs
        longer = np.hstack([tokens, np.zeros((len(tokens), extra), dtype=tokens.dtype)])
        i0 = M.item_latents(store, cfg, *prof, tokens, lengths).data
        i1 = M.item_latents(store, cfg, *_pad_history(*prof, extra), longer, lengths).data
        np.testing.assert_allclose(i1, i0, atol=1e-6)


def test_document_vector_does_not_depend_on_batch_companions():
    cfg = tiny_config(doc_len=30)
    store = M.init_store(cfg, 1)
    short = np.array([[3, 4, 5] + [0] * 27])
    alone = M.doc_vectors(store, cfg, short, np.array([3])).data[0]
    long_doc = np.array([list(range(2, 12)) * 3])
    both = M.doc_vectors(store, cfg, np.vstack([short, long_doc]), np.array([3, 30])).data[0]
    np.testing.assert_allclose(both, alone, atol=1e-6)


def test_disabled_doc_branch_ignores_tokens():
    cfg = tiny_config(use_doc_info=False)
    store = random_store(cfg, 2)
    (hist, prof, docs), _ = random_inputs(1, cfg)
    a = M.item_latents(store, cfg, *prof, *docs).data
    other_tokens = np.full_like(docs[0], 3)
    b = M.item_latents(store, cfg, *prof, other_tokens, np.full_like(docs[1], cfg.doc_len)).data
    assert np.array_equal(a, b)


def test_disabled_rater_branch_ignores_profiles():
    cfg = tiny_config(use_user_info_in_item=False)
    store = random_store(cfg, 2)
    (hist, prof, docs), _ = random_inputs(1, cfg)
    ids, rids, mask = prof
    a = M.item_latents(store, cfg, ids, rids, mask, *docs).data
    b = M.item_latents(store, cfg, (ids + 1) % cfg.n_users, np.where(mask, 5, 0), np.ones_like(mask), *docs).data
    assert np.array_equal(a, b)


def test_rating_relabel_changes_prediction_only_with_rating_info(trained_rating):
    cfg, store, _ = trained_rating
    ids = np.full((1, cfg.history_len), -1)
    ids[0, :5] = np.arange(5)
    mask = (ids >= 0).astype(np.uint8)
    lows, highs = np.where(mask, 1, 0), np.where(mask, 5, 0)
    a = M.user_latents(store, cfg, ids, lows, mask).data
    b = M.user_latents(store, cfg, ids, highs, mask).data
    assert np.abs(a - b).max() > 1e-4

    plain = cfg.replace(use_rating_info=False)
    s2 = M.init_store(plain, 0)
    assert np.array_equal(M.user_latents(s2, plain, ids, lows, mask).data, M.user_latents(s2, plain, ids, highs, mask).data)


@pytest.mark.parametrize("changes", [
    {},
    {"task": "ranking"},
    {"pooling": "mean"},
    {"pooling": "max", "use_rating_info": False},
    {"use_doc_info": False},
    {"use_user_info_in_item": False},
])
def test_full_model_gradients_match_finite_differences(changes):
    cfg = tiny_config(**changes)
    graph = full_graph(cfg)
    for seed in range(3):
        store = random_store(cfg, seed)
        inputs, y = random_inputs(seed, cfg)
        assert gradient_check(graph, store, inputs, y, seed=seed) < 1e-4
