import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings
from hypothesis import strategies as st

from elip.config import DimsConfig, FULL_SCALE_K, MapperConfig
from elip.curation import Benchmark, BenchmarkQuery, PairDataset, query_id
from elip.encoders import encode_image, encode_text, init_frozen_model
from elip.errors import ConfigError, DataError
from elip.objectives import itm_logit
from elip.retrieval import (
    EmbeddingStore,
    RankingResult,
    attention_map,
    curve,
    embed_gallery,
    estimate_flops,
    evaluate,
    mean_average_precision,
    prompt_flops_slope,
    recall_at_k,
    rerank,
    stage1_rank,
)
from elip.rng import Rng

from conftest import TINY, make_records, randomize_mapper


def unit(v):
    v = np.asarray(v, dtype=np.float32)
    return v / np.linalg.norm(v)


def store_from(rows, ids=None):
    mat = np.stack([unit(r) for r in rows])
    ids = ids or [f"img{i:03d}" for i in range(len(rows))]
    return EmbeddingStore(ids=ids, matrix=mat)


def text_enc_stub(v):
    from elip.encoders import TextEncoding

    u = unit(v)
    return TextEncoding(dense=np.zeros((1, 2)), t_cls=u, t_joint=u)


def bench_for(positives_by_query, gallery):
    queries = [BenchmarkQuery(text_tokens=[1], positives=set(p)) for p in positives_by_query]
    return Benchmark(queries=queries, gallery_ids=list(gallery))


def ranking_from_ids(ids, qid="q0000", stage="stage1"):
    entries = [(image_id, float(len(ids) - i)) for i, image_id in enumerate(ids)]
    return RankingResult(query_id=qid, entries=entries, stage=stage)


# ---------------------------------------------------------------------------
# gallery + stage 1
# ---------------------------------------------------------------------------


def test_embed_gallery_matches_encode_image(tiny_model):
    ds = PairDataset(records=make_records(4))
    store = embed_gallery(tiny_model, ds)
    assert len(store.ids) == ds.N
    for i, rec in enumerate(ds.records):
        expected = encode_image(tiny_model, rec.patches).v_joint
        assert np.array_equal(store.matrix[i], expected)
    assert np.abs(np.linalg.norm(store.matrix, axis=1) - 1.0).max() < 1e-6


def test_stage1_orthogonal_gallery():
    store = store_from([[1.0, 0.0], [0.0, 1.0]], ids=["img1", "img2"])
    ranking = stage1_rank(store, text_enc_stub([1.0, 0.0]))
    assert [e[0] for e in ranking.entries] == ["img1", "img2"]
    assert abs(ranking.entries[0][1] - 1.0) < 1e-6
    assert abs(ranking.entries[1][1]) < 1e-6


def test_stage1_matches_bruteforce_sort_oracle():
    rng = Rng(61)
    rows = [rng.gaussian_matrix(1, 8)[0] for _ in range(50)]
    store = store_from(rows)
    q = text_enc_stub(rng.gaussian_matrix(1, 8)[0])
    ranking = stage1_rank(store, q)
    sims = {store.ids[i]: float(np.dot(store.matrix[i], q.t_joint)) for i in range(50)}
    expected = sorted(store.ids, key=lambda image_id: (-sims[image_id], image_id))
    assert [e[0] for e in ranking.entries] == expected
    scores = [e[1] for e in ranking.entries]
    assert all(a >= b for a, b in zip(scores, scores[1:]))


def test_stage1_tie_break_by_id():
    store = store_from([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], ids=["c", "a", "b"])
    ranking = stage1_rank(store, text_enc_stub([1.0, 0.0]))
    assert [e[0] for e in ranking.entries] == ["a", "b", "c"]


def test_stage1_empty_store_is_error():
    with pytest.raises(DataError):
        stage1_rank(EmbeddingStore(ids=[], matrix=np.zeros((0, 2))), text_enc_stub([1, 0]))


# ---------------------------------------------------------------------------
# rerank
# ---------------------------------------------------------------------------


def rerank_setup(variant="C", n_override=None):
    dims = TINY if n_override is None else replace(TINY, n=n_override)
    model = init_frozen_model(7, dims, variant, MapperConfig(n=dims.n, hidden=8))
    ds = PairDataset(records=make_records(8))
    store = embed_gallery(model, ds)
    text = encode_text(model, [1, 2, 3])
    ranking = stage1_rank(store, text)
    return model, ds, store, text, ranking


def test_rerank_with_zero_prompts_preserves_stage1_order():
    model, ds, store, text, ranking = rerank_setup("C", n_override=0)
    out = rerank(model, ds, ranking, k=5, text_enc=text)
    assert [e[0] for e in out.entries] == [e[0] for e in ranking.entries]
    for (i1, s1), (i2, s2) in zip(out.entries[:5], ranking.entries[:5]):
        assert abs(s1 - s2) < 1e-6
    assert out.stage == "reranked"
    assert out.k_reranked == 5


def test_rerank_k_one_keeps_order():
    model, ds, store, text, ranking = rerank_setup()
    out = rerank(model, ds, ranking, k=1, text_enc=text)
    assert [e[0] for e in out.entries] == [e[0] for e in ranking.entries]


def test_rerank_k_zero_is_noop():
    model, ds, store, text, ranking = rerank_setup()
    assert rerank(model, ds, ranking, k=0, text_enc=text) is ranking


def test_rerank_k_bounds():
    model, ds, store, text, ranking = rerank_setup()
    with pytest.raises(ConfigError):
        rerank(model, ds, ranking, k=9, text_enc=text)


def test_rerank_tail_preserved_after_block():
    model, ds, store, text, ranking = rerank_setup()
    randomize_mapper(model)
    out = rerank(model, ds, ranking, k=3, text_enc=text)
    assert [e for e in out.entries[3:]] == list(ranking.entries[3:])
    assert {e[0] for e in out.entries[:3]} == {e[0] for e in ranking.entries[:3]}
    block_scores = [e[1] for e in out.entries[:3]]
    assert all(a >= b for a, b in zip(block_scores, block_scores[1:]))


def test_rerank_fresh_mapper_equals_explicit_zero_prompts():
    # zero-initialized mapper injects exactly-zero tokens, so re-ranking is
    # determined purely by zero-token-augmented encodings
    model, ds, store, text, ranking = rerank_setup()
    via_mapper = rerank(model, ds, ranking, k=5, text_enc=text)
    zero_prompts = np.zeros((TINY.n, TINY.d_v), dtype=np.float32)
    rescored = []
    for image_id, _ in ranking.entries[:5]:
        enc = encode_image(model, ds.by_id(image_id).patches, zero_prompts)
        rescored.append((image_id, float(np.dot(text.t_joint, enc.v_joint))))
    rescored.sort(key=lambda e: (-e[1], e[0]))
    assert via_mapper.entries[:5] == rescored


def test_rerank_variant_b_adds_itm_logit():
    model, ds, store, text, ranking = rerank_setup("B")
    out = rerank(model, ds, ranking, k=2, text_enc=text)
    from elip.prompt_mapper import prompts_for_text

    prompts = prompts_for_text(model, text)
    by_id = dict(ranking.entries)
    for image_id, score in out.entries[:2]:
        enc = encode_image(model, ds.by_id(image_id).patches, prompts)
        expected = by_id[image_id] + itm_logit(model.itm_head, text, enc)
        assert abs(score - expected) < 1e-6


def test_rerank_variant_b_sigmoid_flag_bounds_bonus():
    model, ds, store, text, ranking = rerank_setup("B")
    out = rerank(model, ds, ranking, k=3, text_enc=text, itm_sigmoid=True)
    by_id = dict(ranking.entries)
    for image_id, score in out.entries[:3]:
        bonus = score - by_id[image_id]
        assert 0.0 < bonus < 1.0


def test_full_scale_k_table_echoes_configuration():
    assert FULL_SCALE_K["C"]["standard"] == 100
    assert FULL_SCALE_K["C"]["occluded"] == 500
    assert FULL_SCALE_K["C"]["imagenet_r"] == 1000
    assert FULL_SCALE_K["S"]["imagenet_r"] == 200
    assert FULL_SCALE_K["B"]["standard"] == 20
    assert FULL_SCALE_K["B"]["occluded"] == 100


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def test_recall_examples():
    gallery = [f"g{i}" for i in range(15)]
    ranking = ranking_from_ids(gallery)
    bench = bench_for([{"g6"}], gallery)  # positive at rank 7
    assert recall_at_k([ranking], bench, 5) == 0.0
    assert recall_at_k([ranking], bench, 10) == 1.0
    bench2 = bench_for([{"g1", "g11"}], gallery)  # ranks 2 and 12
    assert recall_at_k([ranking], bench2, 10) == 0.5


def test_map_hand_example():
    gallery = [f"g{i}" for i in range(5)]
    ranking = ranking_from_ids(gallery)
    bench = bench_for([{"g0", "g2"}], gallery)  # positives at ranks 1 and 3
    assert abs(mean_average_precision([ranking], bench) - (1.0 + 2.0 / 3.0) / 2.0) < 1e-9
    assert abs(mean_average_precision([ranking], bench) - 0.833333) < 1e-6


def test_map_all_positives_first():
    gallery = [f"g{i}" for i in range(6)]
    ranking = ranking_from_ids(gallery)
    bench = bench_for([{"g0", "g1", "g2"}], gallery)
    assert mean_average_precision([ranking], bench) == 1.0


def oracle_recall(entries, positives, k):
    top = [image_id for image_id, _ in entries[:k]]
    found = sum(1 for p in positives if p in top)
    return found / len(positives)


def oracle_ap(entries, positives):
    precisions = []
    for rank in range(1, len(entries) + 1):
        if entries[rank - 1][0] in positives:
            hits = sum(1 for e in entries[:rank] if e[0] in positives)
            precisions.append(hits / rank)
    return sum(precisions) / len(positives)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(1, 6))
def test_metrics_match_bruteforce_oracles(seed, g, n_pos):
    rng = Rng(seed)
    n_pos = min(n_pos, g)
    gallery = [f"g{i:02d}" for i in range(g)]
    order = rng.sample_without_replacement(g, g)
    entries = [(gallery[j], float(g - idx)) for idx, j in enumerate(order)]
    ranking = RankingResult(query_id=query_id(0), entries=entries, stage="stage1")
    positives = {gallery[j] for j in rng.sample_without_replacement(g, n_pos)}
    bench = bench_for([positives], gallery)
    k = 1 + rng.next_u64() % g
    assert recall_at_k([ranking], bench, k) == oracle_recall(entries, positives, k)
    assert abs(mean_average_precision([ranking], bench) - oracle_ap(entries, positives)) < 1e-12


def test_metric_identities():
    gallery = [f"g{i}" for i in range(12)]
    rng = Rng(62)
    order = rng.sample_without_replacement(12, 12)
    ranking = RankingResult(
        query_id=query_id(0),
        entries=[(gallery[j], float(12 - i)) for i, j in enumerate(order)],
        stage="stage1",
    )
    bench = bench_for([{"g3", "g7", "g11"}], gallery)
    assert recall_at_k([ranking], bench, 12) == 1.0
    value = mean_average_precision([ranking], bench)
    assert 0.0 <= value <= 1.0


def test_evaluate_aggregate_is_mean():
    gallery = [f"g{i}" for i in range(8)]
    rng = Rng(63)
    rankings, positives = [], []
    for q in range(3):
        order = rng.sample_without_replacement(8, 8)
        rankings.append(RankingResult(
            query_id=query_id(q),
            entries=[(gallery[j], float(8 - i)) for i, j in enumerate(order)],
            stage="stage1",
        ))
        positives.append({gallery[order[q]], gallery[order[(q + 3) % 8]]})
    bench = bench_for(positives, gallery)
    report = evaluate(rankings, bench)
    assert report.query_count == 3
    for name, agg in report.aggregate.items():
        per = [row[name] for row in report.per_query.values()]
        assert abs(agg - float(np.mean(per))) < 1e-9


def test_missing_query_is_data_error():
    gallery = ["g0", "g1"]
    bench = bench_for([{"g0"}, {"g1"}], gallery)
    ranking = ranking_from_ids(gallery, qid=query_id(0))
    with pytest.raises(DataError):
        recall_at_k([ranking], bench, 1)


def test_gallery_permutation_invariance(tiny_model):
    ds = PairDataset(records=make_records(6))
    store = embed_gallery(tiny_model, ds)
    text = encode_text(tiny_model, [1, 2, 3])
    bench = bench_for([{ds.records[2].id}], store.ids)
    base = evaluate([stage1_rank(store, text, query_id(0))], bench)
    perm = [3, 1, 4, 0, 5, 2]
    permuted = EmbeddingStore(
        ids=[store.ids[j] for j in perm], matrix=store.matrix[perm]
    )
    swapped = evaluate([stage1_rank(permuted, text, query_id(0))], bench)
    assert base.aggregate == swapped.aggregate


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------


def test_recall_topk_curve_monotone_and_exhaustive():
    gallery = [f"g{i}" for i in range(10)]
    ranking = ranking_from_ids(gallery)
    bench = bench_for([{"g4", "g8"}], gallery)
    data = curve([ranking], bench, "recall_topk", ks=[1, 2, 5, 10])
    ys = [y for _, y in data.points]
    assert all(a <= b for a, b in zip(ys, ys[1:]))
    assert ys[-1] == 1.0


def test_recall_topk_empty_sweep_is_error():
    gallery = ["g0", "g1"]
    bench = bench_for([{"g0"}], gallery)
    with pytest.raises(ConfigError):
        curve([ranking_from_ids(gallery)], bench, "recall_topk", ks=[])


def test_pr_curve_three_item_hand_enumeration():
    gallery = ["a", "b", "c"]
    # ranking: a (pos), b (neg), c (pos)
    ranking = ranking_from_ids(gallery)
    bench = bench_for([{"a", "c"}], gallery)
    data = curve([ranking], bench, "precision_recall")
    by_r = dict(data.points)
    # staircase: cutoff1 -> (recall 1/2, prec 1); cutoff2 -> (1/2, 1/2); cutoff3 -> (1, 2/3)
    assert by_r[0.0] == 1.0
    assert by_r[0.5] == 1.0
    assert abs(by_r[0.55] - 2.0 / 3.0) < 1e-12
    assert abs(by_r[1.0] - 2.0 / 3.0) < 1e-12
    rs = [r for r, _ in data.points]
    assert rs == sorted(rs)


def test_pr_curve_ties_grouped_by_score():
    gallery = ["a", "b", "c", "d"]
    entries = [("a", 2.0), ("b", 1.0), ("c", 1.0), ("d", 0.5)]
    ranking = RankingResult(query_id=query_id(0), entries=entries, stage="stage1")
    bench = bench_for([{"b"}], gallery)
    data = curve([ranking], bench, "precision_recall")
    by_r = dict(data.points)
    # "b" only becomes visible at the threshold that admits both b and c
    assert abs(by_r[1.0] - 1.0 / 3.0) < 1e-12


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------


def test_attention_map_grid_normalized(tiny_model):
    ds = PairDataset(records=make_records(2))
    amap = attention_map(tiny_model, ds.records[0], None, "cls")
    assert amap.weights.shape == (TINY.P,)
    assert np.all(amap.weights >= 0.0)
    assert amap.grid.shape == (2, 2)  # P=4
    assert abs(amap.grid.sum() - 1.0) < 1e-6
    assert 0.0 < amap.patch_mass <= 1.0


def test_attention_map_prompts_change_map(tiny_model):
    model = randomize_mapper(tiny_model)
    ds = PairDataset(records=make_records(2))
    text = encode_text(model, [1, 2, 3])
    bare = attention_map(model, ds.records[0], None, "cls")
    prompted = attention_map(model, ds.records[0], text, "cls")
    assert np.abs(bare.grid - prompted.grid).max() > 1e-9


def test_attention_map_single_patch_grid():
    dims = replace(TINY, P=1)
    model = init_frozen_model(7, dims, "C", MapperConfig(n=dims.n, hidden=8))
    rec = make_records(1, dims)[0]
    amap = attention_map(model, rec, None, "cls")
    assert amap.grid.shape == (1, 1)
    assert abs(amap.grid[0, 0] - 1.0) < 1e-12


def test_attention_map_itm_query_mode():
    model = init_frozen_model(7, TINY, "B", MapperConfig(n=TINY.n, hidden=8))
    ds = PairDataset(records=make_records(2))
    amap = attention_map(model, ds.records[0], None, "itm_query")
    assert abs(amap.grid.sum() - 1.0) < 1e-6


def test_attention_map_itm_query_needs_variant_b(tiny_model):
    ds = PairDataset(records=make_records(1))
    with pytest.raises(ConfigError):
        attention_map(tiny_model, ds.records[0], None, "itm_query")


# ---------------------------------------------------------------------------
# FLOPs estimator
# ---------------------------------------------------------------------------

HAND_DIMS = DimsConfig(
    d_t=6, d_v=8, d_e=8, P=4, m=3, L_t=1, L_v=1, H=1, n=3,
    insert_layer=0, d_in=6, vocab=16,
)


def hand_count(n):
    """Independent term-by-term count for HAND_DIMS under the convention."""
    d, tq, hidden = 8, 5, 32
    tkv = tq + n
    total = 2 * 4 * 6 * d  # patch embed
    total += 5 * tkv * d  # LN before attention
    total += 2 * tq * d * d  # Q
    total += 2 * 2 * tkv * d * d  # K, V
    total += 2 * tq * tkv * d  # QK^T
    total += 5 * 1 * tq * tkv  # softmax (H=1)
    total += 2 * tq * tkv * d  # AV
    total += 2 * tq * d * d  # O
    total += 5 * tq * d  # LN before MLP
    total += 2 * tq * d * 4 * d  # MLP expand
    total += 5 * tq * 4 * d  # GELU
    total += 2 * tq * 4 * d * d  # MLP contract
    total += 5 * tq * d  # final LN
    total += 2 * d * 8  # projection (d_e=8)
    if n > 0:
        total += 2 * 6 * hidden + 5 * hidden  # mapper l1 + GELU
        total += 2 * hidden * hidden + 5 * hidden  # mapper l2 + GELU
        total += 2 * hidden * n * d  # mapper l3
    return total


def test_flops_zero_prompts_equals_baseline():
    dims = replace(HAND_DIMS, n=0)
    assert estimate_flops(dims, True, 32) == estimate_flops(dims, False, 32)
    with_n = estimate_flops(HAND_DIMS, False, 32)
    assert with_n == estimate_flops(replace(HAND_DIMS, n=0), True, 32)


def test_flops_matches_hand_count():
    assert estimate_flops(HAND_DIMS, True, 32) == hand_count(3)
    assert estimate_flops(HAND_DIMS, False, 32) == hand_count(0)


def test_flops_delta_affine_with_predicted_slope():
    base = estimate_flops(replace(HAND_DIMS, n=0), False, 32)
    slope = prompt_flops_slope(HAND_DIMS, 32)
    deltas = {}
    for n in (1, 2, 5, 10):
        deltas[n] = estimate_flops(replace(HAND_DIMS, n=n), True, 32) - base
    # strictly increasing
    values = [deltas[n] for n in (1, 2, 5, 10)]
    assert all(a < b for a, b in zip(values, values[1:]))
    # exactly affine for n >= 1 with the analytic slope
    intercept = deltas[1] - slope
    for n in (1, 2, 5, 10):
        assert deltas[n] == intercept + slope * n


def test_flops_insert_layer_scales_prompted_layers():
    dims2 = replace(HAND_DIMS, L_v=2, insert_layer=1)
    dims2_all = replace(HAND_DIMS, L_v=2, insert_layer=0)
    base = estimate_flops(replace(dims2, n=0), False, 32)
    late = estimate_flops(dims2, True, 32) - base
    early = estimate_flops(dims2_all, True, 32) - base
    assert early > late > 0
