import json
import os

import numpy as np
import pytest

from elip.config import DimsConfig, MapperConfig
from elip.curation import Benchmark, BenchmarkQuery, CurationPlan, SynthSpec, gen_synthetic_dataset
from elip.encoders import bundles_equal, init_frozen_model
from elip.errors import ConfigError, DataError, FormatError
from elip.retrieval import EmbeddingStore, RankingResult
from elip.rng import Rng
from elip import storage

from conftest import TINY


# ---------------------------------------------------------------------------
# tensor blobs
# ---------------------------------------------------------------------------


def test_blob_round_trip_f32(tmp_path):
    arr = Rng(71).gaussian_matrix(2, 3).astype(np.float32)
    path = str(tmp_path / "t.bin")
    storage.write_tensor_blob(path, arr)
    back = storage.read_tensor_blob(path)
    assert back.dtype == np.float32
    assert back.shape == (2, 3)
    assert np.array_equal(back, arr)
    assert back.tobytes() == arr.tobytes()


def test_blob_round_trip_f64_and_rank1(tmp_path):
    arr = Rng(72).gaussian_matrix(1, 5)[0]
    path = str(tmp_path / "t.bin")
    storage.write_tensor_blob(path, arr)
    back = storage.read_tensor_blob(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, arr)


def test_blob_rank0_round_trip(tmp_path):
    arr = np.array(2.5, dtype=np.float64)
    path = str(tmp_path / "scalar.bin")
    storage.write_tensor_blob(path, arr)
    back = storage.read_tensor_blob(path)
    assert back.shape == ()
    assert float(back) == 2.5


def test_blob_header_layout():
    arr = np.zeros((2, 3), dtype=np.float32)
    blob = storage.tensor_to_blob(arr)
    # rank-2 header: 4 magic + 4 meta + 2*8 dims = 24 bytes before payload
    assert blob[:4] == b"ELIP"
    assert blob[4] == 1  # version
    assert blob[5] == 1  # f32
    assert blob[6] == 2  # rank
    assert blob[7] == 0  # pad
    assert len(blob) == 24 + arr.size * 4
    assert int.from_bytes(blob[8:16], "little") == 2
    assert int.from_bytes(blob[16:24], "little") == 3


def test_blob_corrupt_magic_offset_zero(tmp_path):
    path = str(tmp_path / "t.bin")
    storage.write_tensor_blob(path, np.zeros((2, 2), dtype=np.float32))
    with open(path, "r+b") as fh:
        fh.write(b"NOPE")
    with pytest.raises(FormatError, match="offset 0"):
        storage.read_tensor_blob(path)


def test_blob_bad_fields_name_offsets():
    good = storage.tensor_to_blob(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(FormatError, match="offset 4"):
        storage.blob_to_tensor(good[:4] + bytes([9]) + good[5:])
    with pytest.raises(FormatError, match="offset 5"):
        storage.blob_to_tensor(good[:5] + bytes([7]) + good[6:])
    with pytest.raises(FormatError, match="offset 6"):
        storage.blob_to_tensor(good[:6] + bytes([3]) + good[7:])
    with pytest.raises(FormatError, match="offset 7"):
        storage.blob_to_tensor(good[:7] + bytes([1]) + good[8:])
    with pytest.raises(FormatError, match="truncated"):
        storage.blob_to_tensor(good[:10])
    with pytest.raises(FormatError, match="offset 24"):
        storage.blob_to_tensor(good[:-1])


def test_blob_rejects_unsupported_arrays(tmp_path):
    with pytest.raises(ConfigError):
        storage.tensor_to_blob(np.zeros((2, 2, 2), dtype=np.float32))
    with pytest.raises(ConfigError):
        storage.tensor_to_blob(np.zeros(3, dtype=np.int32))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_default_dims(tmp_path):
    model = init_frozen_model(7, DimsConfig(), "C")
    ckpt = str(tmp_path / "ckpt")
    storage.save_checkpoint(ckpt, model)
    back = storage.load_checkpoint(ckpt)
    assert bundles_equal(model, back)


def test_checkpoint_round_trip_variant_b(tmp_path):
    model = init_frozen_model(11, TINY, "B", MapperConfig(n=TINY.n, hidden=8))
    ckpt = str(tmp_path / "ckpt")
    storage.save_checkpoint(ckpt, model)
    back = storage.load_checkpoint(ckpt)
    assert bundles_equal(model, back)
    assert back.variant == "B"
    assert back.itm_head is not None


def test_checkpoint_mapper_tensor_names(tmp_path):
    model = init_frozen_model(7, TINY, "C", MapperConfig(n=TINY.n, hidden=8))
    ckpt = str(tmp_path / "ckpt")
    storage.save_checkpoint(ckpt, model)
    with open(os.path.join(ckpt, "index.json")) as fh:
        index = json.load(fh)
    for name in (
        "mapper.l1.weight", "mapper.l1.bias", "mapper.l2.weight",
        "mapper.l2.bias", "mapper.l3.weight", "mapper.l3.bias",
    ):
        assert name in index["tensors"]
        assert index["tensors"][name]["trainable"] is True
        assert os.path.exists(os.path.join(ckpt, index["tensors"][name]["file"]))
    assert index["tensors"]["proj_image.weight"]["trainable"] is False


def test_checkpoint_save_is_byte_stable(tmp_path):
    model = init_frozen_model(7, TINY, "C", MapperConfig(n=TINY.n, hidden=8))
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    storage.save_checkpoint(a, model)
    storage.save_checkpoint(b, model)
    for name in sorted(os.listdir(a)):
        with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
            assert fa.read() == fb.read(), name


def test_checkpoint_missing_index_is_data_error(tmp_path):
    with pytest.raises(DataError, match="index.json"):
        storage.load_checkpoint(str(tmp_path / "nothing"))


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------


def test_manifest_round_trip_synthetic(tmp_path):
    ds, _ = gen_synthetic_dataset(7, SynthSpec(N=12, clusters=3, P=4, d_in=6, m=4))
    manifest = storage.write_dataset(str(tmp_path / "data"), ds)
    back = storage.read_dataset(manifest)
    assert back.N == ds.N
    assert back.vocab == ds.vocab
    for ra, rb in zip(ds.records, back.records):
        assert ra.id == rb.id
        assert np.array_equal(ra.patches, rb.patches)
        assert ra.tokens == rb.tokens
        assert ra.caption == rb.caption
        assert ra.categories == rb.categories
        assert ra.occluded_categories == rb.occluded_categories


def test_manifest_two_valid_lines(tmp_path):
    blob = str(tmp_path / "patches.bin")
    storage.write_tensor_blob(blob, np.arange(8, dtype=np.float32).reshape(4, 2))
    lines = [
        json.dumps({"id": "a", "patches": {"file": "patches.bin", "row": 0, "rows": 2},
                    "tokens": [1], "caption": "a", "categories": [],
                    "occluded_categories": []}),
        json.dumps({"id": "b", "patches": {"file": "patches.bin", "row": 2, "rows": 2},
                    "tokens": [2], "caption": "b", "categories": [],
                    "occluded_categories": []}),
    ]
    manifest = str(tmp_path / "data.jsonl")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    ds = storage.read_dataset(manifest)
    assert ds.N == 2
    assert np.array_equal(ds.records[1].patches, [[4.0, 5.0], [6.0, 7.0]])


def test_manifest_duplicate_id_names_id(tmp_path):
    blob = str(tmp_path / "patches.bin")
    storage.write_tensor_blob(blob, np.zeros((4, 2), dtype=np.float32))
    line = json.dumps({"id": "dup", "patches": {"file": "patches.bin", "row": 0, "rows": 2},
                       "tokens": [1], "caption": "x", "categories": [],
                       "occluded_categories": []})
    manifest = str(tmp_path / "data.jsonl")
    with open(manifest, "w") as fh:
        fh.write(line + "\n" + line + "\n")
    with pytest.raises(DataError, match="dup"):
        storage.read_dataset(manifest)


def test_manifest_malformed_line_number(tmp_path):
    blob = str(tmp_path / "patches.bin")
    storage.write_tensor_blob(blob, np.zeros((2, 2), dtype=np.float32))
    good = json.dumps({"id": "a", "patches": {"file": "patches.bin", "row": 0, "rows": 2},
                       "tokens": [1], "caption": "a", "categories": [],
                       "occluded_categories": []})
    manifest = str(tmp_path / "data.jsonl")
    with open(manifest, "w") as fh:
        fh.write(good + "\n{{{\n")
    with pytest.raises(DataError, match=":2:"):
        storage.read_dataset(manifest)
    with open(manifest, "w") as fh:
        fh.write('{"id": "a"}\n')
    with pytest.raises(DataError, match=":1:"):
        storage.read_dataset(manifest)


# ---------------------------------------------------------------------------
# benchmark / plan / store / rankings
# ---------------------------------------------------------------------------


def test_benchmark_round_trip(tmp_path):
    bench = Benchmark(
        queries=[BenchmarkQuery(text_tokens=[1, 2], positives={"b", "a"})],
        gallery_ids=["a", "b", "c"],
    )
    path = str(tmp_path / "bench.json")
    storage.write_benchmark(path, bench)
    with open(path) as fh:
        doc = json.load(fh)
    assert set(doc) == {"queries"}
    assert set(doc["queries"][0]) == {"text_tokens", "positives"}
    back = storage.read_benchmark(path, ["a", "b", "c"])
    assert back.queries[0].positives == {"a", "b"}
    assert back.queries[0].text_tokens == [1, 2]


def test_benchmark_missing_file_names_path(tmp_path):
    missing = str(tmp_path / "nope.json")
    with pytest.raises(DataError, match="nope.json"):
        storage.read_benchmark(missing, [])


def test_plan_round_trip(tmp_path):
    plan = CurationPlan(batches=[[0, 1], [2, 3]], learnability=[0.5, -0.25], source_seed=9)
    path = str(tmp_path / "plan.json")
    storage.write_plan(path, plan)
    back = storage.read_plan(path)
    assert back.batches == plan.batches
    assert back.learnability == plan.learnability
    assert back.source_seed == 9


def test_store_round_trip_and_stability(tmp_path):
    mat = Rng(73).gaussian_matrix(4, 3).astype(np.float32)
    mat /= np.linalg.norm(mat, axis=1, keepdims=True)
    store = EmbeddingStore(ids=["a", "b", "c", "d"], matrix=mat, provenance_seed=7)
    d1, d2 = str(tmp_path / "s1"), str(tmp_path / "s2")
    storage.write_store(d1, store)
    storage.write_store(d2, store)
    for name in os.listdir(d1):
        with open(os.path.join(d1, name), "rb") as fa, open(os.path.join(d2, name), "rb") as fb:
            assert fa.read() == fb.read()
    back = storage.read_store(d1)
    assert back.ids == store.ids
    assert np.array_equal(back.matrix, store.matrix)
    assert back.provenance_seed == 7


def test_rankings_round_trip(tmp_path):
    rankings = [RankingResult(
        query_id="q0000",
        entries=[("b", 0.5), ("a", 0.25)],
        stage="reranked",
        k_reranked=2,
    )]
    path = str(tmp_path / "rankings.json")
    storage.write_rankings(path, rankings)
    back = storage.read_rankings(path)
    assert back[0].query_id == "q0000"
    assert back[0].entries == [("b", 0.5), ("a", 0.25)]
    assert back[0].stage == "reranked"
    assert back[0].k_reranked == 2


# ---------------------------------------------------------------------------
# CSV schemas
# ---------------------------------------------------------------------------


def test_trace_csv_schema(tmp_path):
    path = str(tmp_path / "trace.csv")
    storage.write_trace_csv(path, [0.5, 0.25])
    lines = open(path).read().splitlines()
    assert lines[0] == "step,loss"
    assert lines[1] == "1,0.5"
    assert lines[2] == "2,0.25"


def test_attn_csv_schema(tmp_path):
    path = str(tmp_path / "attn.csv")
    storage.write_attn_csv(path, np.array([[0.25, 0.75]]))
    lines = open(path).read().splitlines()
    assert lines[0] == "row,col,weight"
    assert lines[1] == "0,0,0.25"
    assert lines[2] == "0,1,0.75"
