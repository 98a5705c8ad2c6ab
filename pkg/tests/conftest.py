import numpy as np
import pytest

from elip.config import DimsConfig, MapperConfig
from elip.curation import PairDataset, PairRecord
from elip.encoders import init_frozen_model
from elip.rng import Rng

TINY = DimsConfig(
    d_t=6, d_v=8, d_e=8, P=4, m=3, L_t=2, L_v=2, H=2, n=2,
    insert_layer=0, d_in=5, vocab=16,
)


@pytest.fixture
def tiny_dims():
    return TINY


@pytest.fixture
def tiny_model():
    return init_frozen_model(7, TINY, "C", MapperConfig(n=TINY.n, hidden=8))


@pytest.fixture
def tiny_model_f64():
    return init_frozen_model(7, TINY, "C", MapperConfig(n=TINY.n, hidden=8), dtype=np.float64)


@pytest.fixture
def tiny_model_b_f64():
    return init_frozen_model(7, TINY, "B", MapperConfig(n=TINY.n, hidden=8), dtype=np.float64)


def make_records(count, dims=TINY, seed=99, with_categories=False):
    rng = Rng(seed)
    records = []
    for i in range(count):
        cats = {f"cat{i % 3}"} if with_categories else set()
        occ = cats if (with_categories and i % 2 == 0) else set()
        records.append(PairRecord(
            id=f"rec{i:04d}",
            patches=rng.gaussian_matrix(dims.P, dims.d_in).astype(np.float32),
            tokens=[1 + (i % (dims.vocab - 1))] + [2, 3][: dims.m - 1],
            caption=f"record {i}",
            categories=cats,
            occluded_categories=occ,
        ))
    return records


@pytest.fixture
def tiny_dataset():
    return PairDataset(records=make_records(6))


def randomize_mapper(model, seed=5, scale=0.3):
    """Give the zero-initialized final mapper layer non-zero weights so
    gradients flow through every mapper tensor."""
    rng = Rng(seed)
    w = model.mapper.tensors["l3.weight"]
    model.mapper.tensors["l3.weight"] = rng.gaussian_matrix(*w.shape, scale).astype(w.dtype)
    return model
