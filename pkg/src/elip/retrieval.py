"""Two-stage retrieval: exact stage-1 ranking, prompt-conditioned re-ranking,
metrics, curves, attention maps and the FLOPs estimator.

Scoring uses per-row dot products (not one batched GEMV) so that stage-1 and
re-ranked scores of identical encodings are bitwise equal; ordering ties
break by ascending image id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import DimsConfig
from .curation import Benchmark, PairDataset, query_id
from .encoders import ModelBundle, TextEncoding, encode_image, encode_text
from .errors import ConfigError, DataError
from .numkit import Array
from .objectives import sigmoid, itm_attention, itm_logit
from .prompt_mapper import prompts_for_text

PR_RECALL_GRID = [round(0.05 * i, 2) for i in range(21)]
DEFAULT_RECALL_KS = (1, 2, 5, 10, 20, 50, 100)


@dataclass
class EmbeddingStore:
    ids: list
    matrix: Array  # (G, d_e) unit-norm rows
    provenance_seed: int = 0

    def __post_init__(self):
        if len(self.ids) != self.matrix.shape[0]:
            raise DataError(
                f"store has {len(self.ids)} ids but {self.matrix.shape[0]} rows"
            )
        if len(set(self.ids)) != len(self.ids):
            raise DataError("store ids are not unique")
        if len(self.ids):
            norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
            worst = float(np.abs(norms - 1.0).max())
            if worst > 1e-6:
                raise DataError(f"store rows not unit-norm (off by {worst:.2e})")


@dataclass
class RankingResult:
    query_id: str
    entries: list  # (image_id, score) descending
    stage: str  # stage1 | reranked
    k_reranked: int = 0


@dataclass
class MetricReport:
    per_query: dict
    aggregate: dict
    query_count: int
    config_echo: dict = field(default_factory=dict)


@dataclass
class CurveData:
    kind: str  # recall_topk | precision_recall
    points: list  # ordered (x, y)


@dataclass
class AttentionMap:
    weights: Array  # (P,) raw CLS->patch (or query->patch) mass
    grid: Array  # normalized, sqrt(P) x sqrt(P) when P is square
    patch_mass: float


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def embed_gallery(model: ModelBundle, ds: PairDataset) -> EmbeddingStore:
    """Frozen (prompt-free) unit-norm image embedding per record."""
    rows = [encode_image(model, rec.patches).v_joint for rec in ds.records]
    return EmbeddingStore(
        ids=[rec.id for rec in ds.records],
        matrix=np.stack(rows),
        provenance_seed=model.seed,
    )


def stage1_rank(store: EmbeddingStore, text_enc: TextEncoding, qid: str = "q0000") -> RankingResult:
    if not store.ids:
        raise DataError("empty embedding store")
    scored = [
        (store.ids[row], float(np.dot(store.matrix[row], text_enc.t_joint)))
        for row in range(len(store.ids))
    ]
    scored.sort(key=lambda e: (-e[1], e[0]))
    return RankingResult(query_id=qid, entries=scored, stage="stage1")


def rank_queries(model: ModelBundle, store: EmbeddingStore, bench: Benchmark) -> list:
    return [
        stage1_rank(store, encode_text(model, q.text_tokens), query_id(i))
        for i, q in enumerate(bench.queries)
    ]


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


def rerank(
    model: ModelBundle,
    ds: PairDataset,
    ranking: RankingResult,
    k: int,
    text_enc: TextEncoding,
    itm_sigmoid: bool = False,
) -> RankingResult:
    """Re-score the top-k under query prompts; the tail keeps stage-1 order
    and always ranks below the re-scored block.

    C/S: new score = cosine(t_joint, conditioned v_joint). B: new score =
    stage-1 cosine + raw ITM logit (sigmoid-squashed when itm_sigmoid).
    """
    if k == 0:
        return ranking
    if k < 0 or k > len(ranking.entries):
        raise ConfigError(f"k={k} outside [0, {len(ranking.entries)}]")
    prompts = prompts_for_text(model, text_enc)
    rescored = []
    for image_id, old_score in ranking.entries[:k]:
        enc = encode_image(model, ds.by_id(image_id).patches, prompts)
        if model.variant == "B":
            logit = itm_logit(model.itm_head, text_enc, enc)
            bonus = float(sigmoid(np.array(logit))) if itm_sigmoid else logit
            new_score = old_score + bonus
        else:
            new_score = float(np.dot(text_enc.t_joint, enc.v_joint))
        rescored.append((image_id, new_score))
    rescored.sort(key=lambda e: (-e[1], e[0]))
    return RankingResult(
        query_id=ranking.query_id,
        entries=rescored + list(ranking.entries[k:]),
        stage="reranked",
        k_reranked=k,
    )


def rerank_queries(
    model: ModelBundle,
    ds: PairDataset,
    rankings: list,
    bench: Benchmark,
    k: int,
    itm_sigmoid: bool = False,
) -> list:
    by_qid = {r.query_id: r for r in rankings}
    out = []
    for i, q in enumerate(bench.queries):
        qid = query_id(i)
        if qid not in by_qid:
            raise DataError(f"query {qid} missing from rankings")
        text_enc = encode_text(model, q.text_tokens)
        out.append(rerank(model, ds, by_qid[qid], k, text_enc, itm_sigmoid))
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _rankings_by_query(rankings, bench: Benchmark) -> list:
    by_qid = {r.query_id: r for r in rankings}
    paired = []
    for i, q in enumerate(bench.queries):
        qid = query_id(i)
        if qid not in by_qid:
            raise DataError(f"query {qid} missing from rankings")
        paired.append((by_qid[qid], q))
    return paired


def recall_at_k(rankings, bench: Benchmark, k: int) -> float:
    """Mean over queries of |positives in top-k| / |positives|."""
    values = []
    for ranking, q in _rankings_by_query(rankings, bench):
        top = {image_id for image_id, _ in ranking.entries[:k]}
        values.append(len(top & q.positives) / len(q.positives))
    return float(np.mean(values))


def average_precision(ranking: RankingResult, positives: set) -> float:
    hits = 0
    ap_sum = 0.0
    for rank, (image_id, _) in enumerate(ranking.entries, start=1):
        if image_id in positives:
            hits += 1
            ap_sum += hits / rank
    return ap_sum / len(positives)


def mean_average_precision(rankings, bench: Benchmark) -> float:
    values = [
        average_precision(ranking, q.positives)
        for ranking, q in _rankings_by_query(rankings, bench)
    ]
    return float(np.mean(values))


def evaluate(rankings, bench: Benchmark, ks=(1, 5, 10)) -> MetricReport:
    per_query = {}
    for ranking, q in _rankings_by_query(rankings, bench):
        row = {}
        for k in ks:
            top = {image_id for image_id, _ in ranking.entries[:k]}
            row[f"recall@{k}"] = len(top & q.positives) / len(q.positives)
        row["ap"] = average_precision(ranking, q.positives)
        per_query[ranking.query_id] = row
    metrics = [f"recall@{k}" for k in ks] + ["ap"]
    aggregate = {
        name: float(np.mean([row[name] for row in per_query.values()]))
        for name in metrics
    }
    stages = {r.stage for r in rankings}
    return MetricReport(
        per_query=per_query,
        aggregate=aggregate,
        query_count=len(per_query),
        config_echo={"ks": list(ks), "stage": sorted(stages)},
    )


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------


def _pr_staircase(ranking: RankingResult, positives: set) -> list:
    """(recall, precision) after each distinct-score cutoff, ties grouped."""
    points = []
    hits = 0
    seen = 0
    entries = ranking.entries
    for idx, (image_id, score) in enumerate(entries):
        hits += image_id in positives
        seen += 1
        last_of_group = idx + 1 == len(entries) or entries[idx + 1][1] != score
        if last_of_group:
            points.append((hits / len(positives), hits / seen))
    return points


def curve(rankings, bench: Benchmark, kind: str, ks=None) -> CurveData:
    if kind == "recall_topk":
        sweep = list(ks) if ks is not None else list(DEFAULT_RECALL_KS)
        if not sweep:
            raise ConfigError("empty k sweep list")
        points = [(float(k), recall_at_k(rankings, bench, k)) for k in sweep]
        return CurveData(kind=kind, points=points)
    if kind == "precision_recall":
        stairs = [
            _pr_staircase(ranking, q.positives)
            for ranking, q in _rankings_by_query(rankings, bench)
        ]
        points = []
        for r in PR_RECALL_GRID:
            per_query = []
            for stair in stairs:
                feasible = [p for rec, p in stair if rec >= r - 1e-12]
                per_query.append(max(feasible) if feasible else 0.0)
            points.append((r, float(np.mean(per_query))))
        return CurveData(kind=kind, points=points)
    raise ConfigError(f"unknown curve kind {kind!r}")


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------


def attention_map(
    model: ModelBundle,
    record,
    text_enc: TextEncoding | None,
    mode: str = "cls",
) -> AttentionMap:
    """CLS->patch attention (cls mode, last layer, head-averaged) or ITM
    query->patch cross-attention (itm_query mode, query-averaged)."""
    if mode not in ("cls", "itm_query"):
        raise ConfigError(f"unknown attention map mode {mode!r}")
    if mode == "itm_query" and model.variant != "B":
        raise ConfigError(f"itm_query map needs variant B, model is {model.variant!r}")
    prompts = prompts_for_text(model, text_enc) if text_enc is not None else None
    enc = encode_image(model, record.patches, prompts)
    p_count = model.dims.P
    if mode == "cls":
        last = enc.attn[-1]  # (H, T, T)
        weights = last.mean(axis=0)[p_count, :p_count]
    else:
        attn = itm_attention(model.itm_head, enc.patch_states)  # (q, P)
        weights = attn.mean(axis=0)
    mass = float(weights.sum())
    grid_flat = weights / mass
    side = math.isqrt(p_count)
    shape = (side, side) if side * side == p_count else (1, p_count)
    return AttentionMap(
        weights=weights, grid=grid_flat.reshape(shape), patch_mass=mass
    )


# ---------------------------------------------------------------------------
# FLOPs estimator
# ---------------------------------------------------------------------------


def estimate_flops(dims: DimsConfig, with_prompts: bool, mapper_hidden: int = 0) -> int:
    """Forward FLOPs of one image encoding under a pinned counting model.

    Convention: 1 multiply-add = 2 FLOPs; a linear over T tokens costs
    2*T*d_in*d_out (bias free); layer-norm/softmax/GELU cost 5 per element.
    Prompt tokens are counted as key/value providers only (no query path, no
    MLP), which keeps the prompt overhead exactly affine in n: per prompted
    layer the QK^T and AV terms cost 2*T_q*T_kv*d with T_q = P+1 fixed and
    T_kv = P+1+n. The mapper is included when prompts are generated (n > 0).
    """
    hidden = mapper_hidden or 4 * dims.d_v
    n = dims.n if with_prompts else 0
    d = dims.d_v
    tq = dims.P + 1
    total = 2 * dims.P * dims.d_in * d  # patch embedding
    for layer in range(dims.L_v):
        tkv = tq + (n if layer >= dims.insert_layer else 0)
        total += 5 * tkv * d  # LN feeding attention (prompts need K/V states)
        total += 2 * tq * d * d  # Q projection
        total += 2 * 2 * tkv * d * d  # K and V projections
        total += 2 * tq * tkv * d  # QK^T
        total += 5 * dims.H * tq * tkv  # softmax rows
        total += 2 * tq * tkv * d  # AV
        total += 2 * tq * d * d  # output projection
        total += 5 * tq * d  # LN feeding the MLP
        total += 2 * tq * d * 4 * d  # MLP expand
        total += 5 * tq * 4 * d  # GELU
        total += 2 * tq * 4 * d * d  # MLP contract
    total += 5 * tq * d  # final layer norm
    total += 2 * d * dims.d_e  # joint projection of the CLS state
    if with_prompts and n > 0:
        total += 2 * dims.d_t * hidden + 5 * hidden
        total += 2 * hidden * hidden + 5 * hidden
        total += 2 * hidden * n * d
    return total


def prompt_flops_slope(dims: DimsConfig, mapper_hidden: int = 0) -> int:
    """Analytic d(FLOPs)/dn for n >= 1 under the estimator's convention."""
    hidden = mapper_hidden or 4 * dims.d_v
    d = dims.d_v
    tq = dims.P + 1
    prompted_layers = dims.L_v - dims.insert_layer
    per_layer = 5 * d + 4 * d * d + 4 * tq * d + 5 * dims.H * tq
    return prompted_layers * per_layer + 2 * hidden * d
