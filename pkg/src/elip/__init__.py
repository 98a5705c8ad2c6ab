"""Deterministic desk-scale text-guided visual-prompt re-ranking pipeline."""

from .config import DimsConfig, MapperConfig, RunConfig, TrainConfig
from .curation import (
    Benchmark,
    BenchmarkQuery,
    CurationPlan,
    PairDataset,
    PairRecord,
    SynthSpec,
    build_occluded_benchmark,
    gen_synthetic_dataset,
    mine_hard_batches,
    select_by_learnability,
)
from .encoders import (
    ImageEncoding,
    ModelBundle,
    TextEncoding,
    encode_image,
    encode_text,
    gradient_through_frozen,
    init_frozen_model,
)
from .objectives import (
    ScoreMatrix,
    bce,
    build_score_matrix,
    info_nce,
    itm_logit,
    sigmoid_pairwise,
)
from .prompt_mapper import map_prompts, pool_text_dense
from .retrieval import (
    CurveData,
    EmbeddingStore,
    MetricReport,
    RankingResult,
    attention_map,
    curve,
    embed_gallery,
    estimate_flops,
    evaluate,
    mean_average_precision,
    recall_at_k,
    rerank,
    stage1_rank,
)
from .rng import Rng
from .trainer import adam_step, train

__version__ = "0.1.0"
