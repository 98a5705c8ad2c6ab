"""Training objectives: InfoNCE, pairwise sigmoid, and ITM binary CE.

Score matrices are text-anchored: row i holds text i scored against every
image in the batch, each image re-encoded under conditioning prompts.
per_row conditioning re-encodes image j with prompts from text i for entry
(i, j) (b^2 encodings, matching inference); diagonal conditions every image
on its own paired text (b encodings).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit
from .encoders import (
    ImageEncoding,
    ModelBundle,
    TextEncoding,
    encode_image,
    encode_text,
    image_forward,
)
from .errors import ConfigError, DataError
from .numkit import Array, LayerParams
from .prompt_mapper import map_prompts_with_cache, prompts_for_text

TAU = 0.07
SIGMOID_T_SCALE = 10.0
SIGMOID_BIAS = -10.0


@dataclass
class ScoreMatrix:
    scores: Array  # (b, b) cosines / tau
    cosines: Array  # (b, b) raw cosines
    conditioning: str  # per_row | diagonal
    tau: float = TAU


@dataclass
class ItmExample:
    text: TextEncoding
    image_pos: ImageEncoding
    image_neg: ImageEncoding
    logits: tuple
    labels: tuple = (1, 0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def build_score_matrix(model: ModelBundle, records, conditioning: str = "per_row") -> ScoreMatrix:
    """Text-vs-conditioned-image cosine matrix over one batch of records."""
    b = len(records)
    if b < 2:
        raise ConfigError(f"contrastive batch needs >= 2 records, got {b}")
    if conditioning not in ("per_row", "diagonal"):
        raise ConfigError(f"unknown conditioning {conditioning!r}")
    texts = [encode_text(model, rec.tokens) for rec in records]
    prompts = [prompts_for_text(model, te) for te in texts]
    cos = np.zeros((b, b), dtype=np.float64)
    if conditioning == "diagonal":
        images = [
            encode_image(model, rec.patches, prompts[j])
            for j, rec in enumerate(records)
        ]
        for i in range(b):
            for j in range(b):
                cos[i, j] = float(np.dot(texts[i].t_joint, images[j].v_joint))
    else:
        for i in range(b):
            for j in range(b):
                v = encode_image(model, records[j].patches, prompts[i]).v_joint
                cos[i, j] = float(np.dot(texts[i].t_joint, v))
    return ScoreMatrix(scores=cos / TAU, cosines=cos, conditioning=conditioning)


def build_score_matrix_with_caches(
    model: ModelBundle, records, conditioning: str = "per_row"
) -> tuple[ScoreMatrix, list, list, dict]:
    """build_score_matrix plus every cache the backward pass needs.

    image_caches maps (i, j) in per_row mode / j in diagonal mode to
    (projection cache, encoder cache, final-states shape). Summation and
    encode order is (i, j) lexicographic, pinned for determinism.
    """
    b = len(records)
    if b < 2:
        raise ConfigError(f"contrastive batch needs >= 2 records, got {b}")
    if conditioning not in ("per_row", "diagonal"):
        raise ConfigError(f"unknown conditioning {conditioning!r}")
    texts = [encode_text(model, rec.tokens) for rec in records]
    prompt_caches = []
    prompts = []
    for te in texts:
        p, c = map_prompts_with_cache(model.mapper, te, model.mapper_cfg, model.dims.d_v)
        prompts.append(p)
        prompt_caches.append(c)
    cos = np.zeros((b, b), dtype=np.float64)
    image_caches: dict = {}
    if conditioning == "diagonal":
        v_all = []
        for j, rec in enumerate(records):
            states, _, proj_cache, v_joint, cache = image_forward(
                model, rec.patches, prompts[j]
            )
            image_caches[j] = (proj_cache, cache, states.shape)
            v_all.append(v_joint)
        for i in range(b):
            for j in range(b):
                cos[i, j] = float(np.dot(texts[i].t_joint, v_all[j]))
    else:
        for i in range(b):
            for j in range(b):
                states, _, proj_cache, v_joint, cache = image_forward(
                    model, records[j].patches, prompts[i]
                )
                image_caches[(i, j)] = (proj_cache, cache, states.shape)
                cos[i, j] = float(np.dot(texts[i].t_joint, v_joint))
    sm = ScoreMatrix(scores=cos / TAU, cosines=cos, conditioning=conditioning)
    return sm, texts, prompt_caches, image_caches


# ---------------------------------------------------------------------------
# InfoNCE (text -> image, diagonal targets)
# ---------------------------------------------------------------------------


def info_nce(sm: ScoreMatrix) -> float:
    s = sm.scores
    b = s.shape[0]
    shifted = s - s.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + s.max(axis=1)
    return float((lse - np.diagonal(s)).sum() / b)


def info_nce_grad(sm: ScoreMatrix) -> Array:
    """d loss / d scores."""
    p, _ = numkit.softmax_rows(sm.scores)
    b = p.shape[0]
    g = p.copy()
    g[np.arange(b), np.arange(b)] -= 1.0
    return g / b


# ---------------------------------------------------------------------------
# pairwise sigmoid over raw cosines (labels +1 diagonal / -1 elsewhere)
# ---------------------------------------------------------------------------


def _pair_labels(b: int) -> Array:
    z = -np.ones((b, b), dtype=np.float64)
    np.fill_diagonal(z, 1.0)
    return z


def sigmoid_pairwise(
    sm: ScoreMatrix, t_scale: float = SIGMOID_T_SCALE, bias: float = SIGMOID_BIAS
) -> float:
    b = sm.cosines.shape[0]
    z = _pair_labels(b)
    a = z * (t_scale * sm.cosines + bias)
    # -log sigmoid(a), elementwise-stable
    loss = np.logaddexp(0.0, -a)
    return float(loss.sum() / (b * b))


def sigmoid_pairwise_grad(
    sm: ScoreMatrix, t_scale: float = SIGMOID_T_SCALE, bias: float = SIGMOID_BIAS
) -> Array:
    """d loss / d cosines."""
    b = sm.cosines.shape[0]
    z = _pair_labels(b)
    a = z * (t_scale * sm.cosines + bias)
    return -sigmoid(-a) * z * t_scale / (b * b)


# ---------------------------------------------------------------------------
# ITM head: learnable queries cross-attend patch states, MLP scores the pair
# ---------------------------------------------------------------------------


def itm_forward(head: LayerParams, t_cls: Array, patch_states: Array) -> tuple[float, tuple]:
    p = head.tensors
    d_v = p["wq"].shape[0]
    if p["tproj.weight"].shape[1] != t_cls.shape[0]:
        raise ConfigError(
            f"ITM text width {t_cls.shape[0]} != tproj width {p['tproj.weight'].shape[1]}"
        )
    if patch_states.shape[1] != d_v:
        raise ConfigError(
            f"ITM patch width {patch_states.shape[1]} != head width {d_v}"
        )
    scale = 1.0 / math.sqrt(d_v)
    queries = p["queries"]
    qm = queries @ p["wq"].T + p["bq"]
    k = patch_states @ p["wk"].T + p["bk"]
    v = patch_states @ p["wv"].T + p["bv"]
    scores = (qm @ k.T) * scale
    attn, _ = numkit.softmax_rows(scores)
    attended = attn @ v
    out = attended @ p["wo"].T + p["bo"]
    pooled = out.mean(axis=0)
    tfeat = p["tproj.weight"] @ t_cls + p["tproj.bias"]
    zcat = np.concatenate([pooled, tfeat]).reshape(1, -1)
    h = zcat @ p["mlp.l1.weight"].T + p["mlp.l1.bias"]
    act, gcache = numkit.gelu(h)
    logit = float((act @ p["mlp.l2.weight"].T + p["mlp.l2.bias"])[0, 0])
    cache = (qm, k, v, attn, attended, out, pooled, t_cls, zcat, gcache, act,
             patch_states, scale)
    return logit, cache


def itm_backward(
    head: LayerParams, cache: tuple, grad_logit: float
) -> tuple[dict[str, Array], Array]:
    """Returns (head tensor grads, grad on patch_states)."""
    p = head.tensors
    (qm, k, v, attn, attended, out, pooled, t_cls, zcat, gcache, act,
     patch_states, scale) = cache
    d_v = p["wq"].shape[0]
    q_count = qm.shape[0]

    grads: dict[str, Array] = {}
    g = grad_logit
    grads["mlp.l2.weight"] = g * act
    grads["mlp.l2.bias"] = np.array([g], dtype=act.dtype)
    grad_act = g * p["mlp.l2.weight"]
    grad_h = numkit.gelu_backward(gcache, grad_act)
    grads["mlp.l1.weight"] = grad_h.T @ zcat
    grads["mlp.l1.bias"] = grad_h[0]
    grad_z = (grad_h @ p["mlp.l1.weight"])[0]
    grad_pooled = grad_z[:d_v]
    grad_tfeat = grad_z[d_v:]
    grads["tproj.weight"] = np.outer(grad_tfeat, t_cls)
    grads["tproj.bias"] = grad_tfeat

    grad_out = np.tile(grad_pooled / q_count, (q_count, 1))
    grads["wo"] = grad_out.T @ attended
    grads["bo"] = grad_out.sum(axis=0)
    grad_attended = grad_out @ p["wo"]
    grad_attn = grad_attended @ v.T
    grad_v = attn.T @ grad_attended
    grad_scores = numkit.softmax_rows_backward(attn, grad_attn)
    grad_qm = (grad_scores @ k) * scale
    grad_k = (grad_scores.T @ qm) * scale

    grads["queries"] = grad_qm @ p["wq"]
    grads["wq"] = grad_qm.T @ p["queries"]
    grads["bq"] = grad_qm.sum(axis=0)
    grads["wk"] = grad_k.T @ patch_states
    grads["bk"] = grad_k.sum(axis=0)
    grads["wv"] = grad_v.T @ patch_states
    grads["bv"] = grad_v.sum(axis=0)
    grad_patches = grad_k @ p["wk"] + grad_v @ p["wv"]
    return grads, grad_patches


def itm_logit(head: LayerParams, text_enc: TextEncoding, image_enc: ImageEncoding) -> float:
    logit, _ = itm_forward(head, text_enc.t_cls, image_enc.patch_states)
    return logit


def itm_attention(head: LayerParams, patch_states: Array) -> Array:
    """Query->patch cross-attention weights (q, P) for the attention map."""
    p = head.tensors
    scale = 1.0 / math.sqrt(p["wq"].shape[0])
    qm = p["queries"] @ p["wq"].T + p["bq"]
    k = patch_states @ p["wk"].T + p["bk"]
    attn, _ = numkit.softmax_rows((qm @ k.T) * scale)
    return attn


# ---------------------------------------------------------------------------
# binary cross-entropy with logit
# ---------------------------------------------------------------------------


def bce(logit: float, label: int) -> float:
    if label not in (0, 1):
        raise DataError(f"bce label must be 0 or 1, got {label!r}")
    z = float(logit)
    return max(z, 0.0) - z * label + math.log1p(math.exp(-abs(z)))


def bce_grad(logit: float, label: int) -> float:
    if label not in (0, 1):
        raise DataError(f"bce label must be 0 or 1, got {label!r}")
    return float(sigmoid(np.array(logit))) - label


# ---------------------------------------------------------------------------
# batch loss used by learnability selection (and the trainer's B variant)
# ---------------------------------------------------------------------------


def pick_itm_negatives(model: ModelBundle, records) -> list[int]:
    """Per anchor i: the other batch image most stage-1-similar to text i."""
    frozen = [encode_image(model, rec.patches).v_joint for rec in records]
    texts = [encode_text(model, rec.tokens).t_joint for rec in records]
    out = []
    for i in range(len(records)):
        best, best_sim = -1, -np.inf
        for j in range(len(records)):
            if j == i:
                continue
            sim = float(np.dot(texts[i], frozen[j]))
            if sim > best_sim:
                best, best_sim = j, sim
        out.append(best)
    return out


def build_itm_examples(model: ModelBundle, records) -> list:
    """One (text, positive, mined-negative) triple per anchor, with logits."""
    if len(records) < 2:
        raise ConfigError("ITM batch needs >= 2 records for a negative")
    negatives = pick_itm_negatives(model, records)
    examples = []
    for i, rec in enumerate(records):
        text = encode_text(model, rec.tokens)
        prompts = prompts_for_text(model, text)
        pos = encode_image(model, rec.patches, prompts)
        neg = encode_image(model, records[negatives[i]].patches, prompts)
        examples.append(ItmExample(
            text=text,
            image_pos=pos,
            image_neg=neg,
            logits=(
                itm_logit(model.itm_head, text, pos),
                itm_logit(model.itm_head, text, neg),
            ),
        ))
    return examples


def variant_batch_loss(model: ModelBundle, records, conditioning: str = "per_row") -> float:
    """The active variant's loss on one batch (no gradients)."""
    if model.variant == "C":
        return info_nce(build_score_matrix(model, records, conditioning))
    if model.variant == "S":
        return sigmoid_pairwise(build_score_matrix(model, records, conditioning))
    examples = build_itm_examples(model, records)
    total = 0.0
    for ex in examples:
        total += bce(ex.logits[0], ex.labels[0]) + bce(ex.logits[1], ex.labels[1])
    return total / (2 * len(examples))
