"""Downstream mask-prediction model with selectable tuning modes.

Architecture: token embeddings, one single-head self-attention layer with a
residual connection and no positional encodings, and a language-model head
read out at the mask position. Label probabilities come from a softmax
restricted to the verbalizer token logits.

Mode-specific components join the forward pass only under their mode:
soft-prompt rows are prepended only in SOFT_PROMPT mode, low-rank adapter
deltas apply only in LORA mode, and the pooled classification head is used
only in CLS_HEAD mode. That makes the isolation and identity-at-init
properties exact rather than approximate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_segments, save_segments
from .numerics import ParamVector, gelu_grad_vec, gelu_vec, log_softmax, softmax
from .policy import TokenSeq
from .vocab import MASK


class TuningMode(enum.Enum):
    ALL = "all"
    HEAD = "head"
    INPUT = "input"
    CLS_HEAD = "cls_head"
    SOFT_PROMPT = "soft_prompt"
    LORA = "lora"
    NONE = "none"


TRAINABLE_SEGMENTS: dict[TuningMode, tuple[str, ...]] = {
    TuningMode.ALL: ("token_embedding", "wq", "wk", "wv", "wo", "lm_head"),
    TuningMode.HEAD: ("lm_head",),
    TuningMode.INPUT: ("token_embedding",),
    TuningMode.CLS_HEAD: ("cls_w1", "cls_b1", "cls_w2", "cls_b2"),
    TuningMode.SOFT_PROMPT: ("prompt_table",),
    TuningMode.LORA: ("lora_a_q", "lora_b_q", "lora_a_v", "lora_b_v"),
    TuningMode.NONE: (),
}


@dataclass(frozen=True)
class ClassifierConfig:
    vocab_size: int
    num_labels: int
    embed_dim: int = 16
    prompt_len: int = 0
    lora_rank: int = 2
    lora_alpha: float = 32.0
    cls_hidden: int = 16

    def __post_init__(self):
        if self.vocab_size < 2 or self.num_labels < 2:
            raise ValueError("need at least two tokens and two labels")
        if self.lora_rank < 1 or self.lora_rank > self.embed_dim:
            raise ValueError("lora rank must lie in [1, embed_dim]")
        if self.prompt_len < 0 or self.cls_hidden < 1 or self.embed_dim < 1:
            raise ValueError("invalid dimensions")


@dataclass(frozen=True)
class Verbalizer:
    """Injective label -> vocabulary token map; index position is the label."""

    token_ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(t) for t in self.token_ids)
        object.__setattr__(self, "token_ids", ids)
        if len(set(ids)) != len(ids):
            raise ValueError("verbalizer tokens must be distinct")
        if any(t < 0 for t in ids):
            raise ValueError("negative verbalizer token id")

    def __len__(self) -> int:
        return len(self.token_ids)


def classifier_segments(cfg: ClassifierConfig):
    v, d, L = cfg.vocab_size, cfg.embed_dim, cfg.prompt_len
    r, dh, c = cfg.lora_rank, cfg.cls_hidden, cfg.num_labels
    return [
        ("token_embedding", (v, d)),
        ("prompt_table", (L, d)),
        ("wq", (d, d)),
        ("wk", (d, d)),
        ("wv", (d, d)),
        ("wo", (d, d)),
        ("lm_head", (d, v)),
        ("lora_a_q", (r, d)),
        ("lora_b_q", (d, r)),
        ("lora_a_v", (r, d)),
        ("lora_b_v", (d, r)),
        ("cls_w1", (dh, d)),
        ("cls_b1", (dh,)),
        ("cls_w2", (c, dh)),
        ("cls_b2", (c,)),
    ]


class ClassifierParams:
    def __init__(self, cfg: ClassifierConfig, mode: TuningMode, pv: ParamVector | None = None):
        if mode is TuningMode.SOFT_PROMPT and cfg.prompt_len < 1:
            raise ValueError("soft-prompt mode needs prompt_len >= 1")
        self.cfg = cfg
        self.mode = mode
        self.pv = pv if pv is not None else ParamVector(classifier_segments(cfg))
        if self.pv.segments() != classifier_segments(cfg):
            raise ValueError("parameter layout does not match config")

    @classmethod
    def init_random(
        cls, cfg: ClassifierConfig, mode: TuningMode, seed: int, scale: float = 0.2
    ) -> "ClassifierParams":
        rng = np.random.default_rng(seed)
        p = cls(cfg, mode)
        p.pv.values[:] = rng.normal(0.0, scale, p.pv.size)
        # adapter init: A small Gaussian, B zero, so the delta starts as identity
        p.pv.view("lora_a_q")[:] = rng.normal(0.0, 0.02, (cfg.lora_rank, cfg.embed_dim))
        p.pv.view("lora_a_v")[:] = rng.normal(0.0, 0.02, (cfg.lora_rank, cfg.embed_dim))
        p.pv.view("lora_b_q")[:] = 0.0
        p.pv.view("lora_b_v")[:] = 0.0
        return p

    @property
    def flat(self) -> np.ndarray:
        return self.pv.values

    def seg(self, name: str) -> np.ndarray:
        return self.pv.view(name)

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.cfg, self.mode, self.pv.copy())

    def with_mode(self, mode: TuningMode) -> "ClassifierParams":
        return ClassifierParams(self.cfg, mode, self.pv)


def trainable_mask(params: ClassifierParams, mode: TuningMode | None = None) -> np.ndarray:
    mode = params.mode if mode is None else mode
    mask = np.zeros(params.pv.size, dtype=bool)
    for name in TRAINABLE_SEGMENTS[mode]:
        mask[params.pv.segment_slice(name)] = True
    return mask


def lora_apply(w, a, b, alpha: float, rank: int, v) -> np.ndarray:
    """(W + (alpha / rank) * B A) v."""
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != rank or b.shape[1] != rank:
        raise ValueError(f"rank mismatch: expected {rank}, got A {a.shape}, B {b.shape}")
    if a.shape[1] != w.shape[1] or b.shape[0] != w.shape[0]:
        raise ValueError("adapter shapes incompatible with base matrix")
    return (w + (alpha / rank) * (b @ a)) @ np.asarray(v, dtype=np.float64)


class _Cache:
    __slots__ = (
        "ids", "n_prompt", "x", "q", "k", "vv", "attn", "o", "h",
        "wq_eff", "wv_eff", "use_prompts", "use_lora",
    )


def _check_input(params: ClassifierParams, input_seq: TokenSeq) -> None:
    for t in input_seq.ids:
        if t >= params.cfg.vocab_size:
            raise ValueError(
                f"token id {t} out of range for vocabulary of size {params.cfg.vocab_size}"
            )


def _forward(params: ClassifierParams, input_seq: TokenSeq, mode: TuningMode) -> _Cache:
    cfg = params.cfg
    _check_input(params, input_seq)
    ids = list(input_seq.ids)
    cache = _Cache()
    cache.ids = ids
    cache.use_prompts = mode is TuningMode.SOFT_PROMPT and cfg.prompt_len > 0
    cache.use_lora = mode is TuningMode.LORA
    emb_rows = params.seg("token_embedding")[ids]
    if cache.use_prompts:
        x = np.vstack([params.seg("prompt_table"), emb_rows])
        cache.n_prompt = cfg.prompt_len
    else:
        x = emb_rows
        cache.n_prompt = 0
    scale = cfg.lora_alpha / cfg.lora_rank
    if cache.use_lora:
        wq_eff = params.seg("wq") + scale * (params.seg("lora_b_q") @ params.seg("lora_a_q"))
        wv_eff = params.seg("wv") + scale * (params.seg("lora_b_v") @ params.seg("lora_a_v"))
    else:
        wq_eff = params.seg("wq")
        wv_eff = params.seg("wv")
    q = x @ wq_eff.T
    k = x @ params.seg("wk").T
    vv = x @ wv_eff.T
    scores = (q @ k.T) / math.sqrt(cfg.embed_dim)
    shifted = scores - scores.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    attn = expd / expd.sum(axis=1, keepdims=True)
    o = attn @ vv
    h = x + o @ params.seg("wo").T
    cache.x, cache.q, cache.k, cache.vv = x, q, k, vv
    cache.attn, cache.o, cache.h = attn, o, h
    cache.wq_eff, cache.wv_eff = wq_eff, wv_eff
    return cache


def _mask_row(cache: _Cache) -> int:
    positions = [i for i, t in enumerate(cache.ids) if t == MASK]
    if len(positions) != 1:
        raise ValueError(f"input must contain exactly one mask token, found {len(positions)}")
    return cache.n_prompt + positions[0]


def _check_verbalizer(params: ClassifierParams, verbalizer: Verbalizer) -> None:
    if len(verbalizer) != params.cfg.num_labels:
        raise ValueError("verbalizer size does not match label count")
    if any(t >= params.cfg.vocab_size for t in verbalizer.token_ids):
        raise ValueError("verbalizer token id out of vocabulary range")


def label_logprobs(
    params: ClassifierParams,
    input_seq: TokenSeq,
    verbalizer: Verbalizer,
    mode: TuningMode | None = None,
) -> np.ndarray:
    """Per-label log-probabilities from the mask-position head, softmax
    restricted to the verbalizer token logits."""
    mode = params.mode if mode is None else mode
    _check_verbalizer(params, verbalizer)
    cache = _forward(params, input_seq, mode)
    h = cache.h[_mask_row(cache)]
    logits = h @ params.seg("lm_head")
    return log_softmax(logits[list(verbalizer.token_ids)])


def reward(params: ClassifierParams, input_seq: TokenSeq, y: int, verbalizer: Verbalizer) -> float:
    """Terminal reward of a rewrite: log P(y | formatted input). Always <= 0."""
    if not 0 <= y < params.cfg.num_labels:
        raise ValueError(f"label {y} out of range")
    return float(label_logprobs(params, input_seq, verbalizer)[y])


def cls_forward(params: ClassifierParams, input_seq: TokenSeq) -> np.ndarray:
    """Pooled-classifier scores: mean of final hiddens -> affine -> gelu ->
    affine -> log-softmax over labels."""
    cache = _forward(params, input_seq, TuningMode.CLS_HEAD)
    pooled = cache.h.mean(axis=0)
    a1 = params.seg("cls_w1") @ pooled + params.seg("cls_b1")
    logits = params.seg("cls_w2") @ gelu_vec(a1) + params.seg("cls_b2")
    return log_softmax(logits)


def score_labels(
    params: ClassifierParams,
    input_seq: TokenSeq,
    verbalizer: Verbalizer,
    mode: TuningMode | None = None,
) -> np.ndarray:
    """Label log-probabilities under the mode's own scoring path."""
    mode = params.mode if mode is None else mode
    if mode is TuningMode.CLS_HEAD:
        return cls_forward(params, input_seq)
    return label_logprobs(params, input_seq, verbalizer, mode)


def _attention_backward(
    params: ClassifierParams, cache: _Cache, d_h: np.ndarray, g: ParamVector
) -> np.ndarray:
    """Backprop d_h through attention and embeddings into `g`; returns the
    gradient rows for the embedded input tokens (prompt rows excluded)."""
    cfg = params.cfg
    scale = cfg.lora_alpha / cfg.lora_rank
    d_x = d_h.copy()
    d_o = d_h @ params.seg("wo")
    g.view("wo")[:] += d_h.T @ cache.o
    d_attn = d_o @ cache.vv.T
    d_vv = cache.attn.T @ d_o
    inner = (d_attn * cache.attn).sum(axis=1, keepdims=True)
    d_scores = (d_attn - inner) * cache.attn
    rsqrt = 1.0 / math.sqrt(cfg.embed_dim)
    d_q = (d_scores @ cache.k) * rsqrt
    d_k = (d_scores.T @ cache.q) * rsqrt
    d_wq_eff = d_q.T @ cache.x
    d_wv_eff = d_vv.T @ cache.x
    g.view("wk")[:] += d_k.T @ cache.x
    g.view("wq")[:] += d_wq_eff
    g.view("wv")[:] += d_wv_eff
    if cache.use_lora:
        g.view("lora_a_q")[:] += scale * (params.seg("lora_b_q").T @ d_wq_eff)
        g.view("lora_b_q")[:] += scale * (d_wq_eff @ params.seg("lora_a_q").T)
        g.view("lora_a_v")[:] += scale * (params.seg("lora_b_v").T @ d_wv_eff)
        g.view("lora_b_v")[:] += scale * (d_wv_eff @ params.seg("lora_a_v").T)
    d_x += d_q @ cache.wq_eff + d_k @ params.seg("wk") + d_vv @ cache.wv_eff
    if cache.use_prompts:
        g.view("prompt_table")[:] += d_x[: cache.n_prompt]
        rows = d_x[cache.n_prompt :]
    else:
        rows = d_x
    g_emb = g.view("token_embedding")
    for pos, tok in enumerate(cache.ids):
        g_emb[tok] += rows[pos]
    return rows


def _label_path_grad(
    params: ClassifierParams,
    input_seq: TokenSeq,
    y: int,
    verbalizer: Verbalizer,
    mode: TuningMode,
) -> tuple[ParamVector, np.ndarray]:
    cache = _forward(params, input_seq, mode)
    row = _mask_row(cache)
    h = cache.h[row]
    logits = h @ params.seg("lm_head")
    vids = list(verbalizer.token_ids)
    g_label = -softmax(logits[vids])
    g_label[y] += 1.0
    g = ParamVector(classifier_segments(params.cfg))
    g_lm = g.view("lm_head")
    d_h_row = np.zeros(params.cfg.embed_dim)
    for c, vid in enumerate(vids):
        g_lm[:, vid] += g_label[c] * h
        d_h_row += g_label[c] * params.seg("lm_head")[:, vid]
    d_h = np.zeros_like(cache.h)
    d_h[row] = d_h_row
    rows = _attention_backward(params, cache, d_h, g)
    return g, rows


def _cls_path_grad(params: ClassifierParams, input_seq: TokenSeq, y: int) -> ParamVector:
    cfg = params.cfg
    cache = _forward(params, input_seq, TuningMode.CLS_HEAD)
    pooled = cache.h.mean(axis=0)
    a1 = params.seg("cls_w1") @ pooled + params.seg("cls_b1")
    act = gelu_vec(a1)
    logits = params.seg("cls_w2") @ act + params.seg("cls_b2")
    g_logits = -softmax(logits)
    g_logits[y] += 1.0
    g = ParamVector(classifier_segments(cfg))
    g.view("cls_w2")[:] += np.outer(g_logits, act)
    g.view("cls_b2")[:] += g_logits
    d_a1 = (params.seg("cls_w2").T @ g_logits) * gelu_grad_vec(a1)
    g.view("cls_w1")[:] += np.outer(d_a1, pooled)
    g.view("cls_b1")[:] += d_a1
    d_pooled = params.seg("cls_w1").T @ d_a1
    d_h = np.tile(d_pooled / cache.h.shape[0], (cache.h.shape[0], 1))
    _attention_backward(params, cache, d_h, g)
    return g


def classifier_grad(
    params: ClassifierParams,
    input_seq: TokenSeq,
    y: int,
    verbalizer: Verbalizer,
    mode: TuningMode | None = None,
) -> np.ndarray:
    """Gradient of the mode's label log-probability, masked so every segment
    outside the mode's trainable set is exactly zero."""
    mode = params.mode if mode is None else mode
    if not 0 <= y < params.cfg.num_labels:
        raise ValueError(f"label {y} out of range")
    if mode is TuningMode.CLS_HEAD:
        g = _cls_path_grad(params, input_seq, y)
    else:
        _check_verbalizer(params, verbalizer)
        g, _ = _label_path_grad(params, input_seq, y, verbalizer, mode)
    flat = g.values
    flat[~trainable_mask(params, mode)] = 0.0
    return flat


def input_position_grads(
    params: ClassifierParams,
    input_seq: TokenSeq,
    y: int,
    verbalizer: Verbalizer,
) -> np.ndarray:
    """Gradient of log P(y | input) with respect to each embedded input row.

    Row i corresponds to input position i (prompt rows are not included);
    used by the discrete instruction search to score substitutions.
    """
    _check_verbalizer(params, verbalizer)
    if not 0 <= y < params.cfg.num_labels:
        raise ValueError(f"label {y} out of range")
    _, rows = _label_path_grad(params, input_seq, y, verbalizer, TuningMode.NONE)
    return rows


def save_classifier(path, params: ClassifierParams) -> None:
    cfg = params.cfg
    header = {
        "kind": "classifier",
        "mode": params.mode.value,
        "vocab_size": cfg.vocab_size,
        "num_labels": cfg.num_labels,
        "embed_dim": cfg.embed_dim,
        "prompt_len": cfg.prompt_len,
        "lora_rank": cfg.lora_rank,
        "lora_alpha": cfg.lora_alpha,
        "cls_hidden": cfg.cls_hidden,
    }
    save_segments(path, header, params.pv)


def load_classifier(path) -> ClassifierParams:
    header, pv = load_segments(path)
    if header.get("kind") != "classifier":
        raise ValueError(f"expected a classifier checkpoint, got {header.get('kind')!r}")
    cfg = ClassifierConfig(
        vocab_size=header["vocab_size"],
        num_labels=header["num_labels"],
        embed_dim=header["embed_dim"],
        prompt_len=header["prompt_len"],
        lora_rank=header["lora_rank"],
        lora_alpha=header["lora_alpha"],
        cls_hidden=header["cls_hidden"],
    )
    return ClassifierParams(cfg, TuningMode(header["mode"]), pv)
