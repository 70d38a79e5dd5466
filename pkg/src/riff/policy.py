"""Conditional autoregressive rewriter with exact log-probs and gradients.

The model is deliberately tiny: the input is encoded as the mean of its token
embeddings, and each output step conditions only on that context plus the
previous token's embedding. That keeps the sequence distribution exactly
enumerable and the gradient fully analytic, which the enumeration and
finite-difference checks depend on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ParamVector, log_softmax, softmax
from .optim import AdamConfig, AdamW
from .vocab import BOS, EOS


@dataclass(frozen=True)
class TokenSeq:
    """Bounded id sequence, terminated by exactly one trailing EOS."""

    ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(t) for t in self.ids)
        object.__setattr__(self, "ids", ids)
        if len(ids) == 0:
            raise ValueError("empty token sequence")
        if any(t < 0 for t in ids):
            raise ValueError("negative token id")
        if ids[-1] != EOS:
            raise ValueError("sequence must end with EOS")
        if sum(1 for t in ids if t == EOS) != 1:
            raise ValueError("exactly one EOS allowed, at the end")

    @classmethod
    def from_content(cls, content) -> "TokenSeq":
        return cls(tuple(content) + (EOS,))

    @property
    def content(self) -> tuple[int, ...]:
        return self.ids[:-1]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    embed_dim: int = 8
    hidden_dim: int = 16
    max_len: int = 6

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocabulary needs at least EOS plus one content token")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")


def policy_segments(cfg: PolicyConfig):
    v, d, h = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim
    return [
        ("token_embedding", (v, d)),
        ("rec_w", (h, 2 * d)),
        ("rec_b", (h,)),
        ("out_head", (h, v)),
    ]


class PolicyParams:
    def __init__(self, cfg: PolicyConfig, pv: ParamVector | None = None):
        self.cfg = cfg
        self.pv = pv if pv is not None else ParamVector(policy_segments(cfg))
        if self.pv.segments() != policy_segments(cfg):
            raise ValueError("parameter layout does not match config")

    @classmethod
    def init_random(cls, cfg: PolicyConfig, seed: int, scale: float = 0.1) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        p = cls(cfg)
        p.pv.values[:] = rng.normal(0.0, scale, p.pv.size)
        return p

    @property
    def flat(self) -> np.ndarray:
        return self.pv.values

    @property
    def token_embedding(self) -> np.ndarray:
        return self.pv.view("token_embedding")

    @property
    def rec_w(self) -> np.ndarray:
        return self.pv.view("rec_w")

    @property
    def rec_b(self) -> np.ndarray:
        return self.pv.view("rec_b")

    @property
    def out_head(self) -> np.ndarray:
        return self.pv.view("out_head")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.cfg, self.pv.copy())


# A snapshot is just a policy whose buffer is frozen read-only.
PolicySnapshot = PolicyParams


def snapshot(params: PolicyParams) -> PolicySnapshot:
    """Immutable value copy; later updates to `params` do not affect it."""
    return PolicyParams(params.cfg, params.pv.copy().freeze())


def _check_ids(seq: TokenSeq, vocab_size: int) -> None:
    for t in seq.ids:
        if t >= vocab_size:
            raise ValueError(f"token id {t} out of range for vocabulary of size {vocab_size}")


def check_output_seq(z: TokenSeq, cfg: PolicyConfig) -> None:
    _check_ids(z, cfg.vocab_size)
    if len(z) > cfg.max_len:
        raise ValueError(f"sequence length {len(z)} exceeds max_len {cfg.max_len}")


def encode_context(params: PolicyParams, x: TokenSeq) -> np.ndarray:
    _check_ids(x, params.cfg.vocab_size)
    return params.token_embedding[list(x.ids)].mean(axis=0)


def step_logits(params: PolicyParams, context: np.ndarray, prev_id: int) -> np.ndarray:
    u = np.concatenate([context, params.token_embedding[prev_id]])
    s = np.tanh(params.rec_w @ u + params.rec_b)
    return s @ params.out_head


def seq_logprob(params: PolicyParams, x: TokenSeq, z: TokenSeq) -> float:
    """Exact log P(z | x): sum of per-step log-softmax terms. Always <= 0."""
    check_output_seq(z, params.cfg)
    ctx = encode_context(params, x)
    total = 0.0
    prev = BOS
    for tok in z.ids:
        logp = log_softmax(step_logits(params, ctx, prev))
        total += float(logp[tok])
        prev = tok
    return total


def seq_logprob_grad(params: PolicyParams, x: TokenSeq, z: TokenSeq) -> np.ndarray:
    """Analytic gradient of seq_logprob over the full flat parameter vector."""
    cfg = params.cfg
    check_output_seq(z, cfg)
    _check_ids(x, cfg.vocab_size)
    emb = params.token_embedding
    ctx = emb[list(x.ids)].mean(axis=0)
    g = ParamVector(policy_segments(cfg))
    g_emb = g.view("token_embedding")
    g_rw = g.view("rec_w")
    g_rb = g.view("rec_b")
    g_out = g.view("out_head")
    g_ctx = np.zeros(cfg.embed_dim)
    prev = BOS
    for tok in z.ids:
        u = np.concatenate([ctx, emb[prev]])
        s = np.tanh(params.rec_w @ u + params.rec_b)
        logits = s @ params.out_head
        glogits = -softmax(logits)
        glogits[tok] += 1.0
        g_out += np.outer(s, glogits)
        ga = (params.out_head @ glogits) * (1.0 - s * s)
        g_rw += np.outer(ga, u)
        g_rb += ga
        gu = params.rec_w.T @ ga
        g_ctx += gu[: cfg.embed_dim]
        g_emb[prev] += gu[cfg.embed_dim :]
        prev = tok
    share = g_ctx / len(x.ids)
    for t in x.ids:
        g_emb[t] += share
    return g.values


def pretrain_mle(
    params: PolicyParams,
    pairs,
    epochs: int,
    lr: float,
    batch_size: int = 8,
    seed: int = 0,
) -> PolicyParams:
    """Maximum-likelihood pretraining on (input, rewrite-target) pairs.

    Returns an updated copy; the argument is left untouched.
    """
    if not pairs:
        raise ValueError("no training pairs")
    out = params.copy()
    opt = AdamW(out.flat.size, AdamConfig(lr=lr))
    rng = np.random.default_rng(seed)
    n = len(pairs)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            chunk = order[start : start + batch_size]
            grad = np.zeros(out.flat.size)
            for idx in chunk:
                x, z = pairs[idx]
                grad += seq_logprob_grad(out, x, z)
            grad /= len(chunk)
            opt.step(out.flat, -grad)
    return out


def corpus_logprob(params: PolicyParams, pairs) -> float:
    """Mean target log-likelihood over a pair corpus."""
    if not pairs:
        raise ValueError("no pairs")
    return float(np.mean([seq_logprob(params, x, z) for x, z in pairs]))


def save_policy(path, params: PolicyParams) -> None:
    from .checkpoint import save_segments

    cfg = params.cfg
    header = {
        "kind": "policy",
        "vocab_size": cfg.vocab_size,
        "embed_dim": cfg.embed_dim,
        "hidden_dim": cfg.hidden_dim,
        "max_len": cfg.max_len,
    }
    save_segments(path, header, params.pv)


def load_policy(path) -> PolicyParams:
    from .checkpoint import load_segments

    header, pv = load_segments(path)
    if header.get("kind") != "policy":
        raise ValueError(f"expected a policy checkpoint, got {header.get('kind')!r}")
    cfg = PolicyConfig(
        vocab_size=header["vocab_size"],
        embed_dim=header["embed_dim"],
        hidden_dim=header["hidden_dim"],
        max_len=header["max_len"],
    )
    return PolicyParams(cfg, pv)
