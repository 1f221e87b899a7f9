"""Fixed-budget two-region KV buffer with joint importance-redundancy scoring.

The buffer splits a fixed per-head token capacity into a compressed
clean-chunk region (budget_tokens) and an active denoising region sized for
the chunk window. Clean chunks append uncompressed until the clean region
would overflow; from then on every arrival triggers a compression that
retains the top-scoring tokens per head.

Scoring combines two per-head distributions over the candidate tokens:
importance (attention mass received from recent query tokens, max-pooled for
robustness) and redundancy (mean cosine similarity to the other cached keys,
penalized). Selection keeps the ``budget`` highest-scoring tokens per head,
optionally at frame or chunk granularity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateInput, InvalidConfig, InvalidInput
from .numerics import FLOAT, maxpool1d, softmax, stable_topk

# Blocked accumulation bound for the fast redundancy kernel; keeps peak
# transient allocation at O(block * d + L) instead of O(L^2).
_REDUNDANCY_BLOCK = 512


@dataclass(frozen=True)
class CompressionConfig:
    """Scoring and selection knobs for one compression pass."""

    mix_lambda: float = 0.07          # weight on importance vs redundancy
    pool_kernel: int = 5              # odd max-pool width over token scores
    query_window: int = 50            # trailing query tokens used for importance
    query_granularity: str = "token"  # token | frame
    key_granularity: str = "token"    # token | frame | chunk

    def __post_init__(self):
        if not 0.0 <= self.mix_lambda <= 1.0:
            raise InvalidInput(f"mix_lambda must be in [0, 1], got {self.mix_lambda}")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise InvalidInput(f"pool_kernel must be odd, got {self.pool_kernel}")
        if self.query_window < 1:
            raise InvalidInput("query_window must be >= 1")
        if self.query_granularity not in ("token", "frame"):
            raise InvalidConfig(f"unknown query granularity {self.query_granularity!r}")
        if self.key_granularity not in ("token", "frame", "chunk"):
            raise InvalidConfig(f"unknown key granularity {self.key_granularity!r}")


@dataclass(frozen=True)
class SelectionScores:
    """Per-head score vectors produced while compressing (head-major arrays)."""

    importance: np.ndarray         # (heads, L) rows sum to 1
    pooled_importance: np.ndarray  # (heads, L)
    redundancy: np.ndarray         # (heads, L) rows sum to 1
    combined: np.ndarray           # (heads, L)


def importance(queries: np.ndarray, keys: np.ndarray,
               config: CompressionConfig) -> np.ndarray:
    """Per-head attention mass over historical tokens, rows summing to 1.

    ``queries`` is (L_q, H_q, d) and ``keys`` is (L_k, H_k, d); query heads
    are grouped contiguously onto key heads (H_q must be a multiple of H_k).
    Only the trailing ``query_window`` query rows contribute. For each key
    head the scaled dot-product rows are softmaxed over the key axis and
    averaged over the contributing query rows.
    """
    queries = np.asarray(queries, dtype=FLOAT)
    keys = np.asarray(keys, dtype=FLOAT)
    if queries.ndim != 3 or keys.ndim != 3:
        raise InvalidInput("queries and keys must be rank-3 (tokens, heads, dim)")
    l_q, h_q, d_q = queries.shape
    l_k, h_k, d_k = keys.shape
    if d_q != d_k:
        raise InvalidInput(f"head dim mismatch {d_q} vs {d_k}")
    if l_q < 1:
        raise InvalidInput("need at least one query row")
    if h_q % h_k != 0:
        raise InvalidInput(f"query heads {h_q} not divisible by key heads {h_k}")
    group = h_q // h_k
    window = queries[-min(config.query_window, l_q):]
    out = np.empty((h_k, l_k), dtype=FLOAT)
    for h in range(h_k):
        q_block = window[:, h * group:(h + 1) * group, :]      # (w, group, d)
        logits = np.einsum("qgd,kd->qgk", q_block, keys[:, h, :]) / np.sqrt(d_k)
        out[h] = softmax(logits, axis=-1).mean(axis=(0, 1))
    return out


def pooled_importance(imp: np.ndarray, config: CompressionConfig) -> np.ndarray:
    """Max-pool each head's importance row for robustness to spiky scores."""
    imp = np.asarray(imp, dtype=FLOAT)
    if imp.ndim != 2:
        raise InvalidInput("importance must be (heads, tokens)")
    return np.stack([maxpool1d(row, config.pool_kernel) for row in imp])


def _normalized_rows(keys_h: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ld,ld->l", keys_h, keys_h))
    if np.any(norms == 0.0):
        raise DegenerateInput("zero-norm key row")
    return keys_h / norms[:, None]


def redundancy_naive(keys: np.ndarray) -> np.ndarray:
    """Reference redundancy: materialize the full cosine matrix per head.

    Rows are l2-normalized, the LxL similarity matrix is formed with a zeroed
    diagonal, columns are averaged over the token axis, and the means are
    softmaxed into a per-head distribution.
    """
    keys = np.asarray(keys, dtype=FLOAT)
    if keys.ndim != 3:
        raise InvalidInput("keys must be rank-3 (tokens, heads, dim)")
    l_k = keys.shape[0]
    if l_k < 2:
        raise InvalidInput("redundancy needs at least two tokens")
    out = np.empty((keys.shape[1], l_k), dtype=FLOAT)
    for h in range(keys.shape[1]):
        unit = _normalized_rows(keys[:, h, :])
        sim = unit @ unit.T
        np.fill_diagonal(sim, 0.0)
        out[h] = softmax(sim.sum(axis=0) / l_k)
    return out


def redundancy_fast(keys: np.ndarray) -> np.ndarray:
    """Redundancy without the LxL matrix: mean-key dot products per token.

    The column mean of the zero-diagonal cosine matrix equals the dot product
    of each unit key with the mean of all unit keys, minus the token's own
    self-similarity contribution (exactly 1/L after row normalization). The
    mean unit key is accumulated blockwise so peak transient allocation stays
    O(block * d + L); results match redundancy_naive within 1e-9.
    """
    keys = np.asarray(keys, dtype=FLOAT)
    if keys.ndim != 3:
        raise InvalidInput("keys must be rank-3 (tokens, heads, dim)")
    l_k, h_k, _ = keys.shape
    if l_k < 2:
        raise InvalidInput("redundancy needs at least two tokens")
    out = np.empty((h_k, l_k), dtype=FLOAT)
    for h in range(h_k):
        keys_h = keys[:, h, :]
        norms = np.sqrt(np.einsum("ld,ld->l", keys_h, keys_h))
        if np.any(norms == 0.0):
            raise DegenerateInput("zero-norm key row")
        mean_unit = np.zeros(keys_h.shape[1], dtype=FLOAT)
        for start in range(0, l_k, _REDUNDANCY_BLOCK):
            block = keys_h[start:start + _REDUNDANCY_BLOCK]
            mean_unit += (block / norms[start:start + _REDUNDANCY_BLOCK, None]).sum(axis=0)
        mean_unit /= l_k
        # einsum iterates strided views without a contiguous L x d copy
        col_mean = np.einsum("ld,d->l", keys_h, mean_unit) / norms - 1.0 / l_k
        out[h] = softmax(col_mean)
    return out


def combined_score(pooled_imp: np.ndarray, redundancy: np.ndarray,
                   mix_lambda: float) -> np.ndarray:
    """lambda * pooled importance - (1 - lambda) * redundancy, per head."""
    if not 0.0 <= mix_lambda <= 1.0:
        raise InvalidInput(f"lambda must be in [0, 1], got {mix_lambda}")
    pooled_imp = np.asarray(pooled_imp, dtype=FLOAT)
    redundancy = np.asarray(redundancy, dtype=FLOAT)
    if pooled_imp.shape != redundancy.shape:
        raise InvalidInput("score shapes differ")
    return mix_lambda * pooled_imp - (1.0 - mix_lambda) * redundancy


def granularity_aggregate(scores: np.ndarray, group_size: int) -> np.ndarray:
    """Mean-aggregate token scores into contiguous groups of ``group_size``."""
    scores = np.asarray(scores, dtype=FLOAT)
    if group_size < 1:
        raise InvalidConfig(f"group size must be >= 1, got {group_size}")
    if scores.shape[-1] % group_size != 0:
        raise InvalidConfig(
            f"{scores.shape[-1]} tokens not divisible by group size {group_size}")
    grouped = scores.reshape(*scores.shape[:-1], -1, group_size)
    return grouped.mean(axis=-1)


def select_tokens(score_row: np.ndarray, budget_tokens: int, key_granularity: str,
                  frame_size: int, chunk_size: int) -> np.ndarray:
    """Positions retained by one head's scores under the token budget.

    Token granularity picks the top-budget tokens directly. Frame and chunk
    granularity mean-aggregate scores into groups, pick whole groups (budget
    interpreted as floor(budget / group size) groups), and retain every
    member token of the chosen groups. Returned positions are ascending.
    """
    if key_granularity == "token":
        return stable_topk(score_row, min(budget_tokens, score_row.size))
    group = frame_size if key_granularity == "frame" else chunk_size
    coarse = granularity_aggregate(score_row, group)
    n_groups = min(budget_tokens // group, coarse.size)
    if n_groups < 1:
        raise InvalidConfig(
            f"budget {budget_tokens} below one {key_granularity} of {group} tokens")
    picked = stable_topk(coarse, n_groups)
    members = picked[:, None] * group + np.arange(group)[None, :]
    return members.reshape(-1)


@dataclass
class HeadReport:
    retained_ids: list[int]
    evicted_count: int
    score_min: Optional[float]   # None when the pass was a no-op
    score_max: Optional[float]
    score_mean: Optional[float]


@dataclass
class CompressionReport:
    """JSON-serializable record of one compression pass."""

    global_step: int
    arriving_chunk: int
    candidate_tokens: int
    no_op: bool
    heads: dict[int, HeadReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "global_step": self.global_step,
            "arriving_chunk": self.arriving_chunk,
            "candidate_tokens": self.candidate_tokens,
            "no_op": self.no_op,
            "heads": {
                str(h): {
                    "retained_ids": rep.retained_ids,
                    "evicted_count": rep.evicted_count,
                    "score_min": rep.score_min,
                    "score_max": rep.score_max,
                    "score_mean": rep.score_mean,
                }
                for h, rep in self.heads.items()
            },
        }


class KVBuffer:
    """Per-head key/value store partitioned into clean and active regions.

    The clean region holds (possibly compressed) tokens of finished chunks
    and is ragged per head after the first compression. The active region
    only tracks token occupancy of chunks still denoising; their content is
    never scored. ``budget_tokens=None`` disables compression entirely.
    """

    def __init__(self, key_heads: int, head_dim: int, tokens_per_chunk: int,
                 budget_tokens: Optional[int], active_capacity: int,
                 frame_tokens: Optional[int] = None):
        if key_heads < 1 or head_dim < 1 or tokens_per_chunk < 1:
            raise InvalidConfig("buffer dimensions must be positive")
        if budget_tokens is not None and budget_tokens < 1:
            raise InvalidConfig("budget_tokens must be positive or None")
        self.key_heads = key_heads
        self.head_dim = head_dim
        self.tokens_per_chunk = tokens_per_chunk
        self.budget_tokens = budget_tokens
        self.active_capacity = active_capacity
        self.frame_tokens = frame_tokens or tokens_per_chunk
        empty = np.empty((0, head_dim), dtype=FLOAT)
        self._keys = [empty.copy() for _ in range(key_heads)]
        self._values = [empty.copy() for _ in range(key_heads)]
        self._ids = [np.empty(0, dtype=np.int64) for _ in range(key_heads)]
        self._active_tokens: dict[int, int] = {}

    # -- occupancy ---------------------------------------------------------

    @property
    def clean_tokens(self) -> int:
        return int(self._ids[0].size)

    def clean_tokens_of(self, head: int) -> int:
        return int(self._ids[head].size)

    @property
    def active_tokens(self) -> int:
        return sum(self._active_tokens.values())

    @property
    def resident_tokens(self) -> int:
        return self.clean_tokens + self.active_tokens

    @property
    def total_capacity(self) -> Optional[int]:
        if self.budget_tokens is None:
            return None
        return self.budget_tokens + self.active_capacity

    def retained_ids(self, head: int) -> np.ndarray:
        return self._ids[head].copy()

    def keys_of(self, head: int) -> np.ndarray:
        return self._keys[head].copy()

    # -- active region -----------------------------------------------------

    def activate_chunk(self, chunk_index: int) -> None:
        if chunk_index in self._active_tokens:
            raise InvalidInput(f"chunk {chunk_index} already active")
        self._active_tokens[chunk_index] = self.tokens_per_chunk

    def retire_chunk(self, chunk_index: int) -> None:
        if chunk_index not in self._active_tokens:
            raise InvalidInput(f"chunk {chunk_index} not active")
        del self._active_tokens[chunk_index]

    # -- clean region ------------------------------------------------------

    def add_clean_chunk(self, chunk_index: int, keys: np.ndarray, values: np.ndarray,
                        queries: np.ndarray, config: CompressionConfig,
                        global_step: int) -> Optional[CompressionReport]:
        """Fold a finished chunk's KV states into the clean region.

        Appends while the clean region fits the budget; once an arrival would
        overflow it, the merged candidate set is compressed on every arrival.
        Returns the compression report, or None during the fill phase.
        """
        if keys.shape != (self.tokens_per_chunk, self.key_heads, self.head_dim):
            raise InvalidInput(f"bad key shape {keys.shape}")
        if values.shape != keys.shape:
            raise InvalidInput("keys and values shapes differ")
        base = (chunk_index - 1) * self.tokens_per_chunk
        new_ids = base + np.arange(self.tokens_per_chunk, dtype=np.int64)
        candidate_count = max(self.clean_tokens_of(h) for h in range(self.key_heads))
        candidate_count += self.tokens_per_chunk
        if self.budget_tokens is None or candidate_count <= self.budget_tokens:
            for h in range(self.key_heads):
                self._keys[h] = np.concatenate([self._keys[h], keys[:, h, :]])
                self._values[h] = np.concatenate([self._values[h], values[:, h, :]])
                self._ids[h] = np.concatenate([self._ids[h], new_ids])
            return None
        return self._compress(chunk_index, keys, values, new_ids, queries,
                              config, global_step)

    def _compress(self, chunk_index: int, new_keys: np.ndarray, new_values: np.ndarray,
                  new_ids: np.ndarray, queries: np.ndarray, config: CompressionConfig,
                  global_step: int) -> CompressionReport:
        # clean-region lengths stay uniform across heads (every compression
        # retains the same count for each head), so candidates stack into
        # one (L, H, d) array and all heads are scored in a single pass
        budget = self.budget_tokens
        cand_keys = np.stack(
            [np.concatenate([self._keys[h], new_keys[:, h, :]])
             for h in range(self.key_heads)], axis=1)
        cand_values = np.stack(
            [np.concatenate([self._values[h], new_values[:, h, :]])
             for h in range(self.key_heads)], axis=1)
        # id sets are ragged across heads; row i of head h's stack column is
        # that head's i-th candidate
        cand_ids = [np.concatenate([self._ids[h], new_ids])
                    for h in range(self.key_heads)]
        n_cand = int(cand_ids[0].size)
        report = CompressionReport(
            global_step=global_step, arriving_chunk=chunk_index,
            candidate_tokens=n_cand, no_op=False)
        if n_cand <= budget:
            report.no_op = True
            for h in range(self.key_heads):
                self._keys[h] = cand_keys[:, h, :]
                self._values[h] = cand_values[:, h, :]
                self._ids[h] = cand_ids[h]
                report.heads[h] = HeadReport(
                    retained_ids=[int(i) for i in cand_ids[h]], evicted_count=0,
                    score_min=None, score_max=None, score_mean=None)
            return report
        scores = score_candidates(queries, cand_keys, config)
        for h in range(self.key_heads):
            row = scores.combined[h]
            keep = select_tokens(row, budget, config.key_granularity,
                                 self.frame_tokens, self.tokens_per_chunk)
            self._keys[h] = cand_keys[keep, h, :]
            self._values[h] = cand_values[keep, h, :]
            self._ids[h] = cand_ids[h][keep]
            report.heads[h] = HeadReport(
                retained_ids=[int(i) for i in cand_ids[h][keep]],
                evicted_count=int(n_cand - keep.size),
                score_min=float(row.min()), score_max=float(row.max()),
                score_mean=float(row.mean()))
        return report


def score_candidates(queries: np.ndarray, keys: np.ndarray,
                     config: CompressionConfig) -> SelectionScores:
    """Full scoring pipeline for a candidate key set (all heads at once)."""
    imp = importance(queries, keys, config)
    pooled = pooled_importance(imp, config)
    red = redundancy_fast(keys)
    combined = combined_score(pooled, red, config.mix_lambda)
    return SelectionScores(importance=imp, pooled_importance=pooled,
                           redundancy=red, combined=combined)


def pool_queries_by_frame(queries: np.ndarray, frame_size: int) -> np.ndarray:
    """Mean-pool query rows into per-frame query vectors (frame granularity)."""
    queries = np.asarray(queries, dtype=FLOAT)
    if queries.shape[0] % frame_size != 0:
        raise InvalidConfig(
            f"{queries.shape[0]} query rows not divisible by frame size {frame_size}")
    pooled = queries.reshape(-1, frame_size, *queries.shape[1:]).mean(axis=1)
    return pooled
