"""Synthetic autoregressive chunked denoiser.

A scene is a sequence of chunks with known clean latents, so the optimal
velocity field has a closed form and every run is exactly reproducible from
(config, seed). Chunks enter denoising staggered by steps/window global
steps (at most ``window`` active at once), each performs ``steps`` local
denoising steps, and finished chunks feed their projected key/value states
into the KV buffer.

The expensive transformer forward is replaced by a cost model: a computed
chunk-step is charged a fixed forward cost plus an attention cost
proportional to query tokens times resident KV tokens; reused steps are
free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidConfig, InvalidInput, Singularity
from .kvcache import CompressionConfig, KVBuffer, pool_queries_by_frame
from .numerics import FLOAT, _ensure_finite, l1_norm
from .reuse import (COMPUTE, ChunkReuseState, Decision, ReusePolicy, apply,
                    decide, estimate_metric)
from .schedule import PowerLawSchedule
from .trace import ChunkStepRecord, RunTrace, StepRecord

PENDING = "pending"
ACTIVE = "active"
CLEAN = "clean"

# seed-stream tags, so every random draw has a stable address
_TAG_NOISE = 1
_TAG_CLEAN = 2
_TAG_VEL_NOISE = 3
_TAG_PROJ = 4


@dataclass(frozen=True)
class SceneConfig:
    """Synthetic scene: chunk count, window, latent shape, norm profile."""

    num_chunks: int = 10
    window: int = 4
    shape: tuple[int, int, int, int] = (8, 4, 6, 6)   # (channels, time, h, w)
    seed: int = 0
    norm_spread: float = 0.25
    norm_base: float = 0.02   # mean |element| of the first chunk's clean latent

    def __post_init__(self):
        if self.num_chunks < 1:
            raise InvalidConfig("num_chunks must be >= 1")
        if not 1 <= self.window <= self.num_chunks:
            raise InvalidConfig("window must satisfy 1 <= window <= num_chunks")
        if len(self.shape) != 4 or any(n < 1 for n in self.shape):
            raise InvalidConfig(f"bad latent shape {self.shape}")
        if self.norm_spread <= 0:
            raise InvalidConfig("norm_spread must be positive")
        if self.norm_base <= 0:
            raise InvalidConfig("norm_base must be positive")

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape))

    @property
    def tokens_per_chunk(self) -> int:
        _, s, h, w = self.shape
        return s * h * w

    @property
    def tokens_per_frame(self) -> int:
        _, _, h, w = self.shape
        return h * w

    def clean_norm(self, chunk_index: int) -> float:
        """Target L1 norm of chunk ``chunk_index``'s clean latent (1-based)."""
        spread = self.norm_spread * (chunk_index - 1) / self.num_chunks
        return self.norm_base * self.numel * (1.0 + spread)


@dataclass(frozen=True)
class KVPlan:
    """Buffer geometry plus compression settings for a run."""

    key_heads: int = 2
    query_heads: int = 4
    head_dim: int = 16
    budget_chunks: Optional[int] = 5   # None disables compression
    compression: CompressionConfig = field(default_factory=CompressionConfig)

    def __post_init__(self):
        if self.key_heads < 1 or self.query_heads < 1 or self.head_dim < 1:
            raise InvalidConfig("head counts and head_dim must be positive")
        if self.query_heads % self.key_heads != 0:
            raise InvalidConfig("query_heads must be a multiple of key_heads")
        if self.budget_chunks is not None and self.budget_chunks < 1:
            raise InvalidConfig("budget_chunks must be positive or None")


@dataclass(frozen=True)
class CostModel:
    """Abstract cost accounting for the simulated forward pass."""

    flops_per_chunk_forward: float = 1.0
    flops_per_kv_token_pair: float = 1e-6
    bytes_per_kv_token: float = 256.0   # 2 stores * heads * dim * 4B (fp32 accounting)

    def __post_init__(self):
        if min(self.flops_per_chunk_forward, self.flops_per_kv_token_pair,
               self.bytes_per_kv_token) < 0:
            raise InvalidConfig("cost model entries must be nonnegative")


@dataclass
class ChunkState:
    """One chunk's latent, ground truth, and lifecycle position."""

    index: int                       # 1-based
    clean_latent: np.ndarray         # ground-truth endpoint of denoising
    latent: Optional[np.ndarray] = None
    local_step: int = 0
    status: str = PENDING


def smooth_profile(n: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded band-limited 1-D profile (a few low-frequency sinusoids)."""
    x = np.linspace(0.0, 1.0, n)
    out = np.zeros(n, dtype=FLOAT)
    for f in (1, 2, 3):
        out += rng.normal() * np.sin(2.0 * np.pi * f * x + rng.uniform(0, 2 * np.pi))
    return out


def make_clean_latent(scene: SceneConfig, chunk_index: int) -> np.ndarray:
    """Smooth low-rank clean latent scaled to the scene's per-chunk norm."""
    rng = np.random.default_rng([scene.seed, chunk_index, _TAG_CLEAN])
    out = np.zeros(scene.shape, dtype=FLOAT)
    for _ in range(2):
        profiles = [smooth_profile(n, rng) for n in scene.shape]
        out += np.einsum("a,b,c,d->abcd", *profiles)
    total = np.abs(out).sum()
    if total == 0.0:  # measure-zero; regenerate deterministically
        out += 1.0
        total = out.size
    return out * (scene.clean_norm(chunk_index) / total)


def make_initial_noise(scene: SceneConfig, chunk_index: int) -> np.ndarray:
    """Standard normal starting state, seeded per (scene seed, chunk)."""
    rng = np.random.default_rng([scene.seed, chunk_index, _TAG_NOISE])
    return rng.standard_normal(scene.shape)


def make_scene(scene: SceneConfig) -> list[ChunkState]:
    return [ChunkState(index=i, clean_latent=make_clean_latent(scene, i))
            for i in range(1, scene.num_chunks + 1)]


def active_window(chunk_index: int, schedule: PowerLawSchedule,
                  scene: SceneConfig) -> tuple[int, int]:
    """Global-step interval [start, end) during which a chunk denoises.

    Chunk i enters at (i - 1) * steps / window and stays for exactly
    ``steps`` global steps; ``steps`` must divide evenly by the window.
    """
    if not 1 <= chunk_index <= scene.num_chunks:
        raise InvalidInput(f"chunk index {chunk_index} out of range")
    if schedule.steps % scene.window != 0:
        raise InvalidConfig(
            f"steps={schedule.steps} not divisible by window={scene.window}")
    stride = schedule.steps // scene.window
    start = (chunk_index - 1) * stride
    return start, start + schedule.steps


def total_global_steps(schedule: PowerLawSchedule, scene: SceneConfig) -> int:
    return active_window(scene.num_chunks, schedule, scene)[1]


def ideal_velocity(chunk: ChunkState, t: float,
                   schedule: PowerLawSchedule) -> np.ndarray:
    """Optimal velocity field: -(sigma'/sigma)(latent - clean) = -(p/t)(...)."""
    if t <= 0:
        raise Singularity(f"velocity undefined at t={t}")
    if chunk.latent is None:
        raise InvalidInput(f"chunk {chunk.index} has no latent (not active)")
    rate = schedule.log_derivative_ratio(t)
    return _ensure_finite(-rate * (chunk.latent - chunk.clean_latent),
                          "ideal_velocity")


def perturbed_velocity(chunk: ChunkState, t: float, schedule: PowerLawSchedule,
                       noise_scale: float, seed: int) -> np.ndarray:
    """Ideal velocity plus a seeded perturbation of relative L1 size noise_scale.

    Deterministic for fixed (seed, chunk index, local step), independent of
    any reuse decisions taken so far.
    """
    if noise_scale < 0:
        raise InvalidInput("noise_scale must be >= 0")
    base = ideal_velocity(chunk, t, schedule)
    if noise_scale == 0.0:
        return base
    rng = np.random.default_rng([seed, chunk.index, chunk.local_step, _TAG_VEL_NOISE])
    g = rng.standard_normal(base.shape)
    g_norm = np.abs(g).sum()
    if g_norm == 0.0:
        return base
    return base + (noise_scale * l1_norm(base) / g_norm) * g


class _Projector:
    """Seeded linear maps from latent channels to per-head K/Q/V rows.

    Key and query rows are l2-normalized per token so attention logits have
    a usable scale regardless of latent magnitude; values are left raw.
    """

    def __init__(self, scene: SceneConfig, plan: KVPlan):
        rng = np.random.default_rng([scene.seed, _TAG_PROJ])
        c = scene.shape[0]
        scale = 1.0 / math.sqrt(c)
        self.w_key = rng.standard_normal((plan.key_heads, c, plan.head_dim)) * scale
        self.w_value = rng.standard_normal((plan.key_heads, c, plan.head_dim)) * scale
        self.w_query = rng.standard_normal((plan.query_heads, c, plan.head_dim)) * scale

    @staticmethod
    def _tokens(latent: np.ndarray) -> np.ndarray:
        c = latent.shape[0]
        return latent.reshape(c, -1).T          # (tokens, channels)

    @staticmethod
    def _unit_rows(x: np.ndarray) -> np.ndarray:
        norms = np.sqrt(np.einsum("thd,thd->th", x, x))
        norms[norms == 0.0] = 1.0
        return x / norms[:, :, None]

    def keys_values(self, latent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        feats = self._tokens(latent)
        keys = np.einsum("tc,hcd->thd", feats, self.w_key)
        values = np.einsum("tc,hcd->thd", feats, self.w_value)
        return self._unit_rows(keys), values

    def queries(self, latent: np.ndarray) -> np.ndarray:
        feats = self._tokens(latent)
        q = np.einsum("tc,hcd->thd", feats, self.w_query)
        return self._unit_rows(q)


def run_denoise(scene: SceneConfig, schedule: PowerLawSchedule,
                policy: Optional[ReusePolicy] = None,
                kv: Optional[KVPlan] = None,
                cost: Optional[CostModel] = None,
                noise_scale: float = 0.0) -> RunTrace:
    """Drive every chunk from noise to clean and return the full trace.

    ``policy=None`` disables the reuse machinery entirely (every step
    computes); an epsilon=0 policy takes the same decisions and produces a
    bitwise-identical trace. ``kv.budget_chunks=None`` disables compression
    while still accounting buffer occupancy.
    """
    kv = kv or KVPlan()
    cost = cost or CostModel()
    if schedule.steps % scene.window != 0:
        raise InvalidConfig(
            f"steps={schedule.steps} not divisible by window={scene.window}")

    chunks = make_scene(scene)
    reuse_states = {c.index: ChunkReuseState() for c in chunks}
    projector = _Projector(scene, kv)
    tokens_per_chunk = scene.tokens_per_chunk
    budget_tokens = (None if kv.budget_chunks is None
                     else kv.budget_chunks * tokens_per_chunk)
    buffer = KVBuffer(
        key_heads=kv.key_heads, head_dim=kv.head_dim,
        tokens_per_chunk=tokens_per_chunk, budget_tokens=budget_tokens,
        active_capacity=scene.window * tokens_per_chunk,
        frame_tokens=scene.tokens_per_frame)

    starts = {c.index: active_window(c.index, schedule, scene)[0] for c in chunks}
    n_steps = total_global_steps(schedule, scene)
    dt = schedule.dt

    trace = RunTrace.start(scene=scene, schedule=schedule, policy=policy, kv=kv,
                           cost=cost, noise_scale=noise_scale)

    def newest_active_latent() -> Optional[np.ndarray]:
        live = [c for c in chunks if c.status == ACTIVE]
        return live[-1].latent if live else None

    for g in range(n_steps):
        for chunk in chunks:
            if chunk.status == PENDING and starts[chunk.index] == g:
                chunk.latent = make_initial_noise(scene, chunk.index)
                chunk.status = ACTIVE
                buffer.activate_chunk(chunk.index)

        step_flops = 0.0
        chunk_records: list[ChunkStepRecord] = []
        finished: list[ChunkState] = []
        resident_before = buffer.resident_tokens

        for chunk in chunks:
            if chunk.status != ACTIVE:
                continue
            t_now = schedule.time_at(chunk.local_step)
            state = reuse_states[chunk.index]
            if policy is None:
                estimate = None
                decision = Decision(COMPUTE, None, 0.0)
            else:
                estimate = estimate_metric(state, dt, chunk.latent)
                decision = decide(policy, state, chunk.local_step, estimate)

            def forward() -> np.ndarray:
                return perturbed_velocity(chunk, t_now, schedule, noise_scale,
                                          scene.seed)

            chunk.latent, metric = apply(decision, state, chunk.latent, dt, forward)
            if decision.is_compute:
                step_flops += cost.flops_per_chunk_forward
                step_flops += (cost.flops_per_kv_token_pair
                               * tokens_per_chunk * resident_before)
            chunk_records.append(ChunkStepRecord(
                chunk=chunk.index, local_step=chunk.local_step,
                decision=decision.action, metric=metric,
                accumulator=state.accumulator, estimate=estimate))
            chunk.local_step += 1
            if chunk.local_step == schedule.steps:
                chunk.status = CLEAN
                finished.append(chunk)

        for chunk in finished:
            buffer.retire_chunk(chunk.index)
            keys, values = projector.keys_values(chunk.latent)
            query_source = newest_active_latent()
            if query_source is None:
                query_source = chunk.latent
            queries = projector.queries(query_source)
            if kv.compression.query_granularity == "frame":
                queries = pool_queries_by_frame(queries, scene.tokens_per_frame)
            report = buffer.add_clean_chunk(
                chunk.index, keys, values, queries, kv.compression, g)
            if report is not None:
                trace.add_compression(report)

        trace.add_step(StepRecord(
            global_step=g,
            chunks=chunk_records,
            flops=step_flops,
            kv_clean_tokens=buffer.clean_tokens,
            kv_active_tokens=buffer.active_tokens,
            resident_bytes=buffer.resident_tokens * cost.bytes_per_kv_token))

    trace.finish({c.index: c.latent for c in chunks})
    return trace
