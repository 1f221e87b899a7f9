"""Deterministic simulator for chunkwise denoising cache reuse and
fixed-budget KV compression in autoregressive video generation."""

__version__ = "0.1.0"

from .armodel import (ChunkState, CostModel, KVPlan, SceneConfig,
                      active_window, ideal_velocity, make_clean_latent,
                      make_initial_noise, perturbed_velocity, run_denoise,
                      total_global_steps)
from .config import PROFILES, build_objects, resolve_config
from .errors import (DegenerateInput, InternalError, InvalidComparison,
                     InvalidConfig, InvalidInput, SimulatorError, Singularity)
from .kvcache import (CompressionConfig, CompressionReport, KVBuffer,
                      combined_score, granularity_aggregate, importance,
                      pooled_importance, redundancy_fast, redundancy_naive,
                      score_candidates, select_tokens)
from .numerics import as_tensor, l1_norm, maxpool1d, softmax, stable_topk
from .reuse import (ChunkReuseState, Decision, ReusePolicy, decide,
                    estimate_metric, relative_l1)
from .schedule import PowerLawSchedule, TimeGrid, euler_step
from .trace import (RunTrace, curves_csv, import_trace, l1rel_curves, speedup)
