"""Run tracing: per-step records, cost totals, hashing, export/import.

A trace is the unit of reproducibility: identical config and seed must hash
identically, and the hash covers everything semantically meaningful about a
run (decisions, metrics, accumulators, costs, buffer occupancy, compression
outcomes, final latents) while excluding presentation-only fields.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidComparison, InvalidInput
from .kvcache import CompressionReport, HeadReport
from .numerics import FLOAT

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ChunkStepRecord:
    chunk: int
    local_step: int
    decision: str
    metric: float
    accumulator: float
    estimate: Optional[float] = None   # decision-time estimate; not hashed


@dataclass(frozen=True)
class StepRecord:
    global_step: int
    chunks: list[ChunkStepRecord]
    flops: float
    kv_clean_tokens: int
    kv_active_tokens: int
    resident_bytes: float

    @property
    def resident_tokens(self) -> int:
        return self.kv_clean_tokens + self.kv_active_tokens


@dataclass
class RunTotals:
    computed_steps: int = 0
    reused_steps: int = 0
    total_flops: float = 0.0
    peak_resident_tokens: int = 0
    peak_resident_bytes: float = 0.0

    @property
    def reuse_fraction(self) -> float:
        done = self.computed_steps + self.reused_steps
        return self.reused_steps / done if done else 0.0


def _config_snapshot(scene, schedule, policy, kv, cost, noise_scale) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scene": {
            "num_chunks": scene.num_chunks,
            "window": scene.window,
            "shape": list(scene.shape),
            "seed": scene.seed,
            "norm_spread": scene.norm_spread,
            "norm_base": scene.norm_base,
        },
        "schedule": {
            "power": schedule.power,
            "total_time": schedule.total_time,
            "steps": schedule.steps,
        },
        "policy": None if policy is None else {
            "epsilon": policy.epsilon,
            "warmup": policy.warmup,
        },
        "kv": {
            "key_heads": kv.key_heads,
            "query_heads": kv.query_heads,
            "head_dim": kv.head_dim,
            "budget_chunks": kv.budget_chunks,
            "mix_lambda": kv.compression.mix_lambda,
            "pool_kernel": kv.compression.pool_kernel,
            "query_window": kv.compression.query_window,
            "query_granularity": kv.compression.query_granularity,
            "key_granularity": kv.compression.key_granularity,
        },
        "cost": {
            "flops_per_chunk_forward": cost.flops_per_chunk_forward,
            "flops_per_kv_token_pair": cost.flops_per_kv_token_pair,
            "bytes_per_kv_token": cost.bytes_per_kv_token,
        },
        "noise_scale": noise_scale,
    }


@dataclass
class RunTrace:
    config: dict
    records: list[StepRecord] = field(default_factory=list)
    compressions: list[CompressionReport] = field(default_factory=list)
    totals: RunTotals = field(default_factory=RunTotals)
    final_latents: dict[int, np.ndarray] = field(default_factory=dict)
    content_hash: str = ""

    @classmethod
    def start(cls, scene, schedule, policy, kv, cost, noise_scale) -> "RunTrace":
        return cls(config=_config_snapshot(scene, schedule, policy, kv, cost,
                                           noise_scale))

    def add_step(self, record: StepRecord) -> None:
        self.records.append(record)
        for cr in record.chunks:
            if cr.decision == "compute":
                self.totals.computed_steps += 1
            else:
                self.totals.reused_steps += 1
        self.totals.total_flops += record.flops
        self.totals.peak_resident_tokens = max(
            self.totals.peak_resident_tokens, record.resident_tokens)
        self.totals.peak_resident_bytes = max(
            self.totals.peak_resident_bytes, record.resident_bytes)

    def add_compression(self, report: CompressionReport) -> None:
        self.compressions.append(report)

    def finish(self, final_latents: dict[int, np.ndarray]) -> None:
        self.final_latents = {int(k): np.asarray(v, dtype=FLOAT)
                              for k, v in final_latents.items()}
        self.content_hash = self._compute_hash()

    # -- hashing -----------------------------------------------------------

    def _compute_hash(self) -> str:
        """Bitwise content hash over decisions, metrics, costs, and latents.

        The config snapshot and decision-time estimates are deliberately
        excluded: an epsilon=0 run and a run with the policy disabled differ
        only there and must hash identically.
        """
        h = hashlib.sha256()

        def f64(x: float) -> bytes:
            return struct.pack("<d", float(x))

        def i64(x: int) -> bytes:
            return struct.pack("<q", int(x))

        for rec in self.records:
            h.update(i64(rec.global_step))
            for cr in rec.chunks:
                h.update(i64(cr.chunk))
                h.update(i64(cr.local_step))
                h.update(cr.decision.encode())
                h.update(f64(cr.metric))
                h.update(f64(cr.accumulator))
            h.update(f64(rec.flops))
            h.update(i64(rec.kv_clean_tokens))
            h.update(i64(rec.kv_active_tokens))
            h.update(f64(rec.resident_bytes))
        for rep in self.compressions:
            h.update(i64(rep.global_step))
            h.update(i64(rep.arriving_chunk))
            h.update(i64(rep.candidate_tokens))
            h.update(b"1" if rep.no_op else b"0")
            for head in sorted(rep.heads):
                h.update(i64(head))
                h.update(np.asarray(rep.heads[head].retained_ids,
                                    dtype=np.int64).tobytes())
                h.update(i64(rep.heads[head].evicted_count))
        for idx in sorted(self.final_latents):
            h.update(i64(idx))
            h.update(np.ascontiguousarray(self.final_latents[idx]).tobytes())
        return h.hexdigest()

    # -- export ------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "records": [
                {
                    "global_step": r.global_step,
                    "chunks": [
                        {
                            "chunk": c.chunk,
                            "local_step": c.local_step,
                            "decision": c.decision,
                            "metric": c.metric,
                            "accumulator": c.accumulator,
                            "estimate": c.estimate,
                        }
                        for c in r.chunks
                    ],
                    "flops": r.flops,
                    "kv_clean_tokens": r.kv_clean_tokens,
                    "kv_active_tokens": r.kv_active_tokens,
                    "resident_bytes": r.resident_bytes,
                }
                for r in self.records
            ],
            "compressions": [rep.to_dict() for rep in self.compressions],
            "totals": {
                "computed_steps": self.totals.computed_steps,
                "reused_steps": self.totals.reused_steps,
                "reuse_fraction": self.totals.reuse_fraction,
                "total_flops": self.totals.total_flops,
                "peak_resident_tokens": self.totals.peak_resident_tokens,
                "peak_resident_bytes": self.totals.peak_resident_bytes,
            },
            "final_latents": {
                str(k): v.ravel().tolist() for k, v in self.final_latents.items()
            },
            "content_hash": self.content_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def import_trace(data: dict | str) -> RunTrace:
    """Rebuild a trace from its JSON form and verify the content hash."""
    if isinstance(data, str):
        data = json.loads(data)
    if data.get("schema_version") != SCHEMA_VERSION:
        raise InvalidInput(f"unsupported trace schema {data.get('schema_version')}")
    trace = RunTrace(config=data["config"])
    for r in data["records"]:
        trace.add_step(StepRecord(
            global_step=r["global_step"],
            chunks=[ChunkStepRecord(
                chunk=c["chunk"], local_step=c["local_step"],
                decision=c["decision"], metric=c["metric"],
                accumulator=c["accumulator"], estimate=c["estimate"])
                for c in r["chunks"]],
            flops=r["flops"],
            kv_clean_tokens=r["kv_clean_tokens"],
            kv_active_tokens=r["kv_active_tokens"],
            resident_bytes=r["resident_bytes"]))
    for rep in data["compressions"]:
        report = CompressionReport(
            global_step=rep["global_step"], arriving_chunk=rep["arriving_chunk"],
            candidate_tokens=rep["candidate_tokens"], no_op=rep["no_op"])
        for head, body in rep["heads"].items():
            report.heads[int(head)] = HeadReport(
                retained_ids=list(body["retained_ids"]),
                evicted_count=body["evicted_count"],
                score_min=body["score_min"], score_max=body["score_max"],
                score_mean=body["score_mean"])
        trace.add_compression(report)
    shape = tuple(data["config"]["scene"]["shape"])
    finals = {int(k): np.asarray(v, dtype=FLOAT).reshape(shape)
              for k, v in data["final_latents"].items()}
    trace.finish(finals)
    if trace.content_hash != data["content_hash"]:
        raise InvalidInput("trace content hash mismatch after import")
    return trace


# -- derived views ----------------------------------------------------------

def l1rel_curves(trace: RunTrace) -> dict[int, list[tuple[float, float]]]:
    """Per-chunk (denoising progress %, metric) series in step order."""
    steps = trace.config["schedule"]["steps"]
    curves: dict[int, list[tuple[float, float]]] = {}
    for rec in trace.records:
        for cr in rec.chunks:
            curves.setdefault(cr.chunk, []).append(
                (100.0 * cr.local_step / steps, cr.metric))
    return curves


def curves_csv(trace: RunTrace) -> str:
    """CSV rendering of the per-chunk metric curves."""
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["schema_version", SCHEMA_VERSION])
    writer.writerow(["chunk", "local_step", "progress_pct", "metric",
                     "decision", "estimate"])
    steps = trace.config["schedule"]["steps"]
    for rec in trace.records:
        for cr in rec.chunks:
            writer.writerow([
                cr.chunk, cr.local_step,
                f"{100.0 * cr.local_step / steps:.6f}",
                repr(cr.metric), cr.decision,
                "" if cr.estimate is None else repr(cr.estimate)])
    return out.getvalue()


def speedup(trace: RunTrace, baseline: RunTrace) -> float:
    """Ratio of baseline model flops to this run's model flops."""
    for section in ("scene", "schedule"):
        if trace.config[section] != baseline.config[section]:
            raise InvalidComparison(f"{section} configs differ")
    if trace.totals.total_flops <= 0:
        raise InvalidComparison("trace has no recorded model cost")
    return baseline.totals.total_flops / trace.totals.total_flops
