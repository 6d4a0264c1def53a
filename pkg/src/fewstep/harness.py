"""Evaluation harness: exact-match accuracy and step accounting over
decode-configuration grids, written as CSV rows.

Grading is position-wise equality over the answer region only. Step and
forward-pass counts are the asserted efficiency proxies; wall-clock is
reported for orientation but never asserted (it cannot be reproducible).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import tasks
from .decoder import DecodeConfig, decode_batch
from .denoiser import DenoiserParams

REPORT_HEADER = [
    "task", "mode", "block_size", "tokps", "accuracy",
    "avg_steps", "avg_len", "forward_passes", "wall_ms",
]


@dataclass
class EvalReport:
    task: str
    mode: str
    block_size: int
    tokps: float
    accuracy: float
    avg_steps: float
    avg_len: float
    forward_passes: float
    wall_ms: float

    def row(self) -> list:
        return [
            self.task, self.mode, self.block_size, repr(self.tokps),
            repr(self.accuracy), repr(self.avg_steps), repr(self.avg_len),
            repr(self.forward_passes), f"{self.wall_ms:.3f}",
        ]


def exact_match(traj_output: list[int], answer) -> bool:
    return traj_output[: len(answer)] == list(answer)


def evaluate(
    params: DenoiserParams,
    task: tasks.TaskSpec,
    decode_cfg: DecodeConfig,
    n: int,
    rng: np.random.Generator | None = None,
    batch_size: int = 64,
) -> EvalReport:
    """Decode n held-out prompts and aggregate accuracy and step counts.

    The decoder runs one model forward per step, so the per-sample forward
    pass count equals the step count under the current engine; both are
    reported because they diverge once caching enters the picture.
    """
    pairs = tasks.heldout_pairs(task, n)
    start = time.perf_counter()
    hits = 0
    steps = []
    lens = []
    for lo in range(0, n, batch_size):
        chunk = pairs[lo : lo + batch_size]
        trajs = decode_batch(params, [p for p, _ in chunk], decode_cfg, rng)
        for traj, (_, answer) in zip(trajs, chunk):
            hits += exact_match(traj.output, answer)
            steps.append(traj.steps_total)
            lens.append(len(traj.generated_positions()))
    wall_ms = (time.perf_counter() - start) * 1000.0 / n
    tokps = decode_cfg.tokps() if decode_cfg.mode != "dynamic" else (
        float(np.mean(lens)) / float(np.mean(steps))
    )
    return EvalReport(
        task=task.kind,
        mode=decode_cfg.mode,
        block_size=decode_cfg.block_size,
        tokps=float(tokps),
        accuracy=hits / n,
        avg_steps=float(np.mean(steps)),
        avg_len=float(np.mean(lens)),
        forward_passes=float(np.mean(steps)),
        wall_ms=wall_ms,
    )


def grid_configs(block_sizes, tokps_values, max_new_tokens: int, temperature: float = 0.0):
    """Static decode configs for every (block size, tokens-per-step) combo."""
    out = []
    for b in block_sizes:
        for tokps in tokps_values:
            if b % tokps != 0:
                continue
            out.append(
                DecodeConfig(
                    block_size=b,
                    mode="static",
                    steps_per_block=b // tokps,
                    temperature=temperature,
                    max_new_tokens=max_new_tokens,
                )
            )
    return out


def write_reports_csv(path, reports: list[EvalReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.row())


def read_reports_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
