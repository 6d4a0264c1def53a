"""Experiment orchestration: train-teacher -> rollout -> distill -> eval
-> analyze, with a manifest, CSV reports, and figure siblings.

Each stage reads and writes fixed artifact names inside the output
directory, so stages can run separately (e.g. eval-only against an
existing checkpoint). A stage failure persists the manifest with the
failure recorded and re-raises; earlier artifacts stay on disk.
"""

from __future__ import annotations

import json
import subprocess
import time
from pathlib import Path

import numpy as np

from . import analysis, config as cfgmod, figures, harness, tasks, trainer
from .decoder import DecodeConfig, load_trajectories
from .denoiser import load_checkpoint, save_checkpoint
from .errors import ConfigError

ARTIFACTS = {
    "teacher": "teacher.ckpt",
    "student": "student.ckpt",
    "trajectories": "trajectories.jsonl",
    "teacher_log": "teacher_train_log.csv",
    "distill_log": "distill_log.csv",
    "reports": "reports.csv",
    "analysis": "analysis.csv",
    "manifest": "manifest.json",
}


def _git_describe() -> str | None:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or None
    except (OSError, subprocess.TimeoutExpired):
        return None


class ExperimentRunner:
    def __init__(self, cfg: dict, base_dir=None):
        self.cfg = cfg
        root = Path(base_dir) if base_dir is not None else Path.cwd()
        self.out = root / cfg["output_dir"]
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "config": cfg,
            "config_hash": cfgmod.config_hash(cfg),
            "seed": cfg["seed"],
            "git_describe": _git_describe(),
            "stages": {},
        }

    def path(self, key: str) -> Path:
        return self.out / ARTIFACTS[key]

    def _write_manifest(self) -> None:
        with open(self.path("manifest"), "w", encoding="utf-8") as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)

    def run(self, stages=None) -> Path:
        stages = stages or self.cfg["stages"]
        for stage in stages:
            if stage not in cfgmod.STAGES:
                raise ConfigError(f"unknown stage {stage!r}")
            started = time.time()
            try:
                getattr(self, "stage_" + stage.replace("-", "_"))()
            except Exception as exc:
                self.manifest["stages"][stage] = {
                    "status": "failed",
                    "error": f"{type(exc).__name__}: {exc}",
                }
                self._write_manifest()
                raise
            self.manifest["stages"][stage] = {
                "status": "ok",
                "seconds": round(time.time() - started, 3),
            }
            self._write_manifest()
        return self.out

    # -- stages --------------------------------------------------------

    def stage_train_teacher(self) -> None:
        cfg = self.cfg
        params = trainer.train_teacher(
            cfgmod.task_spec(cfg),
            cfgmod.model_config(cfg),
            cfgmod.train_config(cfg["teacher_train"]),
            log_path=self.path("teacher_log"),
            eval_every=cfg.get("teacher_eval_every", 0),
            stop_accuracy=cfg.get("teacher_stop_accuracy"),
        )
        save_checkpoint(self.path("teacher"), params)
        figures.render_loss_curves(
            self.path("teacher_log"), self.out / "teacher_train_log.png"
        )

    def stage_rollout(self) -> None:
        cfg = self.cfg
        spec = trainer.RolloutSpec(
            task=cfgmod.task_spec(cfg),
            decode=cfgmod.decode_config(cfg["rollout"]["decode"]),
            n_prompts=cfg["rollout"]["n_prompts"],
            seed=cfg["seed"],
        )
        teacher = load_checkpoint(self.path("teacher"))
        stats = trainer.collect_trajectories(teacher, spec, self.path("trajectories"))
        self.manifest["rollout_stats"] = stats

    def stage_distill(self) -> None:
        cfg = self.cfg
        teacher = load_checkpoint(self.path("teacher"))
        student = trainer.distill(
            load_trajectories(self.path("trajectories")),
            teacher,
            cfgmod.train_config(cfg["distill_train"]),
            target_decode=cfgmod.decode_config(cfg["student_decode"]),
            log_path=self.path("distill_log"),
        )
        save_checkpoint(self.path("student"), student)
        figures.render_loss_curves(self.path("distill_log"), self.out / "distill_log.png")

    def stage_eval(self) -> None:
        cfg = self.cfg
        task = cfgmod.task_spec(cfg)
        grid = harness.grid_configs(
            cfg["eval"]["block_sizes"],
            cfg["eval"]["tokps"],
            task.answer_len,
            cfg["eval"].get("temperature", 0.0),
        )
        subjects = {}
        if self.path("teacher").exists():
            subjects["teacher"] = load_checkpoint(self.path("teacher"))
        if self.path("student").exists():
            subjects["student"] = load_checkpoint(self.path("student"))
        if not subjects:
            raise ConfigError("eval stage found no checkpoints to evaluate")
        all_reports = {}
        flat = []
        for name, params in subjects.items():
            rows = [
                harness.evaluate(params, task, dc, cfg["eval"]["n_prompts"])
                for dc in grid
                if dc.block_size * ((task.answer_len // dc.block_size) or 1)
                == task.answer_len or task.answer_len % dc.block_size == 0
            ]
            for r in rows:
                r.task = f"{task.kind}/{name}"
            all_reports[name] = rows
            flat.extend(rows)
        harness.write_reports_csv(self.path("reports"), flat)
        figures.render_eval_grid(all_reports, self.out / "reports.png", title=task.kind)

    def stage_analyze(self) -> None:
        cfg = self.cfg
        task = cfgmod.task_spec(cfg)
        teacher = load_checkpoint(self.path("teacher"))
        student = (
            load_checkpoint(self.path("student"))
            if self.path("student").exists()
            else teacher
        )
        a = cfg["analyze"]
        prompts = [p for p, _ in tasks.heldout_pairs(task, a["n_prompts"])]
        teacher_decode = cfgmod.decode_config(cfg["rollout"]["decode"])
        sampler = analysis.TrajectoryStateSampler(
            prompts=prompts,
            teacher_decode=DecodeConfig(
                block_size=teacher_decode.block_size,
                mode=teacher_decode.mode,
                steps_per_block=teacher_decode.steps_per_block,
                temperature=a.get("teacher_temperature", 1.0),
                max_new_tokens=teacher_decode.max_new_tokens,
            ),
            student_decode=cfgmod.decode_config(cfg["student_decode"]),
            max_leaves=a.get("max_leaves", analysis.ENUMERATION_GUARD),
            n_rollouts=a.get("n_rollouts", 10_000),
            seed=cfg["seed"],
        )
        rows = analysis.tc_reduction_report(teacher, student, sampler)
        analysis.write_report_csv(self.path("analysis"), rows)
        figures.render_tc_report(rows, self.out / "analysis.png")


def run_experiment(cfg_or_path, base_dir=None, stages=None) -> Path:
    """Run the configured stages; returns the artifact directory."""
    if isinstance(cfg_or_path, dict):
        cfg = cfgmod.merge_config(cfg_or_path)
    else:
        cfg = cfgmod.load_config(cfg_or_path)
    return ExperimentRunner(cfg, base_dir).run(stages)
