"""Run every (policy, seed) cell of an experiment and write its artifacts."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from rasda.harness.config import ExperimentConfig
from rasda.harness.report import ComparisonReport, stopped_sets_agree, summaries_to_csv
from rasda.schedulers import Policy
from rasda.simulator import Summary, run_simulation

logger = logging.getLogger(__name__)


class BackendFailure(RuntimeError):
    """A cell crashed; the run's partial outputs have been removed."""


@dataclass
class RunResult:
    summaries: List[Summary]
    report: ComparisonReport
    files: List[Path]


def _cell(args: Tuple[ExperimentConfig, str, int]) -> Tuple[str, int, str, Summary]:
    cfg, policy, seed = args
    log, summary = run_simulation(cfg, seed, Policy(policy))
    return policy, seed, log.to_jsonl(), summary


def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = 1) -> RunResult:
    """Run all cells, then write ``events_<policy>_<seed>.jsonl``, ``summary.csv``
    and ``report.md`` under ``out_dir``.

    Cells are independent and deterministic, so ``jobs > 1`` only changes
    wall-clock time, never the outputs.
    """
    out = Path(out_dir)
    cells = [(cfg, p.value, seed) for p in cfg.policies for seed in cfg.seeds]
    try:
        if jobs > 1 and len(cells) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_cell, cells))
        else:
            results = [_cell(c) for c in cells]
    except Exception as exc:
        raise BackendFailure(f"{type(exc).__name__}: {exc}") from exc

    written: List[Path] = []
    created_dir = not out.exists()
    try:
        out.mkdir(parents=True, exist_ok=True)
        for policy, seed, jsonl, _ in results:
            path = out / f"events_{policy}_{seed}.jsonl"
            path.write_text(jsonl, encoding="utf-8")
            written.append(path)
        summaries = [r[3] for r in results]
        by_cell: Dict[Tuple[str, int], Summary] = {(s.policy, s.seed): s for s in summaries}
        agreement = {
            seed: stopped_sets_agree(by_cell[("asha", seed)], by_cell[("rasda", seed)])
            for seed in cfg.seeds
            if ("asha", seed) in by_cell and ("rasda", seed) in by_cell
        }
        report = ComparisonReport(cfg.name, summaries, cfg.metric_mode, agreement)
        report.check_complete()
        path = out / "summary.csv"
        path.write_text(summaries_to_csv(summaries), encoding="utf-8")
        written.append(path)
        path = out / "report.md"
        path.write_text(report.to_markdown(), encoding="utf-8")
        written.append(path)
    except Exception:
        remove_outputs(written, out if created_dir else None)
        raise
    logger.info("wrote %d files to %s", len(written), out)
    return RunResult(summaries, report, written)


def remove_outputs(files: Sequence[Path], directory: Optional[Path] = None) -> None:
    for f in files:
        try:
            os.remove(f)
        except FileNotFoundError:
            pass
    if directory is not None:
        try:
            directory.rmdir()
        except OSError:
            pass
