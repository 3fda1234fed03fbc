"""Comparison tables in the layout of the published result tables.

Every row holds a per-policy mean over seeds and a ``Diff.`` factor oriented
so that a value above 1 favours RASDA. For lower-is-better rows that is
ASHA/RASDA; for higher-is-better rows it is RASDA/ASHA.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from rasda.schedulers import MetricMode
from rasda.simulator import Summary

MODEL_NOTE = (
    "Runtimes come from the simulator's cost model (compute, overhead, "
    "communication, checkpoint and relaunch terms only; no data loading or "
    "I/O). Diff. factors are model-dependent."
)


def _mean(xs: Sequence[float]) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return sum(xs) / len(xs) if xs else float("nan")


def _ratio(a: float, b: float) -> float:
    if math.isnan(a) or math.isnan(b) or b == 0:
        return float("nan")
    return a / b


@dataclass
class ReportRow:
    label: str
    asha: float
    rasda: float
    lower_is_better: bool = True

    @property
    def diff(self) -> float:
        if self.lower_is_better:
            return _ratio(self.asha, self.rasda)
        return _ratio(self.rasda, self.asha)


@dataclass
class ComparisonReport:
    name: str
    summaries: List[Summary]
    metric_mode: MetricMode = MetricMode.MIN
    stopped_agreement: Dict[int, bool] = field(default_factory=dict)

    def __post_init__(self):
        self.metric_mode = MetricMode(self.metric_mode)

    def rows_for(self, policy: str) -> List[Summary]:
        return sorted((s for s in self.summaries if s.policy == policy), key=lambda s: s.seed)

    @property
    def seeds(self) -> List[int]:
        return sorted({s.seed for s in self.summaries})

    @property
    def policies(self) -> List[str]:
        return sorted({s.policy for s in self.summaries})

    def check_complete(self) -> None:
        for policy in self.policies:
            have = [s.seed for s in self.rows_for(policy)]
            if have != self.seeds:
                raise ValueError(f"{policy}: rows for seeds {have}, expected {self.seeds}")

    def mean(self, policy: str, attr: str) -> float:
        return _mean([getattr(s, attr) for s in self.rows_for(policy)])

    @property
    def speed_up(self) -> float:
        """Mean ASHA makespan over mean RASDA makespan."""
        return _ratio(self.mean("asha", "makespan_s"), self.mean("rasda", "makespan_s"))

    @property
    def quality_ratio(self) -> float:
        row = self._metric_row()
        return row.diff

    def seed_speed_ups(self) -> Dict[int, float]:
        asha = {s.seed: s.makespan_s for s in self.rows_for("asha")}
        rasda = {s.seed: s.makespan_s for s in self.rows_for("rasda")}
        return {seed: _ratio(asha[seed], rasda[seed]) for seed in sorted(asha) if seed in rasda}

    def _metric_row(self) -> ReportRow:
        return ReportRow(
            f"Best metric ({self.metric_mode.value})",
            self.mean("asha", "best_metric"),
            self.mean("rasda", "best_metric"),
            lower_is_better=self.metric_mode is MetricMode.MIN,
        )

    def rows(self) -> List[ReportRow]:
        return [
            ReportRow("Runtime", self.mean("asha", "makespan_s"), self.mean("rasda", "makespan_s")),
            self._metric_row(),
            ReportRow(
                "Worker-seconds",
                self.mean("asha", "total_worker_seconds"),
                self.mean("rasda", "total_worker_seconds"),
            ),
        ]

    def to_markdown(self) -> str:
        out = [f"# {self.name}: ASHA vs RASDA", ""]
        out.append(f"Seeds: {', '.join(str(s) for s in self.seeds)}. Values are means over seeds.")
        out.append("")
        if set(self.policies) >= {"asha", "rasda"}:
            out += ["| Metric | ASHA | RASDA | Diff. |", "|---|---|---|---|"]
            for row in self.rows():
                out.append(f"| {row.label} | {_fmt(row.asha)} | {_fmt(row.rasda)} | {_fmt(row.diff, 3)}x |")
            out += ["", "## Per seed", "", "| Seed | ASHA runtime | RASDA runtime | Speed-up | Same stopped set |",
                    "|---|---|---|---|---|"]
            asha = {s.seed: s for s in self.rows_for("asha")}
            rasda = {s.seed: s for s in self.rows_for("rasda")}
            for seed, sp in self.seed_speed_ups().items():
                agree = self.stopped_agreement.get(seed)
                agree_s = "n/a" if agree is None else ("yes" if agree else "no")
                out.append(
                    f"| {seed} | {_fmt(asha[seed].makespan_s)} | {_fmt(rasda[seed].makespan_s)} "
                    f"| {_fmt(sp, 3)}x | {agree_s} |"
                )
        else:
            policy = self.policies[0]
            out += ["| Metric | " + policy.upper() + " |", "|---|---|"]
            out.append(f"| Runtime | {_fmt(self.mean(policy, 'makespan_s'))} |")
            out.append(f"| Best metric | {_fmt(self.mean(policy, 'best_metric'))} |")
            out.append(f"| Worker-seconds | {_fmt(self.mean(policy, 'total_worker_seconds'))} |")
        out += ["", f"Note: {MODEL_NOTE}", ""]
        return "\n".join(out)


def _fmt(x: float, digits: int = 6) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.{digits}g}"


def stopped_sets_agree(a: Summary, b: Summary) -> bool:
    return set(a.stopped) == set(b.stopped)


def summaries_to_csv(summaries: Iterable[Summary]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(Summary.CSV_COLUMNS)
    for s in sorted(summaries, key=lambda s: (s.policy, s.seed)):
        writer.writerow(s.csv_row())
    return buf.getvalue()


def read_summary_csv(text: str) -> List[Dict[str, str]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(Summary.CSV_COLUMNS) - set(rows[0]):
        missing = sorted(set(Summary.CSV_COLUMNS) - set(rows[0]))
        raise ValueError(f"summary file lacks column(s) {missing}")
    return rows


def join_summaries(left: List[Dict[str, str]], right: List[Dict[str, str]]) -> List[List[str]]:
    """Outer join on (policy, seed); returns rows with a makespan ratio left/right."""
    key = lambda r: (r["policy"], int(r["seed"]))
    lmap = {key(r): r for r in left}
    rmap = {key(r): r for r in right}
    out = [["policy", "seed", "makespan_left", "makespan_right", "ratio", "best_left", "best_right"]]
    for k in sorted(set(lmap) | set(rmap)):
        l, r = lmap.get(k), rmap.get(k)
        ml = float(l["makespan_s"]) if l else float("nan")
        mr = float(r["makespan_s"]) if r else float("nan")
        out.append([
            k[0], str(k[1]),
            l["makespan_s"] if l else "", r["makespan_s"] if r else "",
            repr(_ratio(ml, mr)),
            l["best_metric"] if l else "", r["best_metric"] if r else "",
        ])
    return out
