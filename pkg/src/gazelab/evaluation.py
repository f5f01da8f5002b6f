"""Gaze-reconstruction error of swapped frames and the comparison of training conditions."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .losses import Condition, angle_between
from .rng import Rng, derive_seed
from .stats import wilcoxon_signed_rank
from .synthgen import IdentityParams, read_gaze
from . import tensorcore as tc
from .tensorcore.params import write_atomic

LOG_FLOOR_DEG = 1e-3
N_BOOTSTRAP = 10_000
HEADER_NOTE = ("Condition effects are tested with a paired two-sided Wilcoxon signed-rank test on per-pair "
               "mean log errors; this replaces a linear mixed-effects model with a random intercept per "
               "individual, which the small number of pairs cannot support.")


@dataclass
class Frames:
    """Images with the identity and placement needed to read them geometrically."""

    images: np.ndarray
    identity: IdentityParams | None = None
    jitter: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)


Oracle = Callable[[Frames], np.ndarray]


def ground_truth_oracle(frames: Frames) -> np.ndarray:
    """Gaze read off the pixels with the known face geometry, shape (n, 2)."""
    if frames.identity is None or frames.jitter is None:
        raise ValueError("the ground-truth oracle needs the frames' identity and jitter")
    out = np.zeros((len(frames), 2))
    for i, img in enumerate(frames.images):
        g = read_gaze(img, frames.identity, tuple(frames.jitter[i]))
        out[i] = g.mu, g.phi
    return out


def expert_oracle(expert) -> Oracle:
    return lambda frames: expert.predict(frames.images)


def angle_deg(g1: np.ndarray, g2: np.ndarray) -> np.ndarray:
    g1, g2 = np.asarray(g1, dtype=np.float64), np.asarray(g2, dtype=np.float64)
    with tc.no_grad():
        theta = angle_between(g1[:, 0], g1[:, 1], g2[:, 0], g2[:, 1])
    return np.degrees(np.atleast_1d(theta.data))


def frame_errors(source: Frames, swapped: Frames, oracle: Oracle = ground_truth_oracle) -> np.ndarray:
    """Degrees between the oracle's gaze on each source frame and on its swap."""
    if len(source) != len(swapped):
        raise ValueError(f"frame counts differ: {len(source)} source vs {len(swapped)} swapped")
    return angle_deg(oracle(source), oracle(swapped))


@dataclass
class EvalReport:
    oracle: str
    per_frame: dict = field(default_factory=dict)          # (pair, condition) -> errors in degrees
    per_pair_mean: dict = field(default_factory=dict)      # condition -> {pair: degrees}
    per_pair_log_mean: dict = field(default_factory=dict)  # condition -> {pair: mean log degrees}
    condition_mean: dict = field(default_factory=dict)
    ci95: dict = field(default_factory=dict)
    relative_improvement: dict = field(default_factory=dict)
    tests: dict = field(default_factory=dict)

    @property
    def conditions(self) -> list[str]:
        order = [c.value for c in Condition]
        return sorted(self.condition_mean, key=lambda c: order.index(c) if c in order else len(order))

    @property
    def pairs(self) -> list[str]:
        return sorted({p for p, _ in self.per_frame})


def bootstrap_ci(values, seed: int, n_resamples: int = N_BOOTSTRAP, level: float = 0.95) -> tuple[float, float]:
    """Percentile interval of the mean, resampling ``values`` with replacement."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if n == 0:
        raise ValueError("bootstrap needs at least one value")
    rng = Rng(seed)
    idx = np.array([[rng.integers(n) for _ in range(n)] for _ in range(n_resamples)])
    means = v[idx].mean(axis=1)
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(means, [tail, 100 - tail])
    return float(lo), float(hi)


def aggregate(errors: dict, seed: int = 0, oracle: str = "ground_truth", baseline: str = "Baseline",
              n_resamples: int = N_BOOTSTRAP) -> EvalReport:
    """Collapse ``{(pair, condition): frame errors}`` to per-pair and per-condition statistics."""
    report = EvalReport(oracle=oracle)
    for (pair, cond), err in sorted(errors.items()):
        err = np.asarray(err, dtype=np.float64)
        if err.size == 0 or np.any(err < 0) or np.any(err > 180 + 1e-9) or not np.all(np.isfinite(err)):
            raise ValueError(f"errors for {pair}/{cond} must be finite degrees in [0, 180]")
        report.per_frame[(pair, cond)] = err
        report.per_pair_mean.setdefault(cond, {})[pair] = float(err.mean())
        report.per_pair_log_mean.setdefault(cond, {})[pair] = float(np.log(np.maximum(err, LOG_FLOOR_DEG)).mean())
    for cond, by_pair in report.per_pair_mean.items():
        vals = [by_pair[p] for p in sorted(by_pair)]
        report.condition_mean[cond] = float(np.mean(vals))
        report.ci95[cond] = bootstrap_ci(vals, derive_seed(seed, "bootstrap", cond), n_resamples)
    base = report.condition_mean.get(baseline)
    for cond, m in report.condition_mean.items():
        report.relative_improvement[cond] = (base - m) / base if base else None
    report.tests = compare_conditions(report, baseline)
    return report


def compare_conditions(report: EvalReport, baseline: str = "Baseline") -> dict:
    """Paired Wilcoxon of every condition against the baseline over shared pairs."""
    out = {}
    base = report.per_pair_log_mean.get(baseline)
    if base is None:
        return out
    for cond, by_pair in report.per_pair_log_mean.items():
        if cond == baseline:
            continue
        pairs = sorted(set(base) & set(by_pair))
        res = wilcoxon_signed_rank([by_pair[p] for p in pairs], [base[p] for p in pairs])
        out[cond] = {"test": "wilcoxon_signed_rank", "pairs": len(pairs), "statistic": res.statistic,
                     "p_value": res.p_value, "method": res.method}
    return out


# emission


def per_frame_csv(reports: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("oracle", "pair", "condition", "frame", "error_deg"))
    for rep in reports:
        for (pair, cond), err in sorted(rep.per_frame.items()):
            for i, e in enumerate(err):
                w.writerow((rep.oracle, pair, cond, i, repr(float(e))))
    return buf.getvalue()


def report_json(reports: list, extra: dict | None = None) -> str:
    body = {"note": HEADER_NOTE, "reports": []}
    for rep in reports:
        body["reports"].append({
            "oracle": rep.oracle,
            "pairs": rep.pairs,
            "conditions": {c: {
                "mean_deg": rep.condition_mean[c],
                "ci95_deg": list(rep.ci95[c]),
                "relative_improvement": rep.relative_improvement.get(c),
                "per_pair_mean_deg": rep.per_pair_mean[c],
                "per_pair_log_mean": rep.per_pair_log_mean[c],
                "test_vs_baseline": rep.tests.get(c),
            } for c in rep.conditions},
        })
    if extra:
        body.update(extra)
    return json.dumps(body, indent=1, sort_keys=True) + "\n"


def report_markdown(reports: list, title: str = "Gaze reconstruction error") -> str:
    lines = [f"# {title}", "", f"> {HEADER_NOTE}", ""]
    for rep in reports:
        lines += [f"## Oracle: {rep.oracle}", "", f"{len(rep.pairs)} pairs.", "",
                  "| Condition | Mean error (deg) | 95% CI | Reduction vs Baseline | Wilcoxon p |",
                  "|---|---|---|---|---|"]
        for c in rep.conditions:
            lo, hi = rep.ci95[c]
            imp = rep.relative_improvement.get(c)
            test = rep.tests.get(c)
            imp_s = "-" if imp is None or c == "Baseline" else f"{100 * imp:.1f}%"
            p_s = "-" if test is None else f"{test['p_value']:.4g}"
            lines.append(f"| {c} | {rep.condition_mean[c]:.3f} | [{lo:.3f}, {hi:.3f}] | {imp_s} | {p_s} |")
        lines.append("")
    return "\n".join(lines)


# plot data for an external plotter


def error_curves_csv(reports: list) -> str:
    """Per-condition error at each held-out frame position, averaged over pairs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("oracle", "condition", "frame", "mean_error_deg", "pairs"))
    for rep in reports:
        for cond in rep.conditions:
            rows = [err for (p, c), err in sorted(rep.per_frame.items()) if c == cond]
            n = min(len(r) for r in rows)
            stacked = np.stack([r[:n] for r in rows])
            for f, v in enumerate(stacked.mean(axis=0)):
                w.writerow((rep.oracle, cond, f, repr(float(v)), len(rows)))
    return buf.getvalue()


def boxplot_csv(reports: list) -> str:
    """Five-number summaries of the per-pair mean errors, one box per condition."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("oracle", "condition", "n", "min", "q1", "median", "q3", "max", "mean"))
    for rep in reports:
        for cond in rep.conditions:
            v = np.array([rep.per_pair_mean[cond][p] for p in sorted(rep.per_pair_mean[cond])])
            q = np.percentile(v, [0, 25, 50, 75, 100])
            w.writerow((rep.oracle, cond, len(v), *(repr(float(x)) for x in q), repr(float(v.mean()))))
    return buf.getvalue()


def loss_curves_csv(histories: dict) -> str:
    """Mean logged total loss per (condition, phase, iteration) over pairs.

    ``histories`` maps (pair, condition) to rows of (phase, iteration, total, ...).
    """
    acc: dict = {}
    for (_, cond), rows in sorted(histories.items()):
        for r in rows:
            acc.setdefault((cond, int(r[0]), int(r[1])), []).append(float(r[2]))
    order = [c.value for c in Condition]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("condition", "phase", "iteration", "mean_total_loss", "runs"))
    for (cond, ph, it), vals in sorted(acc.items(), key=lambda kv: (order.index(kv[0][0]) if kv[0][0] in order
                                                                    else len(order), kv[0])):
        w.writerow((cond, ph, it, repr(float(np.mean(vals))), len(vals)))
    return buf.getvalue()


def write_reports(reports: list, out_dir, extra: dict | None = None, histories: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "frame_errors.csv", per_frame_csv(reports))
    write_atomic(out / "report.json", report_json(reports, extra))
    write_atomic(out / "report.md", report_markdown(reports))
    write_atomic(out / "error_curves.csv", error_curves_csv(reports))
    write_atomic(out / "boxplot.csv", boxplot_csv(reports))
    if histories:
        write_atomic(out / "loss_curves.csv", loss_curves_csv(histories))
    return out
