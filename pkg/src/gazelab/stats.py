"""Survey analytics: uncanniness scores, detection coding, rank tests and attribute prevalence.

Rank tests work on doubled average ranks so that tied ranks stay integral and
the exact null distributions can be counted without rounding.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import chi2

CONDITIONS = ("Real", "DFL", "DFL_em", "DFL_Gaze")
ATTRIBUTES = ("forehead_hair", "eyes", "eyebrows", "nose", "mouth", "cheeks", "chin_jaw", "other", "none")
ADJECTIVE_PAIRS = ("real_synthetic", "agreeable_repulsive", "unremarkable_unusual", "plain_weird", "ordinary_uncanny")
PERCEIVED = ("real", "deepfake")

WILCOXON_EXACT_MAX = 25
MWU_EXACT_MAX = 16
Z95 = 1.959963984540054

LABELS = {
    "Real": "Real", "DFL": "DFL", "DFL_em": "DFL+em", "DFL_Gaze": "DFL+Gaze",
    "forehead_hair": "Forehead/Hair", "eyes": "Eyes", "eyebrows": "Eyebrows", "nose": "Nose",
    "mouth": "Mouth", "cheeks": "Cheeks", "chin_jaw": "Chin/Jaw", "other": "Other", "none": "None",
    "real_synthetic": "Real/Synthetic", "agreeable_repulsive": "Agreeable/Repulsive",
    "unremarkable_unusual": "Unremarkable/Unusual", "plain_weird": "Plain/Weird",
    "ordinary_uncanny": "Ordinary/Uncanny",
}


class SurveyFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SurveyResponse:
    participant_id: str
    stimulus_id: str
    condition: str
    confidence: float
    attributes: frozenset
    likert: tuple

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise SurveyFormatError(f"unknown condition {self.condition!r}; expected one of {CONDITIONS}")
        if not 0.0 <= self.confidence <= 100.0:
            raise SurveyFormatError(f"confidence {self.confidence} outside [0, 100]")
        unknown = set(self.attributes) - set(ATTRIBUTES)
        if unknown:
            raise SurveyFormatError(f"unknown attributes {sorted(unknown)}")
        if "none" in self.attributes and len(self.attributes) > 1:
            raise SurveyFormatError("'none' cannot be combined with other attributes")
        if len(self.likert) != 5 or any(int(v) != v or not 1 <= v <= 7 for v in self.likert):
            raise SurveyFormatError(f"likert must be 5 integers in 1..7, got {self.likert}")


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n: int
    method: str
    note: str = ""


@dataclass(frozen=True)
class DetectionCoding:
    codes: tuple            # 0, 1, or None for an excluded response
    n_coded: int
    n_excluded: int
    likelihood: float | None

    @property
    def codable(self) -> bool:
        return self.n_coded > 0

    def describe(self) -> str:
        if not self.codable:
            return "no codable responses"
        return f"{100 * self.likelihood:.1f}%"


def uncanniness_score(likert) -> float:
    values = [float(v) for v in likert]
    if len(values) != 5 or not all(1 <= v <= 7 for v in values):
        raise ValueError(f"expected five Likert values in 1..7, got {likert}")
    return sum(values) / 5.0


def code_detection(confidences) -> DetectionCoding:
    """Below 50 codes as 0 (real), above 50 as 1 (deepfake); exactly 50 is left uncoded."""
    codes = []
    for c in confidences:
        c = float(c)
        if not 0.0 <= c <= 100.0:
            raise ValueError(f"confidence {c} outside [0, 100]")
        codes.append(None if c == 50.0 else int(c > 50.0))
    coded = [c for c in codes if c is not None]
    likelihood = sum(coded) / len(coded) if coded else None
    return DetectionCoding(tuple(codes), len(coded), len(codes) - len(coded), likelihood)


# ranks


def average_ranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _tie_sizes(values) -> list[int]:
    return [c for c in Counter(np.asarray(values, dtype=np.float64).tolist()).values() if c > 1]


def _normal_two_sided(z: float) -> float:
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


def _subset_sum_counts(weights: list[int], size: int | None = None) -> np.ndarray:
    """Counts of subsets by integer weight sum; restricted to ``size`` elements if given."""
    total = sum(weights)
    if size is None:
        dist = np.zeros(total + 1, dtype=np.int64)
        dist[0] = 1
        for w in weights:
            dist[w:] = dist[w:] + dist[:total + 1 - w]
        return dist
    table = np.zeros((size + 1, total + 1), dtype=np.int64)
    table[0, 0] = 1
    for w in weights:
        for k in range(size, 0, -1):
            table[k, w:] += table[k - 1, :total + 1 - w]
    return table[size]


# tests


def wilcoxon_signed_rank(x, y=None, paired: bool = True) -> TestResult:
    """Two-sided signed-rank test on ``x - y`` (or on ``x`` alone).

    Zero differences are dropped; ``statistic`` is ``min(W+, W-)``. Exact for up
    to 25 non-zero differences, otherwise normal with continuity and tie
    corrections.
    """
    if not paired:
        raise ValueError("the signed-rank test needs paired samples; use mann_whitney_u for independent groups")
    d = np.asarray(x, dtype=np.float64)
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != d.shape:
            raise ValueError(f"paired samples differ in length: {d.shape} vs {y.shape}")
        d = d - y
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite values in signed-rank input")
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return TestResult(0.0, 1.0, 0, "degenerate", "no non-zero differences")
    r2 = np.rint(2 * average_ranks(np.abs(d))).astype(np.int64)
    w_plus2 = int(r2[d > 0].sum())
    t2 = int(r2.sum())
    w_plus, w_minus = w_plus2 / 2.0, (t2 - w_plus2) / 2.0
    stat = min(w_plus, w_minus)
    if n <= WILCOXON_EXACT_MAX:
        dist = _subset_sum_counts(r2.tolist())
        dev = abs(2 * w_plus2 - t2)
        sums = np.arange(len(dist))
        extreme = int(dist[np.abs(2 * sums - t2) >= dev].sum())
        return TestResult(stat, min(1.0, extreme / 2.0 ** n), n, "exact")
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - sum(t ** 3 - t for t in _tie_sizes(np.abs(d))) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return TestResult(stat, _normal_two_sided(z), n, "normal")


def mann_whitney_u(a, b) -> TestResult:
    """Two-sided rank-sum test; ``statistic`` is ``min(U_a, U_b)``.

    Exact (permutation over group labels, ties kept) when the pooled size is
    at most 16, otherwise the tie-corrected normal approximation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both groups need at least one observation")
    na, nb = len(a), len(b)
    big_n = na + nb
    pooled = np.concatenate([a, b])
    r2 = np.rint(2 * average_ranks(pooled)).astype(np.int64)
    s2 = int(r2[:na].sum())
    u_a = s2 / 2.0 - na * (na + 1) / 2.0
    stat = min(u_a, na * nb - u_a)
    centre2 = na * (big_n + 1)   # expected doubled rank sum of group a
    if big_n <= MWU_EXACT_MAX:
        counts = _subset_sum_counts(r2.tolist(), na)
        sums = np.arange(len(counts))
        extreme = int(counts[np.abs(sums - centre2) >= abs(s2 - centre2)].sum())
        return TestResult(stat, min(1.0, extreme / math.comb(big_n, na)), big_n, "exact")
    ties = sum(t ** 3 - t for t in _tie_sizes(pooled))
    var = na * nb / 12.0 * ((big_n + 1) - ties / (big_n * (big_n - 1)))
    if var <= 0:
        return TestResult(stat, 1.0, big_n, "degenerate", "all observations tied")
    z = max(abs(u_a - na * nb / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return TestResult(stat, _normal_two_sided(z), big_n, "normal")


def kruskal_wallis(groups) -> TestResult:
    """Tie-corrected H with a chi-square(k - 1) p-value; all-tied input gives H = 0."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2:
        raise ValueError("Kruskal-Wallis needs at least two groups")
    if any(len(g) == 0 for g in groups):
        raise ValueError("every Kruskal-Wallis group needs at least one observation")
    pooled = np.concatenate(groups)
    big_n = len(pooled)
    ranks = average_ranks(pooled)
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start:start + len(g)].sum()
        h += r * r / len(g)
        start += len(g)
    h = 12.0 / (big_n * (big_n + 1)) * h - 3.0 * (big_n + 1)
    correction = 1.0 - sum(t ** 3 - t for t in _tie_sizes(pooled)) / (big_n ** 3 - big_n)
    if correction <= 0:
        return TestResult(0.0, 1.0, big_n, "degenerate", "all observations tied")
    h = max(h / correction, 0.0)
    return TestResult(h, float(chi2.sf(h, len(groups) - 1)), big_n, "chi2")


# prevalence


@dataclass(frozen=True)
class PrevalenceCell:
    attribute: str
    condition: str
    perceived: str          # "real", "deepfake" or "total"
    n: int
    count: int

    @property
    def fraction(self) -> float | None:
        return self.count / self.n if self.n else None

    @property
    def ci95(self) -> tuple[float, float] | None:
        p = self.fraction
        if p is None:
            return None
        half = Z95 * math.sqrt(p * (1 - p) / self.n)
        return max(0.0, p - half), min(1.0, p + half)


def attribute_prevalence(responses: list, coded) -> list:
    """Selection fraction of every attribute per stimulus condition and perceived class.

    ``coded`` holds one code per response (0 real, 1 deepfake, None
    uncoded). Uncoded responses are left out of every cell, including totals.
    """
    coded = list(coded)
    if len(coded) != len(responses):
        raise ValueError(f"{len(coded)} codes for {len(responses)} responses")
    cells = []
    for attr in ATTRIBUTES:
        for cond in CONDITIONS:
            rows = [(r, c) for r, c in zip(responses, coded) if r.condition == cond and c is not None]
            for perceived, keep in (("real", {0}), ("deepfake", {1}), ("total", {0, 1})):
                sel = [r for r, c in rows if c in keep]
                cells.append(PrevalenceCell(attr, cond, perceived, len(sel), sum(attr in r.attributes for r in sel)))
    return cells


# CSV ingestion


CSV_COLUMNS = ("participant_id", "stimulus_id", "condition", "confidence", "attributes") + ADJECTIVE_PAIRS


def read_survey_csv(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"survey CSV not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SurveyFormatError(f"{path}: empty file, expected a header row")
        missing = [c for c in CSV_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise SurveyFormatError(f"{path}: missing columns {missing}")
        out = []
        for line, row in enumerate(reader, start=2):
            try:
                attrs = frozenset(t.strip() for t in row["attributes"].split(";") if t.strip())
                out.append(SurveyResponse(row["participant_id"], row["stimulus_id"], row["condition"],
                                          float(row["confidence"]), attrs,
                                          tuple(int(row[k]) for k in ADJECTIVE_PAIRS)))
            except (ValueError, TypeError) as exc:
                raise SurveyFormatError(f"{path}:{line}: {exc}") from exc
    return out


def write_survey_csv(path, responses: list) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in responses:
            attrs = ";".join(a for a in ATTRIBUTES if a in r.attributes)
            conf = int(r.confidence) if float(r.confidence).is_integer() else r.confidence
            w.writerow([r.participant_id, r.stimulus_id, r.condition, conf, attrs, *r.likert])


# analysis bundle


@dataclass
class SurveyAnalysis:
    tables: dict = field(default_factory=dict)      # file name -> CSV text
    markdown: str = ""


def _fmt(x, digits: int = 4) -> str:
    if x is None:
        return "NA"
    return f"{x:.{digits}f}"


def _pct(x) -> str:
    return "NA" if x is None else f"{100 * x:.2f}%"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def analyze_survey(responses: list) -> SurveyAnalysis:
    """Every table and test the survey report needs, as CSV text plus one markdown summary."""
    coding = code_detection([r.confidence for r in responses])
    codes = coding.codes
    out = SurveyAnalysis()

    # detection likelihood per condition and per stimulus
    det_rows, by_cond = [], {}
    for cond in CONDITIONS:
        c = code_detection([r.confidence for r in responses if r.condition == cond])
        by_cond[cond] = c
        det_rows.append([cond, c.n_coded + c.n_excluded, c.n_coded, c.n_excluded, _pct(c.likelihood)])
    out.tables["detection.csv"] = _csv_text(("condition", "responses", "coded", "excluded_at_50", "likelihood"),
                                            det_rows)
    stim_rows = []
    for stim in sorted({r.stimulus_id for r in responses}):
        rs = [r for r in responses if r.stimulus_id == stim]
        c = code_detection([r.confidence for r in rs])
        stim_rows.append([stim, rs[0].condition, " ".join(f"{r.confidence:g}" for r in rs),
                          " ".join("-" if k is None else str(k) for k in c.codes), c.describe()])
    out.tables["detection_by_stimulus.csv"] = _csv_text(
        ("stimulus_id", "condition", "confidences", "codes", "likelihood"), stim_rows)

    # prevalence
    cells = attribute_prevalence(responses, codes)
    prev_rows = []
    for cell in cells:
        ci = cell.ci95
        prev_rows.append([cell.attribute, cell.condition, cell.perceived, cell.n, cell.count, _pct(cell.fraction),
                          _pct(ci[0]) if ci else "NA", _pct(ci[1]) if ci else "NA"])
    out.tables["prevalence.csv"] = _csv_text(
        ("attribute", "condition", "perceived", "n", "count", "prevalence", "ci95_lo", "ci95_hi"), prev_rows)

    # uncanniness per adjective pair
    unc_rows = []
    for j, pair in enumerate(ADJECTIVE_PAIRS + ("average",)):
        row = [pair]
        for cond in CONDITIONS:
            rs = [r for r in responses if r.condition == cond]
            vals = [uncanniness_score(r.likert) if pair == "average" else r.likert[j] for r in rs]
            m, s = _mean_sd(vals) if vals else (None, None)
            row += [_fmt(m, 2), _fmt(s, 2)]
        unc_rows.append(row)
    header = ["adjective_pair"] + [f"{c}_{s}" for c in CONDITIONS for s in ("mean", "sd")]
    out.tables["uncanniness.csv"] = _csv_text(header, unc_rows)

    # tests
    tests = []
    deepfake_eyes = {cond: [int("eyes" in r.attributes) for r, k in zip(responses, codes)
                            if r.condition == cond and k == 1] for cond in CONDITIONS}
    if all(deepfake_eyes.values()):
        kw = kruskal_wallis([deepfake_eyes[c] for c in CONDITIONS])
        tests.append(["kruskal_wallis", "eyes|perceived_deepfake", "all", kw.statistic, kw.p_value, kw.method])
    cond_codes = {cond: [k for r, k in zip(responses, codes) if r.condition == cond and k is not None]
                  for cond in CONDITIONS}
    scores = {cond: [uncanniness_score(r.likert) for r in responses if r.condition == cond] for cond in CONDITIONS}
    for i, ca in enumerate(CONDITIONS):
        for cb in CONDITIONS[i + 1:]:
            for name, data in (("detection", cond_codes), ("eyes|perceived_deepfake", deepfake_eyes),
                               ("uncanniness", scores)):
                if data[ca] and data[cb]:
                    t = mann_whitney_u(data[ca], data[cb])
                    tests.append(["mann_whitney_u", name, f"{ca} vs {cb}", t.statistic, t.p_value, t.method])
    by_participant = {}
    for r in responses:
        by_participant.setdefault(r.participant_id, {"real": [], "swap": []})[
            "real" if r.condition == "Real" else "swap"].append(uncanniness_score(r.likert))
    paired = [(np.mean(v["real"]), np.mean(v["swap"])) for v in by_participant.values() if v["real"] and v["swap"]]
    if paired:
        t = wilcoxon_signed_rank([p[1] for p in paired], [p[0] for p in paired])
        tests.append(["wilcoxon_signed_rank", "uncanniness per participant", "face swaps vs Real",
                      t.statistic, t.p_value, t.method])
    out.tables["tests.csv"] = _csv_text(("test", "measure", "groups", "statistic", "p_value", "method"),
                                        [r[:3] + [repr(float(r[3])), repr(float(r[4])), r[5]] for r in tests])
    out.markdown = _survey_markdown(responses, by_cond, stim_rows, cells, unc_rows, tests)
    return out


def _survey_markdown(responses, by_cond, stim_rows, cells, unc_rows, tests) -> str:
    lines = ["# Survey analysis", "", f"{len(responses)} responses from "
             f"{len({r.participant_id for r in responses})} participants on "
             f"{len({r.stimulus_id for r in responses})} stimuli.", "",
             "Confidence below 50 is coded real (0), above 50 deepfake (1); responses at exactly 50 are "
             "left uncoded and counted separately.", "", "## Deepfake detection likelihood", "",
             "| Condition | Responses | Coded | At 50 | Likelihood |", "|---|---|---|---|---|"]
    for cond in CONDITIONS:
        c = by_cond[cond]
        lines.append(f"| {LABELS[cond]} | {c.n_coded + c.n_excluded} | {c.n_coded} | {c.n_excluded} | {c.describe()} |")
    lines += ["", "### Per stimulus", "", "| Stimulus | Condition | Confidences | Codes | Likelihood |",
              "|---|---|---|---|---|"]
    lines += [f"| {s} | {LABELS[c]} | {conf} | {codes} | {lik} |" for s, c, conf, codes, lik in stim_rows]
    lines += ["", "## Uncanniness (mean ± SD, 1 = normal, 7 = uncanny)", "",
              "| Adjective pair | " + " | ".join(LABELS[c] for c in CONDITIONS) + " |",
              "|---" * (len(CONDITIONS) + 1) + "|"]
    for row in unc_rows:
        name = "**Average**" if row[0] == "average" else LABELS[row[0]]
        vals = [f"{row[1 + 2 * i]} ± {row[2 + 2 * i]}" for i in range(len(CONDITIONS))]
        lines.append(f"| {name} | " + " | ".join(vals) + " |")
    lines += ["", "## Attributes aiding the decision", "",
              "Columns give the perceived class; cells where the perception matches the stimulus are marked *.", "",
              "| Attribute | Stimuli | Real | Deepfake | Total |", "|---|---|---|---|---|"]
    index = {(c.attribute, c.condition, c.perceived): c for c in cells}
    for attr in ATTRIBUTES:
        for cond in CONDITIONS:
            correct = "real" if cond == "Real" else "deepfake"
            vals = []
            for p in ("real", "deepfake", "total"):
                v = _pct(index[(attr, cond, p)].fraction)
                vals.append(f"{v}*" if p == correct else v)
            lines.append(f"| {LABELS[attr] if cond == CONDITIONS[0] else ''} | {LABELS[cond]} | " + " | ".join(vals) + " |")
    lines += ["", "## Tests", "", "| Test | Measure | Groups | Statistic | p | Method |", "|---|---|---|---|---|---|"]
    lines += [f"| {t[0]} | {t[1]} | {t[2]} | {t[3]:.4f} | {t[4]:.4g} | {t[5]} |" for t in tests]
    return "\n".join(lines) + "\n"


def write_analysis(analysis: SurveyAnalysis, out_dir) -> Path:
    from .tensorcore.params import write_atomic

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in analysis.tables.items():
        write_atomic(out / name, text)
    write_atomic(out / "report.md", analysis.markdown)
    return out


def fixture_path() -> Path:
    return Path(__file__).parent / "data" / "survey_fixture.csv"


def synthesize_fixture(seed: int = 7) -> list:
    """The bundled 200-row survey: 40 stimuli (10 per condition), 20 participants, 5 ratings per stimulus.

    Stimulus ``S00`` carries the worked coding example: confidences
    20, 80, 60 plus two responses at exactly 50.
    """
    from .rng import Rng

    rng = Rng(seed)
    fake_rate = {"Real": 0.25, "DFL": 0.70, "DFL_em": 0.66, "DFL_Gaze": 0.70}
    eye_rate = {"Real": 0.60, "DFL": 0.72, "DFL_em": 0.66, "DFL_Gaze": 0.58}
    other_rate = {"forehead_hair": 0.38, "eyebrows": 0.22, "nose": 0.15, "mouth": 0.55, "cheeks": 0.25,
                  "chin_jaw": 0.25, "other": 0.15}
    likert_mean = {"Real": 2.4, "DFL": 4.1, "DFL_em": 3.85, "DFL_Gaze": 4.0}
    responses = []
    for s in range(40):
        cond = ("DFL", "Real", "DFL_em", "DFL_Gaze")[s % 4]
        stim = f"S{s:02d}"
        for j in range(5):
            pid = f"P{(5 * s + j) % 20:02d}"
            if s == 0:
                conf = (20, 80, 60, 50, 50)[j]
            else:
                says_fake = rng.random() < fake_rate[cond]
                conf = 50 if rng.random() < 0.04 else (rng.integers(45) + 55 if says_fake else rng.integers(45) + 1)
            attrs = set()
            if rng.random() < eye_rate[cond]:
                attrs.add("eyes")
            for a, p in other_rate.items():
                if rng.random() < p:
                    attrs.add(a)
            if not attrs:
                attrs = {"none"}
            likert = tuple(int(min(7, max(1, round(likert_mean[cond] + 1.4 * rng.normal())))) for _ in range(5))
            responses.append(SurveyResponse(pid, stim, cond, float(conf), frozenset(attrs), likert))
    return responses
