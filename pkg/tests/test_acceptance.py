"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed in the terminal summary."""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.stats as ss

import gazelab.tensorcore as tc
from gazelab import stats
from gazelab.cli import main
from gazelab.config import RunConfig, load_config
from gazelab.gazeexpert import GazeExpert
from gazelab.losses import (
    LossWeights,
    angle_between,
    core_loss,
    dssim,
    em_loss,
    gaze_angle_error,
    gaze_loss,
    mse,
    ssim,
)
from gazelab.swapnet import ArchConfig, LiaeModel, TrainSchedule, train
from gazelab.synthgen import make_dataset, perturb_identity, sample_identity
from gazelab.rng import Rng
from gazelab.tensorcore import Tensor

from helpers import analytic_grad, gradcheck, numeric_grad, scaled_err
from test_losses import _ConstantGaze, gaussian_window, loop_em, loop_mse, loop_ssim, mp_angle, tiny_expert
from test_stats import brute_mwu, brute_wilcoxon, independent_h

RESULTS: dict = {}
BENCH = Path(__file__).parent / "data" / "benchmark"
GOLDEN = Path(__file__).parent / "golden" / "analyze"


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    assert ok, detail


def test_criterion_1_gradient_fidelity():
    t0 = time.time()
    rng = np.random.default_rng(11)
    y = rng.random((1, 3, 8, 8))
    h0 = np.clip(y + 0.3 * rng.normal(size=y.shape), 0.05, 0.95)
    m, mh, eyes = rng.random((3, 1, 1, 8, 8))
    expert = tiny_expert(1)
    w = LossWeights()
    errs = {
        "dssim": gradcheck(lambda t: dssim(y, t), h0, norm="max"),
        "mse": gradcheck(lambda t: mse(y, t), h0, norm="max"),
        "core": gradcheck(lambda t: core_loss(y, t, m, mh, w), h0, norm="max"),
        "em": gradcheck(lambda t: em_loss(y, t, np.ones_like(m), w), h0, norm="max"),
        "gaze_attached": gradcheck(lambda t: gaze_loss(y, t, eyes, expert, w), h0, norm="max"),
    }
    frozen = _ConstantGaze(expert.predict(h0))
    a = analytic_grad(lambda t: gaze_loss(y, t, eyes, expert, LossWeights(theta_detached=True)), h0)
    n = numeric_grad(lambda v: gaze_loss(y, Tensor(v), eyes, frozen, w, target_gaze=expert.predict(y)).item(), h0)
    errs["gaze_detached"] = scaled_err(a, n)
    elapsed = time.time() - t0
    worst = max(errs, key=errs.get)
    record(1, errs[worst] < 1e-4 and elapsed < 10,
           f"max err / max |grad| {errs[worst]:.2e} ({worst}), {elapsed:.1f} s")


def test_criterion_2_loss_oracles():
    worst = 0.0
    w = LossWeights()
    for case in range(20):
        rng = np.random.default_rng(500 + case)
        size = (8, 16)[case % 2]
        y = rng.random((1, 3, size, size))
        h = np.clip(y + 0.2 * rng.normal(size=y.shape), 0, 1)
        mask = rng.random((1, 1, size, size))
        window = gaussian_window() if size >= 16 else np.full((5, 5), 1 / 25)
        s_ref = loop_ssim(y, h, window)
        worst = max(worst, abs(ssim(y, h).item() - s_ref), abs(dssim(y, h).item() - (1 - s_ref) / 2),
                    abs(mse(y, h).item() - loop_mse(y, h)), abs(em_loss(y, h, mask, w).item() - loop_em(y, h, mask, 300.0)))
    y = np.random.default_rng(0).random((1, 3, 16, 16))
    self_sim = abs(ssim(y, y).item() - 1.0)
    gate = gaze_loss(y, y, np.ones((1, 1, 16, 16)), tiny_expert(2), w).item()
    record(2, worst < 1e-12 and self_sim < 1e-9 and gate == 0.0,
           f"max deviation {worst:.1e}, |SSIM(Y,Y)-1| {self_sim:.1e}, gated loss {gate}")


def test_criterion_3_angle_geometry():
    rng = np.random.default_rng(12)
    mu1, mu2 = rng.uniform(-math.pi, math.pi, (2, 1000))
    phi1, phi2 = rng.uniform(0, math.pi / 2, (2, 1000))
    with tc.no_grad():
        got = angle_between(mu1, phi1, mu2, phi2).data
    ref = np.array([mp_angle(*map(float, v)) for v in zip(mu1, phi1, mu2, phi2)])
    worst = float(np.max(np.abs(got - ref)))
    same = max(gaze_angle_error((a, b), (a, b)) for a, b in zip(mu1[:100], phi1[:100]))
    ortho = abs(gaze_angle_error((0.0, 0.0), (0.0, math.pi / 2)) - math.pi / 2)
    record(3, worst < 1e-9 and same == 0.0 and ortho < 1e-12,
           f"max |err| {worst:.1e} rad, theta(g,g) max {same}, orthogonal |err| {ortho:.1e}")


def test_criterion_4_statistical_oracles():
    rng = np.random.default_rng(13)
    worst_w = worst_u = worst_h = 0.0
    for trial in range(200):
        tied = trial % 2 == 0
        draw = (lambda k: rng.integers(-3, 4, k).astype(float)) if tied else (lambda k: rng.normal(size=k))
        d = draw(int(rng.integers(1, 9)))
        if np.any(d != 0):
            worst_w = max(worst_w, abs(stats.wilcoxon_signed_rank(d).p_value - brute_wilcoxon(d)))
        a, b = draw(int(rng.integers(1, 9))), draw(int(rng.integers(1, 9)))
        worst_u = max(worst_u, abs(stats.mann_whitney_u(a, b).p_value - brute_mwu(a, b)))
        if trial < 50:
            groups = [draw(int(rng.integers(2, 7))) for _ in range(3)]
            if len(set(np.concatenate(groups).tolist())) > 1:
                worst_h = max(worst_h, abs(stats.kruskal_wallis(groups).statistic - independent_h(groups)))
    record(4, worst_w < 1e-12 and worst_u < 1e-12 and worst_h < 1e-10,
           f"Wilcoxon {worst_w:.1e}, Mann-Whitney {worst_u:.1e}, Kruskal-Wallis H {worst_h:.1e}")


def _bench_report() -> dict:
    path = BENCH / "report.json"
    if not path.exists():
        pytest.fail(f"benchmark results missing: {path}")
    return json.loads(path.read_text())


def test_criterion_5_end_to_end_effect():
    cfg = load_config(BENCH / "config.json")
    default = RunConfig()
    assert (cfg.benchmark, cfg.schedule, cfg.weights, cfg.arch, cfg.expert) == (
        default.benchmark, default.schedule, default.weights, default.arch, default.expert)
    report = next(r for r in _bench_report()["reports"] if r["oracle"] == "ground_truth")
    conds = report["conditions"]
    assert len(report["pairs"]) == 8
    # recompute from the per-frame errors rather than trusting the summary
    per_pair = {}
    for line in (BENCH / "frame_errors.csv").read_text().splitlines()[1:]:
        oracle, pair, cond, _, err = line.split(",")
        if oracle == "ground_truth":
            per_pair.setdefault(cond, {}).setdefault(pair, []).append(float(err))
    mean = {c: np.mean([np.mean(v) for v in by.values()]) for c, by in per_pair.items()}
    for c in mean:
        assert mean[c] == pytest.approx(conds[c]["mean_deg"], rel=1e-12)
    pairs = sorted(per_pair["Baseline"])
    logm = {c: np.array([np.mean(np.log(np.maximum(per_pair[c][p], 1e-3))) for p in pairs]) for c in per_pair}
    p_gaze = ss.wilcoxon(logm["Gaze"], logm["Baseline"], method="exact").pvalue
    lower = {c: mean[c] < mean["Baseline"] for c in ("Em", "Gaze", "GazeFinetune", "EmGaze")}
    reduction = (mean["Baseline"] - mean["Gaze"]) / mean["Baseline"]
    detail = (", ".join(f"{c} {mean[c]:.3f}" for c in ("Baseline", "Em", "Gaze", "GazeFinetune", "EmGaze"))
              + f" deg; Gaze reduction {100 * reduction:.1f}%, Wilcoxon p {p_gaze:.4f}")
    record(5, all(lower.values()) and reduction >= 0.10 and p_gaze < 0.05, detail)


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("GZLB_RUN_BENCHMARK"), reason="set GZLB_RUN_BENCHMARK=1 to rerun (hours)")
def test_benchmark_rerun_matches_committed(tmp_path):
    jobs = str(os.cpu_count() or 1)
    assert main(["experiment", "--config", str(BENCH / "config.json"), "--jobs", jobs, "--out", str(tmp_path)]) == 0
    for name in ("report.json", "frame_errors.csv"):
        fresh = json.loads((tmp_path / "report" / name).read_text()) if name.endswith(".json") else None
        if fresh is not None:
            fresh.pop("stamp", None)
            kept = _bench_report()
            kept.pop("stamp", None)
            assert fresh == kept
        else:
            assert (tmp_path / "report" / name).read_bytes() == (BENCH / name).read_bytes()


def test_criterion_6_architectural_invariants():
    rng = Rng(21)
    a = sample_identity(rng, 1)
    data = make_dataset(0, 6, 32, seed=2, identities=[a, perturb_identity(a, rng, 0.3, 2)])
    expert = GazeExpert(input_size=32, channels=(4, 4, 4), hidden=8, epochs=1).fit(data.images, data.gaze).freeze()
    before = expert.digest()
    arch = ArchConfig(image_size=32, latent_dim=16, enc_channels=(4, 4, 4), dec_channels=(4, 4, 4))
    model, _ = train(LiaeModel(arch, seed=1), data, data, TrainSchedule(4, 4, 2, condition="EmGaze"), expert=expert)
    y_char = data.for_identity(2).images
    with tc.no_grad():
        swap_img, swap_mask = model.swap(y_char)
        char_img, char_mask = model.reconstruct_char(y_char)
    identical = np.array_equal(swap_img.data, char_img.data) and np.array_equal(swap_mask.data, char_mask.data)
    model.calls.clear()
    model.swap_images(data.images)
    ib_calls = model.calls["I_B"]
    stable = expert.digest() == before
    record(6, identical and ib_calls == 0 and stable,
           f"bit-identical {identical}, I_B calls on swap {ib_calls}, expert hash stable {stable}")


def test_criterion_7_determinism(tiny_runs):
    a, b = tiny_runs["outs"]
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    differing = [str(f) for f in files_a if (a / f).read_bytes() != (b / f).read_bytes()]
    n_ck = sum(1 for f in files_a if f.name == "checkpoint")
    record(7, files_a == files_b and not differing and n_ck > 0,
           f"{len(files_a)} files compared ({n_ck} checkpoints), {len(differing)} differ")


def test_criterion_8_survey_analytics(tmp_path):
    rc = main(["analyze", str(stats.fixture_path()), "--out", str(tmp_path)])
    names = sorted(p.name for p in GOLDEN.iterdir())
    same = rc == 0 and all((tmp_path / n).read_bytes() == (GOLDEN / n).read_bytes() for n in names)
    coding = stats.code_detection([20, 80, 60]).describe()
    cells = (tmp_path / "prevalence.csv").read_text().splitlines()[1:]
    expected_cells = len(stats.ATTRIBUTES) * len(stats.CONDITIONS) * 3
    in_report = "| 66.7% |" in (tmp_path / "report.md").read_text()
    record(8, same and coding == "66.7%" and len(cells) == expected_cells and in_report,
           f"golden match {same}, coding {coding}, {len(cells)} prevalence cells")
