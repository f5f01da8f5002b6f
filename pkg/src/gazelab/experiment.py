"""The condition matrix: benchmark construction, expert training, swap runs and their evaluation."""

from __future__ import annotations

import json
import multiprocessing as mp
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import RunConfig
from .gazeexpert import GazeExpert, angular_errors_deg
from .losses import Condition
from .rng import Rng, derive_seed
from .swapnet import LiaeModel, LossHistory, pretrain, pretrain_key, schedule_dict, train_pair, write_run
from .synthgen import SampleSet, make_dataset, perturb_identity, render_sequence, sample_identity
from .tensorcore.params import write_atomic

PAIR_ID_BASE = 100
CORPUS_ID_BASE = 1000
EXPERT_ID_BASE = 5000


@dataclass
class Pair:
    name: str
    orig_id: int
    char_id: int
    train: SampleSet     # frames of both identities
    test: SampleSet      # held-out frames of the original identity


@dataclass
class Benchmark:
    corpus: SampleSet
    pairs: list

    def pair(self, name: str) -> Pair:
        for p in self.pairs:
            if p.name == name:
                return p
        raise KeyError(f"unknown pair {name!r}; available: {[p.name for p in self.pairs]}")


def build_benchmark(config: RunConfig) -> Benchmark:
    """Look-alike couples for the pairs, plus a disjoint pretraining corpus."""
    b = config.benchmark
    seed = derive_seed(config.seed, "benchmark")
    rng = Rng(derive_seed(seed, "identities"))
    corpus_ids = [sample_identity(rng, CORPUS_ID_BASE + i) for i in range(b.corpus_identities)]
    corpus = make_dataset(len(corpus_ids), b.corpus_frames, b.image_size, seed, identities=corpus_ids)
    pairs = []
    for c in range(b.n_couples):
        first = sample_identity(rng, PAIR_ID_BASE + 2 * c)
        second = perturb_identity(first, rng, b.lookalike_radius, PAIR_ID_BASE + 2 * c + 1)
        table = {first.identity_id: first, second.identity_id: second}
        train_set = SampleSet.from_samples(
            render_sequence(first, b.pair_train_frames, b.image_size, seed)
            + render_sequence(second, b.pair_train_frames, b.image_size, seed), table)
        for orig, char in ((first, second), (second, first)):
            test = SampleSet.from_samples(
                render_sequence(orig, b.pair_test_frames, b.image_size, seed, start_frame=b.pair_train_frames),
                table)
            name = f"pair{len(pairs)}_{orig.identity_id}to{char.identity_id}"
            pairs.append(Pair(name, orig.identity_id, char.identity_id, train_set, test))
    return Benchmark(corpus, pairs)


def expert_data(config: RunConfig, role: str) -> tuple[SampleSet, SampleSet]:
    e = config.expert
    seed = derive_seed(config.seed, "expert-data", role)
    rng = Rng(derive_seed(seed, "identities"))
    n = e.train_identities + e.test_identities
    ids = [sample_identity(rng, EXPERT_ID_BASE + i) for i in range(n)]
    train = make_dataset(0, e.train_frames, config.benchmark.image_size, seed, identities=ids[:e.train_identities])
    test = make_dataset(0, e.test_frames, config.benchmark.image_size, seed, identities=ids[e.train_identities:])
    return train, test


def train_expert(config: RunConfig, role: str) -> tuple[GazeExpert, float]:
    """Fit and freeze the ``train`` or ``eval`` expert; returns it with its held-out mean error."""
    if role not in ("train", "eval"):
        raise ValueError(f"expert role must be 'train' or 'eval', got {role!r}")
    e = config.expert
    train, test = expert_data(config, role)
    expert = GazeExpert(input_size=e.input_size, channels=tuple(e.channels), hidden=e.hidden, epochs=e.epochs,
                        warmup_epochs=e.warmup_epochs, batch_size=e.batch_size, lr=e.lr,
                        seed=derive_seed(config.seed, "expert-init", role) % 2 ** 63, degrade_deg=e.degrade_deg)
    expert.fit(train.images, train.gaze).freeze()
    return expert, float(angular_errors_deg(expert.predict(test.images), test.gaze).mean())


def expert_path(out: Path, role: str) -> Path:
    return Path(out) / "experts" / f"expert_{role}.gzlb"


def _save_expert(expert: GazeExpert, err: float, out: Path, role: str) -> None:
    path = expert_path(out, role)
    path.parent.mkdir(parents=True, exist_ok=True)
    expert.save(path)
    write_atomic(path.parent / f"expert_{role}_test_error.txt", f"{err:.6f}\n")


def train_experts(config: RunConfig, out) -> dict:
    """Train both experts from scratch, overwriting any saved ones; returns role -> held-out error."""
    errs = {}
    for role in ("train", "eval"):
        expert, errs[role] = train_expert(config, role)
        _save_expert(expert, errs[role], Path(out), role)
    return errs


def load_or_train_experts(config: RunConfig, out: Path) -> dict:
    experts = {}
    for role in ("train", "eval"):
        path = expert_path(out, role)
        if path.exists():
            experts[role] = GazeExpert.load(path)
        else:
            experts[role], err = train_expert(config, role)
            _save_expert(experts[role], err, out, role)
    return experts


# per-run work; module globals carry shared state into forked workers

_STATE: dict = {}


def _pretrain_job(key: str) -> str:
    config, bench, experts, out = _STATE["config"], _STATE["bench"], _STATE["experts"], _STATE["out"]
    cond = _STATE["pretrain_conditions"][key]
    schedule = config.schedule.to_schedule(cond, derive_seed(config.seed, "train") % 2 ** 63)
    model = LiaeModel(config.arch.to_arch(config.benchmark.image_size), seed=schedule.seed % 2 ** 63)
    history = pretrain(model, bench.corpus, schedule, config.weights.to_weights(), experts["train"])
    run = out / "pretrain" / key
    run.mkdir(parents=True, exist_ok=True)
    model.save(run / "checkpoint")
    write_atomic(run / "losses.csv", history.to_csv())
    return key


def score_swaps(pair: Pair, swapped: np.ndarray, eval_expert) -> dict:
    """Per-frame gaze error of a pair's swapped test frames under both oracles."""
    ident = pair.test.identities
    source = ev.Frames(pair.test.images, ident[pair.orig_id], pair.test.jitter)
    result = ev.Frames(swapped, ident[pair.char_id], pair.test.jitter)
    return {"ground_truth": ev.frame_errors(source, result, ev.ground_truth_oracle),
            "eval_expert": ev.frame_errors(source, result, ev.expert_oracle(eval_expert))}


def errors_csv(pair: Pair, errors: dict) -> str:
    return "frame,ground_truth_deg,eval_expert_deg\n" + "".join(
        f"{int(f)},{g!r},{e!r}\n" for f, g, e in zip(pair.test.frame_index, errors["ground_truth"].tolist(),
                                                      errors["eval_expert"].tolist()))


def _pair_job(job: tuple) -> dict:
    pair_name, cond = job
    config, bench, experts, out = _STATE["config"], _STATE["bench"], _STATE["experts"], _STATE["out"]
    pair = bench.pair(pair_name)
    schedule = config.schedule.to_schedule(cond, derive_seed(config.seed, "train") % 2 ** 63)
    pre_dir = out / "pretrain" / pretrain_key(schedule)
    model = LiaeModel.load(pre_dir / "checkpoint")
    history = LossHistory(_read_history(pre_dir / "losses.csv"))
    train_pair(model, pair.train, schedule, config.weights.to_weights(), experts["train"], orig_id=pair.orig_id,
               history=history, batch_key=pair.name)
    swapped, _ = model.swap_images(pair.test.images)
    errors = score_swaps(pair, swapped, experts["eval"])
    run = out / "runs" / pair.name / cond
    meta = {"pair": pair.name, "orig_id": pair.orig_id, "char_id": pair.char_id, "condition": cond,
            "schedule": schedule_dict(schedule), "pretrained_from": f"pretrain/{pretrain_key(schedule)}"}
    write_run(run, model, history, swapped, pair.test.frame_index, extra={
        "config.json": _STATE["config_json"], "run.json": json.dumps(meta, indent=1, sort_keys=True) + "\n",
        "stamp.txt": _STATE["stamp"] + "\n",
        "errors.csv": errors_csv(pair, errors),
    })
    return {"pair": pair.name, "condition": cond, **{k: v.tolist() for k, v in errors.items()}}


def _read_history(path: Path) -> list:
    rows = []
    for line in path.read_text().splitlines()[1:]:
        parts = line.split(",")
        rows.append((int(parts[0]), int(parts[1]), *map(float, parts[2:])))
    return rows


def _map(fn, items, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    ctx = mp.get_context("fork")
    with ctx.Pool(min(jobs, len(items))) as pool:
        return pool.map(fn, items, chunksize=1)


def run_experiment(config: RunConfig, out_dir, jobs: int = 1, stamp: str = "unknown",
                   pairs: list | None = None) -> list:
    """Train every (pair, condition), swap the held-out frames and write the evaluation reports.

    Pretraining depends only on the phase-1 losses, so conditions that agree
    there share one pretrained model. Returns the reports for the ground-truth
    and evaluation-expert oracles.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_json = config.to_json()
    write_atomic(out / "config.json", config_json)
    write_atomic(out / "stamp.txt", stamp + "\n")
    bench = build_benchmark(config)
    names = [p.name for p in bench.pairs] if pairs is None else list(pairs)
    for n in names:
        bench.pair(n)
    experts = load_or_train_experts(config, out)
    conditions = [Condition(c).value for c in config.conditions]
    pre = {}
    for c in conditions:
        pre.setdefault(pretrain_key(config.schedule.to_schedule(c, 0)), c)
    _STATE.update(config=config, bench=bench, experts=experts, out=out, pretrain_conditions=pre,
                  config_json=config_json, stamp=stamp)
    try:
        _map(_pretrain_job, sorted(pre), jobs)
        _map(_pair_job, [(p, c) for p in names for c in conditions], jobs)
    finally:
        _STATE.clear()
    return report_runs([out], out / "report", seed=config.seed, stamp=stamp)


ORACLES = ("ground_truth", "eval_expert")


def load_runs(roots: list) -> tuple[dict, dict]:
    """Errors and loss histories of every ``runs/<pair>/<condition>`` below the given experiment roots."""
    errors, histories = {}, {}
    for root in map(Path, roots):
        runs = root / "runs"
        if not runs.is_dir():
            raise FileNotFoundError(f"no run directory at {runs} (expected <out>/runs/<pair>/<condition>/errors.csv)")
        for err_path in sorted(runs.glob("*/*/errors.csv")):
            key = (err_path.parent.parent.name, err_path.parent.name)
            if key in errors:
                raise ValueError(f"run {key[0]}/{key[1]} appears in more than one experiment root")
            cols = np.loadtxt(err_path, delimiter=",", skiprows=1, ndmin=2)
            errors[key] = {o: cols[:, i + 1] for i, o in enumerate(ORACLES)}
            loss_path = err_path.parent / "losses.csv"
            if loss_path.exists():
                histories[key] = _read_history(loss_path)
        if not errors:
            raise FileNotFoundError(f"no errors.csv found under {runs}/<pair>/<condition>/")
    return errors, histories


def report_runs(roots: list, out_dir, seed: int = 0, stamp: str = "unknown") -> list:
    """Aggregate finished runs under both oracles and write the report and plot-data files."""
    errors, histories = load_runs(roots)
    reports = []
    for oracle in ORACLES:
        reports.append(ev.aggregate({k: v[oracle] for k, v in errors.items()},
                                    seed=derive_seed(seed, "aggregate"), oracle=oracle))
    ev.write_reports(reports, out_dir, extra={"stamp": stamp}, histories=histories)
    return reports
