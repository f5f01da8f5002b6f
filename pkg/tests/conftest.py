import json
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

TINY_CONFIG = {
    "seed": 3,
    "conditions": ["Baseline"],
    "benchmark": {"n_couples": 1, "pair_train_frames": 16, "pair_test_frames": 6,
                  "corpus_identities": 4, "corpus_frames": 8},
    "expert": {"input_size": 32, "channels": [4, 8, 8], "hidden": 16, "epochs": 2, "warmup_epochs": 1,
               "train_identities": 6, "train_frames": 8, "test_identities": 2, "test_frames": 4},
    "schedule": {"pretrain_iters": 25, "pair_iters": 25, "batch_size": 4, "log_every": 5},
}


def write_config(path: Path, overrides: dict | None = None) -> Path:
    cfg = json.loads(json.dumps(TINY_CONFIG))
    cfg.update(overrides or {})
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="session")
def tiny_runs(tmp_path_factory):
    """The tiny one-pair Baseline experiment, run twice through the CLI into separate directories."""
    from gazelab.cli import main

    root = tmp_path_factory.mktemp("tiny")
    cfg = write_config(root / "config.json")
    outs, times = [], []
    for name in ("a", "b"):
        t = time.time()
        rc = main(["experiment", "--config", str(cfg), "--n-pairs", "1", "--out", str(root / name)])
        times.append(time.time() - t)
        assert rc == 0
        outs.append(root / name)
    return {"config": cfg, "outs": outs, "times": times}


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 9):
        if n not in mod.RESULTS:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
            continue
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
