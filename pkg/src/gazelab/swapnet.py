"""Dual-intermediate face-swap autoencoder, its two-phase training and the experiment driver.

A shared encoder ``E`` feeds two intermediates. ``I_AB`` is trained on both
identities and ``I_B`` only on the original one. The decoder sees a
concatenation of two codes: the original face is rebuilt from
``I_AB(z) || I_B(z)`` and the character face from ``I_AB(z) || I_AB(z)``.
Swapping pushes an original frame through the character path.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import tensorcore as tc
from ._validation import check_images
from .losses import Condition, LossWeights, SSIMConfig, total_loss
from .rng import Rng, derive_seed
from .synthgen import SampleSet, write_raster
from .tensorcore import Adam, ParamSet, Tensor
from .tensorcore.layers import conv, dense, init_conv, init_dense
from .tensorcore.params import write_atomic

LOSS_COLUMNS = ("phase", "iteration", "total", "core_orig", "em_orig", "gaze_orig",
                "core_char", "em_char", "gaze_char")


class PairError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 64
    latent_dim: int = 128
    enc_channels: tuple = (8, 16, 32)
    enc_kernel: int = 5
    dec_channels: tuple = (32, 32, 16)
    dec_kernel: int = 3

    def __post_init__(self):
        n_up = len(self.dec_channels)
        if self.image_size % (2 ** len(self.enc_channels)) or self.image_size % (2 ** n_up):
            raise ValueError(f"image_size {self.image_size} not divisible by the down/upsampling factors")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")


@dataclass(frozen=True)
class TrainSchedule:
    pretrain_iters: int = 5000
    pair_iters: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    condition: Condition = Condition.BASELINE
    seed: int = 0
    log_every: int = 25

    def __post_init__(self):
        if min(self.pretrain_iters, self.pair_iters) < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError(f"invalid schedule: {self}")
        object.__setattr__(self, "condition", Condition(self.condition))


@dataclass
class LatentCode:
    value: Tensor
    source: str


class LiaeModel:
    """Parameters live in one :class:`ParamSet` under ``E.``, ``I_AB.``, ``I_B.``, ``D.``."""

    def __init__(self, arch: ArchConfig = ArchConfig(), seed: int = 0, params: ParamSet | None = None):
        self.arch = arch
        self.seed = seed
        self.calls: Counter = Counter()
        self.params = params if params is not None else self._init(seed)

    @property
    def latent_dim(self) -> int:
        return self.arch.latent_dim

    def _init(self, seed: int) -> ParamSet:
        a = self.arch
        rng = Rng(derive_seed(seed, "liae-init"))
        ps = ParamSet(rng_seed=seed)
        c = 3
        for i, ch in enumerate(a.enc_channels):
            init_conv(ps, f"E.conv{i}", c, ch, a.enc_kernel, rng)
            c = ch
        side = a.image_size // 2 ** len(a.enc_channels)
        init_dense(ps, "E.fc", c * side * side, a.latent_dim, rng, gain=1.0)
        for inter in ("I_AB", "I_B"):
            init_dense(ps, f"{inter}.fc0", a.latent_dim, a.latent_dim, rng)
            init_dense(ps, f"{inter}.fc1", a.latent_dim, a.latent_dim, rng, gain=1.0)
        side = a.image_size // 2 ** len(a.dec_channels)
        init_dense(ps, "D.fc", 2 * a.latent_dim, a.dec_channels[0] * side * side, rng)
        chans = list(a.dec_channels[1:]) + [4]
        c = a.dec_channels[0]
        for i, ch in enumerate(chans):
            last = i == len(chans) - 1
            init_conv(ps, f"D.up{i}", c, 4 * ch, a.dec_kernel, rng, gain=1.0 if last else 2.0)
            c = ch
        return ps

    # building blocks

    def encode(self, y) -> Tensor:
        x = tc.as_tensor(y)
        if x.ndim == 3:
            x = tc.reshape(x, (1,) + x.shape)
        if x.shape[1:] != (3, self.arch.image_size, self.arch.image_size):
            raise tc.ShapeError(f"LIAE expects (N, 3, {self.arch.image_size}, {self.arch.image_size}), got {x.shape}")
        self.calls["E"] += 1
        for i in range(len(self.arch.enc_channels)):
            x = tc.leaky_relu(conv(x, self.params, f"E.conv{i}", stride=2))
        return dense(tc.reshape(x, (x.shape[0], -1)), self.params, "E.fc")

    def _inter(self, z: Tensor, name: str) -> LatentCode:
        self.calls[name] += 1
        h = tc.leaky_relu(dense(z, self.params, f"{name}.fc0"))
        return LatentCode(dense(h, self.params, f"{name}.fc1"), name)

    def inter_ab(self, z: Tensor) -> LatentCode:
        return self._inter(z, "I_AB")

    def inter_b(self, z: Tensor) -> LatentCode:
        return self._inter(z, "I_B")

    def decode(self, first: LatentCode, second: LatentCode) -> tuple[Tensor, Tensor]:
        """Image ``(N, 3, S, S)`` and mask ``(N, 1, S, S)`` from two concatenated codes."""
        self.calls["D"] += 1
        a = self.arch
        side = a.image_size // 2 ** len(a.dec_channels)
        z = tc.concat([first.value, second.value], axis=1)
        h = tc.leaky_relu(dense(z, self.params, "D.fc"))
        h = tc.reshape(h, (h.shape[0], a.dec_channels[0], side, side))
        n_up = len(a.dec_channels)
        for i in range(n_up):
            h = tc.depth_to_space(conv(h, self.params, f"D.up{i}"), 2)
            if i < n_up - 1:
                h = tc.leaky_relu(h)
        out = tc.sigmoid(h)
        return out[:, :3], out[:, 3:]

    # the three paths

    def reconstruct_orig(self, y_orig) -> tuple[Tensor, Tensor]:
        z = self.encode(y_orig)
        return self.decode(self.inter_ab(z), self.inter_b(z))

    def reconstruct_char(self, y_char) -> tuple[Tensor, Tensor]:
        code = self.inter_ab(self.encode(y_char))
        return self.decode(code, code)

    def reconstruct_train(self, y_orig, y_char) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (*self.reconstruct_orig(y_orig), *self.reconstruct_char(y_char))

    def swap(self, y_orig) -> tuple[Tensor, Tensor]:
        """Original frame rendered with the character identity."""
        return self.reconstruct_char(y_orig)

    def swap_images(self, images, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
        images = check_images(images)
        out_img, out_mask = [], []
        with tc.no_grad():
            for s in range(0, len(images), batch_size):
                img, mask = self.swap(images[s:s + batch_size])
                out_img.append(img.data)
                out_mask.append(mask.data)
        return np.concatenate(out_img), np.concatenate(out_mask)

    # persistence

    def save(self, path) -> None:
        self.params.save(path)
        meta = {"arch": _jsonable(asdict(self.arch)), "seed": self.seed}
        write_atomic(Path(str(path) + ".json"), json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "LiaeModel":
        path = Path(path)
        sidecar = Path(str(path) + ".json")
        if not sidecar.exists():
            raise FileNotFoundError(f"model metadata not found: {sidecar}")
        meta = json.loads(sidecar.read_text())
        arch = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["arch"].items()})
        return cls(arch, meta["seed"], ParamSet.load(path, rng_seed=meta["seed"]))

    def copy(self) -> "LiaeModel":
        return LiaeModel(self.arch, self.seed, self.params.copy())


# training


@dataclass
class LossHistory:
    rows: list = field(default_factory=list)

    def log(self, phase: int, iteration: int, total: float, terms: list) -> None:
        o, c = terms[0].log_values(), terms[1].log_values()
        self.rows.append((phase, iteration, total, o["core"], o["em"], o["gaze"], c["core"], c["em"], c["gaze"]))

    def phase(self, phase: int) -> np.ndarray:
        return np.array([r[2] for r in self.rows if r[0] == phase])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in self.rows:
            w.writerow([r[0], r[1]] + [repr(float(v)) for v in r[2:]])
        return buf.getvalue()


class _Branch:
    """Training arrays for one branch plus the expert's cached gaze on its images."""

    def __init__(self, data: SampleSet, expert=None, need_gaze: bool = False):
        self.data = data
        self.target = expert.predict(data.images) if (need_gaze and expert is not None) else None

    def batch(self, idx) -> dict:
        d = self.data
        out = {"y": d.images[idx], "mask_face": d.mask_face[idx], "mask_em": d.mask_em[idx],
               "mask_eyes": d.mask_eyes[idx]}
        if self.target is not None:
            out["target_gaze"] = self.target[idx]
        return out


def _check_expert(expert, gaze_needed: bool):
    if not gaze_needed:
        return
    if expert is None:
        raise ValueError("condition uses the gaze loss but no gaze expert was given")
    if not getattr(expert, "frozen_", False):
        raise ValueError("the gaze expert must be frozen before swap training")


def _run_phase(model: LiaeModel, orig: _Branch, char: _Branch, iters: int, schedule: TrainSchedule,
               phase: int, weights: LossWeights, cfg: SSIMConfig, expert, history: LossHistory,
               rng: Rng) -> None:
    opt = Adam(lr=schedule.lr)
    bs = schedule.batch_size
    n_o, n_c = len(orig.data), len(char.data)
    for it in range(iters):
        io_ = np.array([rng.integers(n_o) for _ in range(bs)])
        ic_ = np.array([rng.integers(n_c) for _ in range(bs)])
        bo, bc = orig.batch(io_), char.batch(ic_)
        model.params.zero_grad()
        img_o, m_o, img_c, m_c = model.reconstruct_train(bo["y"], bc["y"])
        bo.update(y_hat=img_o, mask_hat=m_o)
        bc.update(y_hat=img_c, mask_hat=m_c)
        total, terms = total_loss(schedule.condition, phase, [bo, bc], weights, cfg, expert)
        total.backward()
        opt.step(model.params)
        if it % schedule.log_every == 0 or it == iters - 1:
            history.log(phase, it, total.item(), terms)
    model.params.zero_grad()


def pretrain(model: LiaeModel, corpus: SampleSet, schedule: TrainSchedule, weights: LossWeights = LossWeights(),
             expert=None, cfg: SSIMConfig = SSIMConfig(), history: LossHistory | None = None) -> LossHistory:
    """Phase 1: corpus samples drawn uniformly at random into both roles."""
    history = history if history is not None else LossHistory()
    _check_expert(expert, Condition(schedule.condition).terms(1)[1] and schedule.pretrain_iters > 0)
    need = Condition(schedule.condition).terms(1)[1]
    branch = _Branch(corpus, expert, need)
    rng = Rng(derive_seed(schedule.seed, "pretrain-batches"))
    _run_phase(model, branch, branch, schedule.pretrain_iters, schedule, 1, weights, cfg, expert, history, rng)
    return history


def split_pair(pair_data: SampleSet, orig_id: int | None = None) -> tuple[SampleSet, SampleSet, int, int]:
    ids = sorted(set(int(i) for i in pair_data.identity_ids))
    if len(ids) != 2:
        raise PairError(f"pair training needs exactly 2 identities, got {len(ids)}: {ids}")
    if orig_id is None:
        orig_id = ids[0]
    if orig_id not in ids:
        raise PairError(f"original identity {orig_id} not in pair {ids}")
    char_id = ids[1] if orig_id == ids[0] else ids[0]
    return pair_data.for_identity(orig_id), pair_data.for_identity(char_id), orig_id, char_id


def train_pair(model: LiaeModel, pair_data: SampleSet, schedule: TrainSchedule, weights: LossWeights = LossWeights(),
               expert=None, cfg: SSIMConfig = SSIMConfig(), orig_id: int | None = None,
               history: LossHistory | None = None, batch_key=None) -> LossHistory:
    """Phase 2: original identity through the ``I_AB || I_B`` branch, character through ``I_AB || I_AB``."""
    history = history if history is not None else LossHistory()
    orig, char, orig_id, char_id = split_pair(pair_data, orig_id)
    need = Condition(schedule.condition).terms(2)[1]
    _check_expert(expert, need and schedule.pair_iters > 0)
    key = batch_key if batch_key is not None else (orig_id, char_id)
    rng = Rng(derive_seed(schedule.seed, "pair-batches", key))
    _run_phase(model, _Branch(orig, expert, need), _Branch(char, expert, need), schedule.pair_iters, schedule,
               2, weights, cfg, expert, history, rng)
    return history


def train(model: LiaeModel, corpus: SampleSet, pair_data: SampleSet, schedule: TrainSchedule,
          weights: LossWeights = LossWeights(), expert=None, cfg: SSIMConfig = SSIMConfig(),
          orig_id: int | None = None) -> tuple[LiaeModel, LossHistory]:
    """Both phases in sequence; ``model`` is updated in place and returned."""
    split_pair(pair_data, orig_id)
    history = pretrain(model, corpus, schedule, weights, expert, cfg)
    train_pair(model, pair_data, schedule, weights, expert, cfg, orig_id, history)
    return model, history


def pretrain_key(schedule: TrainSchedule) -> str:
    """Runs whose phase-1 losses coincide can share one pretrained model."""
    em, gaze = Condition(schedule.condition).terms(1)
    return f"pre-em{int(em)}-gaze{int(gaze)}"


def _jsonable(d: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v.value if isinstance(v, Condition) else v) for k, v in d.items()}


def schedule_dict(schedule: TrainSchedule) -> dict:
    return _jsonable(asdict(schedule))


class FaceSwapper(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit`` trains on a two-identity set, ``transform`` swaps frames."""

    def __init__(self, condition="Baseline", pretrain_iters=5000, pair_iters=1000, batch_size=8, lr=1e-3,
                 latent_dim=128, image_size=64, seed=0, orig_id=None, log_every=25):
        self.condition = condition
        self.pretrain_iters = pretrain_iters
        self.pair_iters = pair_iters
        self.batch_size = batch_size
        self.lr = lr
        self.latent_dim = latent_dim
        self.image_size = image_size
        self.seed = seed
        self.orig_id = orig_id
        self.log_every = log_every

    def _schedule(self) -> TrainSchedule:
        return TrainSchedule(self.pretrain_iters, self.pair_iters, self.batch_size, self.lr,
                             Condition(self.condition), self.seed, self.log_every)

    def fit(self, X: SampleSet, y=None, corpus: SampleSet | None = None, expert=None, weights=LossWeights()):
        """``X`` is the pair set; ``corpus`` defaults to ``X`` itself for pretraining."""
        arch = ArchConfig(image_size=self.image_size, latent_dim=self.latent_dim)
        self.model_ = LiaeModel(arch, seed=self.seed)
        _, self.history_ = train(self.model_, corpus if corpus is not None else X, X, self._schedule(),
                                 weights, expert, orig_id=self.orig_id)
        return self

    def transform(self, X) -> np.ndarray:
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "model_")
        return self.model_.swap_images(X)[0]


# run directories


def write_run(run_dir: Path, model: LiaeModel, history: LossHistory, swapped: np.ndarray,
              frame_index: np.ndarray, extra: dict | None = None) -> None:
    run_dir = Path(run_dir)
    (run_dir / "swapped").mkdir(parents=True, exist_ok=True)
    model.save(run_dir / "checkpoint")
    write_atomic(run_dir / "losses.csv", history.to_csv())
    for img, f in zip(swapped, frame_index):
        write_raster(run_dir / "swapped" / f"{int(f):05d}.gzlb", img)
    if extra:
        for name, text in extra.items():
            write_atomic(run_dir / name, text)


def n_swapped(run_dir) -> int:
    return len(list((Path(run_dir) / "swapped").glob("*.gzlb")))


__all__ = [
    "ArchConfig", "FaceSwapper", "LatentCode", "LiaeModel", "LossHistory", "PairError", "TrainSchedule",
    "pretrain", "pretrain_key", "split_pair", "train", "train_pair", "write_run",
]
