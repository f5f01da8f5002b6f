"""Procedural face patches with exact gaze labels and analytic region masks.

Geometry is parameterised at a 64 px reference size and scaled to the
requested image size. Coordinates are ``x`` to the right and ``y`` downward,
in pixel units with pixel centres at half-integers. Gaze moves each iris
inside its eye by ``k * sin(phi) * (cos(mu), sin(mu))`` with
``k = eye_radius - iris_radius``, which :func:`read_gaze` inverts from the
pixels alone.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng, derive_seed
from .tensorcore.params import write_atomic

REF_SIZE = 64
SUPERSAMPLE = 2
PHI_MAX = math.pi / 3

BACKGROUND = np.array([0.5, 0.5, 0.5])
SCLERA = np.array([0.96, 0.96, 0.94])
LIP = np.array([0.72, 0.22, 0.26])

EYE_DY = -8.0
MOUTH_DY = 12.0
FACE_CY = 33.0
JITTER_PX = 1.0
GAIN_RANGE = (0.92, 1.04)

# sampling ranges at the reference size
RANGES = {
    "face_a": (21.0, 24.0),
    "face_b": (25.0, 28.0),
    "eye_spacing": (19.0, 21.0),
    "eye_radius": (5.5, 6.5),
    "iris_radius": (2.0, 2.5),
    "mouth_width": (12.0, 18.0),
    "mouth_height": (2.5, 4.0),
    "brow_extra": (4.0, 5.5),
}

RASTER_MAGIC = b"GZLB-I1"


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GazeAngles:
    mu: float
    phi: float

    def vector(self) -> np.ndarray:
        return np.array([math.sin(self.phi) * math.cos(self.mu),
                         math.sin(self.phi) * math.sin(self.mu),
                         math.cos(self.phi)])


@dataclass(frozen=True)
class IdentityParams:
    skin_tone: tuple
    face_axes: tuple
    eye_spacing: float
    eye_radius: float
    iris_radius: float
    iris_color: tuple
    mouth_width: float
    mouth_height: float
    brow_offset: float
    identity_id: int

    def validate(self) -> None:
        if not self.iris_radius < self.eye_radius:
            raise GeometryError(f"identity {self.identity_id}: iris_radius must be < eye_radius")
        for c in (*self.skin_tone, *self.iris_color):
            if not 0.0 <= c <= 1.0:
                raise GeometryError(f"identity {self.identity_id}: colour channel {c} outside [0, 1]")
        a, b = self.face_axes
        margin = self.eye_radius + 1.5
        for sx, sy in ((1, 0), (1, 1), (1, -1), (0, -1)):
            ex = self.eye_spacing / 2 + sx * margin
            ey = EYE_DY + sy * margin
            if (ex / a) ** 2 + (ey / b) ** 2 >= 1.0:
                raise GeometryError(f"identity {self.identity_id}: eyes not inside the face ellipse")
        if self.brow_offset < self.eye_radius + 4.0:
            raise GeometryError(f"identity {self.identity_id}: brow overlaps the eye window")
        m = np.column_stack([self.skin_tone, SCLERA, self.iris_color])
        if np.linalg.svd(m, compute_uv=False)[-1] < 0.02:
            raise GeometryError(f"identity {self.identity_id}: skin, sclera and iris colours are degenerate")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IdentityParams":
        d = dict(d)
        for key in ("skin_tone", "face_axes", "iris_color"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray        # (3, S, S)
    mask_face: np.ndarray    # (S, S)
    mask_eyes: np.ndarray
    mask_em: np.ndarray
    gaze: GazeAngles
    identity_id: int
    frame_index: int
    jitter: tuple = (0.0, 0.0, 1.0)   # head dx, dy (reference px) and lighting gain


def _sample_colour(rng: Rng) -> tuple:
    r = rng.uniform(0.55, 0.88)
    g = r * rng.uniform(0.68, 0.84)
    b = g * rng.uniform(0.68, 0.9)
    return (r, g, b)


def _sample_iris(rng: Rng) -> tuple:
    palettes = [(0.20, 0.35, 0.60), (0.25, 0.45, 0.25), (0.35, 0.20, 0.10), (0.15, 0.15, 0.18)]
    base = palettes[rng.integers(len(palettes))]
    return tuple(float(np.clip(c * rng.uniform(0.8, 1.2), 0.0, 1.0)) for c in base)


def sample_identity(rng: Rng, identity_id: int) -> IdentityParams:
    """Draw an identity from the seeded parameter distributions."""
    for _ in range(100):
        er = rng.uniform(*RANGES["eye_radius"])
        ident = IdentityParams(
            skin_tone=_sample_colour(rng),
            face_axes=(rng.uniform(*RANGES["face_a"]), rng.uniform(*RANGES["face_b"])),
            eye_spacing=rng.uniform(*RANGES["eye_spacing"]),
            eye_radius=er,
            iris_radius=rng.uniform(*RANGES["iris_radius"]),
            iris_color=_sample_iris(rng),
            mouth_width=rng.uniform(*RANGES["mouth_width"]),
            mouth_height=rng.uniform(*RANGES["mouth_height"]),
            brow_offset=er + rng.uniform(*RANGES["brow_extra"]),
            identity_id=identity_id,
        )
        try:
            ident.validate()
            return ident
        except GeometryError:
            continue
    raise GeometryError("could not draw a valid identity in 100 attempts")


def perturb_identity(base: IdentityParams, rng: Rng, radius: float, identity_id: int) -> IdentityParams:
    """A look-alike of ``base``: every parameter moves by at most ``radius`` of its range."""

    def jiggle(value, lo, hi):
        return float(np.clip(value + radius * (hi - lo) * rng.uniform(-1.0, 1.0), lo, hi))

    for _ in range(100):
        er = jiggle(base.eye_radius, *RANGES["eye_radius"])
        ident = IdentityParams(
            skin_tone=tuple(jiggle(c, 0.3, 0.9) for c in base.skin_tone),
            face_axes=(jiggle(base.face_axes[0], *RANGES["face_a"]), jiggle(base.face_axes[1], *RANGES["face_b"])),
            eye_spacing=jiggle(base.eye_spacing, *RANGES["eye_spacing"]),
            eye_radius=er,
            iris_radius=jiggle(base.iris_radius, *RANGES["iris_radius"]),
            iris_color=tuple(jiggle(c, 0.0, 0.7) for c in base.iris_color),
            mouth_width=jiggle(base.mouth_width, *RANGES["mouth_width"]),
            mouth_height=jiggle(base.mouth_height, *RANGES["mouth_height"]),
            brow_offset=er + jiggle(base.brow_offset - base.eye_radius, *RANGES["brow_extra"]),
            identity_id=identity_id,
        )
        try:
            ident.validate()
            return ident
        except GeometryError:
            continue
    raise GeometryError("could not draw a valid look-alike in 100 attempts")


def sample_gaze(rng: Rng) -> GazeAngles:
    """Uniform over the admissible cone: mu in [-pi, pi), phi in [0, pi/3]."""
    return GazeAngles(mu=rng.uniform(-math.pi, math.pi), phi=rng.uniform(0.0, PHI_MAX))


def sample_jitter(rng: Rng) -> tuple:
    return (rng.uniform(-JITTER_PX, JITTER_PX), rng.uniform(-JITTER_PX, JITTER_PX), rng.uniform(*GAIN_RANGE))


# geometry helpers

def _disk_sd(x, y, cx, cy, r):
    return np.hypot(x - cx, y - cy) - r


def _ellipse_sd(x, y, cx, cy, a, b):
    dx, dy = x - cx, y - cy
    f = (dx / a) ** 2 + (dy / b) ** 2 - 1.0
    grad = 2.0 * np.sqrt(dx ** 2 / a ** 4 + dy ** 2 / b ** 4)
    return f / np.maximum(grad, 1e-9)


def _coverage(sd, width):
    return np.clip(0.5 - sd / width, 0.0, 1.0)


def iris_offset(identity: IdentityParams, gaze: GazeAngles, scale: float = 1.0) -> np.ndarray:
    k = (identity.eye_radius - identity.iris_radius) * scale
    s = k * math.sin(gaze.phi)
    return np.array([s * math.cos(gaze.mu), s * math.sin(gaze.mu)])


def layout(identity: IdentityParams, jitter: tuple, image_size: int) -> dict:
    """Primitive centres and sizes in output pixel units."""
    s = image_size / REF_SIZE
    cx = (REF_SIZE / 2 + jitter[0]) * s
    cy = (FACE_CY + jitter[1]) * s
    half = identity.eye_spacing / 2 * s
    ey = cy + EYE_DY * s
    return {
        "scale": s,
        "face": (cx, cy, identity.face_axes[0] * s, identity.face_axes[1] * s),
        "eyes": [(cx - half, ey), (cx + half, ey)],
        "eye_radius": identity.eye_radius * s,
        "iris_radius": identity.iris_radius * s,
        "brows": [(cx - half, ey - identity.brow_offset * s), (cx + half, ey - identity.brow_offset * s)],
        "brow_axes": (identity.eye_radius * s, 1.0 * s),
        "mouth": (cx, cy + MOUTH_DY * s, identity.mouth_width / 2 * s, identity.mouth_height / 2 * s),
    }


def render_face(identity: IdentityParams, gaze: GazeAngles, jitter_seed: int, image_size: int = 64,
                frame_index: int = 0, jitter: tuple | None = None) -> Sample:
    """Rasterise one face at 2x supersampling and box-downsample it."""
    if not (abs(gaze.mu) <= math.pi + 1e-12 and 0.0 <= gaze.phi <= math.pi / 2):
        raise GeometryError(f"gaze out of range: {gaze}")
    if jitter is None:
        jitter = sample_jitter(Rng(jitter_seed))
    geo = layout(identity, jitter, image_size)
    offset = iris_offset(identity, gaze, geo["scale"])
    if np.hypot(*offset) + geo["iris_radius"] > geo["eye_radius"] + 1e-9:
        raise GeometryError("iris displaced outside the eye")

    n = image_size * SUPERSAMPLE
    t = (np.arange(n) + 0.5) / SUPERSAMPLE
    x, y = np.meshgrid(t, t)
    w = 1.0 / SUPERSAMPLE
    skin = np.asarray(identity.skin_tone)
    img = np.broadcast_to(BACKGROUND[:, None, None], (3, n, n)).copy()

    def paint(cov, colour):
        img[...] = img * (1.0 - cov) + np.asarray(colour)[:, None, None] * cov

    cx, cy, a, b = geo["face"]
    paint(_coverage(_ellipse_sd(x, y, cx, cy, a, b), w), skin)
    ba, bb = geo["brow_axes"]
    for bx, by in geo["brows"]:
        paint(_coverage(_ellipse_sd(x, y, bx, by, ba, bb), w), skin * 0.35)
    mx, my, ma, mb = geo["mouth"]
    paint(_coverage(_ellipse_sd(x, y, mx, my, ma, mb), w), 0.5 * skin + 0.5 * LIP)
    for ex, ey in geo["eyes"]:
        eye = _coverage(_disk_sd(x, y, ex, ey, geo["eye_radius"]), w)
        iris = eye * _coverage(_disk_sd(x, y, ex + offset[0], ey + offset[1], geo["iris_radius"]), w)
        img[...] = (img * (1.0 - eye) + SCLERA[:, None, None] * (eye - iris)
                    + np.asarray(identity.iris_color)[:, None, None] * iris)
    img = np.clip(img * jitter[2], 0.0, 1.0)
    img = img.reshape(3, image_size, SUPERSAMPLE, image_size, SUPERSAMPLE).mean(axis=(2, 4))

    masks = region_masks(identity, jitter, image_size)
    return Sample(image=img, gaze=gaze, identity_id=identity.identity_id, frame_index=frame_index,
                  jitter=tuple(float(j) for j in jitter), **masks)


def region_masks(identity: IdentityParams, jitter: tuple, image_size: int) -> dict:
    """Face, eyes and eyes+mouth masks with 1 px linear edges."""
    geo = layout(identity, jitter, image_size)
    t = np.arange(image_size) + 0.5
    x, y = np.meshgrid(t, t)
    cx, cy, a, b = geo["face"]
    face = _coverage(_ellipse_sd(x, y, cx, cy, a, b), 1.0)
    eyes = np.zeros_like(face)
    for ex, ey in geo["eyes"]:
        eyes = np.maximum(eyes, _coverage(_disk_sd(x, y, ex, ey, geo["eye_radius"]), 1.0))
    mx, my, ma, mb = geo["mouth"]
    mouth = _coverage(_ellipse_sd(x, y, mx, my, ma, mb), 1.0)
    return {"mask_face": face, "mask_eyes": eyes, "mask_em": np.maximum(eyes, mouth)}


def read_gaze(image: np.ndarray, identity: IdentityParams, jitter: tuple) -> GazeAngles:
    """Measure gaze from pixels by unmixing skin / sclera / iris around each eye.

    The eye centre is the centroid of sclera+iris coverage and the iris centre
    the centroid of iris coverage, both inside a window of radius
    ``eye_radius + 1.5`` px around the nominal eye position; the displacement
    formula is then inverted.

    The skin colour is measured from the image (median of the cheek band just
    below each eye) so that a swap whose skin tone drifts from the identity's
    is still read by its eyes alone.
    """
    image = np.asarray(image, dtype=np.float64)
    size = image.shape[-1]
    geo = layout(identity, jitter, size)
    t = np.arange(size) + 0.5
    x, y = np.meshgrid(t, t)
    s = geo["scale"]
    radius = geo["eye_radius"] + 1.5 * s
    disp = []
    for ex, ey in geo["eyes"]:
        r = np.hypot(x - ex, y - ey)
        cheek = (r >= geo["eye_radius"] + 2 * s) & (r <= geo["eye_radius"] + 4 * s) & (y > ey + s)
        skin = np.median(image[:, cheek], axis=1) if cheek.any() else np.asarray(identity.skin_tone) * jitter[2]
        mix = np.column_stack([skin, SCLERA * jitter[2], np.asarray(identity.iris_color) * jitter[2]])
        coeff = np.einsum("ij,jhw->ihw", np.linalg.pinv(mix), image)
        eye_w = np.clip(coeff[1] + coeff[2], 0.0, 1.0)
        iris_w = np.clip(coeff[2], 0.0, 1.0)
        win = r <= radius
        we, wi = eye_w * win, iris_w * win
        if we.sum() <= 0 or wi.sum() <= 0:
            disp.append(np.zeros(2))
            continue
        centre = np.array([(we * x).sum(), (we * y).sum()]) / we.sum()
        iris = np.array([(wi * x).sum(), (wi * y).sum()]) / wi.sum()
        disp.append(iris - centre)
    d = np.mean(disp, axis=0)
    k = (identity.eye_radius - identity.iris_radius) * geo["scale"]
    return GazeAngles(mu=math.atan2(d[1], d[0]), phi=math.asin(min(1.0, math.hypot(*d) / k)))


# rasters and datasets

def write_raster(path, array: np.ndarray) -> None:
    """``GZLB-I1``: magic, u32 width, height, channels, then f32 (C, H, W) data."""
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    blob = RASTER_MAGIC + struct.pack("<III", w, h, c) + np.ascontiguousarray(arr, dtype="<f4").tobytes()
    write_atomic(path, blob)


def read_raster(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(RASTER_MAGIC):
        raise ValueError(f"{path}: not a GZLB-I1 raster")
    w, h, c = struct.unpack_from("<III", blob, len(RASTER_MAGIC))
    data = np.frombuffer(blob, dtype="<f4", offset=len(RASTER_MAGIC) + 12, count=w * h * c)
    return data.astype(np.float64).reshape(c, h, w)


@dataclass
class SampleSet:
    """Column-oriented in-memory dataset."""

    images: np.ndarray          # (n, 3, S, S)
    mask_face: np.ndarray       # (n, 1, S, S)
    mask_eyes: np.ndarray
    mask_em: np.ndarray
    gaze: np.ndarray            # (n, 2) mu, phi
    identity_ids: np.ndarray
    frame_index: np.ndarray
    jitter: np.ndarray          # (n, 3)
    identities: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def select(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.images[idx], self.mask_face[idx], self.mask_eyes[idx], self.mask_em[idx],
                         self.gaze[idx], self.identity_ids[idx], self.frame_index[idx], self.jitter[idx],
                         self.identities)

    def for_identity(self, identity_id: int) -> "SampleSet":
        return self.select(np.flatnonzero(self.identity_ids == identity_id))

    @classmethod
    def from_samples(cls, samples: list, identities: dict) -> "SampleSet":
        return cls(
            images=np.stack([s.image for s in samples]),
            mask_face=np.stack([s.mask_face for s in samples])[:, None],
            mask_eyes=np.stack([s.mask_eyes for s in samples])[:, None],
            mask_em=np.stack([s.mask_em for s in samples])[:, None],
            gaze=np.array([[s.gaze.mu, s.gaze.phi] for s in samples]),
            identity_ids=np.array([s.identity_id for s in samples], dtype=np.int64),
            frame_index=np.array([s.frame_index for s in samples], dtype=np.int64),
            jitter=np.array([s.jitter for s in samples]),
            identities=dict(identities),
        )

    @classmethod
    def concat(cls, sets: list) -> "SampleSet":
        ids = {}
        for s in sets:
            ids.update(s.identities)
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in
                     ("images", "mask_face", "mask_eyes", "mask_em", "gaze", "identity_ids",
                      "frame_index", "jitter")), identities=ids)


def render_sequence(identity: IdentityParams, n_frames: int, image_size: int, seed: int,
                    start_frame: int = 0) -> list:
    """Frames of one identity with independently drawn gaze and jitter."""
    out = []
    for f in range(start_frame, start_frame + n_frames):
        rng = Rng(derive_seed(seed, "frame", identity.identity_id, f))
        gaze = sample_gaze(rng)
        out.append(render_face(identity, gaze, jitter_seed=rng.next_u64(), image_size=image_size, frame_index=f))
    return out


def make_dataset(n_identities: int, frames_per_identity: int, image_size: int, seed: int,
                 out_dir=None, identities: list | None = None, write_masks: bool = True) -> SampleSet:
    """Render a dataset; when ``out_dir`` is given also write rasters and ``manifest.json``."""
    if identities is None:
        if n_identities < 1:
            raise ValueError("n_identities must be >= 1")
        rng = Rng(derive_seed(seed, "identities"))
        identities = [sample_identity(rng, i) for i in range(n_identities)]
    samples = []
    for ident in identities:
        samples.extend(render_sequence(ident, frames_per_identity, image_size, seed))
    table = {i.identity_id: i for i in identities}
    data = SampleSet.from_samples(samples, table)
    if out_dir is not None:
        write_dataset(data, out_dir, seed=seed, write_masks=write_masks)
    return data


def write_dataset(data: SampleSet, out_dir, seed: int = 0, write_masks: bool = True) -> Path:
    out = Path(out_dir)
    try:
        (out / "samples").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    entries = []
    for i in range(len(data)):
        stem = f"samples/id{int(data.identity_ids[i]):04d}_f{int(data.frame_index[i]):05d}"
        entry = {
            "image": f"{stem}.gzlb",
            "identity_id": int(data.identity_ids[i]),
            "frame_index": int(data.frame_index[i]),
            "mu": float(data.gaze[i, 0]),
            "phi": float(data.gaze[i, 1]),
            "jitter": [float(v) for v in data.jitter[i]],
        }
        write_raster(out / entry["image"], data.images[i])
        if write_masks:
            for name in ("mask_face", "mask_eyes", "mask_em"):
                entry[name] = f"{stem}.{name}.gzlb"
                write_raster(out / entry[name], getattr(data, name)[i])
        entries.append(entry)
    manifest = {
        "format": "gazelab-manifest-1",
        "image_size": data.image_size,
        "seed": int(seed),
        "identities": [data.identities[k].to_dict() for k in sorted(data.identities)],
        "samples": entries,
    }
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return out / "manifest.json"


def load_dataset(path) -> SampleSet:
    """Load a dataset directory (or its ``manifest.json``)."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    identities = {d["identity_id"]: IdentityParams.from_dict(d) for d in manifest["identities"]}
    samples = []
    for e in manifest["samples"]:
        ident = identities[e["identity_id"]]
        image = read_raster(root / e["image"])
        if "mask_face" in e:
            masks = {k: read_raster(root / e[k])[0] for k in ("mask_face", "mask_eyes", "mask_em")}
        else:
            masks = region_masks(ident, tuple(e["jitter"]), image.shape[-1])
        samples.append(Sample(image=image, gaze=GazeAngles(e["mu"], e["phi"]), identity_id=e["identity_id"],
                              frame_index=e["frame_index"], jitter=tuple(e["jitter"]), **masks))
    return SampleSet.from_samples(samples, identities)


def manifest_digest(path) -> str:
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    return hashlib.sha256(manifest_path.read_bytes()).hexdigest()
