"""Synthetic multi-camera gaze benchmark.

A head sits at the origin surrounded by cameras on a sphere. Each world
sample draws a head pose and an eye-in-head gaze; every camera then sees the
gaze in its own normalized frame through a fixed nonlinear embedding. Views
from cameras that see the eyes looking steeply downward (top views) are
degraded to mimic eyelid occlusion, so a second view plus the relative
rotation carries information a single view lacks.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo

SPLITS = ("train", "test_interpolation", "test_extrapolation")
SPLIT_CODE = {name: k for k, name in enumerate(SPLITS)}


class InfeasibleSplit(ValueError):
    pass


class UnknownCamera(KeyError):
    pass


class SameCamera(ValueError):
    pass


class BenchmarkNotDiscriminative(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 12
    n_interp: int = 3
    n_extrap: int = 3
    train_polar_deg: tuple[float, float] = (8.0, 38.0)
    extrap_polar_deg: tuple[float, float] = (48.0, 62.0)
    d: float = 0.6
    obs_dim: int = 32
    identity_dim: int = 4
    noise_dim: int = 4
    n_sinusoids: int = 12
    frequency: float = 2.0
    nonlinear_scale: float = 0.5
    gaze_range_deg: float = 30.0
    head_jitter_deg: float = 15.0
    view_roll_deg: float = 90.0
    noise_sigma: float = 0.03
    occlusion_pitch_deg: float = 20.0
    occlusion_attenuation: float = 0.2
    occlusion_noise_mult: float = 5.0
    n_subjects: int = 9
    samples_per_subject: int = 300
    pairs_per_sample: int = 2
    folds: int = 3

    def __post_init__(self):
        if self.n_train < 2 or self.n_interp + self.n_extrap < 2:
            raise InfeasibleSplit("need at least two cameras per split family")
        if self.gaze_dim < 3 + 1:
            raise ValueError("obs_dim too small for the gaze embedding")
        if self.gaze_dim < 3 + self.n_sinusoids:
            raise ValueError("gaze embedding must be injective: obs_dim too small")

    @property
    def gaze_dim(self) -> int:
        return self.obs_dim - self.identity_dim - self.noise_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        raw = dict(raw)
        for key in ("train_polar_deg", "extrap_polar_deg"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def camera_direction(polar: float, azimuth: float) -> np.ndarray:
    """Unit vector from the head toward a camera; azimuth 90 deg is straight above."""
    s = math.sin(polar)
    return np.array([s * math.cos(azimuth), -s * math.sin(azimuth), -math.cos(polar)])


@dataclass
class CameraRig:
    ids: list[int]
    polar: np.ndarray  # radians
    azimuth: np.ndarray
    splits: list[str]
    d: float

    def direction(self, cam: int) -> np.ndarray:
        k = self.index(cam)
        return camera_direction(self.polar[k], self.azimuth[k])

    def rotation(self, cam: int) -> np.ndarray:
        """World-to-normalized-camera rotation for an unrotated head."""
        return geo.look_at_rotation(self.direction(cam))

    def index(self, cam: int) -> int:
        try:
            return self.ids.index(cam)
        except ValueError:
            raise UnknownCamera(cam) from None

    def cameras(self, *splits: str) -> list[int]:
        return [c for c, s in zip(self.ids, self.splits) if s in splits]

    def to_dict(self) -> dict:
        return {
            "ids": list(self.ids),
            "polar": [float(x) for x in self.polar],
            "azimuth": [float(x) for x in self.azimuth],
            "splits": list(self.splits),
            "d": float(self.d),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "CameraRig":
        return cls(list(raw["ids"]), np.array(raw["polar"]), np.array(raw["azimuth"]), list(raw["splits"]), raw["d"])

    def rig_file_cameras(self) -> list[dict]:
        """Cameras in the rig-file layout (original camera == normalized camera here)."""
        out = []
        for cam, split in zip(self.ids, self.splits):
            rot = self.rotation(cam)
            pos = self.d * self.direction(cam)
            out.append(
                {
                    "id": cam,
                    "extrinsic": geo.RigidTransform(rot, -rot @ pos),
                    "normalization": np.eye(3),
                    "split": split,
                }
            )
        return out


def build_rig(config: SynthConfig, seed: int) -> CameraRig:
    """Place cameras at seeded polar/azimuth angles.

    Training cameras cover ``train_polar_deg``; interpolation cameras fall
    strictly inside that range and extrapolation cameras beyond it.
    """
    lo, hi = config.train_polar_deg
    elo, ehi = config.extrap_polar_deg
    if not (0 <= lo < hi and elo <= ehi < 89):
        raise InfeasibleSplit("invalid polar ranges")
    if elo <= hi:
        raise InfeasibleSplit("extrapolation cameras cannot lie outside the training range")
    rng = np.random.default_rng(seed)
    polar, azimuth, splits = [], [], []
    n = config.n_train
    # pin both ends of the training range so the interpolation band is well defined
    tpolar = np.concatenate([[lo, hi], rng.uniform(lo, hi, n - 2)])
    rng.shuffle(tpolar)
    tazi = (np.arange(n) + rng.uniform(-0.3, 0.3, n)) * 360.0 / n
    polar += list(tpolar)
    azimuth += list(tazi)
    splits += ["train"] * n
    margin = 0.15 * (hi - lo)
    polar += list(rng.uniform(lo + margin, hi - margin, config.n_interp))
    azimuth += list(rng.uniform(0.0, 360.0, config.n_interp))
    splits += ["test_interpolation"] * config.n_interp
    offset = rng.uniform(0.0, 360.0)
    polar += list(rng.uniform(elo, ehi, config.n_extrap))
    azimuth += list(offset + np.arange(config.n_extrap) * 360.0 / config.n_extrap)
    splits += ["test_extrapolation"] * config.n_extrap
    rig = CameraRig(
        list(range(len(splits))),
        np.radians(polar),
        np.radians(np.mod(azimuth, 360.0)),
        splits,
        config.d,
    )
    check_rig_splits(rig)
    return rig


def check_rig_splits(rig: CameraRig) -> None:
    train = rig.polar[[s == "train" for s in rig.splits]]
    for p, s in zip(rig.polar, rig.splits):
        if s == "test_extrapolation" and not p > train.max():
            raise InfeasibleSplit("extrapolation camera inside training range")
        if s == "test_interpolation" and not train.min() <= p <= train.max():
            raise InfeasibleSplit("interpolation camera outside training range")


@dataclass(frozen=True)
class GazeEmbedding:
    """Fixed random map ``g -> A [g; s * sin(W g + b)]`` with full column rank ``A``."""

    A: np.ndarray
    W: np.ndarray
    b: np.ndarray
    scale: float

    @classmethod
    def create(cls, config: SynthConfig, rng: np.random.Generator) -> "GazeEmbedding":
        k = config.n_sinusoids
        q, _ = np.linalg.qr(rng.standard_normal((config.gaze_dim, 3 + k)))
        W = rng.standard_normal((k, 3)) * config.frequency
        b = rng.uniform(0.0, 2 * math.pi, k)
        return cls(q * math.sqrt(config.gaze_dim / (3 + k)), W, b, config.nonlinear_scale)

    def __call__(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        z = np.concatenate([g, self.scale * np.sin(g @ self.W.T + self.b)], axis=-1)
        return z @ self.A.T


@dataclass
class WorldSample:
    subject: int
    identity: np.ndarray
    gaze_world: np.ndarray
    head_rotation: np.ndarray  # world -> head


@dataclass
class ViewObservation:
    camera: int
    features: np.ndarray
    occluded: bool
    gaze: np.ndarray  # ground truth in this view's normalized camera frame
    head_pose: np.ndarray  # head -> normalized camera


@dataclass
class SamplePair:
    obs_tgt: ViewObservation
    obs_ref: ViewObservation
    R: np.ndarray
    g_tgt: np.ndarray
    g_ref: np.ndarray


class Benchmark:
    """Rig, embedding and config bundled for rendering."""

    def __init__(self, config: SynthConfig, seed: int):
        self.config = config
        self.seed = seed
        self.rig = build_rig(config, seed)
        self.embedding = GazeEmbedding.create(config, np.random.default_rng([seed, 1]))

    def sample_world(self, subject: int, identity: np.ndarray, rng: np.random.Generator) -> WorldSample:
        c = self.config
        jitter = rng.standard_normal(3) * math.radians(c.head_jitter_deg)
        head = geo.exp_so3(jitter)
        lim = math.radians(c.gaze_range_deg)
        g_head = geo.vector_from_pitch_yaw(rng.uniform(-lim, lim), rng.uniform(-lim, lim))
        return WorldSample(subject, identity, head.T @ g_head, head)

    def head_pose(self, cam: int, sample: WorldSample, roll: float = 0.0) -> np.ndarray:
        """Head-to-normalized-camera rotation, optionally rolled about the optical axis."""
        H = geo.look_at_rotation(sample.head_rotation @ self.rig.direction(cam))
        return geo.rot_z(roll) @ H if roll else H

    def render_view(self, cam: int, sample: WorldSample, rng: np.random.Generator) -> ViewObservation:
        c = self.config
        lim = math.radians(c.view_roll_deg)
        H = self.head_pose(cam, sample, rng.uniform(-lim, lim) if lim else 0.0)
        g = H @ (sample.head_rotation @ sample.gaze_world)
        occluded = bool(geo.pitch_of(g) < -math.radians(c.occlusion_pitch_deg))
        enc = self.embedding(g)
        sigma = c.noise_sigma
        if occluded:
            enc = enc * c.occlusion_attenuation
            sigma = sigma * c.occlusion_noise_mult
        feats = np.concatenate([enc, sample.identity, np.zeros(c.noise_dim)])
        feats = feats + rng.standard_normal(c.obs_dim) * sigma
        return ViewObservation(cam, feats, occluded, g, H)


def render_view(bench: Benchmark, cam: int, sample: WorldSample, noise_seed) -> ViewObservation:
    bench.rig.index(cam)
    return bench.render_view(cam, sample, np.random.default_rng(noise_seed))


def make_pair(bench: Benchmark, cam_tgt: int, cam_ref: int, sample: WorldSample, seeds) -> SamplePair:
    if cam_tgt == cam_ref:
        raise SameCamera(f"camera {cam_tgt} paired with itself")
    rng = np.random.default_rng(seeds)
    vt = bench.render_view(cam_tgt, sample, rng)
    vr = bench.render_view(cam_ref, sample, rng)
    R = geo.rotation_from_head_poses(vt.head_pose, vr.head_pose)
    return SamplePair(vt, vr, R, vt.gaze, vr.gaze)


def perturb_rotation(R, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Left-multiply by a random rotation whose vector is ``N(0, noise^2/3 I)``.

    The RMS perturbation angle is therefore ``noise`` radians.
    """
    if noise < 0:
        raise ValueError("noise must be >= 0")
    R = np.asarray(R, dtype=np.float64)
    if noise == 0:
        return R.copy()
    w = rng.standard_normal(3) * (noise / math.sqrt(3.0))
    return geo.orthonormalize(geo.exp_so3(w) @ R)


def perturb_rotations(R: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Batched :func:`perturb_rotation` over ``(N, 3, 3)``."""
    if noise == 0:
        return np.array(R, copy=True)
    return np.stack([perturb_rotation(r, noise, rng) for r in R])


# -- datasets ------------------------------------------------------------------


def record_dtype(obs_dim: int) -> np.dtype:
    return np.dtype(
        [
            ("subject", "<i4"),
            ("fold", "<i4"),
            ("sample", "<i4"),
            ("cam_tgt", "<i4"),
            ("cam_ref", "<i4"),
            ("split_tgt", "<i4"),
            ("split_ref", "<i4"),
            ("occ_tgt", "<i4"),
            ("occ_ref", "<i4"),
            ("R", "<f8", (9,)),
            ("g_tgt", "<f8", (3,)),
            ("g_ref", "<f8", (3,)),
            ("obs_tgt", "<f8", (obs_dim,)),
            ("obs_ref", "<f8", (obs_dim,)),
        ]
    )


@dataclass
class Dataset:
    header: dict
    records: np.ndarray

    @property
    def rig(self) -> CameraRig:
        return CameraRig.from_dict(self.header["rig"])

    @property
    def obs_dim(self) -> int:
        return int(self.header["config"]["obs_dim"])

    def select(self, selector: str, test_fold: int = 0) -> np.ndarray:
        """Boolean mask over records.

        ``train``: training-camera pairs of non-test folds. ``seen``: training
        cameras, test fold. ``unseen``: test cameras, test fold, further split
        by the target camera into ``unseen_interpolation`` and
        ``unseen_extrapolation``. ``all`` selects everything.
        """
        r = self.records
        train_cams = r["split_tgt"] == SPLIT_CODE["train"]
        in_fold = r["fold"] == test_fold
        masks = {
            "all": np.ones(len(r), bool),
            "train": train_cams & ~in_fold,
            "seen": train_cams & in_fold,
            "unseen": ~train_cams & in_fold,
            "unseen_interpolation": (r["split_tgt"] == SPLIT_CODE["test_interpolation"]) & in_fold,
            "unseen_extrapolation": (r["split_tgt"] == SPLIT_CODE["test_extrapolation"]) & in_fold,
        }
        if selector not in masks:
            raise ValueError(f"unknown selector {selector!r}")
        return masks[selector]

    def arrays(self, mask=None) -> dict[str, np.ndarray]:
        r = self.records if mask is None else self.records[mask]
        return {
            "obs_tgt": r["obs_tgt"],
            "obs_ref": r["obs_ref"],
            "R": r["R"].reshape(-1, 3, 3),
            "g_tgt": r["g_tgt"],
            "g_ref": r["g_ref"],
            "cam_tgt": r["cam_tgt"],
            "cam_ref": r["cam_ref"],
        }


def generate_dataset(config: SynthConfig, seed: int, check: bool = True) -> Dataset:
    """Render subjects x samples, pairing cameras within the train and test sets.

    Every world sample yields ``pairs_per_sample`` ordered pairs among the
    training cameras and as many among the test cameras, so each subject can
    be evaluated on both seen and unseen cameras. Folds partition subjects.
    """
    bench = Benchmark(config, seed)
    rig = bench.rig
    root = np.random.default_rng([seed, 2])
    order = root.permutation(config.n_subjects)
    fold_of = {int(s): k % config.folds for k, s in enumerate(order)}
    train_cams = rig.cameras("train")
    test_cams = rig.cameras("test_interpolation", "test_extrapolation")
    dtype = record_dtype(config.obs_dim)
    n_records = config.n_subjects * config.samples_per_subject * 2 * config.pairs_per_sample
    records = np.zeros(n_records, dtype=dtype)
    k = 0
    for subject in range(config.n_subjects):
        srng = np.random.default_rng([seed, 3, subject])
        identity = srng.uniform(-1.0, 1.0, config.identity_dim)
        for s in range(config.samples_per_subject):
            sample = bench.sample_world(subject, identity, srng)
            for cams in (train_cams, test_cams):
                for _ in range(config.pairs_per_sample):
                    ct, cr = (int(c) for c in srng.choice(cams, size=2, replace=False))
                    pair = make_pair(bench, ct, cr, sample, srng.integers(1 << 62))
                    rec = records[k]
                    rec["subject"], rec["fold"], rec["sample"] = subject, fold_of[subject], s
                    rec["cam_tgt"], rec["cam_ref"] = ct, cr
                    rec["split_tgt"] = SPLIT_CODE[rig.splits[rig.index(ct)]]
                    rec["split_ref"] = SPLIT_CODE[rig.splits[rig.index(cr)]]
                    rec["occ_tgt"], rec["occ_ref"] = pair.obs_tgt.occluded, pair.obs_ref.occluded
                    rec["R"] = pair.R.reshape(-1)
                    rec["g_tgt"], rec["g_ref"] = pair.g_tgt, pair.g_ref
                    rec["obs_tgt"], rec["obs_ref"] = pair.obs_tgt.features, pair.obs_ref.features
                    k += 1
    header = {
        "format": DATASET_FORMAT,
        "seed": int(seed),
        "config": config.to_dict(),
        "config_hash": config_hash({"config": config.to_dict(), "seed": int(seed)}),
        "rig": rig.to_dict(),
    }
    ds = Dataset(header, records)
    if check:
        header["probe"] = probe_report(ds)
        if not header["probe"]["two_view_deg"] < header["probe"]["single_view_deg"]:
            raise BenchmarkNotDiscriminative(str(header["probe"]))
    return ds


def fit_linear_probe(X: np.ndarray, G: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    """Least-squares affine map from features to gaze; returns ``(O + 1, 3)``."""
    Xa = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    return np.linalg.solve(Xa.T @ Xa + ridge * np.eye(Xa.shape[1]), Xa.T @ G)


def apply_probe(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    return np.concatenate([X, np.ones((len(X), 1))], axis=1) @ P


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def probe_report(ds: Dataset) -> dict:
    """Single-view vs two-view linear probes on occluded target views.

    The probe is fit on all training-camera views. The two-view estimate
    adds the reference estimate rotated into the target frame by the true R.
    """
    a = ds.arrays(ds.select("train"))
    X = np.concatenate([a["obs_tgt"], a["obs_ref"]])
    G = np.concatenate([a["g_tgt"], a["g_ref"]])
    P = fit_linear_probe(X, G)
    occ = ds.records["occ_tgt"][ds.select("train")].astype(bool)
    if not occ.any():
        return {"single_view_deg": 0.0, "two_view_deg": 0.0, "n_occluded": 0}
    pt = apply_probe(P, a["obs_tgt"][occ])
    pr = np.einsum("nij,nj->ni", a["R"][occ], apply_probe(P, a["obs_ref"][occ]))
    single = geo.angular_error(_unit(pt), a["g_tgt"][occ]).mean()
    two = geo.angular_error(_unit(pt + pr), a["g_tgt"][occ]).mean()
    return {"single_view_deg": float(single), "two_view_deg": float(two), "n_occluded": int(occ.sum())}


DATASET_FORMAT = "rotfuse-dataset/1"
DATASET_MAGIC = b"RFDATA01"


def write_dataset(ds: Dataset, path, fmt: str = "binary") -> None:
    header = json.dumps(ds.header, sort_keys=True)
    if fmt == "binary":
        blob = header.encode()
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(struct.pack("<QQ", len(blob), len(ds.records)))
            fh.write(blob)
            fh.write(ds.records.tobytes())
    elif fmt == "text":
        names = ds.records.dtype.names
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for rec in ds.records:
                vals = []
                for name in names:
                    v = np.atleast_1d(rec[name])
                    vals.extend(repr(float(x)) if v.dtype.kind == "f" else str(int(x)) for x in v)
                fh.write(" ".join(vals) + "\n")
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic == DATASET_MAGIC:
            hlen, n = struct.unpack("<QQ", fh.read(16))
            header = json.loads(fh.read(hlen))
            dtype = record_dtype(header["config"]["obs_dim"])
            records = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype).copy()
            return Dataset(header, records)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: not a rotfuse dataset")
    dtype = record_dtype(header["config"]["obs_dim"])
    records = np.zeros(len(lines) - 1, dtype=dtype)
    for i, line in enumerate(lines[1:]):
        tokens = line.split()
        pos = 0
        for name in dtype.names:
            sub = dtype[name]
            size = int(np.prod(sub.shape)) if sub.shape else 1
            chunk = tokens[pos : pos + size]
            pos += size
            if sub.base.kind == "f":
                vals = [float(t) for t in chunk]
            else:
                vals = [int(t) for t in chunk]
            records[i][name] = vals if sub.shape else vals[0]
    return Dataset(header, records)
