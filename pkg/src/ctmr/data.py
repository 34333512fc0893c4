"""Stroke phantoms, stack files, manifests, by-subject folds and affine augmentation."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

CHANNELS = ("CT", "CBF", "CBV", "MTT", "Tmax")
SPACING_MM = (1.0, 1.0, 5.0)
MIN_SLICES, MAX_SLICES = 2, 22

# Fixed affine maps from stored [-1, 1] values back to nominal physical units:
# raw = lo + (v + 1) / 2 * (hi - lo)
NORMALIZATION = {
    "CT": {"unit": "HU", "lo": 0.0, "hi": 100.0},
    "CBF": {"unit": "ml/100g/min", "lo": 0.0, "hi": 80.0},
    "CBV": {"unit": "ml/100g", "lo": 0.0, "hi": 6.0},
    "MTT": {"unit": "s", "lo": 0.0, "hi": 16.0},
    "Tmax": {"unit": "s", "lo": 0.0, "hi": 20.0},
    "DWI": {"unit": "a.u.", "lo": 0.0, "hi": 1000.0},
}

# Phantom contrast in normalized units. DWI shows the core strongly and with
# little noise; CT barely shows it and is noisier.
CT_LESION_CONTRAST = 0.15
DWI_LESION_CONTRAST = 0.8
SIGMA_CT = 0.10
SIGMA_MR = 0.03
SIGMA_PERFUSION = 0.08
BACKGROUND = -1.0

# (tissue level, core offset, penumbra offset) per perfusion map
_PERFUSION = {
    "CBF": (0.2, -0.55, -0.25),
    "CBV": (0.0, -0.45, -0.05),
    "MTT": (-0.4, 0.55, 0.35),
    "Tmax": (-0.5, 0.65, 0.45),
}


# ---------------------------------------------------------------------------
# Stack file format
# ---------------------------------------------------------------------------
STACK_MAGIC = b"CTMR"
STACK_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_MAX_NDIM = 8
_MAX_ELEMENTS = 1 << 31


class StackFormatError(ValueError):
    pass


class BadMagicError(StackFormatError):
    pass


class UnsupportedVersionError(StackFormatError):
    pass


class DtypeCodeError(StackFormatError):
    pass


class DimOverflowError(StackFormatError):
    pass


class TruncatedStackError(StackFormatError):
    pass


def encode_stack(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = 1
    elif arr.dtype == np.uint8:
        code = 2
    else:
        raise DtypeCodeError(f"stack dtype must be float32 or uint8, got {arr.dtype}")
    if arr.ndim > _MAX_NDIM:
        raise DimOverflowError(f"at most {_MAX_NDIM} dimensions supported, got {arr.ndim}")
    header = STACK_MAGIC + struct.pack("<BBB", STACK_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()


def decode_stack(blob: bytes) -> np.ndarray:
    if len(blob) < 7:
        raise TruncatedStackError(f"stack header needs 7 bytes, file has {len(blob)}")
    if blob[:4] != STACK_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}")
    version, code, ndim = struct.unpack("<BBB", blob[4:7])
    if version != STACK_VERSION:
        raise UnsupportedVersionError(f"unsupported stack version {version}")
    if code not in _DTYPE_CODES:
        raise DtypeCodeError(f"unknown dtype code {code}")
    if ndim > _MAX_NDIM:
        raise DimOverflowError(f"ndim {ndim} exceeds {_MAX_NDIM}")
    end = 7 + 4 * ndim
    if len(blob) < end:
        raise TruncatedStackError("file ends inside the dimension table")
    dims = struct.unpack(f"<{ndim}I", blob[7:end])
    count = 1
    for d in dims:
        count *= d
    if count == 0 or count > _MAX_ELEMENTS:
        raise DimOverflowError(f"dimensions {dims} give {count} elements")
    dtype = _DTYPE_CODES[code]
    need = count * dtype.itemsize
    have = len(blob) - end
    if have < need:
        raise TruncatedStackError(f"payload truncated: {have} of {need} bytes")
    if have > need:
        raise StackFormatError(f"{have - need} trailing bytes after payload")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=end).reshape(dims)
    return arr.astype(np.float32 if code == 1 else np.uint8)


def write_stack(arr: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_stack(arr))


def read_stack(path) -> np.ndarray:
    return decode_stack(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Scan records and manifest
# ---------------------------------------------------------------------------
class RecordError(ValueError):
    pass


@dataclass
class ScanRecord:
    subject_id: str
    scan_id: str
    ctp: np.ndarray  # (5, D, S, S)
    dwi: np.ndarray  # (1, D, S, S)
    mask: np.ndarray  # (1, D, S, S) uint8
    spacing_mm: tuple[float, float, float] = SPACING_MM

    @property
    def n_slices(self) -> int:
        return self.ctp.shape[1]

    @property
    def size(self) -> int:
        return self.ctp.shape[2]

    def validate(self) -> None:
        if self.ctp.ndim != 4 or self.ctp.shape[0] != len(CHANNELS):
            raise RecordError(f"{self.scan_id}: CTP stack must be (5, D, S, S), got {self.ctp.shape}")
        geom = self.ctp.shape[1:]
        for name, arr in (("dwi", self.dwi), ("mask", self.mask)):
            if arr.shape != (1,) + geom:
                raise RecordError(f"{self.scan_id}: {name} shape {arr.shape} != (1,) + {geom}")
        if not MIN_SLICES <= geom[0] <= MAX_SLICES:
            raise RecordError(f"{self.scan_id}: {geom[0]} slices outside [{MIN_SLICES}, {MAX_SLICES}]")
        if not np.isin(self.mask, (0, 1)).all():
            raise RecordError(f"{self.scan_id}: mask is not binary")
        for name, arr in (("ctp", self.ctp), ("dwi", self.dwi)):
            if not np.isfinite(arr).all() or arr.min() < -1 or arr.max() > 1:
                raise RecordError(f"{self.scan_id}: {name} intensities outside [-1, 1]")

    def slice_pair(self, z: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(ctp (5,S,S), dwi (1,S,S), mask (1,S,S)) for axial slice ``z``."""
        return self.ctp[:, z], self.dwi[:, z], self.mask[:, z]


@dataclass
class Manifest:
    root: Path
    doc: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        return cls(path.parent, json.loads(path.read_text()))

    @property
    def spacing_mm(self) -> tuple[float, float, float]:
        return tuple(float(v) for v in self.doc.get("spacing_mm", SPACING_MM))

    @property
    def size(self) -> int:
        return int(self.doc["size"])

    def subject_ids(self) -> list[str]:
        return [s["id"] for s in self.doc["subjects"]]

    def scans(self) -> list[tuple[str, dict]]:
        """(subject id, scan entry) pairs in manifest order."""
        return [(s["id"], scan) for s in self.doc["subjects"] for scan in s["scans"]]

    def scan_ids(self, subjects=None) -> list[str]:
        keep = None if subjects is None else set(subjects)
        return [scan["id"] for sid, scan in self.scans() if keep is None or sid in keep]

    def entry(self, scan_id: str) -> tuple[str, dict]:
        for sid, scan in self.scans():
            if scan["id"] == scan_id:
                return sid, scan
        raise KeyError(scan_id)

    def load_scan(self, scan_id: str) -> ScanRecord:
        sid, scan = self.entry(scan_id)
        rec = ScanRecord(sid, scan_id,
                         read_stack(self.root / scan["ctp"]),
                         read_stack(self.root / scan["dwi"]),
                         read_stack(self.root / scan["mask"]),
                         self.spacing_mm)
        rec.validate()
        if rec.n_slices != scan["slices"]:
            raise RecordError(f"{scan_id}: manifest says {scan['slices']} slices, stacks have {rec.n_slices}")
        if rec.mask.dtype != np.uint8:
            raise RecordError(f"{scan_id}: mask stack must be uint8")
        return rec

    def load_all(self, subjects=None) -> list[ScanRecord]:
        return [self.load_scan(s) for s in self.scan_ids(subjects)]


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------
def _smooth_noise(rng: np.random.Generator, shape, sigma) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def make_phantom_scan(rng: np.random.Generator, size: int, n_slices: int):
    """Return (ctp, dwi, mask) arrays for one synthetic acute-stroke scan."""
    d, s = n_slices, size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy, cx = s / 2 + rng.uniform(-0.03, 0.03, 2) * s
    ay, ax = rng.uniform(0.36, 0.42) * s, rng.uniform(0.30, 0.38) * s
    zc = (d - 1) / 2
    brain = np.zeros((d, s, s), dtype=bool)
    for z in range(d):
        shrink = 1.0 - 0.15 * abs(z - zc) / max(zc, 1.0)
        brain[z] = ((yy - cy) / (ay * shrink)) ** 2 + ((xx - cx) / (ax * shrink)) ** 2 <= 1.0

    zz = np.arange(d, dtype=np.float64)[:, None, None]
    core = np.zeros((d, s, s), dtype=bool)
    penumbra = np.zeros((d, s, s), dtype=bool)
    wobble = _smooth_noise(rng, (d, s, s), (0.5, 3.0, 3.0))
    for _ in range(int(rng.integers(1, 4))):
        z0 = int(rng.integers(0, d))
        ang = rng.uniform(0, 2 * np.pi)
        rad = np.sqrt(rng.uniform(0, 1)) * 0.5
        ly, lx = cy + rad * ay * np.sin(ang), cx + rad * ax * np.cos(ang)
        ry, rx = rng.uniform(0.07, 0.15, 2) * s
        rz = rng.uniform(0.6, 2.5)
        dist2 = ((yy - ly) / ry) ** 2 + ((xx - lx) / rx) ** 2 + ((zz - z0) / rz) ** 2
        dist2 = dist2 * (1.0 + 0.25 * wobble)
        blob = (dist2 <= 1.0) & brain
        blob[z0, int(round(np.clip(ly, 0, s - 1))), int(round(np.clip(lx, 0, s - 1)))] = True
        core |= blob
        penumbra |= (dist2 <= 2.4) & brain
    penumbra &= ~core

    anatomy = _smooth_noise(rng, (d, s, s), (0.3, 2.5, 2.5))
    core_f = ndimage.gaussian_filter(core.astype(np.float64), (0, 0.7, 0.7))
    pen_f = ndimage.gaussian_filter(penumbra.astype(np.float64), (0, 0.7, 0.7))

    def channel(level, tex, core_off, pen_off, sigma):
        own = _smooth_noise(rng, (d, s, s), (0.3, 2.0, 2.0))
        v = level + tex * (0.7 * anatomy + 0.3 * own) + core_off * core_f + pen_off * pen_f
        v = v + sigma * rng.standard_normal((d, s, s))
        return np.where(brain, v, BACKGROUND)

    ctp = np.empty((len(CHANNELS), d, s, s))
    ctp[0] = channel(0.1, 0.12, -CT_LESION_CONTRAST, -0.03, SIGMA_CT)
    for i, name in enumerate(CHANNELS[1:], start=1):
        level, core_off, pen_off = _PERFUSION[name]
        ctp[i] = channel(level, 0.1, core_off, pen_off, SIGMA_PERFUSION)
    dwi = channel(-0.2, 0.1, DWI_LESION_CONTRAST, 0.0, SIGMA_MR)[None]
    ctp = np.clip(ctp, -1, 1).astype(np.float32)
    dwi = np.clip(dwi, -1, 1).astype(np.float32)
    return ctp, dwi, core[None].astype(np.uint8)


def make_phantom_corpus(n_subjects: int, scans_per_subject: int, size: int, slices_range=(2, 22),
                        seed: int = 0, out_dir=".", jitter: bool = False) -> Path:
    """Write a phantom corpus plus ``manifest.json`` under ``out_dir``; return the manifest path.

    Each scan is generated from its own generator seeded by (seed, subject,
    scan), so the corpus is a pure function of the arguments. With
    ``jitter`` the scan count per subject varies in [1, scans_per_subject].
    """
    lo, hi = slices_range
    if not MIN_SLICES <= lo <= hi <= MAX_SLICES:
        raise ValueError(f"slices_range must lie within [{MIN_SLICES}, {MAX_SLICES}], got {slices_range}")
    if size % 4:
        raise ValueError(f"size must be divisible by 4, got {size}")
    if n_subjects < 1 or scans_per_subject < 1:
        raise ValueError("need at least one subject and one scan per subject")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = []
    for i in range(n_subjects):
        sid = f"sub-{i:03d}"
        n_scans = scans_per_subject
        if jitter:
            n_scans = int(np.random.default_rng([seed, i, 1 << 20]).integers(1, scans_per_subject + 1))
        (out / sid).mkdir(exist_ok=True)
        scans = []
        for j in range(n_scans):
            rng = np.random.default_rng([seed, i, j])
            n_slices = int(rng.integers(lo, hi + 1))
            ctp, dwi, mask = make_phantom_scan(rng, size, n_slices)
            scan_id = f"{sid}_scan-{j}"
            entry = {"id": scan_id, "slices": n_slices}
            for key, arr in (("ctp", ctp), ("dwi", dwi), ("mask", mask)):
                rel = f"{sid}/scan-{j}_{key}.ctmr"
                write_stack(arr, out / rel)
                entry[key] = rel
            scans.append(entry)
        subjects.append({"id": sid, "scans": scans})
    doc = {
        "spacing_mm": list(SPACING_MM),
        "size": size,
        "channels": list(CHANNELS),
        "normalization": NORMALIZATION,
        "generator": {"seed": seed, "slices_range": [lo, hi], "scans_per_subject": scans_per_subject,
                      "jitter": jitter},
        "subjects": subjects,
    }
    path = out / "manifest.json"
    dump_json(doc, path)
    return path


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------
@dataclass
class FoldSplit:
    folds: list[list[str]]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def test(self, k: int) -> list[str]:
        return list(self.folds[k])

    def train(self, k: int) -> list[str]:
        held = set(self.folds[k])
        return [s for i, fold in enumerate(self.folds) if i != k for s in fold if s not in held]

    def fold_of(self, subject_id: str) -> int:
        for i, fold in enumerate(self.folds):
            if subject_id in fold:
                return i
        raise KeyError(f"subject {subject_id} is in no test fold")

    def validate(self, subjects=None) -> None:
        flat = [s for fold in self.folds for s in fold]
        if len(flat) != len(set(flat)):
            raise ValueError("test folds overlap")
        if subjects is not None and set(flat) != set(subjects):
            missing = sorted(set(subjects) - set(flat))
            extra = sorted(set(flat) - set(subjects))
            raise ValueError(f"split does not cover the roster: missing={missing[:5]} unknown={extra[:5]}")

    def to_json(self) -> dict:
        return {"seed": self.seed, "folds": self.folds}

    def save(self, path) -> None:
        dump_json(self.to_json(), path)

    @classmethod
    def load(cls, path) -> "FoldSplit":
        doc = json.loads(Path(path).read_text())
        split = cls([list(f) for f in doc["folds"]], int(doc["seed"]))
        split.validate()
        return split


def kfold_by_subject(subject_ids, k: int, seed: int) -> FoldSplit:
    """Shuffle subjects with ``seed`` and cut them into ``k`` near-equal test folds."""
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = [[ids[i] for i in part] for part in np.array_split(order, k)]
    return FoldSplit(folds, seed)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------
@dataclass
class AugmentRanges:
    rotation_deg: float = 10.0
    translation: float = 0.10
    scale: tuple[float, float] = (0.9, 1.1)

    def validate(self) -> None:
        if not 0 <= self.rotation_deg <= 45:
            raise ValueError(f"rotation range must be within [0, 45] degrees, got {self.rotation_deg}")
        if not 0 <= self.translation <= 0.5:
            raise ValueError(f"translation range must be within [0, 0.5], got {self.translation}")
        lo, hi = self.scale
        if not 0.5 <= lo <= hi <= 2.0:
            raise ValueError(f"scale range must lie within [0.5, 2], got {self.scale}")

    @classmethod
    def none(cls) -> "AugmentRanges":
        return cls(0.0, 0.0, (1.0, 1.0))


def sample_affine(ranges: AugmentRanges, rng: np.random.Generator) -> tuple[float, float, float, float]:
    """(rotation radians, dy fraction, dx fraction, scale)."""
    rot = np.deg2rad(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg))
    ty, tx = rng.uniform(-ranges.translation, ranges.translation, 2)
    sc = rng.uniform(*ranges.scale)
    return float(rot), float(ty), float(tx), float(sc)


def _apply(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int, cval: float) -> np.ndarray:
    return ndimage.affine_transform(img, matrix, offset=offset, order=order, mode="constant", cval=cval)


def affine_augment(channels: np.ndarray, mask: np.ndarray, ranges: AugmentRanges,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random rotation/translation/scaling to every channel and the mask.

    Channels are resampled bilinearly with out-of-field fill -1; the mask uses
    nearest neighbour so it stays binary.
    """
    ranges.validate()
    if channels.ndim != 3 or mask.shape != (1,) + channels.shape[1:]:
        raise ValueError(f"expected (C,S,S) channels and (1,S,S) mask, got {channels.shape}, {mask.shape}")
    rot, ty, tx, sc = sample_affine(ranges, rng)
    s = channels.shape[1]
    c = np.array([(s - 1) / 2.0, (channels.shape[2] - 1) / 2.0])
    shift = np.array([ty * channels.shape[1], tx * channels.shape[2]])
    cos, sin = np.cos(rot), np.sin(rot)
    rotation = np.array([[cos, -sin], [sin, cos]])
    # output pixel p' samples input at c + R^T (p' - c - t) / s
    matrix = rotation.T / sc
    offset = c - matrix @ (c + shift)
    out = np.stack([_apply(ch.astype(np.float64), matrix, offset, 1, BACKGROUND) for ch in channels])
    out_mask = _apply(mask[0], matrix, offset, 0, 0)[None]
    return out.astype(channels.dtype), out_mask.astype(mask.dtype)
