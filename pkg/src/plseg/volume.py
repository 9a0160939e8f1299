"""Core 3D grid types, dataset manifest, and NIfTI-1 file I/O.

Volumes are kept in a fixed canonical axis order: the array is indexed
(x, y, z) exactly as stored on disk (NIfTI stores x fastest). Orientation
metadata beyond the voxel spacing is ignored; inputs are assumed to be
preprocessed into a common space.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BG, WMH, ISL = 0, 1, 2
SPLITS = ("train", "validation", "test")


class VolumeFormatError(ValueError):
    """Raised for malformed or unsupported volume files."""


class ManifestError(ValueError):
    """Raised for schema or consistency violations in a dataset manifest."""


@dataclass
class Volume3D:
    """Dense scalar grid with per-axis voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"expected 3D data, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]


@dataclass
class LabelVolume:
    """Per-voxel integer codes: 0=BG, 1=WMH, 2=ISL."""

    codes: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        if self.codes.ndim != 3:
            raise ValueError(f"expected 3D codes, got shape {self.codes.shape}")
        if not np.issubdtype(self.codes.dtype, np.integer):
            raise ValueError("label codes must be integers")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() > 2):
            raise ValueError("label codes must lie in {0, 1, 2}")
        self.codes = self.codes.astype(np.uint8, copy=False)
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.codes.shape

    @property
    def voxel_volume_mm3(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]


@dataclass
class ProbVolume:
    """Per-voxel probability vector over a declared class list, channel-first."""

    probs: np.ndarray
    classes: tuple[str, ...]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.probs = np.asarray(self.probs)
        self.classes = tuple(self.classes)
        if self.probs.ndim != 4 or self.probs.shape[0] != len(self.classes):
            raise ValueError(
                f"probs must be (C, X, Y, Z) with C={len(self.classes)}, "
                f"got {self.probs.shape}")
        if self.probs.size:
            if self.probs.min() < -1e-9:
                raise ValueError("probabilities must be non-negative")
            sums = self.probs.sum(axis=0)
            if np.abs(sums - 1.0).max() > 1e-6:
                raise ValueError("per-voxel probabilities must sum to 1 within 1e-6")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.probs.shape[1:]


# ---------------------------------------------------------------------------
# NIfTI-1 I/O (minimal single-file reader/writer)
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
    64: np.float64, 256: np.int8, 512: np.uint16, 768: np.uint32,
}
_DTYPE_CODES = {np.dtype(np.uint8): (2, 8), np.dtype(np.float32): (16, 32)}


def _open_maybe_gzip(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _read_nifti(path):
    """Return (data in file axis order, spacing, ndim, intent_name)."""
    with _open_maybe_gzip(path, "rb") as fh:
        hdr = fh.read(348)
        if len(hdr) < 348:
            raise VolumeFormatError(f"{path}: truncated NIfTI header")
        sizeof_hdr = struct.unpack_from("<i", hdr, 0)[0]
        endian = "<"
        if sizeof_hdr != 348:
            sizeof_hdr = struct.unpack_from(">i", hdr, 0)[0]
            if sizeof_hdr != 348:
                raise VolumeFormatError(f"{path}: not a NIfTI-1 file")
            endian = ">"
        magic = hdr[344:348]
        if magic not in (b"n+1\x00", b"ni1\x00"):
            raise VolumeFormatError(f"{path}: bad NIfTI magic {magic!r}")
        if magic == b"ni1\x00":
            raise VolumeFormatError(f"{path}: two-file NIfTI pairs are not supported")
        dim = struct.unpack_from(endian + "8h", hdr, 40)
        datatype = struct.unpack_from(endian + "h", hdr, 70)[0]
        pixdim = struct.unpack_from(endian + "8f", hdr, 76)
        vox_offset = struct.unpack_from(endian + "f", hdr, 108)[0]
        scl_slope = struct.unpack_from(endian + "f", hdr, 112)[0]
        scl_inter = struct.unpack_from(endian + "f", hdr, 116)[0]
        intent_name = hdr[328:344].split(b"\x00")[0].decode("ascii", "replace")

        ndim = dim[0]
        if ndim < 3 or ndim > 4:
            raise VolumeFormatError(f"{path}: unsupported dimensionality {ndim}")
        shape = tuple(dim[1:1 + ndim])
        if any(n <= 0 for n in shape):
            raise VolumeFormatError(f"{path}: invalid shape {shape}")
        if datatype not in _NIFTI_DTYPES:
            raise VolumeFormatError(f"{path}: unsupported datatype code {datatype}")
        dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)

        fh.seek(int(vox_offset))
        count = int(np.prod(shape))
        raw = fh.read(count * dtype.itemsize)
        if len(raw) < count * dtype.itemsize:
            raise VolumeFormatError(f"{path}: truncated data section")
        data = np.frombuffer(raw, dtype=dtype, count=count)
        data = data.reshape(shape, order="F")
        data = data.astype(dtype.newbyteorder("="), copy=False)
        if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
            data = data * scl_slope + scl_inter
        spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])
        return data, spacing, ndim, intent_name


def _write_nifti(path, data, spacing, intent_name=""):
    """Write a 3D or 4D array in Fortran (NIfTI) voxel order."""
    data = np.asarray(data)
    code = _DTYPE_CODES.get(data.dtype)
    if code is None:
        raise VolumeFormatError(f"unsupported on-disk dtype {data.dtype}")
    datatype, bitpix = code
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0]

    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)   # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)     # scl_slope
    hdr[148:148 + 5] = b"plseg"
    struct.pack_into("<h", hdr, 254, 1)       # sform_code: scanner
    struct.pack_into("<4f", hdr, 280, spacing[0], 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, spacing[1], 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, spacing[2], 0)
    name = intent_name.encode("ascii", "replace")[:15]
    hdr[328:328 + len(name)] = name
    hdr[344:348] = b"n+1\x00"

    with _open_maybe_gzip(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")  # pad to vox_offset 352
        fh.write(np.asfortranarray(data).tobytes(order="F"))


def read_volume(path) -> Volume3D:
    """Read a 3D scalar NIfTI-1 file (.nii or .nii.gz)."""
    data, spacing, ndim, _ = _read_nifti(path)
    if ndim == 4:
        if data.shape[3] != 1:
            raise VolumeFormatError(f"{path}: expected 3D payload, got 4D")
        data = data[..., 0]
    return Volume3D(np.asarray(data, dtype=np.float32), spacing)


def read_label_volume(path) -> LabelVolume:
    """Read a 3D integer label NIfTI-1 file."""
    data, spacing, ndim, _ = _read_nifti(path)
    if ndim == 4:
        if data.shape[3] != 1:
            raise VolumeFormatError(f"{path}: expected 3D payload, got 4D")
        data = data[..., 0]
    codes = np.rint(np.asarray(data)).astype(np.int64)
    return LabelVolume(codes, spacing)


def read_prob_volume(path, classes: tuple[str, ...] | None = None) -> ProbVolume:
    """Read a 4D probability NIfTI-1 file (channels along the 4th axis)."""
    data, spacing, ndim, intent = _read_nifti(path)
    if ndim != 4:
        raise VolumeFormatError(f"{path}: probability volumes must be 4D")
    if classes is None:
        classes = tuple(c for c in intent.split(",") if c)
        if not classes:
            raise VolumeFormatError(f"{path}: class list missing from header")
    probs = np.moveaxis(np.asarray(data, dtype=np.float64), 3, 0)
    return ProbVolume(probs, classes, spacing)


def write_volume(v: Volume3D | LabelVolume | ProbVolume, path) -> None:
    """Write a volume as NIfTI-1. Images and probabilities are stored float32,
    labels uint8; probability channels go on the 4th axis."""
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    if isinstance(v, Volume3D):
        _write_nifti(path, v.data.astype(np.float32, copy=False), v.spacing)
    elif isinstance(v, LabelVolume):
        _write_nifti(path, v.codes.astype(np.uint8, copy=False), v.spacing)
    elif isinstance(v, ProbVolume):
        data = np.moveaxis(v.probs.astype(np.float32, copy=False), 0, 3)
        _write_nifti(path, data, v.spacing, intent_name=",".join(v.classes))
    else:
        raise TypeError(f"cannot write object of type {type(v).__name__}")


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    """One subject: image path, per-class label availability, split."""

    id: str
    image: Path
    brain_mask: Path
    split: str
    wmh_label: Path | None = None
    isl_label: Path | None = None

    @property
    def has_wmh(self) -> bool:
        return self.wmh_label is not None

    @property
    def has_isl(self) -> bool:
        return self.isl_label is not None


@dataclass
class Manifest:
    dataset_name: str
    samples: list[SampleRecord] = field(default_factory=list)

    def validate(self) -> None:
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ManifestError("sample ids must be unique")
        for s in self.samples:
            if s.split not in SPLITS:
                raise ManifestError(f"{s.id}: invalid split {s.split!r}")
            if s.split == "train" and not (s.has_wmh or s.has_isl):
                raise ManifestError(f"{s.id}: train records need at least one label")

    def by_split(self, split: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == split]

    def get(self, sample_id: str) -> SampleRecord:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


def load_manifest(path) -> Manifest:
    """Load a manifest JSON; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    try:
        samples = []
        for s in doc["samples"]:
            samples.append(SampleRecord(
                id=s["id"],
                image=base / s["image"],
                brain_mask=base / s["brain_mask"],
                split=s["split"],
                wmh_label=base / s["wmh_label"] if "wmh_label" in s else None,
                isl_label=base / s["isl_label"] if "isl_label" in s else None,
            ))
        m = Manifest(dataset_name=doc["dataset_name"], samples=samples)
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"manifest {path} missing field: {exc}") from exc
    m.validate()
    return m


def save_manifest(m: Manifest, path) -> None:
    """Write a manifest JSON with paths relative to its directory."""
    path = Path(path)
    base = path.parent

    def rel(p: Path) -> str:
        try:
            return str(Path(p).relative_to(base))
        except ValueError:
            return str(p)

    doc = {"dataset_name": m.dataset_name, "samples": []}
    for s in m.samples:
        rec = {"id": s.id, "image": rel(s.image), "brain_mask": rel(s.brain_mask),
               "split": s.split}
        if s.wmh_label is not None:
            rec["wmh_label"] = rel(s.wmh_label)
        if s.isl_label is not None:
            rec["isl_label"] = rel(s.isl_label)
        doc["samples"].append(rec)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def derive_subsets(m: Manifest) -> dict[str, list[str]]:
    """Training subsets by label availability.

    FLS has both labels, PLS_WMH at least the WMH label, PLS_ISL at least
    the ISL label, PLS_all their union; hence FLS is a subset of both PLS
    and of their union.
    """
    train = m.by_split("train")
    fls = [s.id for s in train if s.has_wmh and s.has_isl]
    pls_wmh = [s.id for s in train if s.has_wmh]
    pls_isl = [s.id for s in train if s.has_isl]
    pls_all = [s.id for s in train if s.has_wmh or s.has_isl]
    return {"FLS": fls, "PLS_WMH": pls_wmh, "PLS_ISL": pls_isl, "PLS_all": pls_all}


def icv_voxels(brain_mask: LabelVolume) -> tuple[int, float]:
    """Intracranial volume from a binary brain mask: (voxel count, millilitres)."""
    count = int(np.count_nonzero(brain_mask.codes))
    if count == 0:
        raise ValueError("brain mask is empty; ICV cannot be zero")
    ml = count * brain_mask.voxel_volume_mm3 / 1000.0
    return count, ml


def combine_labels(wmh: LabelVolume | None, isl: LabelVolume | None,
                   shape=None, spacing=None) -> LabelVolume:
    """Merge per-class binary masks into one multiclass label volume.

    Masks must be disjoint; ISL is applied after WMH. Missing masks
    contribute background.
    """
    if wmh is None and isl is None:
        if shape is None or spacing is None:
            raise ValueError("need shape and spacing when both masks are missing")
        return LabelVolume(np.zeros(shape, dtype=np.uint8), spacing)
    ref = wmh if wmh is not None else isl
    codes = np.zeros(ref.shape, dtype=np.uint8)
    if wmh is not None:
        codes[wmh.codes > 0] = WMH
    if isl is not None:
        codes[isl.codes > 0] = ISL
    return LabelVolume(codes, ref.spacing)
