"""Volume files, the dataset manifest, and the preprocessing that feeds both paths."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import FormatError
from .plans import ModelPlan

VOLUME_MAGIC = b"CSVL"
HU_CLAMP = (-1024.0, 3071.0)
AIR_HU = -1024.0
SLICE_SIDE = 512
CAET_SIDE = 256
PATCH_SIDE = 224
MAX_SLICES = 25
MAX_VOXELS = 1 << 31
# Intensity window mapped to [0, 1] before resizing; air lands on 0, the canvas fill.
HU_WINDOW = (-1000.0, 400.0)

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class Volume:
    data: np.ndarray  # (D, H, W) float32 HU
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise ValueError(f"volume must be (D>=1, H, W), got {self.data.shape}")
        lo, hi = HU_CLAMP
        if self.data.size and (self.data.min() < lo or self.data.max() > hi or np.isnan(self.data).any()):
            raise ValueError(f"volume values must lie in [{lo}, {hi}]")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def depth(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class NoduleAnnotation:
    slice_start: int
    slice_end: int  # inclusive
    bbox: tuple[int, int, int, int]  # row0, col0, rows, cols

    def __post_init__(self):
        n = self.slice_end - self.slice_start + 1
        if self.slice_start < 0 or not 1 <= n <= MAX_SLICES:
            raise ValueError(f"annotation must cover 1..{MAX_SLICES} slices, got {self.slice_start}..{self.slice_end}")
        r0, c0, rows, cols = self.bbox
        if min(r0, c0) < 0 or rows < 1 or cols < 1:
            raise ValueError(f"invalid bbox {self.bbox}")
        if rows > PATCH_SIDE or cols > PATCH_SIDE:
            raise ValueError(f"bbox {rows}x{cols} exceeds {PATCH_SIDE}x{PATCH_SIDE}")

    @property
    def n_slices(self) -> int:
        return self.slice_end - self.slice_start + 1

    def to_json(self) -> dict:
        return {"slice_start": self.slice_start, "slice_end": self.slice_end, "bbox": list(self.bbox)}

    @classmethod
    def from_json(cls, d: dict) -> NoduleAnnotation:
        return cls(int(d["slice_start"]), int(d["slice_end"]), tuple(int(v) for v in d["bbox"]))


@dataclass
class VolumeSample:
    volume: Volume
    lung_mask: np.ndarray
    annotation: NoduleAnnotation
    label: int
    id: str = ""

    def __post_init__(self):
        self.lung_mask = np.asarray(self.lung_mask, dtype=bool)
        if self.lung_mask.shape != self.volume.data.shape:
            raise ValueError(f"mask {self.lung_mask.shape} does not match volume {self.volume.data.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        a = self.annotation
        d, h, w = self.volume.data.shape
        r0, c0, rows, cols = a.bbox
        if a.slice_end >= d or r0 + rows > h or c0 + cols > w:
            raise ValueError(f"annotation {a} falls outside a {d}x{h}x{w} volume")


# ---------------------------------------------------------------------------
# Volume / mask containers
# ---------------------------------------------------------------------------


def _dump_array(arr: np.ndarray, dtype_name: str, extra: dict) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name])
    header = dict(extra, dims=list(arr.shape), dtype=dtype_name)
    return container.pack(VOLUME_MAGIC, header, arr.tobytes())


def _parse_array(blob: bytes) -> tuple[dict, np.ndarray]:
    header, payload = container.unpack(blob, VOLUME_MAGIC)
    dims, dtype_name = header.get("dims"), header.get("dtype")
    if dtype_name not in _DTYPES:
        raise FormatError("bad-header", f"unknown dtype {dtype_name!r}")
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in dims)):
        raise FormatError("bad-header", f"dims must be three integers, got {dims!r}")
    if min(dims) < 1:
        raise FormatError("bad-header", f"dims must be positive, got {dims}")
    voxels = dims[0] * dims[1] * dims[2]
    if voxels > MAX_VOXELS:
        raise FormatError("dim-overflow", f"dims {dims} describe {voxels} voxels (limit {MAX_VOXELS})")
    dt = _DTYPES[dtype_name]
    container.verify_payload(header, payload, voxels * dt.itemsize)
    return header, np.frombuffer(payload, dtype=dt).reshape(dims).copy()


def volume_bytes(v: Volume) -> bytes:
    return _dump_array(v.data, "f32le", {"clamp": list(HU_CLAMP), "spacing": list(v.spacing)})


def save_volume(path, v: Volume) -> None:
    container.write_bytes(path, volume_bytes(v))


def load_volume(path) -> Volume:
    header, arr = _parse_array(container.read_bytes(path))
    if header["dtype"] != "f32le":
        raise FormatError("bad-header", "volume payload must be f32le")
    if header.get("clamp") != list(HU_CLAMP):
        raise FormatError("bad-header", f"unexpected clamp range {header.get('clamp')!r}")
    try:
        return Volume(arr, tuple(header.get("spacing", (1.0, 1.0, 1.0))))
    except (ValueError, TypeError) as exc:
        raise FormatError("bad-header", str(exc)) from None


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3-D, got {mask.shape}")
    container.write_bytes(path, _dump_array(mask.astype(np.uint8), "u8", {}))


def load_mask(path) -> np.ndarray:
    header, arr = _parse_array(container.read_bytes(path))
    if header["dtype"] != "u8":
        raise FormatError("bad-header", "mask payload must be u8")
    return arr.astype(bool)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

MANIFEST_VERSION = 1


@dataclass
class ManifestEntry:
    id: str
    volume_path: str
    mask_path: str
    annotation: NoduleAnnotation
    label: int

    def to_json(self) -> dict:
        return {"id": self.id, "volume_path": self.volume_path, "mask_path": self.mask_path,
                "annotation": self.annotation.to_json(), "label": self.label}


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> dict:
        return {"format_version": MANIFEST_VERSION, "meta": self.meta,
                "samples": [e.to_json() for e in self.entries]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    def load_sample(self, i: int) -> VolumeSample:
        e = self.entries[i]
        vol = load_volume(self.root / e.volume_path)
        mask = load_mask(self.root / e.mask_path)
        return VolumeSample(vol, mask, e.annotation, e.label, e.id)


def load_manifest(path) -> DatasetManifest:
    """Read ``manifest.json`` (or a directory containing one); paths resolve relative to it."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError("bad-header", f"manifest is not valid JSON: {exc}") from None
    if doc.get("format_version") != MANIFEST_VERSION:
        raise FormatError("bad-version", f"unsupported manifest version {doc.get('format_version')!r}")
    try:
        entries = [ManifestEntry(str(s["id"]), str(s["volume_path"]), str(s["mask_path"]),
                                 NoduleAnnotation.from_json(s["annotation"]), int(s["label"]))
                   for s in doc["samples"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("bad-header", f"malformed manifest entry: {exc}") from None
    for e in entries:
        for p in (e.volume_path, e.mask_path):
            if not (path.parent / p).is_file():
                raise FileNotFoundError(f"{e.id}: {path.parent / p} does not exist")
    return DatasetManifest(entries, path.parent, doc.get("meta", {}))


# ---------------------------------------------------------------------------
# Preprocessing geometry
# ---------------------------------------------------------------------------


def apply_lung_mask(v: Volume, mask: np.ndarray) -> Volume:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != v.data.shape:
        raise ValueError(f"mask {mask.shape} does not match volume {v.data.shape}")
    return Volume(np.where(mask, v.data, np.float32(AIR_HU)), v.spacing)


def block_average(x: np.ndarray, factor: int) -> np.ndarray:
    """Mean over non-overlapping ``factor`` x ``factor`` blocks of the last two axes."""
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} is not divisible by {factor}")
    if factor == 1:
        return x
    return x.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1), dtype=np.float64).astype(x.dtype)


def downsample_slice(slice_: np.ndarray) -> np.ndarray:
    """512x512 -> 256x256 by 2x2 block averaging."""
    slice_ = np.asarray(slice_)
    if slice_.shape != (SLICE_SIDE, SLICE_SIDE):
        raise ValueError(f"expected a {SLICE_SIDE}x{SLICE_SIDE} slice, got {slice_.shape}")
    return block_average(slice_, 2)


def extract_nodule_patch(slice_: np.ndarray, bbox) -> np.ndarray:
    """Crop ``bbox`` and centre it on a zero 224x224 canvas (odd margins: extra row/col after)."""
    slice_ = np.asarray(slice_)
    r0, c0, rows, cols = (int(v) for v in bbox)
    if rows > PATCH_SIDE or cols > PATCH_SIDE:
        raise ValueError(f"bbox {rows}x{cols} exceeds {PATCH_SIDE}x{PATCH_SIDE}")
    if min(r0, c0) < 0 or rows < 1 or cols < 1 or r0 + rows > slice_.shape[0] or c0 + cols > slice_.shape[1]:
        raise ValueError(f"bbox {bbox} outside a {slice_.shape} slice")
    canvas = np.zeros((PATCH_SIDE, PATCH_SIDE), dtype=slice_.dtype)
    top, left = (PATCH_SIDE - rows) // 2, (PATCH_SIDE - cols) // 2
    canvas[top:top + rows, left:left + cols] = slice_[r0:r0 + rows, c0:c0 + cols]
    return canvas


def normalize_hu(x: np.ndarray) -> np.ndarray:
    lo, hi = HU_WINDOW
    return ((np.clip(x, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def build_model_inputs(sample: VolumeSample, normalize: bool = True) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Annotated slices -> aligned lists of (1, 256, 256) and (1, 224, 224) arrays.

    Masking happens first, then (optionally) the intensity window, then the
    geometry; with ``normalize`` the fill value 0 of the patch canvas is the
    same as masked-out air.
    """
    vol = apply_lung_mask(sample.volume, sample.lung_mask).data
    a = sample.annotation
    caet, swin = [], []
    for z in range(a.slice_start, a.slice_end + 1):
        s = normalize_hu(vol[z]) if normalize else vol[z]
        caet.append(downsample_slice(s)[None])
        swin.append(extract_nodule_patch(s, a.bbox)[None])
    return caet, swin


# ---------------------------------------------------------------------------
# Model-ready dataset
# ---------------------------------------------------------------------------


@dataclass
class ModelInputs:
    """Per-volume slice stacks at the resolution of a given plan."""

    ids: list[str]
    labels: np.ndarray
    caet: list[np.ndarray]  # each (k, 1, S_cae, S_cae)
    swin: list[np.ndarray]  # each (k, 1, S_swin, S_swin)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> ModelInputs:
        idx = [int(i) for i in idx]
        return ModelInputs([self.ids[i] for i in idx], self.labels[idx],
                           [self.caet[i] for i in idx], [self.swin[i] for i in idx])

    def cae_slices(self) -> np.ndarray:
        return np.concatenate(self.caet)


def resize_for_plan(caet: list[np.ndarray], swin: list[np.ndarray], plan: ModelPlan):
    """Block-average the 256/224 inputs down to the plan's input sides."""
    fc, rc = divmod(CAET_SIDE, plan.cae.input_side)
    fs, rs = divmod(PATCH_SIDE, plan.swin.img_size)
    if rc or rs:
        raise ValueError(f"plan input sides must divide {CAET_SIDE} and {PATCH_SIDE}")
    return (np.stack([block_average(c, fc) for c in caet]),
            np.stack([block_average(s, fs) for s in swin]))


def prepare_dataset(manifest: DatasetManifest, plan: ModelPlan) -> ModelInputs:
    caet, swin = [], []
    for i in range(len(manifest)):
        c, s = resize_for_plan(*build_model_inputs(manifest.load_sample(i)), plan)
        caet.append(c)
        swin.append(s)
    return ModelInputs([e.id for e in manifest.entries], manifest.labels, caet, swin)
