"""Portable tensor containers, detection logs, and sequence bundles.

The on-disk tensor format is deliberately minimal so that any language can
produce bit-identical files: an 8-byte magic, a 4-byte little-endian header
length, a UTF-8 JSON header {name, dtype, shape}, then the raw row-major
little-endian payload.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvariantError, MissingFieldError

MAGIC = b"UNISHTC1"
MAX_RANK = 5

_DTYPES = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "int64": np.dtype("<i8"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


@dataclass
class TensorContainer:
    name: str
    dtype: str
    shape: tuple[int, ...]
    data: np.ndarray  # 1-D array of the stored dtype, row-major order

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.dtype not in _DTYPES:
            raise InvariantError(f"unsupported dtype {self.dtype!r}")
        if len(self.shape) > MAX_RANK:
            raise InvariantError(f"rank {len(self.shape)} exceeds {MAX_RANK}")
        if any(s < 0 for s in self.shape):
            raise InvariantError(f"negative extent in shape {self.shape}")
        self.data = np.ascontiguousarray(self.data, dtype=_DTYPES[self.dtype]).ravel()
        count = int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1
        if count != self.data.size:
            raise InvariantError(
                f"shape {self.shape} implies {count} elements, payload has {self.data.size}"
            )

    @classmethod
    def from_array(cls, name: str, array: np.ndarray) -> "TensorContainer":
        array = np.asarray(array)
        if array.dtype == np.bool_:
            array = array.astype(np.uint8)
        if array.dtype not in _DTYPE_NAMES:
            if np.issubdtype(array.dtype, np.floating):
                array = array.astype(np.float32)
            elif np.issubdtype(array.dtype, np.integer):
                array = array.astype(np.int64)
            else:
                raise InvariantError(f"cannot store dtype {array.dtype}")
        return cls(name, _DTYPE_NAMES[np.dtype(array.dtype)], array.shape, array.ravel())

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorContainer):
            return NotImplemented
        return (
            self.name == other.name
            and self.dtype == other.dtype
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def write_tensor(container: TensorContainer, path) -> None:
    header = json.dumps(
        {"name": container.name, "dtype": container.dtype, "shape": list(container.shape)},
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(4, "little"))
        f.write(header)
        f.write(container.data.tobytes())


def read_tensor(path) -> TensorContainer:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        raw_len = f.read(4)
        if len(raw_len) != 4:
            raise FormatError(f"{path}: truncated header length")
        header_len = int.from_bytes(raw_len, "little")
        raw_header = f.read(header_len)
        if len(raw_header) != header_len:
            raise FormatError(f"{path}: truncated header")
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unparseable header: {exc}") from exc
        for key in ("name", "dtype", "shape"):
            if key not in header:
                raise FormatError(f"{path}: header missing {key!r}")
        dtype = header["dtype"]
        if dtype not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype {dtype!r}")
        shape = tuple(int(s) for s in header["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = f.read(count * _DTYPES[dtype].itemsize + 1)
    if len(payload) < count * _DTYPES[dtype].itemsize:
        raise FormatError(f"{path}: truncated payload")
    if len(payload) > count * _DTYPES[dtype].itemsize:
        raise FormatError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(payload, dtype=_DTYPES[dtype])
    return TensorContainer(header["name"], dtype, shape, data.copy())


@dataclass
class Box:
    label: str
    x0: float
    y0: float
    x1: float
    y1: float
    score: float


@dataclass
class DetectionRecord:
    frame_index: int
    boxes: list[Box]
    image_size: tuple[int, int]  # (width, height) in pixels
    content_change_score: float = 0.0

    def validate(self) -> None:
        if self.frame_index < 0:
            raise InvariantError(f"frame {self.frame_index}: negative frame index")
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise InvariantError(f"frame {self.frame_index}: non-positive image size")
        if self.content_change_score < 0:
            raise InvariantError(f"frame {self.frame_index}: negative cut score")
        for b in self.boxes:
            if b.x0 > b.x1 or b.y0 > b.y1:
                raise InvariantError(f"frame {self.frame_index}: inverted box {b}")
            if not (0.0 <= b.score <= 1.0):
                raise InvariantError(f"frame {self.frame_index}: score {b.score} outside [0,1]")


def read_detections(path) -> list[DetectionRecord]:
    """Parse a line-delimited JSON detection log, one frame per line.

    Records come back sorted by frame index; duplicate frames are an error.
    """
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                boxes = [
                    Box(str(b["cls"]), float(b["x0"]), float(b["y0"]),
                        float(b["x1"]), float(b["y1"]), float(b["score"]))
                    for b in obj.get("boxes", [])
                ]
                rec = DetectionRecord(
                    frame_index=int(obj["frame"]),
                    boxes=boxes,
                    image_size=(int(obj["size"][0]), int(obj["size"][1])),
                    content_change_score=float(obj.get("cut_score", 0.0)),
                )
            except (KeyError, TypeError, IndexError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad record: {exc}") from exc
            rec.validate()
            records.append(rec)
    seen = set()
    for rec in records:
        if rec.frame_index in seen:
            raise FormatError(f"{path}: duplicate frame_index {rec.frame_index}")
        seen.add(rec.frame_index)
    records.sort(key=lambda r: r.frame_index)
    return records


def write_detections(records: list[DetectionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            obj = {
                "frame": rec.frame_index,
                "boxes": [
                    {"cls": b.label, "x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1,
                     "score": b.score}
                    for b in rec.boxes
                ],
                "size": [rec.image_size[0], rec.image_size[1]],
                "cut_score": rec.content_change_score,
            }
            f.write(json.dumps(obj, separators=(",", ":")) + "\n")


# Per-frame raster stacks a sequence bundle may carry.  Masks are stored as
# uint8 rasters; any nonzero value is treated as foreground on load.
_BUNDLE_ARRAYS = (
    "pointmaps",        # (N,H,W,3) predicted, camera frame, backbone scale
    "orig_pointmaps",   # (N,H,W,3) frozen pre-trained prediction
    "confidence",       # (N,H,W)
    "masks",            # (N,H,W) uint8 human masks
    "pseudo_depth",     # (N,H,W) expert-model depth labels
    "geo_tokens",       # (N,L,Dg)
    "hmr_tokens",       # (N,Dh)
    "poses",            # (N,J,3) per-frame axis-angle predictions
    "betas",            # (N,B) per-frame shape predictions
    "translations",     # (N,3) predicted raw translations
    "gt_poses",         # (N,J,3)
    "gt_betas",         # (B,)
    "gt_translations",  # (N,3) metric
    "j2d",              # (N,J,2) 2D keypoint labels (pixels)
    "extrinsics",       # (N,3,4) camera poses [R|T]
)


@dataclass
class SequenceBundle:
    """In-memory view of one video's backbone outputs and labels."""

    frames: int
    fps: float = 30.0
    scalars: dict = field(default_factory=dict)
    pointmaps: np.ndarray | None = None
    orig_pointmaps: np.ndarray | None = None
    confidence: np.ndarray | None = None
    masks: np.ndarray | None = None
    pseudo_depth: np.ndarray | None = None
    geo_tokens: np.ndarray | None = None
    hmr_tokens: np.ndarray | None = None
    poses: np.ndarray | None = None
    betas: np.ndarray | None = None
    translations: np.ndarray | None = None
    gt_poses: np.ndarray | None = None
    gt_betas: np.ndarray | None = None
    gt_translations: np.ndarray | None = None
    j2d: np.ndarray | None = None
    extrinsics: np.ndarray | None = None

    def __post_init__(self):
        if self.frames < 1:
            raise InvariantError("bundle needs at least one frame")
        hw = None
        for name in ("pointmaps", "orig_pointmaps", "confidence", "masks", "pseudo_depth"):
            arr = getattr(self, name)
            if arr is None:
                continue
            if arr.shape[0] != self.frames:
                raise InvariantError(f"{name}: frame count {arr.shape[0]} != {self.frames}")
            this_hw = arr.shape[1:3]
            if hw is None:
                hw = this_hw
            elif this_hw != hw:
                raise InvariantError(f"{name}: raster size {this_hw} != {hw}")
        if self.masks is not None:
            self.masks = (self.masks != 0)

    def require(self, *names: str):
        for name in names:
            if getattr(self, name) is None:
                raise MissingFieldError(name)
        if len(names) == 1:
            return getattr(self, names[0])
        return tuple(getattr(self, n) for n in names)

    @property
    def raster_size(self) -> tuple[int, int]:
        """(width, height) of the per-frame rasters."""
        for name in ("pointmaps", "confidence", "masks", "pseudo_depth"):
            arr = getattr(self, name)
            if arr is not None:
                return int(arr.shape[2]), int(arr.shape[1])
        raise MissingFieldError("any raster field")


def save_bundle(bundle: SequenceBundle, directory) -> None:
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    fields: dict[str, str] = {}
    for name in _BUNDLE_ARRAYS:
        arr = getattr(bundle, name)
        if arr is None:
            continue
        if name == "masks":
            arr = np.asarray(arr, dtype=np.uint8)
        fname = f"{name}.tc"
        write_tensor(TensorContainer.from_array(name, arr), directory / fname)
        fields[name] = fname
    manifest = {
        "frames": bundle.frames,
        "fps": bundle.fps,
        "fields": fields,
        "scalars": bundle.scalars,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_bundle(directory) -> SequenceBundle:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: no manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    kwargs = {
        "frames": int(manifest["frames"]),
        "fps": float(manifest.get("fps", 30.0)),
        "scalars": dict(manifest.get("scalars", {})),
    }
    for name, fname in manifest.get("fields", {}).items():
        if name not in _BUNDLE_ARRAYS:
            raise FormatError(f"{directory}: unknown bundle field {name!r}")
        kwargs[name] = read_tensor(directory / fname).to_array()
    return SequenceBundle(**kwargs)
