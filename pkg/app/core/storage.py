from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple

import numpy as np
from dotenv import dotenv_values
from PIL import Image

from app.core.config import FORMAT_VERSION
from app.core.errors import DataError

CHECKPOINT_MAGIC = b"CTXT"
FRAME_SUFFIXES = (".ppm", ".pgm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp")
BOXES_CSV_HEADER = "frame_index,x,y,w,h,score"


def write_json(path: Path, data: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, ensure_ascii=False, indent=2), encoding="utf-8")
    tmp.replace(path)


def fmt(value: float) -> str:
    return f"{float(value):.6g}"


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(path: Path, settings: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> Path:
    """Write ``CTXT | u32 manifest length | JSON manifest | little-endian buffers``."""
    path = Path(path)
    manifest = {
        "format_version": FORMAT_VERSION,
        "settings": dict(settings),
        "tensors": [
            {"name": name, "dtype": np.asarray(arr).dtype.str.lstrip("<>|="), "shape": list(np.shape(arr))}
            for name, arr in arrays.items()
        ],
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for arr in arrays.values():
            arr = np.asarray(arr)
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path: Path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC or len(blob) < 8:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (length,) = struct.unpack("<I", blob[4:8])
    try:
        manifest = json.loads(blob[8 : 8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable manifest") from e
    if not isinstance(manifest, dict):
        raise DataError(f"{path}: manifest is not an object")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {manifest.get('format_version')}")
    if not isinstance(manifest.get("settings"), dict):
        raise DataError(f"{path}: manifest has no settings object")
    entries = manifest.get("tensors")
    if not isinstance(entries, list):
        raise DataError(f"{path}: manifest has no tensor list")

    arrays: Dict[str, np.ndarray] = {}
    offset = 8 + length
    for i, entry in enumerate(entries):
        name, dtype, shape = _tensor_entry(path, i, entry)
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise DataError(f"{path}: truncated at tensor {name}")
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return manifest["settings"], arrays


def _tensor_entry(path: Path, index: int, entry: Any) -> Tuple[str, np.dtype, Tuple[int, ...]]:
    if not isinstance(entry, dict) or not {"name", "dtype", "shape"} <= entry.keys():
        raise DataError(f"{path}: tensor entry {index} needs name, dtype and shape")
    name = entry["name"]
    if not isinstance(name, str) or not name:
        raise DataError(f"{path}: tensor entry {index} has a bad name")
    try:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
    except (TypeError, ValueError) as e:
        raise DataError(f"{path}: tensor {name} has unknown dtype {entry['dtype']!r}") from e
    if dtype.kind not in "fiub":
        raise DataError(f"{path}: tensor {name} has unsupported dtype {dtype}")
    shape = entry["shape"]
    if not isinstance(shape, list) or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape):
        raise DataError(f"{path}: tensor {name} has a bad shape {shape!r}")
    return name, dtype, tuple(shape)


# --- sequences -----------------------------------------------------------------

@dataclass
class SequenceRecord:
    """Frames (uint8 RGB) with one ground-truth xywh box per frame."""

    name: str
    frames: List[np.ndarray]
    boxes: np.ndarray
    params: Dict[str, Any] = field(default_factory=dict)
    traces: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.frames) != len(self.boxes):
            raise DataError(f"{self.name}: {len(self.frames)} frames but {len(self.boxes)} boxes")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_size(self) -> Tuple[int, int]:
        h, w = self.frames[0].shape[:2]
        return w, h


def frame_name(index: int, suffix: str = ".ppm") -> str:
    return f"{index:08d}{suffix}"


def list_frames(directory: Path) -> List[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if not files:
        raise DataError(f"No image frames in {directory}")
    return files


def read_frame(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise DataError(f"Cannot read frame {path}: {e}") from e


def write_frame(path: Path, frame: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(frame, dtype=np.uint8)).save(path)


def parse_boxes(text: str, source: str = "boxes") -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 4:
            raise DataError(f"{source}:{lineno}: expected 'x y w h', got {line!r}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as e:
            raise DataError(f"{source}:{lineno}: {e}") from e
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def read_boxes(path: Path) -> np.ndarray:
    if not Path(path).exists():
        raise DataError(f"Missing box file: {path}")
    return parse_boxes(Path(path).read_text(encoding="utf-8"), str(path))


def write_boxes(path: Path, boxes: np.ndarray) -> None:
    lines = [" ".join(fmt(v) for v in row) for row in np.asarray(boxes).reshape(-1, 4)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_init_box(directory: Path) -> np.ndarray:
    directory = Path(directory)
    init = directory / "init.txt"
    boxes = read_boxes(init) if init.exists() else read_boxes(directory / "gt.txt")[:1]
    if len(boxes) < 1:
        raise DataError(f"No initial box in {directory}")
    return boxes[0]


def read_params(path: Path) -> Dict[str, str]:
    if not Path(path).exists():
        return {}
    return {k: v for k, v in dotenv_values(path, interpolate=False).items() if v is not None}


def write_params(path: Path, params: Mapping[str, Any]) -> None:
    lines = [f"{k} = {v}" for k, v in params.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_sequence(record: SequenceRecord, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(record.frames, start=1):
        write_frame(directory / frame_name(i), frame)
    write_boxes(directory / "gt.txt", record.boxes)
    write_boxes(directory / "init.txt", record.boxes[:1])
    if record.params:
        write_params(directory / "params.txt", record.params)
    return directory


def load_frames(directory: Path) -> List[np.ndarray]:
    return [read_frame(p) for p in list_frames(directory)]


def load_sequence(directory: Path) -> SequenceRecord:
    directory = Path(directory)
    frames = load_frames(directory)
    boxes = read_boxes(directory / "gt.txt")
    return SequenceRecord(name=directory.name, frames=frames, boxes=boxes, params=read_params(directory / "params.txt"))


def sequence_dirs(root: Path) -> List[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"Not a directory: {root}")
    if (root / "gt.txt").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "gt.txt").exists())
    if not dirs:
        raise DataError(f"No sequence directories (with gt.txt) under {root}")
    return dirs


def load_benchmark(root: Path) -> List[SequenceRecord]:
    return [load_sequence(d) for d in sequence_dirs(root)]


# --- tracker output --------------------------------------------------------------

def write_boxes_csv(path: Path, boxes: Sequence[np.ndarray], scores: Sequence[float]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [BOXES_CSV_HEADER]
    for i, (box, score) in enumerate(zip(boxes, scores), start=1):
        lines.append(",".join([str(i)] + [fmt(v) for v in box] + [fmt(score)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_boxes_csv(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Missing predictions: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("frame_index"):
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    data = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    order = np.argsort(data[:, 0], kind="stable")
    return data[order, 1:5], data[order, 5]
