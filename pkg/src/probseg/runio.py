"""Run directory interchange format.

Layout of a run directory:

  manifest.json       image_id, width, height, class_names (index 0 is the
                      background), num_passes, pass_files
  pass_<k>.bin        one file per forward pass; see below
  ground_truth.json   optional; instances with label + COCO-style RLE counts

Pass file layout (little-endian):

  magic  b"PSEG" | version u16 | detection count u32
  per detection: box 4*f32 | class distribution (c+1)*f32
                 | mask width*height f32 row-major

The same record layout is reused for fused-observation exports, with a
single record per file (count = 1) and the grid payload carrying the mean
mask, heatmap or a variance map.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    BBox,
    BinaryMask,
    ClassDist,
    Detection,
    GroundTruthInstance,
    ProbMask,
    SampleSet,
    Scene,
    ValidationError,
)

MAGIC = b"PSEG"
VERSION = 1
_HEADER = struct.Struct("<4sHI")


@dataclass(frozen=True)
class RunMeta:
    """Manifest-level description of a run."""

    image_id: str
    width: int
    height: int
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(self.class_names) < 2:
            raise ValidationError("need background plus at least one class")
        if self.width < 1 or self.height < 1:
            raise ValidationError("frame dimensions must be positive")

    @property
    def num_classes(self) -> int:
        """Number of affordance classes, background excluded."""
        return len(self.class_names) - 1


# ---------------------------------------------------------------------------
# COCO-style run-length encoding (column-major, runs alternate 0s then 1s)


def rle_encode(bits: np.ndarray) -> list[int]:
    flat = np.asarray(bits, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return [0]
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts.insert(0, 0)  # counts always start with a run of zeros
    return [int(c) for c in counts]


def rle_decode(counts: list[int], height: int, width: int) -> np.ndarray:
    total = sum(counts)
    if total != height * width:
        raise ValidationError(
            f"RLE counts sum to {total}, expected {height * width}"
        )
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos : pos + c] = True
        pos += c
        value = not value
    return flat.reshape((height, width), order="F")


# ---------------------------------------------------------------------------
# Pass files


def write_pass_file(path: Path, detections: list[Detection]) -> None:
    chunks = [_HEADER.pack(MAGIC, VERSION, len(detections))]
    for det in detections:
        chunks.append(det.box.as_array().astype("<f4").tobytes())
        chunks.append(det.classes.probs.astype("<f4").tobytes())
        chunks.append(det.prob_mask.values.astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))


def read_pass_file(
    path: Path, meta: RunMeta, pass_index: int
) -> list[Detection]:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path.name}: truncated header")
    magic, version, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValidationError(f"{path.name}: bad magic {magic!r}")
    if version != VERSION:
        raise ValidationError(f"{path.name}: unsupported version {version}")
    n_probs = len(meta.class_names)
    grid = meta.width * meta.height
    record = 4 * (4 + n_probs + grid)
    expected = _HEADER.size + count * record
    if len(raw) != expected:
        raise ValidationError(
            f"{path.name}: size {len(raw)} does not match {count} detections"
        )
    detections = []
    off = _HEADER.size
    for k in range(count):
        ctx = f"pass {pass_index}, detection {k}: "
        vals = np.frombuffer(raw, dtype="<f4", count=4 + n_probs + grid, offset=off)
        off += record
        try:
            box = BBox(*(float(v) for v in vals[:4]))
            classes = ClassDist(vals[4 : 4 + n_probs].copy())
            mask = ProbMask(vals[4 + n_probs :].reshape(meta.height, meta.width).copy())
            det = Detection(box, classes, mask)
            det.validate(meta.width, meta.height, context=ctx)
        except ValidationError as e:
            msg = str(e)
            raise ValidationError(msg if msg.startswith(ctx) else ctx + msg) from None
        detections.append(det)
    return detections


# ---------------------------------------------------------------------------
# Ground truth


def _scene_to_json(scene: Scene) -> dict:
    return {
        "image_id": scene.image_id,
        "instances": [
            {
                "label": inst.label,
                "mask": {
                    "size": [inst.mask.height, inst.mask.width],
                    "counts": rle_encode(inst.mask.bits),
                },
            }
            for inst in scene.instances
        ],
    }


def _scene_from_json(data: dict, meta: RunMeta) -> Scene:
    instances = []
    for k, rec in enumerate(data.get("instances", [])):
        size = rec["mask"]["size"]
        if size != [meta.height, meta.width]:
            raise ValidationError(
                f"ground truth instance {k}: mask size {size} does not match frame"
            )
        label = int(rec["label"])
        if not 1 <= label <= meta.num_classes:
            raise ValidationError(
                f"ground truth instance {k}: label {label} out of range"
            )
        bits = rle_decode(rec["mask"]["counts"], meta.height, meta.width)
        instances.append(GroundTruthInstance(label, BinaryMask(bits)))
    return Scene(data.get("image_id", meta.image_id), meta.width, meta.height, tuple(instances))


# ---------------------------------------------------------------------------
# Whole runs


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_run(
    meta: RunMeta,
    samples: list[SampleSet],
    scene: Scene | None,
    run_dir: str | Path,
) -> Path:
    """Write a run directory; raises before touching disk on invalid input."""
    run_dir = Path(run_dir)
    if scene is not None and (scene.width != meta.width or scene.height != meta.height):
        raise ValidationError(
            f"scene is {scene.width}x{scene.height}, manifest says "
            f"{meta.width}x{meta.height}"
        )
    for s in samples:
        for k, det in enumerate(s.detections):
            det.validate(meta.width, meta.height, context=f"pass {s.pass_index}, detection {k}: ")
            if len(det.classes) != len(meta.class_names):
                raise ValidationError(
                    f"pass {s.pass_index}, detection {k}: class distribution length "
                    f"{len(det.classes)} does not match manifest"
                )
    run_dir.mkdir(parents=True, exist_ok=True)
    pass_files = []
    for s in sorted(samples, key=lambda s: s.pass_index):
        name = f"pass_{s.pass_index}.bin"
        write_pass_file(run_dir / name, list(s.detections))
        pass_files.append(name)
    _write_json(
        run_dir / "manifest.json",
        {
            "image_id": meta.image_id,
            "width": meta.width,
            "height": meta.height,
            "class_names": list(meta.class_names),
            "num_passes": len(samples),
            "pass_files": pass_files,
        },
    )
    if scene is not None:
        _write_json(run_dir / "ground_truth.json", _scene_to_json(scene))
    return run_dir


def load_run(run_dir: str | Path) -> tuple[RunMeta, list[SampleSet], Scene | None]:
    """Load and validate a run directory; M = len(samples)."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        raise ValidationError(f"no manifest.json in {run_dir}")
    try:
        manifest = json.loads(manifest_path.read_text())
        meta = RunMeta(
            image_id=str(manifest["image_id"]),
            width=int(manifest["width"]),
            height=int(manifest["height"]),
            class_names=tuple(str(n) for n in manifest["class_names"]),
        )
        pass_files = list(manifest["pass_files"])
        declared = int(manifest["num_passes"])
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ValidationError(f"malformed manifest: {e}") from e
    if declared != len(pass_files):
        raise ValidationError(
            f"manifest declares {declared} passes but lists {len(pass_files)} files"
        )
    if not pass_files:
        raise ValidationError("no samples")
    samples = []
    for k, name in enumerate(pass_files):
        detections = read_pass_file(run_dir / name, meta, pass_index=k)
        samples.append(SampleSet(pass_index=k, detections=tuple(detections)))
    scene = None
    gt_path = run_dir / "ground_truth.json"
    if gt_path.is_file():
        scene = _scene_from_json(json.loads(gt_path.read_text()), meta)
    return meta, samples, scene


# ---------------------------------------------------------------------------
# Grid exports (fused observations, variance maps) and PGM rendering


def write_grid_file(
    path: Path, box: BBox, classes: ClassDist, grid: np.ndarray
) -> None:
    """Single-record pass-layout file carrying an arbitrary [0,1] grid."""
    det = Detection(box, classes, ProbMask(np.asarray(grid, dtype=np.float32)))
    write_pass_file(path, [det])


def read_grid_file(path: Path, meta: RunMeta) -> np.ndarray:
    det = read_pass_file(path, meta, pass_index=0)
    if len(det) != 1:
        raise ValidationError(f"{path.name}: expected a single record")
    return det[0].prob_mask.values


def write_pgm(path: Path, gray: np.ndarray) -> None:
    """8-bit binary PGM."""
    g = np.asarray(gray)
    if g.dtype != np.uint8:
        raise ValidationError("PGM payload must be uint8")
    h, w = g.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + g.tobytes())
