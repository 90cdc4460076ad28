"""Writer for the detection run interchange format.

This module carries no dependency on the consumer toolkit on purpose:
the on-disk layout is the contract between the two packages, and the
round-trip tests load everything written here through the consumer's
own reader.

Layout of a run directory:

  manifest.json   image_id, width, height, class_names (index 0 is the
                  background), num_passes, pass_files
  pass_<k>.bin    one file per forward pass

Pass file layout (little-endian):

  magic b"PSEG" | version u16 | detection count u32
  per detection: box 4*f32 | class distribution (c+1)*f32
                 | mask width*height f32 row-major
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSEG"
VERSION = 1
_HEADER = struct.Struct("<4sHI")


def pack_pass(detections) -> bytes:
    """Serialize one pass.

    `detections` is a sequence of (box, class_probs, mask) triples where
    box is 4 floats (x1, y1, x2, y2), class_probs a length c+1 float
    vector summing to 1, and mask a (height, width) float array in [0,1].
    """
    chunks = [_HEADER.pack(MAGIC, VERSION, len(detections))]
    for box, probs, mask in detections:
        chunks.append(np.asarray(box, dtype="<f4").tobytes())
        chunks.append(np.asarray(probs, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(mask, dtype="<f4").tobytes())
    return b"".join(chunks)


def write_run(
    run_dir: Path,
    image_id: str,
    width: int,
    height: int,
    class_names,
    passes,
) -> None:
    """Write pass files plus manifest into an existing directory."""
    run_dir = Path(run_dir)
    pass_files = []
    for k, detections in enumerate(passes):
        name = f"pass_{k}.bin"
        (run_dir / name).write_bytes(pack_pass(detections))
        pass_files.append(name)
    manifest = {
        "image_id": image_id,
        "width": int(width),
        "height": int(height),
        "class_names": list(class_names),
        "num_passes": len(pass_files),
        "pass_files": pass_files,
    }
    (run_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
