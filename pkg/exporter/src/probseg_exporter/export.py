"""Stochastic forward passes of a torch model, written as run directories.

The passes are executed sequentially so that dropout draws never share
state within one forward, and the whole run is staged in memory first:
a failure at any point (unreadable image, broken model, bad class
table) leaves no partial run directory behind.
"""

import math
import os
import shutil
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.nn import functional as F

from .dropout import GROUPS, set_stochastic
from .models import ExportError, load_model
from .runformat import write_run


@dataclass(frozen=True)
class ExportConfig:
    """Everything the command line exposes, one flag per field."""

    model: str = "tiny"
    passes: int = 8
    stochastic_groups: tuple = GROUPS
    images: tuple = ()
    class_names: tuple = ("background", "thing_a", "thing_b")
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stochastic_groups", tuple(self.stochastic_groups))
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.passes < 1:
            raise ExportError("M must be >= 1")
        if len(self.class_names) < 2:
            raise ExportError("need background plus at least one class name")
        unknown = sorted(set(self.stochastic_groups) - set(GROUPS))
        if unknown:
            raise ExportError(
                f"unknown dropout groups {unknown}, expected subset of {GROUPS}"
            )


def load_image(path) -> np.ndarray:
    """Read an image file as (H, W, 3) float32 in [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise ExportError(f"could not read image {path}: {e}") from e
    return arr


def paste_mask(roi, box, height: int, width: int) -> np.ndarray:
    """Resize a box-local mask to its box and paste into a zero frame.

    Returns the pasted (height, width) float32 frame together with the
    integer paste extent actually used, clamped to the frame.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    ix1 = min(max(int(math.floor(x1)), 0), width - 1)
    iy1 = min(max(int(math.floor(y1)), 0), height - 1)
    ix2 = min(max(int(math.ceil(x2)), ix1 + 1), width)
    iy2 = min(max(int(math.ceil(y2)), iy1 + 1), height)
    roi_t = torch.as_tensor(roi, dtype=torch.float32)[None, None]
    patch = F.interpolate(
        roi_t, size=(iy2 - iy1, ix2 - ix1), mode="bilinear", align_corners=False
    )[0, 0]
    frame = np.zeros((height, width), dtype=np.float32)
    frame[iy1:iy2, ix1:ix2] = np.clip(patch.numpy(), 0.0, 1.0)
    return frame, (ix1, iy1, ix2, iy2)


def _run_passes(model, tensor, config: ExportConfig, height: int, width: int):
    n_names = len(config.class_names)
    passes = []
    for _ in range(config.passes):
        with torch.no_grad():
            boxes, probs, masks = model(tensor)
        if probs.ndim != 2 or probs.shape[1] != n_names:
            raise ExportError(
                f"model emits {tuple(probs.shape)} class probabilities, "
                f"class-name table has {n_names} entries"
            )
        detections = []
        for k in range(boxes.shape[0]):
            vec = probs[k].numpy().astype(np.float64)
            s = vec.sum()
            if not np.isfinite(s) or s <= 0:
                raise ExportError(f"detection {k}: class probabilities sum to {s}")
            vec = vec / s
            frame, extent = paste_mask(masks[k], boxes[k], height, width)
            detections.append((np.asarray(extent, dtype=np.float64), vec, frame))
        passes.append(detections)
    return passes


def export_run(image_path, config: ExportConfig, out_dir, model=None) -> Path:
    """Run M stochastic passes over one image and write a run directory.

    The directory appears atomically: it is staged under a temporary
    name next to the destination and renamed only once complete.
    """
    if model is None:
        model = load_model(config.model)
    armed = set_stochastic(model, config.stochastic_groups)
    if armed == 0:
        warnings.warn(
            "no stochastic dropout layers armed; all passes will be identical",
            stacklevel=2,
        )
    image = load_image(image_path)
    height, width = image.shape[:2]
    tensor = torch.from_numpy(image).permute(2, 0, 1)
    torch.manual_seed(config.seed)
    passes = _run_passes(model, tensor, config, height, width)

    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_dir.with_name(out_dir.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        write_run(
            tmp,
            image_id=Path(image_path).stem,
            width=width,
            height=height,
            class_names=config.class_names,
            passes=passes,
        )
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir
