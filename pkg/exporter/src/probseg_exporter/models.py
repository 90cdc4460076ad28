"""Model loading and the bundled demonstration network.

Model contract: `forward(image)` takes one (3, H, W) float tensor with
values in [0, 1] and returns three tensors

  boxes        (n, 4)  x1, y1, x2, y2 in pixel coordinates
  class_probs  (n, c+1) softmax rows, background at index 0
  masks        (n, r, r) box-local foreground probabilities in (0, 1)

exactly the quantities the run format stores per detection.  Outputs
are the model's own post-processed detections; nothing downstream of
the model is merged or thresholded here.
"""

import re
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F


class ExportError(RuntimeError):
    """Raised when a model, image or configuration cannot be used."""


# Region proposals of the demo network, as frame fractions.
_PROPOSALS = (
    (0.08, 0.10, 0.52, 0.60),
    (0.45, 0.38, 0.92, 0.88),
    (0.15, 0.55, 0.60, 0.95),
)

_TINY_SEED = 17


class TinyInstanceNet(nn.Module):
    """Small synthetic detector in the two-stage mold.

    A convolutional encoder feeds a box head that scores fixed region
    proposals and a mask head that emits box-local probability masks.
    Dropout sits in all three groups so stochastic forward passes can be
    sampled anywhere; with every group in eval mode the forward is fully
    deterministic.
    """

    def __init__(self, n_classes: int = 2, n_dets: int = 2, roi: int = 14, p: float = 0.2):
        super().__init__()
        if not 1 <= n_dets <= len(_PROPOSALS):
            raise ExportError(f"n_dets must be in [1, {len(_PROPOSALS)}]")
        self.n_classes = n_classes
        self.n_dets = n_dets
        self.roi = roi
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 8, 3, padding=1),
            nn.ReLU(),
            nn.Dropout2d(p),
            nn.Conv2d(8, 8, 3, padding=1),
            nn.ReLU(),
        )
        self.box_head = nn.Sequential(
            nn.Linear(8, 32),
            nn.ReLU(),
            nn.Dropout(p),
            nn.Linear(32, n_classes + 1),
        )
        self.mask_head = nn.Sequential(
            nn.Conv2d(8, 8, 3, padding=1),
            nn.ReLU(),
            nn.Dropout2d(p),
            nn.Conv2d(8, 1, 1),
        )

    def forward(self, image):
        f = self.encoder(image.unsqueeze(0))
        h, w = image.shape[-2:]
        boxes, probs, masks = [], [], []
        for fx1, fy1, fx2, fy2 in _PROPOSALS[: self.n_dets]:
            x1, y1, x2, y2 = fx1 * w, fy1 * h, fx2 * w, fy2 * h
            ix1, iy1 = int(x1), int(y1)
            ix2, iy2 = max(int(x2), ix1 + 1), max(int(y2), iy1 + 1)
            crop = f[:, :, iy1:iy2, ix1:ix2]
            pooled = crop.mean(dim=(2, 3))
            logits = self.box_head(pooled)[0]
            roi_in = F.adaptive_avg_pool2d(crop, (self.roi, self.roi))
            mask = torch.sigmoid(self.mask_head(roi_in))[0, 0]
            boxes.append(torch.tensor([x1, y1, x2, y2]))
            probs.append(torch.softmax(logits, dim=0))
            masks.append(mask)
        return torch.stack(boxes), torch.stack(probs), torch.stack(masks)


def _build_tiny(n_classes: int) -> TinyInstanceNet:
    torch.manual_seed(_TINY_SEED)
    net = TinyInstanceNet(n_classes=n_classes)
    with torch.no_grad():
        # Bias masks toward confident foreground and the class logits away
        # from background, so that the demo emits well-formed detections.
        net.mask_head[-1].bias.fill_(1.2)
        bias = torch.full((n_classes + 1,), 0.4)
        bias[0] = -1.0
        bias[1] = 1.5
        net.box_head[-1].bias.copy_(bias)
    return net


def load_model(identifier: str) -> nn.Module:
    """Build or load the model named by `identifier`.

    "tiny" is the bundled two-class demo network with fixed seeded
    weights; "tiny-cN" selects N foreground classes.  "script:<path>"
    loads a TorchScript module implementing the same forward contract.
    """
    if identifier == "tiny":
        return _build_tiny(2)
    m = re.fullmatch(r"tiny-c(\d+)", identifier)
    if m:
        n = int(m.group(1))
        if n < 1:
            raise ExportError("tiny-cN needs at least one class")
        return _build_tiny(n)
    if identifier.startswith("script:"):
        path = Path(identifier[len("script:") :])
        try:
            return torch.jit.load(str(path), map_location="cpu")
        except (OSError, RuntimeError, ValueError) as e:
            raise ExportError(f"could not load model from {path}: {e}") from e
    raise ExportError(f"unknown model identifier {identifier!r}")
