"""Selective re-arming of dropout layers for test-time sampling.

Layer groups follow the usual two-stage detector split: the feature
encoder, the box/classification head, and the mask head.  Group
membership is read off the qualified module name, so any model whose
dropout layers live under sensibly named submodules (encoder, box_head,
mask_head and the like) classifies correctly without modification.
Dropout layers that match no head keyword are counted as encoder
layers, the catch-all for everything upstream of the heads.
"""

from torch import nn

GROUPS = ("encoder", "box", "mask")

_DROPOUT_TYPES = (
    nn.Dropout,
    nn.Dropout1d,
    nn.Dropout2d,
    nn.Dropout3d,
    nn.AlphaDropout,
    nn.FeatureAlphaDropout,
)


def dropout_groups(model: nn.Module) -> dict:
    """Map each group name to its [(qualified_name, module), ...] list."""
    found = {g: [] for g in GROUPS}
    for name, mod in model.named_modules():
        if not isinstance(mod, _DROPOUT_TYPES):
            continue
        if "mask" in name:
            group = "mask"
        elif "box" in name:
            group = "box"
        else:
            group = "encoder"
        found[group].append((name, mod))
    return found


def set_stochastic(model: nn.Module, enabled=GROUPS) -> int:
    """Put the model in eval mode, then re-arm dropout in `enabled` groups.

    Returns the number of dropout modules left stochastic; zero means the
    next forward passes will be deterministic.
    """
    enabled = tuple(enabled)
    unknown = sorted(set(enabled) - set(GROUPS))
    if unknown:
        raise ValueError(f"unknown dropout groups {unknown}, expected {GROUPS}")
    model.eval()
    armed = 0
    groups = dropout_groups(model)
    for g in enabled:
        for _, mod in groups[g]:
            mod.train()
            armed += 1
    return armed
