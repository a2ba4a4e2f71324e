"""Gradient-weighted activation maps for the reverse-attention bottlenecks.

Each reverse block holds two bottlenecks of three convs each; layer keys
"bottleneck1.0" .. "bottleneck2.2" address them. The map for a conv is
relu(sum_c mean-grad_c * activation_c), min-max normalized to [0, 1], at
the conv's native feature resolution. The score driven backwards is the
summed logit mass over the predicted foreground, so maps show what pushes
the mask decision.
"""

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image
from scipy.ndimage import binary_dilation, binary_erosion

from .exceptions import ConfigurationError

BOTTLENECK_LAYERS = tuple(f"bottleneck{b}.{i}" for b in (1, 2) for i in range(3))


def available_blocks(model):
    """Level -> reverse block, for blocks that carry both bottlenecks."""
    if model.hfs is None:
        return {}
    blocks = {}
    for i, blk in enumerate(model.hfs.blocks, start=1):
        if hasattr(blk, "bottleneck1"):
            blocks[i] = blk
    return blocks


def get_block(model, level):
    blocks = available_blocks(model)
    if level not in blocks:
        raise ConfigurationError(
            f"no reverse block at level {level}; available levels: "
            f"{sorted(blocks) or 'none (variant has no reverse blocks)'}"
        )
    return blocks[level]


def block_layer(block, key):
    if key not in BOTTLENECK_LAYERS:
        raise ConfigurationError(
            f"unknown layer {key!r}; available layers: {list(BOTTLENECK_LAYERS)}"
        )
    which, idx = key.split(".")
    bottleneck = getattr(block, which)
    return bottleneck.convs[int(idx)]


def layer_map(model, conv, images):
    """Grad-CAM heatmap for one conv layer, (H, W) float in [0, 1]."""
    model.eval()
    store = {}

    def fwd_hook(_m, _inp, out):
        store["act"] = out
        out.retain_grad()

    handle = conv.register_forward_hook(fwd_hook)
    try:
        model.zero_grad(set_to_none=True)
        logits = model(images)
        fg = (torch.sigmoid(logits) > 0.5).float()
        score = (logits * fg).sum() if fg.sum() > 0 else logits.sum()
        score.backward()
    finally:
        handle.remove()

    act = store["act"].detach()
    grad = store["act"].grad
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = torch.relu((weights * act).sum(dim=1)).mean(dim=0)
    cam = cam.cpu().numpy()
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        cam = (cam - lo) / (hi - lo)
    else:
        cam = np.zeros_like(cam)
    return cam


def block_heatmaps(model, level, images):
    block = get_block(model, level)
    return {key: layer_map(model, block_layer(block, key), images) for key in BOTTLENECK_LAYERS}


def save_heatmap_png(cam, path, cmap="jet"):
    rgba = colormaps[cmap](np.clip(cam, 0.0, 1.0))
    rgb = (rgba[..., :3] * 255).astype(np.uint8)
    Image.fromarray(rgb).save(path)


def region_statistics(cam, mask):
    """Share of heatmap mass over mask interior / boundary band / outside.

    mask: (H, W) binary array at any resolution; the heatmap is resized
    to it with nearest neighbour before integration.
    """
    mask = np.asarray(mask, dtype=bool)
    if cam.shape != mask.shape:
        t = torch.from_numpy(cam)[None, None].float()
        cam = (
            torch.nn.functional.interpolate(t, size=mask.shape, mode="bilinear", align_corners=False)
            .squeeze()
            .numpy()
        )
    band = 3
    interior = binary_erosion(mask, iterations=band)
    boundary = binary_dilation(mask, iterations=band) & ~interior
    total = cam.sum()
    if total <= 0:
        return {"interior": 0.0, "boundary": 0.0, "outside": 0.0}
    return {
        "interior": float(cam[interior].sum() / total),
        "boundary": float(cam[boundary].sum() / total),
        "outside": float(cam[~(interior | boundary)].sum() / total),
    }


def centroid(cam):
    total = cam.sum()
    if total <= 0:
        return (0.0, 0.0)
    h, w = cam.shape
    ys, xs = np.mgrid[0:h, 0:w]
    return (float((ys * cam).sum() / total), float((xs * cam).sum() / total))
