"""Loss, metrics, and the optimizer loop.

The loss combines weighted binary cross-entropy and weighted IoU, both
under a boundary-emphasis map 1 + 5*|avgpool31(gt) - gt| that is large in
a band around mask boundaries and 1 in uniform regions. Metrics are
per-image Dice and IoU at a fixed threshold, averaged over the dataset.
"""

import json
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ShapeError, ValidationError
from .model import save_checkpoint


def set_determinism(seed, strict=False):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if strict:
        torch.use_deterministic_algorithms(True, warn_only=True)


def _check_binary(mask, name):
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValidationError(f"{name} must be binary (0/1)")


def boundary_weight_map(gt):
    """1 + 5*|avgpool31(gt) - gt|: 1 in uniform regions, up to 6 near edges."""
    return 1 + 5 * torch.abs(F.avg_pool2d(gt, 31, stride=1, padding=15) - gt)


def structure_loss(logits, gt_mask):
    """Boundary-weighted BCE + boundary-weighted IoU, averaged over the batch."""
    if logits.shape != gt_mask.shape:
        raise ShapeError(
            f"logits {tuple(logits.shape)} vs ground truth {tuple(gt_mask.shape)}"
        )
    _check_binary(gt_mask, "ground-truth mask")
    gt = gt_mask.to(logits.dtype)
    weit = boundary_weight_map(gt)
    wbce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")
    wbce = (weit * wbce).sum(dim=(2, 3)) / weit.sum(dim=(2, 3))

    pred = torch.sigmoid(logits)
    inter = ((pred * gt) * weit).sum(dim=(2, 3))
    union = ((pred + gt) * weit).sum(dim=(2, 3))
    wiou = 1 - (inter + 1) / (union - inter + 1)
    return (wbce + wiou).mean()


def dice(pred_mask, gt_mask):
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError(f"{tuple(pred_mask.shape)} vs {tuple(gt_mask.shape)}")
    _check_binary(pred_mask, "predicted mask")
    _check_binary(gt_mask, "ground-truth mask")
    inter = (pred_mask.bool() & gt_mask.bool()).sum().item()
    total = pred_mask.sum().item() + gt_mask.sum().item()
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def iou(pred_mask, gt_mask):
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError(f"{tuple(pred_mask.shape)} vs {tuple(gt_mask.shape)}")
    _check_binary(pred_mask, "predicted mask")
    _check_binary(gt_mask, "ground-truth mask")
    inter = (pred_mask.bool() & gt_mask.bool()).sum().item()
    union = (pred_mask.bool() | gt_mask.bool()).sum().item()
    if union == 0:
        return 1.0
    return inter / union


@dataclass
class MetricReport:
    dice: float
    miou: float
    n_images: int

    def to_dict(self, dataset=""):
        d = {"dice": self.dice, "miou": self.miou, "n_images": self.n_images}
        if dataset:
            d = {"dataset": dataset, **d}
        return d


@torch.no_grad()
def evaluate(model, samples, threshold=0.5):
    """Per-image metrics at the ground truth's native resolution."""
    if len(samples) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    device = next(model.parameters()).device
    was_training = model.training
    model.eval()
    size = model.config.image_size
    dices, ious = [], []
    for s in samples:
        image = s.image.unsqueeze(0).to(device)
        if image.shape[2:] != (size, size):
            image = F.interpolate(image, size=(size, size), mode="bilinear", align_corners=False)
        logits = model(image)
        gt = s.mask.unsqueeze(0).to(device)
        if logits.shape[2:] != gt.shape[2:]:
            logits = F.interpolate(logits, size=gt.shape[2:], mode="bilinear", align_corners=False)
        pred = (torch.sigmoid(logits) > threshold).float()
        dices.append(dice(pred, gt))
        ious.append(iou(pred, gt))
    if was_training:
        model.train()
    return MetricReport(float(np.mean(dices)), float(np.mean(ious)), len(samples))


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 100
    scales: tuple = (0.75, 1.0, 1.25)
    seed: int = 0
    device: str = "cpu"
    grad_clip_norm: float = 0.0  # 0 disables clipping

    def validate(self):
        if any(s <= 0 for s in self.scales):
            raise ValidationError(f"scales must be positive, got {self.scales}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")


def round_to_stride(x, stride=32):
    """Nearest multiple of the backbone stride, half rounded up, floor 1x."""
    return max(stride, int(x / stride + 0.5) * stride)


def _rescale_batch(images, masks, size):
    if images.shape[2:] == (size, size):
        return images, masks
    images = F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)
    masks = F.interpolate(masks, size=(size, size), mode="nearest")
    return images, masks


def _first_nonfinite_parameter(model):
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            return name
    return None


def train(model, samples, config: TrainConfig, out_dir=None):
    """Adam loop with per-batch multi-scale resizing; returns loss history.

    Expects all samples at the model's configured image size. When
    out_dir is given, writes checkpoint.pt and loss_history.jsonl there.
    """
    config.validate()
    if len(samples) == 0:
        raise ValidationError("cannot train on an empty dataset")
    device = torch.device(config.device)
    model.to(device)
    model.train()

    size = model.config.image_size
    images = torch.stack([s.image for s in samples]).to(device)
    masks = torch.stack([s.mask for s in samples]).to(device)
    if images.shape[2:] != (size, size):
        raise ShapeError(
            f"samples are {tuple(images.shape[2:])}, model expects ({size}, {size}); "
            "resize them first"
        )

    optimizer = torch.optim.Adam(
        (p for p in model.parameters() if p.requires_grad),
        lr=config.lr,
        weight_decay=config.weight_decay,
    )
    gen = torch.Generator().manual_seed(config.seed)
    n = len(samples)
    bs = min(config.batch_size, n)
    history = []

    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        losses = []
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            scale_idx = int(torch.randint(len(config.scales), (1,), generator=gen))
            scaled = round_to_stride(config.scales[scale_idx] * size)
            bx, bm = _rescale_batch(images[idx], masks[idx], scaled)

            optimizer.zero_grad()
            loss = structure_loss(model(bx), bm)
            if not torch.isfinite(loss):
                bad = _first_nonfinite_parameter(model)
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} batch {start // bs}"
                    + (f"; first non-finite parameter: {bad}" if bad else "")
                )
            loss.backward()
            if config.grad_clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
            optimizer.step()
            losses.append(loss.item())
        history.append(
            {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": config.lr}
        )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "checkpoint.pt")
        write_loss_history(out_dir / "loss_history.jsonl", history)
    return history


def write_loss_history(path, history):
    with open(path, "w") as f:
        for rec in history:
            f.write(json.dumps(rec) + "\n")


def write_metric_reports(path, reports):
    """reports: list of (dataset_name, MetricReport)."""
    with open(path, "w") as f:
        for name, rep in reports:
            f.write(json.dumps(rep.to_dict(dataset=name)) + "\n")
