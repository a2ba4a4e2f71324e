"""Dataset ingestion, synthetic toy data, split manifests.

Disk layout: <root>/<dataset>/{images,masks}/<id>.png, 8-bit, masks
single-channel. Masks binarize at the >128 threshold. Images normalize
with the fixed per-channel statistics below so checkpoints are
reproducible across machines.

The toy generator renders a filled random ellipse over a smooth noise
texture, which is enough signal for overfit-style sanity training without
any downloaded data.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .exceptions import IngestionError, ValidationError

DATASET_NAMES = ("CVC-ClinicDB", "CVC-ColonDB", "CVC-300", "ETIS-LaribPolypDB", "Kvasir")
TRAIN_COUNTS = {"CVC-ClinicDB": 550, "Kvasir": 900}

NORMALIZATION_MEAN = (0.485, 0.456, 0.406)
NORMALIZATION_STD = (0.229, 0.224, 0.225)

MASK_THRESHOLD = 128


@dataclass
class SegSample:
    image: torch.Tensor  # (3, H, W) float32, channel-normalized
    mask: torch.Tensor  # (1, H, W) float32 in {0, 1}
    id: str


def normalize_image(arr):
    """uint8 or [0,1] float HWC array -> normalized (3,H,W) float tensor."""
    a = np.asarray(arr, dtype=np.float32)
    if a.max() > 1.5:
        a = a / 255.0
    if a.ndim == 2:
        a = np.stack([a] * 3, axis=-1)
    mean = np.array(NORMALIZATION_MEAN, dtype=np.float32)
    std = np.array(NORMALIZATION_STD, dtype=np.float32)
    a = (a - mean) / std
    return torch.from_numpy(a.transpose(2, 0, 1).copy())


def denormalize_image(tensor):
    """Normalized (3,H,W) tensor back to a uint8 HWC array."""
    a = tensor.detach().cpu().numpy().transpose(1, 2, 0)
    a = a * np.array(NORMALIZATION_STD) + np.array(NORMALIZATION_MEAN)
    return (np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)


def binarize_mask(arr):
    a = np.asarray(arr)
    mask = (a > MASK_THRESHOLD).astype(np.float32)
    return torch.from_numpy(mask)[None, :, :]


def _read_ids(manifest_path):
    with open(manifest_path) as f:
        return [line.strip() for line in f if line.strip()]


def load_dataset(root_dir, dataset_name, split=None):
    """Load every matched image/mask pair, sorted by id.

    split: None loads everything; "train"/"test" filters with the
    dataset's <split>.txt manifest.
    """
    base = Path(root_dir) / dataset_name
    img_dir = base / "images"
    mask_dir = base / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise IngestionError(f"{base}: needs parallel images/ and masks/ directories")
    names = sorted(p.name for p in img_dir.iterdir() if p.is_file())
    if not names:
        raise IngestionError(f"{img_dir}: no image files found")
    if split is not None:
        manifest = base / f"{split}.txt"
        if not manifest.is_file():
            raise IngestionError(f"{manifest}: split manifest not found")
        wanted = set(_read_ids(manifest))
        names = [n for n in names if Path(n).stem in wanted]
        missing = wanted - {Path(n).stem for n in names}
        if missing:
            raise IngestionError(
                f"{dataset_name}: manifest ids missing on disk: {sorted(missing)[:5]}"
            )
    samples = []
    for name in names:
        sample_id = Path(name).stem
        mask_path = mask_dir / name
        if not mask_path.is_file():
            raise IngestionError(f"{dataset_name}: no mask for image id {sample_id!r}")
        try:
            image = np.asarray(Image.open(img_dir / name).convert("RGB"))
        except Exception as e:
            raise IngestionError(f"unreadable image file {img_dir / name}: {e}") from e
        try:
            mask = np.asarray(Image.open(mask_path).convert("L"))
        except Exception as e:
            raise IngestionError(f"unreadable mask file {mask_path}: {e}") from e
        samples.append(SegSample(normalize_image(image), binarize_mask(mask), sample_id))
    return samples


def make_toy_set(n, size, seed):
    """n deterministic ellipse-on-texture samples at size x size."""
    if size % 32 != 0:
        raise ValidationError(f"toy size {size} not divisible by 32")
    rng = np.random.RandomState(seed)
    samples = []
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for k in range(n):
        cx, cy = rng.uniform(0.35, 0.65, 2) * size
        # axes bounded so the ellipse stays inside the frame and covers
        # between ~8% and ~36% of it
        a, b = rng.uniform(0.16, 0.34, 2) * size
        theta = rng.uniform(0.0, np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        mask = ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float32)

        channels = []
        tint = (0.45, 0.15, 0.1)  # polyp-ish reddish lift
        for c in range(3):
            texture = gaussian_filter(rng.rand(size, size), sigma=size / 16.0)
            texture = 0.25 + 0.4 * (texture - texture.min()) / (
                texture.max() - texture.min() + 1e-9
            )
            channels.append(texture + tint[c] * mask)
        img = np.stack(channels, axis=-1)
        img = gaussian_filter(img, sigma=(1.2, 1.2, 0))  # soften the boundary
        img = np.clip(img, 0.0, 1.0).astype(np.float32)

        samples.append(
            SegSample(
                normalize_image(img),
                torch.from_numpy(mask)[None, :, :],
                f"toy_{seed}_{k:03d}",
            )
        )
    return samples


def resize_pair(sample, target):
    """Bilinear for the image, nearest for the mask (keeps it binary)."""
    if target % 32 != 0:
        raise ValidationError(f"target size {target} not divisible by 32")
    if sample.image.shape[1:] == (target, target):
        return SegSample(sample.image.clone(), sample.mask.clone(), sample.id)
    image = F.interpolate(
        sample.image.unsqueeze(0), size=(target, target), mode="bilinear", align_corners=False
    ).squeeze(0)
    mask = F.interpolate(sample.mask.unsqueeze(0), size=(target, target), mode="nearest").squeeze(0)
    return SegSample(image, mask, sample.id)


@dataclass
class SplitSpec:
    """Training ids drawn from two datasets plus per-dataset test ids."""

    train: dict  # dataset name -> list of ids
    test: dict

    def validate(self):
        n_train = sum(len(v) for v in self.train.values())
        expected = sum(TRAIN_COUNTS.values())
        if n_train != expected:
            raise ValidationError(f"train split has {n_train} ids, expected {expected}")
        for name, count in TRAIN_COUNTS.items():
            if len(self.train.get(name, [])) != count:
                raise ValidationError(
                    f"{name}: train split has {len(self.train.get(name, []))} ids, "
                    f"expected {count}"
                )
        for name in self.train:
            overlap = set(self.train[name]) & set(self.test.get(name, []))
            if overlap:
                raise ValidationError(
                    f"{name}: train/test overlap: {sorted(overlap)[:5]}"
                )


def build_split_manifests(root_dir):
    """Write train.txt/test.txt per dataset from the files on disk.

    Training draws the first 550 CVC-ClinicDB and first 900 Kvasir ids in
    sorted order; everything else (including the other three datasets) is
    test. Manifests make the split bit-exact afterwards.
    """
    root = Path(root_dir)
    train, test = {}, {}
    for name in DATASET_NAMES:
        base = root / name
        if not (base / "images").is_dir():
            continue
        ids = sorted(p.stem for p in (base / "images").iterdir() if p.is_file())
        k = TRAIN_COUNTS.get(name, 0)
        if len(ids) < k:
            raise IngestionError(f"{name}: {len(ids)} images on disk, split needs {k}")
        train_ids, test_ids = ids[:k], ids[k:]
        if train_ids:
            train[name] = train_ids
            (base / "train.txt").write_text("\n".join(train_ids) + "\n")
        test[name] = test_ids
        (base / "test.txt").write_text("\n".join(test_ids) + ("\n" if test_ids else ""))
    spec = SplitSpec(train, test)
    spec.validate()
    return spec
