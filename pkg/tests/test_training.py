import numpy as np
import pytest
import torch
import torch.nn as nn

from conftest import assert_gradient_matches
from rtaformer.data import SegSample, make_toy_set
from rtaformer.exceptions import ShapeError, ValidationError
from rtaformer.model import ModelConfig, build
from rtaformer.training import (
    TrainConfig,
    boundary_weight_map,
    dice,
    evaluate,
    iou,
    round_to_stride,
    structure_loss,
    train,
)


def brute_force_counts(pred, gt):
    """Independent oracle: explicit pixel counting on integer arrays."""
    p = np.asarray(pred, dtype=np.int64).ravel()
    g = np.asarray(gt, dtype=np.int64).ravel()
    inter = int(sum(1 for a, b in zip(p, g) if a == 1 and b == 1))
    union = int(sum(1 for a, b in zip(p, g) if a == 1 or b == 1))
    return inter, int(p.sum()), int(g.sum()), union


class ConstantLogitModel(nn.Module):
    """Emits one constant logit everywhere; enough for metric conventions."""

    def __init__(self, value, image_size=64):
        super().__init__()
        self.config = ModelConfig(preset="TINY", image_size=image_size)
        self.value = value
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return torch.full((x.shape[0], 1, x.shape[2], x.shape[3]), self.value)


# ---------------------------------------------------------------- metrics


def test_dice_iou_trivial_cases():
    a = torch.ones(1, 8, 8)
    b = torch.ones(1, 8, 8)
    assert dice(a, b) == 1.0 and iou(a, b) == 1.0

    d = torch.zeros(1, 8, 8)
    d[0, :4] = 1
    e = torch.zeros(1, 8, 8)
    e[0, 4:] = 1
    assert dice(d, e) == 0.0 and iou(d, e) == 0.0

    # pred covers exactly half of gt and nothing else
    gt = torch.zeros(1, 8, 8)
    gt[0, :4] = 1.0  # 32 px
    pred = torch.zeros(1, 8, 8)
    pred[0, :2] = 1.0  # 16 px, all inside gt
    assert abs(dice(pred, gt) - 2.0 / 3.0) < 1e-12
    assert abs(iou(pred, gt) - 0.5) < 1e-12


def test_both_empty_convention():
    z = torch.zeros(1, 4, 4)
    assert dice(z, z) == 1.0
    assert iou(z, z) == 1.0


def test_non_binary_rejected():
    with pytest.raises(ValidationError):
        dice(torch.full((2, 2), 0.5), torch.zeros(2, 2))
    with pytest.raises(ValidationError):
        iou(torch.zeros(2, 2), torch.full((2, 2), 2.0))
    with pytest.raises(ShapeError):
        dice(torch.zeros(2, 2), torch.zeros(3, 3))


def test_metrics_match_brute_force_on_random_masks():
    rng = np.random.RandomState(0)
    for _ in range(1000):
        pred = torch.from_numpy((rng.rand(8, 8) > rng.uniform(0.2, 0.8)).astype(np.float32))
        gt = torch.from_numpy((rng.rand(8, 8) > rng.uniform(0.2, 0.8)).astype(np.float32))
        inter, np_, ng, union = brute_force_counts(pred, gt)
        d = dice(pred, gt)
        j = iou(pred, gt)
        expected_d = 1.0 if np_ + ng == 0 else 2.0 * inter / (np_ + ng)
        expected_j = 1.0 if union == 0 else inter / union
        assert d == expected_d
        assert j == expected_j
        # per-image identity between the two overlap scores
        assert abs(d - 2.0 * j / (1.0 + j)) < 1e-12
        assert j <= d + 1e-15


# ---------------------------------------------------------------- loss


def random_gt(rng, h=8, w=8):
    return torch.from_numpy((rng.rand(1, 1, h, w) > 0.5).astype(np.float32))


def test_structure_loss_gradient_matches_finite_differences():
    rng = np.random.RandomState(1)
    gt = random_gt(rng, 6, 6).double()

    def f(logits):
        return structure_loss(logits, gt)

    logits = torch.randn(1, 1, 6, 6, dtype=torch.float64)
    assert_gradient_matches(f, logits, rel_tol=1e-3, step=1e-4)


def test_structure_loss_ordering_aligned_vs_inverted():
    rng = np.random.RandomState(2)
    for _ in range(100):
        gt = random_gt(rng)
        aligned = 20.0 * (2 * gt - 1)
        inverted = -aligned
        assert structure_loss(aligned, gt) < structure_loss(inverted, gt)


def test_structure_loss_prefers_confident_negative_on_empty_gt():
    gt = torch.zeros(1, 1, 16, 16)
    low = structure_loss(torch.full((1, 1, 16, 16), -20.0), gt)
    mid = structure_loss(torch.zeros(1, 1, 16, 16), gt)
    assert low < mid


def test_structure_loss_finite_nonnegative_and_validates():
    gt = torch.zeros(1, 1, 8, 8)
    gt[0, 0, 2:5, 2:5] = 1
    loss = structure_loss(torch.randn(1, 1, 8, 8), gt)
    assert torch.isfinite(loss) and loss.item() >= 0
    with pytest.raises(ShapeError):
        structure_loss(torch.zeros(1, 1, 4, 4), gt)
    with pytest.raises(ValidationError):
        structure_loss(torch.zeros(1, 1, 8, 8), torch.full((1, 1, 8, 8), 0.3))


def test_boundary_weight_map_is_one_in_uniform_interior():
    gt = torch.ones(1, 1, 64, 64)
    weit = boundary_weight_map(gt)
    assert weit[0, 0, 32, 32].item() == 1.0  # window fully inside the region
    assert weit[0, 0, 0, 0].item() > 1.0  # image border sees zero padding

    # a small square inside a large field: weights rise around its edge
    gt2 = torch.zeros(1, 1, 64, 64)
    gt2[0, 0, 24:40, 24:40] = 1
    weit2 = boundary_weight_map(gt2)
    assert weit2[0, 0, 32, 32] > 1.0  # 8 px from the edge, inside the window
    assert weit2.max() <= 6.0


# ---------------------------------------------------------------- evaluate


def test_evaluate_conventions():
    ones = [SegSample(s.image, torch.ones_like(s.mask), s.id) for s in make_toy_set(3, 64, 0)]
    rep = evaluate(ConstantLogitModel(20.0), ones)
    assert rep.dice == 1.0 and rep.miou == 1.0 and rep.n_images == 3

    zeros = [SegSample(s.image, torch.zeros_like(s.mask), s.id) for s in make_toy_set(3, 64, 0)]
    rep = evaluate(ConstantLogitModel(20.0), zeros)
    assert rep.dice == 0.0 and rep.miou == 0.0

    with pytest.raises(ValidationError):
        evaluate(ConstantLogitModel(20.0), [])


def test_evaluate_runs_at_native_resolution(tiny_model):
    # 96 px samples against a model configured for 64 px inputs
    samples = make_toy_set(2, 96, seed=1)
    rep = evaluate(tiny_model, samples)
    assert 0.0 <= rep.miou <= rep.dice <= 1.0


def test_report_miou_never_exceeds_dice(tiny_model, toy_samples):
    rep = evaluate(tiny_model, toy_samples)
    assert 0.0 <= rep.miou <= rep.dice <= 1.0


# ---------------------------------------------------------------- training


def test_multi_scale_rounding_rule():
    assert round_to_stride(0.75 * 352) == 256
    assert round_to_stride(1.0 * 352) == 352
    assert round_to_stride(1.25 * 352) == 448
    for scale in (0.75, 1.0, 1.25):
        for base in (64, 128, 352):
            assert round_to_stride(scale * base) % 32 == 0
    assert round_to_stride(10) == 32  # floor at one stride


def short_train(seed, epochs=4):
    samples = make_toy_set(4, 64, seed=9)
    model = build(ModelConfig(preset="TINY", variant="hfs+rta", image_size=64), seed=seed)
    cfg = TrainConfig(batch_size=4, epochs=epochs, seed=seed)
    history = train(model, samples, cfg)
    return model, history


def test_training_is_deterministic_and_finite():
    model_a, hist_a = short_train(seed=5)
    model_b, hist_b = short_train(seed=5)
    assert hist_a == hist_b
    for (na, pa), (nb, pb) in zip(
        model_a.state_dict().items(), model_b.state_dict().items()
    ):
        assert na == nb and torch.equal(pa, pb)
    assert all(np.isfinite(h["mean_loss"]) for h in hist_a)
    assert [h["epoch"] for h in hist_a] == list(range(4))
    assert all(h["lr"] == 1e-4 for h in hist_a)


def test_training_loss_decreases_overall():
    _, hist = short_train(seed=6, epochs=12)
    assert hist[-1]["mean_loss"] < hist[0]["mean_loss"]


def test_non_finite_loss_aborts_with_diagnostic():
    samples = make_toy_set(2, 64, seed=9)
    model = build(ModelConfig(preset="TINY", variant="hfs+rta", image_size=64), seed=0)
    with torch.no_grad():
        model.decoder.head.weight[0, 0, 0, 0] = float("nan")
    with pytest.raises(RuntimeError, match="batch 0"):
        train(model, samples, TrainConfig(batch_size=2, epochs=1, seed=0))


def test_train_writes_artifacts(tmp_path):
    samples = make_toy_set(2, 64, seed=9)
    model = build(ModelConfig(preset="TINY", variant="hfs+rta", image_size=64), seed=0)
    history = train(model, samples, TrainConfig(batch_size=2, epochs=2, seed=0), out_dir=tmp_path)
    assert (tmp_path / "checkpoint.pt").exists()
    lines = (tmp_path / "loss_history.jsonl").read_text().strip().splitlines()
    assert len(lines) == len(history) == 2


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(scales=(0.5, -1.0)).validate()
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0).validate()
    samples = make_toy_set(2, 64, seed=9)
    model = build(ModelConfig(preset="TINY", variant="hfs+rta", image_size=64), seed=0)
    with pytest.raises(ValidationError):
        train(model, [], TrainConfig())
    with pytest.raises(ShapeError):
        train(model, make_toy_set(2, 96, seed=0), TrainConfig(epochs=1))
