"""Command-line entry points: train, evaluate, ablate, gradcam, params.

Experiments are described by an INI-style config file with [model],
[training], and [data] sections; every key has a default matching the
standard recipe (lr 1e-4, weight decay 1e-4, batch size 8, 100 epochs,
scales 0.75/1.0/1.25, 352 px inputs). All artifacts land under --out-dir;
inputs are never mutated.
"""

import argparse
import configparser
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .data import DATASET_NAMES, load_dataset, make_toy_set, normalize_image, resize_pair
from .exceptions import IngestionError
from .gradcam import (
    block_heatmaps,
    centroid,
    get_block,
    region_statistics,
    save_heatmap_png,
)
from .model import (
    REFERENCE_PARAMS_M,
    VARIANTS,
    ModelConfig,
    build,
    count_parameters,
    load_checkpoint,
    variant_components,
)
from .rta import count_attention_layers
from .training import (
    TrainConfig,
    evaluate,
    set_determinism,
    train,
    write_metric_reports,
)


def load_experiment_config(path=None, overrides=None):
    """Returns (ModelConfig, TrainConfig, data dict)."""
    cp = configparser.ConfigParser()
    if path is not None:
        read = cp.read(path)
        if not read:
            raise IngestionError(f"config file not found: {path}")
    m = cp["model"] if cp.has_section("model") else {}
    t = cp["training"] if cp.has_section("training") else {}
    d = cp["data"] if cp.has_section("data") else {}
    overrides = overrides or {}

    model_cfg = ModelConfig(
        preset=overrides.get("preset") or m.get("preset", "TINY"),
        variant=overrides.get("variant") or m.get("variant", "hfs+rta"),
        c_common=int(m.get("c_common", 0)),
        image_size=int(m.get("image_size", 352)),
        share_stage_weights=str(m.get("share_stage_weights", "false")).lower() == "true",
        freeze_backbone=str(m.get("freeze_backbone", "false")).lower() == "true",
    )
    model_cfg.validate()

    train_cfg = TrainConfig(
        lr=float(t.get("lr", 1e-4)),
        weight_decay=float(t.get("weight_decay", 1e-4)),
        batch_size=int(t.get("batch_size", 8)),
        epochs=int(t.get("epochs", 100)),
        scales=tuple(float(s) for s in str(t.get("scales", "0.75, 1.0, 1.25")).split(",")),
        seed=int(overrides.get("seed") if overrides.get("seed") is not None else t.get("seed", 0)),
        device=overrides.get("device") or t.get("device", "cpu"),
        grad_clip_norm=float(t.get("grad_clip_norm", 0.0)),
    )
    train_cfg.validate()

    data_cfg = {
        "source": d.get("source", "toy"),
        "toy_samples": int(d.get("toy_samples", 4)),
        "toy_seed": int(d.get("toy_seed", 7)),
        "train_datasets": [s.strip() for s in d.get("train_datasets", "").split(",") if s.strip()],
        "eval_datasets": [s.strip() for s in d.get("eval_datasets", "").split(",") if s.strip()],
    }
    return model_cfg, train_cfg, data_cfg


def _load_train_samples(model_cfg, data_cfg, data_root):
    if data_cfg["source"] == "toy":
        return make_toy_set(data_cfg["toy_samples"], model_cfg.image_size, data_cfg["toy_seed"])
    if data_root is None or not Path(data_root).is_dir():
        raise IngestionError(f"data root not found: {data_root}")
    names = data_cfg["train_datasets"] or ["CVC-ClinicDB", "Kvasir"]
    samples = []
    for name in names:
        ds, _, split = name.partition(":")
        loaded = load_dataset(data_root, ds, split=split or None)
        samples.extend(resize_pair(s, model_cfg.image_size) for s in loaded)
    return samples


def _eval_sets(model_cfg, data_cfg, data_root, train_samples):
    """(name, samples) pairs to evaluate on after training."""
    sets = [("train", train_samples)]
    if data_cfg["source"] == "toy":
        sets.append(
            ("toy-test", make_toy_set(data_cfg["toy_samples"], model_cfg.image_size,
                                      data_cfg["toy_seed"] + 1))
        )
    else:
        for name in data_cfg["eval_datasets"] or list(DATASET_NAMES):
            ds, _, split = name.partition(":")
            try:
                sets.append((ds, load_dataset(data_root, ds, split=split or None)))
            except IngestionError:
                continue
    return sets


def cmd_train(config_path, data_root, out_dir, seed=None, device=None, deterministic=False,
              preset=None, variant=None):
    model_cfg, train_cfg, data_cfg = load_experiment_config(
        config_path, {"seed": seed, "device": device, "preset": preset, "variant": variant}
    )
    set_determinism(train_cfg.seed, strict=deterministic)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    samples = _load_train_samples(model_cfg, data_cfg, data_root)
    model = build(model_cfg, seed=train_cfg.seed)
    history = train(model, samples, train_cfg, out_dir=out)

    reports = []
    for name, eval_samples in _eval_sets(model_cfg, data_cfg, data_root, samples):
        reports.append((name, evaluate(model, eval_samples)))
    write_metric_reports(out / "metrics.jsonl", reports)
    _plot_loss(history, out / "loss_curve.png")

    for name, rep in reports:
        print(f"{name}: dice={rep.dice:.4f} miou={rep.miou:.4f} n={rep.n_images}")
    print(f"artifacts written to {out}")
    return 0


def _plot_loss(history, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([h["epoch"] for h in history], [h["mean_loss"] for h in history])
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_evaluate(checkpoint, data_root, out_dir, datasets=None):
    model, _ = load_checkpoint(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = datasets or list(DATASET_NAMES)
    reports = []
    for name in names:
        ds, _, split = name.partition(":")
        samples = load_dataset(data_root, ds, split=split or None)
        rep = evaluate(model, samples)
        reports.append((ds, rep))
        print(f"{ds}: dice={rep.dice:.4f} miou={rep.miou:.4f} n={rep.n_images}")
    write_metric_reports(out / "metrics.jsonl", reports)
    return 0


def cmd_ablate(config_path, data_root, out_dir, seed=None, device=None, deterministic=False,
               preset=None):
    """Train the four variants under one seed and tabulate their metrics."""
    model_cfg, train_cfg, data_cfg = load_experiment_config(
        config_path, {"seed": seed, "device": device, "preset": preset}
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for variant in VARIANTS:
        set_determinism(train_cfg.seed, strict=deterministic)
        cfg = ModelConfig(**{**model_cfg.to_dict(), "variant": variant})
        samples = _load_train_samples(cfg, data_cfg, data_root)
        model = build(cfg, seed=train_cfg.seed)
        train(model, samples, train_cfg)
        row = {
            "variant": variant,
            "components": variant_components(variant),
            "reverse_attention_sublayers": (
                count_attention_layers(model.hfs) if model.hfs is not None else 0
            ),
            "metrics": {},
        }
        for name, eval_samples in _eval_sets(cfg, data_cfg, data_root, samples):
            rep = evaluate(model, eval_samples)
            row["metrics"][name] = {"dice": rep.dice, "miou": rep.miou, "n_images": rep.n_images}
        rows.append(row)

    with open(out / "ablation.json", "w") as f:
        json.dump(rows, f, indent=2)
    _print_ablation_table(rows)
    print(f"ablation table written to {out / 'ablation.json'}")
    return 0


def _print_ablation_table(rows):
    datasets = list(rows[0]["metrics"])
    mark = lambda b: "x" if b else " "
    header = f"{'HFS':>4} {'RA':>3} {'RTA':>4}"
    for d in datasets:
        header += f" | {d + ' DICE':>14} {'mIoU':>6}"
    print(header)
    for row in rows:
        c = row["components"]
        line = f"{mark(c['hfs']):>4} {mark(c['ra']):>3} {mark(c['rta']):>4}"
        for d in datasets:
            m = row["metrics"][d]
            line += f" | {m['dice']:>14.4f} {m['miou']:>6.4f}"
        print(line)


def cmd_gradcam(checkpoint, image_path, out_dir, level=1, mask_path=None):
    model, _ = load_checkpoint(checkpoint)
    model.eval()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    from PIL import Image

    try:
        image = np.asarray(Image.open(image_path).convert("RGB"))
    except Exception as e:
        raise IngestionError(f"unreadable image file {image_path}: {e}") from e
    x = normalize_image(image).unsqueeze(0)
    size = model.config.image_size
    if x.shape[2:] != (size, size):
        x = torch.nn.functional.interpolate(
            x, size=(size, size), mode="bilinear", align_corners=False
        )

    get_block(model, level)  # fail early, listing available levels
    heatmaps = block_heatmaps(model, level, x)
    for key, cam in heatmaps.items():
        save_heatmap_png(cam, out / f"level{level}_{key.replace('.', '_')}.png")

    if mask_path is not None:
        mask = np.asarray(Image.open(mask_path).convert("L")) > 128
    else:
        with torch.no_grad():
            mask = (torch.sigmoid(model(x)) > 0.5).squeeze().cpu().numpy().astype(bool)

    stats = {}
    for key, cam in heatmaps.items():
        stats[key] = {
            "region_mass": region_statistics(cam, mask),
            "centroid": centroid(cam),
            "shape": list(cam.shape),
        }
    b1 = np.mean([stats[f"bottleneck1.{i}"]["region_mass"]["interior"] for i in range(3)])
    b2 = np.mean([stats[f"bottleneck2.{i}"]["region_mass"]["interior"] for i in range(3)])
    stats["summary"] = {
        "bottleneck1_interior_mass": float(b1),
        "bottleneck2_interior_mass": float(b2),
        "note": "first bottleneck tends to the region itself, second to its periphery",
    }
    with open(out / "gradcam_stats.json", "w") as f:
        json.dump(stats, f, indent=2)

    print(f"wrote {len(heatmaps)} heatmaps for block level {level} to {out}")
    print(
        f"interior heat mass: bottleneck1={b1:.3f} bottleneck2={b2:.3f} "
        f"({'interior vs periphery as expected' if b1 >= b2 else 'inverted on this input'})"
    )
    return 0


def cmd_params():
    """Parameter table for every preset against the published totals."""
    print(f"{'preset':>7} {'backbone':>9} {'params':>13} {'published':>11} {'deviation':>10}")
    from .model import PRESET_BACKBONES

    for preset in ("T", "S", "M", "L", "TINY"):
        with torch.device("meta"):
            model = build(ModelConfig(preset=preset, variant="hfs+rta"))
        n = count_parameters(model)
        ref = REFERENCE_PARAMS_M.get(preset)
        if ref is None:
            print(f"{preset:>7} {PRESET_BACKBONES[preset]:>9} {n:>13,} {'-':>11} {'-':>10}")
        else:
            dev = 100.0 * (n - ref * 1e6) / (ref * 1e6)
            flag = "" if abs(dev) <= 10 else "  <-- outside +/-10%"
            print(
                f"{preset:>7} {PRESET_BACKBONES[preset]:>9} {n:>13,} {ref:>10.1f}M "
                f"{dev:>+9.2f}%{flag}"
            )
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="rtaformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", default=None, help="INI experiment config")
        p.add_argument("--data-root", default=None)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--preset", default=None)
        p.add_argument("--variant", default=None)
        p.add_argument("--device", default=None)

    p_train = sub.add_parser("train", help="train a model and write artifacts")
    common(p_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on datasets")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data-root", required=True)
    p_eval.add_argument("--out-dir", required=True)
    p_eval.add_argument("--datasets", default=None, help="comma list, NAME or NAME:split")

    p_abl = sub.add_parser("ablate", help="run the four-variant ablation matrix")
    common(p_abl)

    p_cam = sub.add_parser("gradcam", help="emit bottleneck heatmaps for an image")
    p_cam.add_argument("--checkpoint", required=True)
    p_cam.add_argument("--image", required=True)
    p_cam.add_argument("--out-dir", required=True)
    p_cam.add_argument("--level", type=int, default=1)
    p_cam.add_argument("--mask", default=None)

    sub.add_parser("params", help="parameter counts vs published sizes")

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(
                args.config, args.data_root, args.out_dir,
                seed=args.seed, device=args.device, deterministic=args.deterministic,
                preset=args.preset, variant=args.variant,
            )
        if args.command == "evaluate":
            datasets = args.datasets.split(",") if args.datasets else None
            return cmd_evaluate(args.checkpoint, args.data_root, args.out_dir, datasets)
        if args.command == "ablate":
            return cmd_ablate(
                args.config, args.data_root, args.out_dir,
                seed=args.seed, device=args.device, deterministic=args.deterministic,
                preset=args.preset,
            )
        if args.command == "gradcam":
            return cmd_gradcam(
                args.checkpoint, args.image, args.out_dir,
                level=args.level, mask_path=args.mask,
            )
        if args.command == "params":
            return cmd_params()
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
