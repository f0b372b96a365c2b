"""Command-line surface: synth, train, render, edit, eval.

Every command writes its artifacts under the --out directory together
with a manifest recording the command, the config hash, the seed, and
(where applicable) the checkpoint hash, so runs are auditable and
reproducible.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np
from PIL import Image

from .config import ConfigError, RunConfig, dump_config, load_config
from .features import ForegroundEdit
from .metrics import flow_to_color, psnr, ssim
from .model import DynamicSceneModel
from .scene import (DatasetError, camera_rig, preset_scene, read_dataset,
                    synthesize_sequence, write_dataset)
from .training import finetune, train


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _write_manifest(out_dir: str, entries: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_manifest.txt"), "w") as fh:
        for key in sorted(entries):
            fh.write(f"{key}={entries[key]}\n")


def _load_run_config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _save_image(path: str, img: np.ndarray) -> None:
    arr = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def _build_model(cfg: RunConfig, ckpt: str | None = None) -> DynamicSceneModel:
    model = DynamicSceneModel(cfg.model_config())
    if ckpt is not None:
        if not os.path.exists(ckpt):
            raise FileNotFoundError(f"missing checkpoint: {ckpt}")
        model.load(ckpt)
    return model


# ----------------------------------------------------------------- commands
def cmd_synth(args) -> int:
    cfg = _load_run_config(args.config)
    cams = camera_rig(cfg.k, cfg.width, cfg.height, arc_deg=cfg.arc_deg,
                      elev_deg=cfg.elev_deg)
    seq = synthesize_sequence(preset_scene(cfg.scene), cams)
    write_dataset(seq, args.out)
    _write_manifest(args.out, {
        "command": "synth", "seed": cfg.seed,
        "config_hash": _sha256_text(dump_config(cfg))})
    print(f"wrote {seq.K} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    paths = args.data.split(",")
    seqs = [read_dataset(p) for p in paths]
    model = _build_model(cfg, args.init)
    os.makedirs(args.out, exist_ok=True)
    tc = cfg.train_config()
    if args.init is not None:
        history = finetune(model, seqs[0], tc, out_dir=args.out)
    else:
        history = train(model, seqs, tc, out_dir=args.out)
    with open(os.path.join(args.out, "losses.csv"), "w") as fh:
        if history:
            keys = list(history[0])
            fh.write(",".join(keys) + "\n")
            for row in history:
                fh.write(",".join(repr(row[k]) for k in keys) + "\n")
    ckpt = os.path.join(args.out, "checkpoint.bin")
    _write_manifest(args.out, {
        "command": "train", "seed": cfg.seed, "data": args.data,
        "config_hash": _sha256_text(dump_config(cfg)),
        "checkpoint_hash": _sha256(ckpt)})
    print(f"finished {len(history)} steps; checkpoint at {ckpt}")
    return 0


def _render_frames(model, ctx, protocol: str, seq):
    if protocol == "fixed-view":
        # reproduce the recorded views: sweep time, frame i from camera i
        return [(i, None) for i in range(seq.K)]
    mid = seq.K // 2
    return [(mid, seq.cameras[i]) for i in range(seq.K)]


def _render_to_dir(model, ctx, out_dir: str, protocol: str, seed: int,
                   edit=None, static_ctx=None) -> None:
    seq = ctx.seq
    want_flow = protocol == "fixed-view"
    os.makedirs(os.path.join(out_dir, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "fg"), exist_ok=True)
    for n, (frame, camera) in enumerate(_render_frames(model, ctx, protocol,
                                                       seq)):
        maps = model.render_image(ctx, frame, camera=camera, seed=seed,
                                  edit=edit, static_ctx=static_ctx,
                                  need_flow=want_flow)
        _save_image(os.path.join(out_dir, "rgb", f"{n:04d}.png"), maps["rgb"])
        _save_image(os.path.join(out_dir, "fg", f"{n:04d}.png"), maps["fg"])
        for key in ("flow_fw", "flow_bw"):
            if key not in maps:
                continue
            sub = os.path.join(out_dir, key)
            os.makedirs(sub, exist_ok=True)
            maps[key].astype("<f4").tofile(
                os.path.join(sub, f"{n:04d}.f32"))
            _save_image(os.path.join(sub, f"{n:04d}.png"),
                        flow_to_color(maps[key]))


def cmd_render(args) -> int:
    cfg = _load_run_config(args.config)
    seq = read_dataset(args.data)
    model = _build_model(cfg, args.ckpt)
    ctx = model.encode(seq)
    _render_to_dir(model, ctx, args.out, args.protocol, cfg.seed)
    _write_manifest(args.out, {
        "command": "render", "seed": cfg.seed, "protocol": args.protocol,
        "data": args.data, "config_hash": _sha256_text(dump_config(cfg)),
        "checkpoint_hash": _sha256(args.ckpt)})
    print(f"rendered {seq.K} frames to {args.out}")
    return 0


def parse_edit_ops(spec: str):
    """Parse an op chain like "flip;translate:0.1,0,0;swap-bg:DIR".

    Returns (ForegroundEdit, background dataset path or None). Ops
    compose left to right.
    """
    edit = ForegroundEdit()
    swap_dir = None
    for token in spec.split(";"):
        token = token.strip()
        if not token:
            continue
        name, _, payload = token.partition(":")
        vals = [p for p in payload.split(",") if p] if payload else []
        if name == "translate":
            edit = edit.then(ForegroundEdit.translate([float(v)
                                                       for v in vals]))
        elif name == "scale":
            anchor = [float(v) for v in vals[1:4]] if len(vals) > 1 \
                else (0.0, 0.0, 0.0)
            edit = edit.then(ForegroundEdit.scale(float(vals[0]), anchor))
        elif name == "flip":
            axis = int(vals[0]) if vals else 0
            plane = float(vals[1]) if len(vals) > 1 else 0.0
            edit = edit.then(ForegroundEdit.flip(axis, plane))
        elif name == "duplicate":
            edit = edit.then(ForegroundEdit.duplicate([float(v)
                                                       for v in vals]))
        elif name == "swap-bg":
            swap_dir = payload
        else:
            raise ValueError(f"unknown edit op {name!r}")
    return edit, swap_dir


def cmd_edit(args) -> int:
    cfg = _load_run_config(args.config)
    seq = read_dataset(args.data)
    edit, swap_dir = parse_edit_ops(args.ops)
    model = _build_model(cfg, args.ckpt)
    ctx = model.encode(seq)
    static_ctx = model.encode(read_dataset(swap_dir)) if swap_dir else None
    _render_to_dir(model, ctx, args.out, "fixed-view", cfg.seed,
                   edit=edit, static_ctx=static_ctx)
    _write_manifest(args.out, {
        "command": "edit", "seed": cfg.seed, "ops": args.ops,
        "data": args.data, "config_hash": _sha256_text(dump_config(cfg)),
        "checkpoint_hash": _sha256(args.ckpt)})
    print(f"rendered {seq.K} edited frames to {args.out}")
    return 0


def cmd_eval(args) -> int:
    rows = []
    n = 0
    while True:
        pred_path = os.path.join(args.pred, "rgb", f"{n:04d}.png")
        gt_path = os.path.join(args.gt, "rgb", f"{n:04d}.png")
        if not os.path.exists(pred_path):
            break
        if not os.path.exists(gt_path):
            raise FileNotFoundError(f"missing ground truth: {gt_path}")
        pred = np.asarray(Image.open(pred_path), dtype=np.float64) / 255.0
        gt = np.asarray(Image.open(gt_path), dtype=np.float64) / 255.0
        rows.append((psnr(pred, gt), ssim(pred, gt)))
        n += 1
    if not rows:
        raise FileNotFoundError(
            f"no prediction frames under {args.pred}/rgb")
    lines = [f"protocol={args.protocol}", f"frames={len(rows)}"]
    for i, (p, s) in enumerate(rows):
        lines.append(f"frame_{i:04d}_psnr={p!r}")
        lines.append(f"frame_{i:04d}_ssim={s!r}")
    lines.append(f"mean_psnr={float(np.mean([r[0] for r in rows]))!r}")
    lines.append(f"mean_ssim={float(np.mean([r[1] for r in rows]))!r}")
    report = "\n".join(lines) + "\n"
    with open(args.report, "w") as fh:
        fh.write(report)
    print(report.splitlines()[-2])
    print(report.splitlines()[-1])
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dynfield",
        description="Desk-scale generalizable dynamic radiance fields")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a toy dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on one or more datasets")
    p.add_argument("--config")
    p.add_argument("--data", required=True,
                   help="dataset dir, or comma-separated list")
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint to fine-tune from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a trained checkpoint")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("fixed-view", "novel-view"),
                   default="fixed-view")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("edit", help="render with foreground/background edits")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ops", required=True,
                   help='e.g. "flip;translate:0.1,0,0;swap-bg:DIR"')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="compare renders against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--protocol", default="training-frames")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
