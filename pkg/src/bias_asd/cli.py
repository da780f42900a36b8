"""Command-line entry point: ``bias-asd <command> [flags]``.

Every command writes its artifacts under ``--out`` and a run manifest next
to it (``<out>.run.json``) holding the command line, configuration, seed,
input hashes and timestamps. Exit codes: 0 success, 1 invalid input or
usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import TrainingError, ValidationError

log = logging.getLogger("bias_asd")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------- run manifest


def content_hash(path) -> str:
    """sha256 of a file, or of the sorted (relative path, file hash) list of a directory."""
    p = Path(path)
    if p.is_file():
        return hashlib.sha256(p.read_bytes()).hexdigest()
    h = hashlib.sha256()
    for f in sorted(q for q in p.rglob("*") if q.is_file()):
        h.update(f.relative_to(p).as_posix().encode("utf-8") + b"\0")
        h.update(hashlib.sha256(f.read_bytes()).hexdigest().encode("ascii") + b"\n")
    return h.hexdigest()


def manifest_path(out) -> Path:
    out = Path(out)
    return out.parent / f"{out.name}.run.json"


def write_run_manifest(out, command, argv, config, seed, inputs, started, outputs=None):
    info = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {name: {"path": str(p), "sha256": content_hash(p)} for name, p in inputs.items()},
        "outputs": sorted(str(o) for o in (outputs or [])),
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = manifest_path(out)
    path.write_text(json.dumps(info, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------- helpers


def _existing(path, what="input"):
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _zero_list(values):
    out = []
    for v in values or []:
        out.extend(x.strip().lower() for x in v.split(",") if x.strip())
    from .config import MODALITIES

    bad = [m for m in out if m not in MODALITIES]
    if bad:
        raise ValidationError(f"--zero accepts {', '.join(MODALITIES)}; got {', '.join(bad)}")
    return tuple(sorted(set(out), key=MODALITIES.index))


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _select_split(clips, model_path, split):
    if split == "all":
        return clips
    split_file = Path(model_path).parent / "split.json"
    if not split_file.exists():
        raise ValidationError(f"--split {split} needs {split_file}")
    ids = set(json.loads(split_file.read_text())[split])
    chosen = [c for c in clips if c.clip_id in ids]
    if not chosen:
        raise ValidationError(f"no clips of the {split} split found in the data directory")
    return chosen


def _prediction_rows(clips, scores):
    for clip, s in zip(clips, scores):
        for ts, value in zip(clip.timestamps(), s):
            yield clip.clip_id, clip.entity_id, ts, float(value)


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _fmt(x):
    return f"{x:.6f}"


# --------------------------------------------------------------------------- commands


def cmd_synth(args):
    from .datamodel import SyntheticConfig, generate_synthetic, save_dataset

    cfg = SyntheticConfig(num_clips=args.num_clips, T=args.frames, fps=args.fps, seed=args.seed,
                          noise_level=args.noise_level, speaking_prob=args.speaking_prob,
                          image_size=args.image_size)
    out = Path(args.out)
    save_dataset(generate_synthetic(cfg), out, cfg)
    return {"config": asdict(cfg), "seed": cfg.seed, "inputs": {}, "outputs": [out]}


def cmd_train(args):
    from .config import as_dict, load_configs
    from .datamodel import load_dataset
    from .training import train

    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    model_cfg, train_cfg = load_configs(_existing(args.config, "config") if args.config else None,
                                        {k: str(v) for k, v in overrides.items()})
    data = _existing(args.data, "data directory")
    clips = load_dataset(data)

    def progress(row):
        print(f"epoch {row['epoch']}: lr={row['lr']:.4g} loss={row['train_loss']:.4f} "
              f"val_mAP={row['val_map']:.4f} val_loss={row['val_loss']:.4f} ({row['seconds']:.0f}s)", flush=True)

    result = train(clips, model_cfg, train_cfg, args.out, progress=progress)
    best = result.history[result.best_epoch] if result.best_epoch >= 0 else {"val_map": math.nan, "val_loss": math.nan}
    print(f"best epoch {result.best_epoch} val_mAP={best['val_map']:.4f} val_loss={best['val_loss']:.4f}; "
          f"checkpoint {Path(args.out) / 'model.ckpt'}")
    inputs = {"data": data}
    if args.config:
        inputs["config"] = args.config
    return {"config": {"model": as_dict(model_cfg), "train": as_dict(train_cfg)}, "seed": train_cfg.seed,
            "inputs": inputs, "outputs": [Path(args.out)]}


def _predict_to_file(args, zero):
    from .checkpoint import load_checkpoint
    from .config import as_dict
    from .datamodel import load_dataset
    from .evaluation import format_predictions
    from .training import predict

    model_path = _existing(args.model, "checkpoint")
    data = _existing(args.data, "data directory")
    model, model_cfg, train_cfg = load_checkpoint(model_path)
    clips = _select_split(load_dataset(data), model_path, args.split)
    scores = predict(model, clips, zero=zero, mask_face=args.mask_face)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_predictions(_prediction_rows(clips, scores)), encoding="utf-8")
    print(f"wrote {sum(len(s) for s in scores)} frame scores for {len(clips)} clips to {out}")
    config = {"model": as_dict(model_cfg), "zero": list(zero), "split": args.split,
              "mask_face": args.mask_face}
    return {"config": config, "seed": train_cfg.seed, "inputs": {"model": model_path, "data": data},
            "outputs": [out]}


def cmd_infer(args):
    return _predict_to_file(args, ())


def cmd_ablate(args):
    zero = _zero_list(args.zero)
    if not zero:
        raise ValidationError("ablate needs at least one --zero modality")
    return _predict_to_file(args, zero)


def cmd_eval(args):
    from .datamodel import parse_manifest
    from .evaluation import MetricReport, ScoredFrame, f1, map_report, parse_predictions
    from .plotting import plot_slices

    pred_path, gt_path = _existing(args.pred, "predictions"), _existing(args.gt, "manifest")
    preds = parse_predictions(pred_path.read_text(encoding="utf-8"))
    records = parse_manifest(gt_path.read_text(encoding="utf-8"))
    if args.metric == "f1":
        by_key = {r.key: r for r in records}
        missing = [k for k in preds if k not in by_key]
        if missing:
            raise ValidationError(f"{len(missing)} predictions not in manifest, e.g. {missing[:5]}")
        frames = [ScoredFrame(k, s, by_key[k].label) for k, s in preds.items()]
        reports = [MetricReport("F1", f1(frames, args.threshold), "all", len(frames))]
    else:
        reports = map_report(preds, records, args.slice, hbp_bins=args.hbp_bins)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"reports": [r.as_dict() for r in reports]}, indent=1) + "\n")
    csv_path, png_path = out.with_suffix(".csv"), out.with_suffix(".png")
    _write_csv(csv_path, ["metric", "slice", "value", "count"],
               [[r.metric, r.slice, _fmt(r.value), r.count] for r in reports])
    plot_slices(reports, png_path, title=f"{reports[0].metric} by {args.slice}")
    for r in reports:
        print(f"{r.metric}\t{r.slice}\t{r.value:.4f}\t(n={r.count})")
    return {"config": {"slice": args.slice, "metric": args.metric, "hbp_bins": args.hbp_bins,
                       "threshold": args.threshold},
            "seed": None, "inputs": {"pred": pred_path, "gt": gt_path},
            "outputs": [out, csv_path, png_path]}


def _load_one_clip(args):
    from .checkpoint import load_checkpoint
    from .datamodel import load_clip, load_dataset

    model_path = _existing(args.model, "checkpoint")
    data = _existing(args.data, "data directory")
    model, model_cfg, train_cfg = load_checkpoint(model_path)
    if (data / "manifest.csv").exists() and (data / "frames").is_dir():
        clips = [load_clip(data)]
    else:
        clips = load_dataset(data)
    return model_path, data, model, model_cfg, train_cfg, clips


def cmd_heatmap(args):
    import torch
    from PIL import Image

    from .config import as_dict
    from .interpretability import render_heatmap, select_channels
    from .training import make_batch

    model_path, data, model, model_cfg, train_cfg, clips = _load_one_clip(args)
    if args.clip:
        clips = [c for c in clips if c.clip_id == args.clip]
        if not clips:
            raise ValidationError(f"clip {args.clip} not found")
    clip = clips[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    batch = make_batch([clip], crop_size=model_cfg.crop_size, mask_face=args.mask_face)
    with torch.no_grad():
        res = model(batch.face, batch.body, batch.mfcc, aux=False)
    gate_rows = []
    for stream, crops, backbone in (("face", batch.face[0], res.face), ("body", batch.body[0], res.body)):
        maps = backbone.pre_pool_maps[0].numpy()
        gates = backbone.se_gate[0].numpy()
        for t in range(clip.num_frames):
            sel = select_channels(gates[t], args.fraction)
            base = crops[t].permute(1, 2, 0).numpy()
            overlay = render_heatmap(maps[t], sel, base, gate=gates[t] if args.weighted else None)
            Image.fromarray(overlay.composite_uint8()).save(out / f"{stream}_{t:05d}.png")
            chosen = set(sel.selected.tolist())
            gate_rows.extend([stream, t, c, _fmt(float(g)), int(c in chosen)] for c, g in enumerate(gates[t]))
    _write_csv(out / "gates.csv", ["stream", "frame", "channel", "gate", "selected"], gate_rows)
    print(f"wrote {2 * clip.num_frames} overlays for {clip.clip_id} to {out}")
    config = {"model": as_dict(model_cfg), "clip": clip.clip_id, "fraction": args.fraction,
              "weighted": args.weighted, "mask_face": args.mask_face}
    return {"config": config, "seed": train_cfg.seed, "inputs": {"model": model_path, "data": data},
            "outputs": [out]}


def cmd_importance(args):
    import torch

    from .config import MODALITIES, as_dict
    from .interpretability import modality_importance
    from .training import make_batch

    model_path, data, model, model_cfg, train_cfg, clips = _load_one_clip(args)
    clips = _select_split(clips, model_path, args.split)
    rows, by_slice = [], {}
    for clip in clips:
        batch = make_batch([clip], crop_size=model_cfg.crop_size)
        with torch.no_grad():
            res = model(batch.face, batch.body, batch.mfcc, aux=False)
        imp = modality_importance(res.fused.fusion_gate[0].numpy(), model_cfg.embed_dim)
        category = clip.category or "uncategorized"
        rows.append(["clip", clip.clip_id, category] + [_fmt(v) for v in imp.as_tuple()])
        by_slice.setdefault("all", []).append(imp.as_tuple())
        if clip.category:
            by_slice.setdefault(clip.category, []).append(imp.as_tuple())
    for name in sorted(by_slice, key=lambda s: (s != "all", s)):
        mean = np.mean(by_slice[name], axis=0)
        rows.append(["summary", "", name] + [_fmt(v) for v in mean / mean.sum()])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "importance.csv", ["row", "clip_id", "slice", *MODALITIES], rows)
    overall = np.mean(by_slice["all"], axis=0)
    print("mean importance " + " ".join(f"{m}={v:.3f}" for m, v in zip(MODALITIES, overall)))
    return {"config": {"model": as_dict(model_cfg), "split": args.split}, "seed": train_cfg.seed,
            "inputs": {"model": model_path, "data": data}, "outputs": [out]}


def _read_annotations(path):
    """CSV ``image_id,gender,actions`` with actions as ``;``-separated ids."""
    ids, ann = [], []
    reader = csv.DictReader(io.StringIO(Path(path).read_text(encoding="utf-8")))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["image_id", "gender", "actions"]:
        raise ValidationError("annotation header must be image_id,gender,actions")
    for lineno, row in enumerate(reader, start=2):
        try:
            acts = [int(a) for a in row["actions"].split(";") if a.strip()]
        except (ValueError, AttributeError):
            raise ValidationError(f"line {lineno}: actions must be ';'-separated integers") from None
        ids.append(row["image_id"].strip())
        ann.append((row["gender"].strip().upper(), acts))
    return ids, ann


def cmd_captions(args):
    from .asdtext import build_annotations, random_annotations, split_90_10, to_coco

    inputs = {}
    if args.annotations:
        inputs["annotations"] = _existing(args.annotations, "annotations")
        ids, ann = _read_annotations(inputs["annotations"])
    else:
        ids, ann = random_annotations(args.images, args.seed)
    records = build_annotations(ids, ann)
    train_set, test_set = split_90_10(records, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, subset in (("captions_all", records), ("captions_train", train_set), ("captions_test", test_set)):
        (out / f"{name}.json").write_text(json.dumps(to_coco(subset), indent=1) + "\n", encoding="utf-8")
    print(f"{len(records)} images: {len(train_set)} train, {len(test_set)} test")
    return {"config": {"images": len(records)}, "seed": args.seed, "inputs": inputs, "outputs": [out]}


def _lines(path):
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def cmd_caption_eval(args):
    from .evaluation import caption_scores

    cand_path, refs_path = _existing(args.cand, "candidates"), _existing(args.refs, "references")
    cands = _lines(cand_path)
    refs = [[r.strip() for r in ln.split("|||") if r.strip()] for ln in _lines(refs_path)]
    if len(cands) != len(refs):
        raise ValidationError(f"{len(cands)} candidate lines but {len(refs)} reference lines")
    scores = caption_scores(cands, refs)
    for k, v in scores.items():
        print(f"{k}\t{v:.4f}")
    outputs = []
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(scores, indent=1) + "\n")
        outputs.append(out)
    return {"config": {}, "seed": None, "inputs": {"cand": cand_path, "refs": refs_path},
            "outputs": outputs}


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bias-asd", description="Audio-face-body active speaker detection toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic audio-visual dataset")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--num-clips", type=int, default=200)
    s.add_argument("--frames", type=int, default=25, help="frames per clip")
    s.add_argument("--fps", type=float, default=25.0)
    s.add_argument("--image-size", type=int, default=128)
    s.add_argument("--noise-level", type=float, default=0.05)
    s.add_argument("--speaking-prob", type=float, default=0.5)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model on a dataset directory")
    s.add_argument("--data", required=True, help="dataset directory (one sub-directory per clip)")
    s.add_argument("--config", help="key = value config file (model and training keys)")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--out", required=True, help="output directory for checkpoint and logs")
    s.set_defaults(func=cmd_train)

    for name, func, text in (("infer", cmd_infer, "score every frame of a dataset"),
                             ("ablate", cmd_ablate, "score frames with modality gates zeroed")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--model", required=True, help="checkpoint file")
        s.add_argument("--data", required=True, help="dataset directory")
        s.add_argument("--out", required=True, help="prediction CSV")
        s.add_argument("--split", choices=("all", "train", "val"), default="all",
                       help="restrict to a split recorded in split.json next to the checkpoint")
        s.add_argument("--mask-face", action="store_true", help="black out the face inside body crops")
        if name == "ablate":
            s.add_argument("--zero", action="append", required=True, metavar="MODALITY",
                           help="audio, face or body; repeat or comma-separate")
        s.set_defaults(func=func)

    s = sub.add_parser("heatmap", help="render SE-selected channel heatmaps for one clip")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="clip directory or dataset directory")
    s.add_argument("--clip", help="clip id when --data is a dataset directory")
    s.add_argument("--fraction", type=float, default=0.10, help="top fraction of SE channels")
    s.add_argument("--weighted", action="store_true", help="gate-weighted instead of plain channel mean")
    s.add_argument("--mask-face", action="store_true")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("importance", help="per-clip modality importance from the fusion gate")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("all", "train", "val"), default="all")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_importance)

    s = sub.add_parser("eval", help="mAP (or F1) of a prediction CSV against a manifest")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True, help="manifest CSV")
    s.add_argument("--slice", choices=("none", "hbp", "category"), default="none")
    s.add_argument("--hbp-bins", type=int, default=5)
    s.add_argument("--metric", choices=("map", "f1"), default="map")
    s.add_argument("--threshold", type=float, default=0.5, help="score threshold for F1")
    s.add_argument("--out", required=True, help="report JSON; CSV and PNG are written beside it")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("captions", help="build the ASD-Text caption set (COCO-style JSON)")
    s.add_argument("--annotations", help="CSV image_id,gender,actions (actions ';'-separated)")
    s.add_argument("--images", type=int, default=100, help="random annotations when no CSV is given")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_captions)

    s = sub.add_parser("caption-eval", help="BLEU-1..4, METEOR and ROUGE-L of candidate captions")
    s.add_argument("--cand", required=True, help="one candidate caption per line")
    s.add_argument("--refs", required=True, help="references per line, several separated by '|||'")
    s.add_argument("--out", help="optional JSON score file")
    s.set_defaults(func=cmd_caption_eval)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    try:
        info = args.func(args)
    except TrainingError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as exc:
        # bad flags values, unreadable or malformed inputs
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    config = dict(info["config"], elapsed_seconds=round(time.perf_counter() - t0, 3))
    out = args.out if getattr(args, "out", None) else info["inputs"].get("cand", "caption-eval")
    write_run_manifest(out, args.command, argv, config, info["seed"], info["inputs"], started,
                       info.get("outputs"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
