"""Command-line entry point: ``promptseg3d synth|train|infer|eval|plot``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ConfigError, FormatError, NumericError, PromptSegError, StateError, ValidationError
from .text.prompt import TextPrompt
from .volume.core import AnnotatedCase
from .volume.io import load_volume, save_volume
from .volume.synth import single_object_scene, synth_case, two_object_scene

log = logging.getLogger("promptseg3d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.tsv"


class DataError(PromptSegError):
    pass


# -- dataset layout ------------------------------------------------------------

def case_paths(root, case_id: str) -> dict[str, Path]:
    root = Path(root)
    return {
        "image": root / f"{case_id}_image.tdsv",
        "label": root / f"{case_id}_label.tdsv",
        "prompt": root / f"{case_id}_prompt.txt",
    }


def write_case(case: AnnotatedCase, root) -> dict[str, Path]:
    paths = case_paths(root, case.case_id)
    save_volume(case.image, paths["image"])
    save_volume(case.label, paths["label"])
    paths["prompt"].write_text(case.prompt.text + "\n", encoding="utf-8")
    return paths


def read_case(root, case_id: str) -> AnnotatedCase:
    paths = case_paths(root, case_id)
    return AnnotatedCase(load_volume(paths["image"]), load_volume(paths["label"]),
                         TextPrompt(paths["prompt"].read_text(encoding="utf-8").strip()), case_id)


def read_manifest(root) -> list[str]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    return [r["case_id"] for r in rows]


def _scene(cfg):
    dims = cfg["synth.dims"]
    if cfg["synth.scene"] == "two":
        return two_object_scene(dims=dims, noise_std=cfg["synth.noise_std"])
    if cfg["synth.scene"] == "single":
        return single_object_scene(cfg["synth.shape"], dims=dims, noise_std=cfg["synth.noise_std"])
    raise ConfigError(f"synth.scene must be 'single' or 'two', got {cfg['synth.scene']!r}")


# -- subcommands -----------------------------------------------------------------

def cmd_synth(cfg, count: int, out_dir) -> list[str]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    scene = _scene(cfg)
    ids = []
    with open(out / MANIFEST, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["case_id", "image", "label", "prompt"])
        for i in range(count):
            seed = cfg["synth.seed"] + i
            case = synth_case(seed, scene, case_id=f"case{i:04d}")
            paths = write_case(case, out)
            w.writerow([case.case_id] + [paths[k].name for k in ("image", "label", "prompt")])
            ids.append(case.case_id)
    return ids


def cmd_train(cfg, data_dir, out_dir, resume=None, max_steps=None):
    from .training import TrainingLog, fit, load_checkpoint, new_state, save_checkpoint

    ids = read_manifest(data_dir)
    if not ids:
        raise DataError(f"manifest in {data_dir} lists no cases")
    cases = [read_case(data_dir, i) for i in ids]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume:
        state = load_checkpoint(resume)
    else:
        state = new_state(cfg.model_config(), cfg.train_config())
    variant = state.model.cfg.variant
    tlog = TrainingLog(out / "train_log.txt", out / "train_log.csv", variant, append=bool(resume))
    log.info("training variant %s from step %d", variant, state.step)

    def on_epoch(st, mean_total):
        if mean_total < st.best_loss:
            st.best_loss = mean_total
            save_checkpoint(st, out / "best.ckpt")

    try:
        reports = fit(cases, state, max_steps=max_steps, log=tlog, on_epoch_end=on_epoch)
    finally:
        tlog.close()
    save_checkpoint(state, out / "final.ckpt")
    return state, reports


def load_model_for_inference(path):
    from .training import load_checkpoint

    try:
        state = load_checkpoint(path)
    except (OSError, FormatError, KeyError, RuntimeError) as exc:
        raise StateError(f"cannot load checkpoint {path}: {exc}") from exc
    return state.model, state.checkpoint_id


def cmd_infer(cfg, checkpoint, image_path, out_dir, prompt: str | None = None):
    from .inference import predict_volume, write_result

    model, ck_id = load_model_for_inference(checkpoint)
    image_path = Path(image_path)
    image = load_volume(image_path)
    case_id = image_path.name.removesuffix(".tdsv").removesuffix("_image")
    if prompt is None:
        ppath = image_path.with_name(f"{case_id}_prompt.txt")
        if not ppath.exists():
            raise DataError(f"no prompt given and {ppath} missing")
        prompt = ppath.read_text(encoding="utf-8").strip()
    tile = cfg["infer.tile_size"]
    if any(d < s for d, s in zip(image.shape, tile)):
        raise ValidationError(f"volume {image.shape} smaller than tile {tile}; each dim must be >= {tile}")
    result = predict_volume(image, TextPrompt(prompt), model, steps=cfg["infer.steps"], seed=cfg["infer.seed"],
                            tile_size=tile, overlap=cfg["infer.overlap"], kernel=cfg["infer.kernel"],
                            workers=cfg["infer.workers"], checkpoint_id=ck_id,
                            clamp_latents=cfg["infer.clamp_latents"], clamp_margin=cfg["infer.clamp_margin"])
    write_result(result, out_dir, case_id, image.spacing, cfg["infer.write_probs"])
    return result


def _ids(directory, suffix):
    return {p.name[: -len(suffix)] for p in Path(directory).glob(f"*{suffix}")}


def cmd_eval(pred_dir, gt_dir, tolerance: float, out_dir=None):
    """Score every ``<id>_mask.tdsv`` against ``<id>_label.tdsv``; returns
    (per-case rows, aggregate row)."""
    from .metrics import evaluate

    pred_ids, gt_ids = _ids(pred_dir, "_mask.tdsv"), _ids(gt_dir, "_label.tdsv")
    common = sorted(pred_ids & gt_ids)
    if not common:
        raise DataError(f"no common case ids between {pred_dir} and {gt_dir}")
    missing = sorted(pred_ids ^ gt_ids)
    if missing:
        raise DataError("case ids present on one side only: " + ", ".join(missing))
    rows = []
    for cid in common:
        pred = load_volume(Path(pred_dir) / f"{cid}_mask.tdsv")
        gt = load_volume(Path(gt_dir) / f"{cid}_label.tdsv")
        rep = evaluate(pred.labels(), gt.labels(), max(gt.num_classes, pred.num_classes, 2), gt.spacing, tolerance)
        rows.append({"case_id": cid, "dice": rep.mean_dice, "nsd": rep.mean_nsd})
    agg = {"case_id": "mean", "dice": float(np.mean([r["dice"] for r in rows])),
           "nsd": float(np.mean([r["nsd"] for r in rows]))}
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval_rows.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, ["case_id", "dice", "nsd"], lineterminator="\n")
            w.writeheader()
            for r in rows + [agg]:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        table = [f"{'case':<16}{'DICE':>10}{'NSD':>10}", "-" * 36]
        table += [f"{r['case_id']:<16}{r['dice']:>10.4f}{r['nsd']:>10.4f}" for r in rows + [agg]]
        (out / "eval_report.txt").write_text(f"tolerance_mm: {tolerance}\n" + "\n".join(table) + "\n", encoding="utf-8")
    return rows, agg


def cmd_plot(image_path, label_path, mask_path, out_image):
    """Mid-axial slices of image | ground truth | prediction as one PNG."""
    from PIL import Image

    image, label, mask = (load_volume(p) for p in (image_path, label_path, mask_path))
    if not image.shape == label.shape == mask.shape:
        raise ValidationError(f"dims differ: image {image.shape}, label {label.shape}, mask {mask.shape}")
    z = image.shape[0] // 2
    img = image.data[z].astype(np.float64)
    lo, hi = img.min(), img.max()
    img8 = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo) * 255
    ncls = max(label.num_classes, mask.num_classes, 2) - 1

    def lab8(v):
        return v.data[z] / ncls * 255

    panel = np.concatenate([img8, lab8(label), lab8(mask)], axis=1)
    Image.fromarray(np.round(panel).astype(np.uint8), mode="L").save(out_image, format="PNG")
    return Path(out_image)


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptseg3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI-style config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    common(sp)
    sp.add_argument("--count", type=int, default=4)
    sp.add_argument("--out", help="output directory (default: paths.data_root)")

    sp = sub.add_parser("train", help="train a model on a dataset manifest")
    common(sp)
    sp.add_argument("--data", help="dataset directory (default: paths.data_root)")
    sp.add_argument("--out", help="run directory (default: paths.out_dir)")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--steps", type=int, help="stop after this many steps")

    sp = sub.add_parser("infer", help="segment one volume")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--case", required=True, help="path to <id>_image.tdsv")
    sp.add_argument("--prompt", help="prompt text (default: the case's prompt file)")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("eval", help="score predicted masks against ground truth")
    common(sp)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--tolerance", type=float, help="NSD tolerance in mm (default: eval.tolerance_mm)")
    sp.add_argument("--out", help="where to write eval_report.txt / eval_rows.csv")

    sp = sub.add_parser("plot", help="export a mid-slice montage PNG")
    sp.add_argument("--image", required=True)
    sp.add_argument("--label", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "plot":
            cmd_plot(args.image, args.label, args.mask, args.out)
            return EXIT_OK
        cfg = load_config(args.config, args.set)
        if args.command == "synth":
            ids = cmd_synth(cfg, args.count, args.out or cfg["paths.data_root"])
            print(f"wrote {len(ids)} cases")
        elif args.command == "train":
            state, _ = cmd_train(cfg, args.data or cfg["paths.data_root"], args.out or cfg["paths.out_dir"],
                                 args.resume, args.steps)
            print(f"trained {state.model.cfg.variant} to step {state.step}")
        elif args.command == "infer":
            res = cmd_infer(cfg, args.checkpoint, args.case, args.out, args.prompt)
            print(f"mask {res.mask.shape} written to {args.out}")
        elif args.command == "eval":
            tol = cfg["eval.tolerance_mm"] if args.tolerance is None else args.tolerance
            _, agg = cmd_eval(args.pred, args.gt, tol, args.out)
            print(f"mean DICE {agg['dice']:.4f}  mean NSD {agg['nsd']:.4f}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PromptSegError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
