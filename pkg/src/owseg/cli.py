"""Command-line entry point.

Exit codes: 0 success, 2 invalid input/usage, 1 internal error.

Prediction files for ``eval`` live in one directory and are named
``<image id>_<kind>`` with kinds ``score.owfm`` (D=1 anomaly score),
``anomaly.png``, ``semantic.png`` and ``instance.png``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as owio
from .descriptors import DescriptorBank
from .errors import MissingPrediction, OWSegError
from .evaluate import REQUIRED_PRED, EvalConfig, Sample, Task, evaluate_task
from .postprocess import DiscoveryState, PipelineConfig, run_pipeline
from .synth import (
    anomaly_view,
    class_table,
    generate,
    load_specs,
    open_world_view,
    training_bank,
)

log = logging.getLogger("owseg")

PRED_FILES = {
    "score": "score.owfm",
    "anomaly": "anomaly.png",
    "semantic": "semantic.png",
    "instance": "instance.png",
}


def _int_set(text: str) -> frozenset:
    if not text:
        return frozenset()
    return frozenset(int(x) for x in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    # -v is accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="owseg", description=__doc__.splitlines()[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("eval", parents=[common], help="evaluate predictions against a manifest")
    ev.add_argument("task", choices=["anomaly", "ow-semantic", "os-panoptic", "ow-panoptic"])
    ev.add_argument("--pred", required=True, type=Path)
    ev.add_argument("--gt", required=True, type=Path, help="dataset manifest (JSON)")
    ev.add_argument("--out", required=True, type=Path)
    ev.add_argument("--jobs", type=int, default=1)

    pp = sub.add_parser("postprocess", parents=[common], help="run open-world post-processing on one image")
    pp.add_argument("--sem", required=True, type=Path)
    pp.add_argument("--con", required=True, type=Path)
    pp.add_argument("--offsets", required=True, type=Path)
    pp.add_argument("--bank", required=True, type=Path)
    pp.add_argument("--out", required=True, type=Path)
    pp.add_argument("--state", type=Path,
                    help="evolving bank, read if present and rewritten afterwards")
    pp.add_argument("--id", default=None, help="image id used as output file prefix")
    pp.add_argument("--thing-classes", type=_int_set, default=frozenset())
    pp.add_argument("--min-cluster-size", type=int, default=32)
    pp.add_argument("--eta", type=float, default=1.0)

    sy = sub.add_parser("synth", parents=[common], help="render synthetic scenes")
    sy.add_argument("--spec", required=True, type=Path)
    sy.add_argument("--out", required=True, type=Path)

    bk = sub.add_parser("bank", help="descriptor bank utilities")
    bsub = bk.add_subparsers(dest="bank_command", required=True)
    bb = bsub.add_parser("build", parents=[common], help="accumulate class statistics from dumped features")
    bb.add_argument("--features", required=True, type=Path)
    bb.add_argument("--labels", required=True, type=Path)
    bb.add_argument("--out", required=True, type=Path)
    bb.add_argument("--classes", type=_int_set, default=None,
                    help="comma-separated class ids to keep (default: all non-ignored)")
    bb.add_argument("--ignore-label", type=int, default=None)
    return parser


def _load_predictions(task: Task, pred_dir: Path, manifest) -> dict:
    preds = {}
    for im in manifest.images:
        sample = Sample()
        for kind in REQUIRED_PRED[task]:
            path = pred_dir / f"{im.id}_{PRED_FILES[kind]}"
            if not path.exists():
                raise MissingPrediction(f"image {im.id!r}: missing {path.name}")
            value = owio.read_feature_map(path) if kind == "score" else owio.read_mask(path)
            setattr(sample, kind, value)
        preds[im.id] = sample
    return preds


def cmd_eval(args) -> int:
    task = Task.parse(args.task)
    manifest = owio.load_manifest(args.gt)
    if Task.parse(manifest.task) is not task:
        raise OWSegError(f"manifest is for task {manifest.task!r}, not {task.value!r}")
    preds = _load_predictions(task, args.pred, manifest)
    gts = {
        im.id: Sample(semantic=owio.read_mask(im.semantic),
                      instance=owio.read_mask(im.instance) if im.instance else None)
        for im in manifest.images
    }
    cfg = EvalConfig(manifest.ignore_label, manifest.thing_classes, max(1, args.jobs))
    report = evaluate_task(task, preds, gts, cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    owio.write_report(args.out, report)
    print(owio.format_report(report), end="")
    return 0


def cmd_postprocess(args) -> int:
    sem = owio.read_feature_map(args.sem)
    con = owio.read_feature_map(args.con)
    offsets = owio.read_feature_map(args.offsets)
    if args.state is not None and args.state.exists():
        state = DiscoveryState(owio.read_bank(args.state))
    else:
        state = DiscoveryState.from_known(owio.read_bank(args.bank))
    cfg = PipelineConfig(args.thing_classes, args.min_cluster_size, args.eta)
    out, new_state = run_pipeline(sem, con, offsets, state, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    prefix = f"{args.id}_" if args.id else ""
    owio.write_mask(args.out / f"{prefix}semantic.png", out.semantic)
    owio.write_mask(args.out / f"{prefix}instance.png", out.instances)
    owio.write_mask(args.out / f"{prefix}anomaly.png", out.anomaly.astype(np.int64))
    owio.write_feature_map(args.out / f"{prefix}score.owfm", out.anomaly_score[..., None])
    if args.state is not None:
        owio.write_bank(args.state, new_state.bank)
    log.info("discovered classes so far: %s", new_state.discovered.tolist())
    return 0


def cmd_synth(args) -> int:
    specs = load_specs(args.spec)
    out = args.out
    for sub in ("gt", "features", "oracle_pred"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    scenes = []
    entries = {t: [] for t in Task}
    for i, spec in enumerate(specs):
        sid = f"{i:03d}"
        scene = generate(spec)
        scenes.append(scene)
        anomaly, a_inst = anomaly_view(scene, spec)
        ow_sem, _ = open_world_view(scene, spec)
        gt = out / "gt"
        owio.write_mask(gt / f"{sid}_semantic.png", scene.semantic)
        owio.write_mask(gt / f"{sid}_instance.png", scene.instance)
        owio.write_mask(gt / f"{sid}_anomaly.png", anomaly)
        owio.write_mask(gt / f"{sid}_anomaly_instance.png", a_inst)
        owio.write_mask(gt / f"{sid}_ow_semantic.png", ow_sem)
        feats = out / "features"
        owio.write_feature_map(feats / f"{sid}_sem.owfm", scene.sem_features)
        owio.write_feature_map(feats / f"{sid}_con.owfm", scene.con_features)
        owio.write_feature_map(feats / f"{sid}_offsets.owfm", scene.offsets)
        # perfect predictions, usable as an eval sanity check
        pred = out / "oracle_pred"
        owio.write_feature_map(pred / f"{sid}_score.owfm", anomaly[..., None].astype(np.float32))
        owio.write_mask(pred / f"{sid}_anomaly.png", anomaly)
        owio.write_mask(pred / f"{sid}_instance.png", a_inst)
        owio.write_mask(pred / f"{sid}_semantic.png", ow_sem)
        a_entry = {"id": sid, "semantic": f"gt/{sid}_anomaly.png",
                   "instance": f"gt/{sid}_anomaly_instance.png"}
        o_entry = {"id": sid, "semantic": f"gt/{sid}_ow_semantic.png",
                   "instance": f"gt/{sid}_anomaly_instance.png"}
        entries[Task.anomaly].append(a_entry)
        entries[Task.os_panoptic].append(a_entry)
        entries[Task.ow_semantic].append(o_entry)
        entries[Task.ow_panoptic].append(o_entry)
    for task, images in entries.items():
        owio.write_manifest(out / f"manifest_{task.value}.json", task.value,
                            class_table(specs[0], task.value), images)
    owio.write_bank(out / "bank.owdb", training_bank(scenes, specs[0]))
    print(f"wrote {len(specs)} scene(s) to {out}")
    return 0


def cmd_bank_build(args) -> int:
    bank = None
    # synth output dirs also hold contrastive/offset maps; prefer the semantic ones
    feature_files = sorted(args.features.glob("*_sem.owfm")) or sorted(args.features.glob("*.owfm"))
    if not feature_files:
        raise OWSegError(f"no .owfm files in {args.features}")
    for fpath in feature_files:
        stem = fpath.stem.removesuffix("_sem")
        lpath = args.labels / f"{stem}_semantic.png"
        if not lpath.exists():
            lpath = args.labels / f"{stem}.png"
        if not lpath.exists():
            log.warning("no labels for %s, skipped", fpath.name)
            continue
        fm = owio.read_feature_map(fpath).astype(np.float64)
        labels = owio.read_mask(lpath)
        if labels.shape != fm.shape[:2]:
            raise OWSegError(f"{fpath.name}: labels {labels.shape} vs features {fm.shape[:2]}")
        keep = np.ones(labels.shape, dtype=bool)
        if args.ignore_label is not None:
            keep &= labels != args.ignore_label
        if args.classes is not None:
            keep &= np.isin(labels, sorted(args.classes))
        if bank is None:
            bank = DescriptorBank.empty(0, fm.shape[2], frozen=True)
        for k in np.unique(labels[keep]):
            while bank.num_classes <= k:
                bank.add_class(frozen=True)
            bank.accumulate(int(k), fm[keep & (labels == k)])
    if bank is None:
        raise OWSegError("no feature/label pairs found")
    owio.write_bank(args.out, bank)
    print(f"bank with {int(bank.usable.sum())} classes, dim {bank.dim} -> {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    handlers = {"eval": cmd_eval, "postprocess": cmd_postprocess, "synth": cmd_synth}
    try:
        if args.command == "bank":
            return cmd_bank_build(args)
        return handlers[args.command](args)
    except (OWSegError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
