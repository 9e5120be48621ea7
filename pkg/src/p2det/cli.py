"""``p2det`` command line.

Exit codes: 0 success, 1 failed check, 2 usage or config error, 3 numerical
abort, 4 I/O or file-format error. Logs go to stderr at the level named by
the ``P2DET_LOG`` environment variable (default INFO).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from p2det import pipeline
from p2det.checkpoint import CheckpointError
from p2det.config import ConfigError, load_config, parse_config
from p2det.dataset import DatasetError, load_annotations, load_prompts, read_scene_image
from p2det.detector import NumericalAbort
from p2det.prompt_encoder import PointPrompt

log = logging.getLogger("p2det")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    overrides = {k: v for k, v in (("seed", args.seed), ("n_train", args.n_train), ("n_test", args.n_test)) if v is not None}
    if overrides:
        raw = cfg.model_dump(mode="json")
        raw["data"].update(overrides)
        cfg = parse_config(raw)
    t0 = time.perf_counter()
    manifest = pipeline.generate(cfg, args.out)
    log.info("wrote %d train / %d test scenes to %s in %.1fs", len(manifest["splits"]["train"]),
             len(manifest["splits"]["test"]), args.out, time.perf_counter() - t0)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with log_path.open("w") as fh:

        def on_step(step, bd):
            fh.write(json.dumps({"step": step, **bd.as_dict()}, sort_keys=True) + "\n")
            if step % 25 == 0:
                log.info("step %d total %.4f (cls %.4f d1 %.4f d2 %.4f) %.0fs", step, bd.total, bd.l_cls, bd.l_d1, bd.l_d2,
                         time.perf_counter() - t0)

        try:
            tm = pipeline.train_on_dataset(cfg, args.data, on_step)
        except NumericalAbort as exc:
            dump = out.with_name(out.name + ".abort.json")
            _write(dump, json.dumps({"error": str(exc), **exc.diagnostics}, sort_keys=True, indent=2, default=str) + "\n")
            log.error("numerical abort: %s (diagnostics in %s)", exc, dump)
            return EXIT_NUMERIC
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.save_model(out, tm)
    log.info("trained %d steps in %.1fs; checkpoint %s", len(tm.history), time.perf_counter() - t0, out)
    return EXIT_OK


def _prompts_for(path: Path, image_id: str):
    """Prompt points for one image: a dataset prompts.jsonl, or a JSON list of [x, y]."""
    if path.suffix == ".jsonl":
        table = load_prompts(path)
        if image_id not in table:
            raise DatasetError(f"{path}: no prompts for image {image_id!r}")
        return table[image_id]
    obj = json.loads(path.read_text())
    points = obj["points"] if isinstance(obj, dict) else obj
    return [PointPrompt(float(x), float(y)) for x, y in points]


def cmd_predict(args) -> int:
    tm = pipeline.load_model(args.ckpt)
    scene = Path(args.scene)
    image_id = args.image_id or scene.stem
    image = read_scene_image(scene)
    prompts = _prompts_for(Path(args.prompts), image_id)
    dets = pipeline.detect(tm, image, prompts)
    _write(Path(args.out), pipeline.detections_jsonl(image_id, dets))
    log.info("%d detections for %s", len(dets), image_id)
    return EXIT_OK


def cmd_eval(args) -> int:
    tm = pipeline.load_model(args.ckpt)
    metrics, curves, _ = pipeline.evaluate_on_dataset(tm, args.data, args.split)
    out = Path(args.out)
    _write(out, pipeline.metrics_json(metrics))
    _write(out.with_suffix(".pr.csv"), pipeline.curves_csv(curves))
    log.info("%s", " ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items())))
    return EXIT_OK


def cmd_assign(args) -> int:
    from p2det.assigner import assign, grid_samples

    anns = load_annotations(args.annotations)
    samples = grid_samples(args.grid * args.stride, args.stride)
    lines = []
    for image_id in sorted(anns):
        res = assign(samples, anns[image_id], w=args.w, top_k=args.top_k, rotated_frame=not args.axis_frame,
                     distance_exponent=args.distance_exponent)
        for i, s in enumerate(samples):
            lines.append(json.dumps({"image": image_id, "sample": i, "x": s.x, "y": s.y, "label": int(res.labels[i]),
                                     "quality": float(res.quality[i])}, sort_keys=True, separators=(",", ":")))
    _write(Path(args.out), "".join(line + "\n" for line in lines))
    log.info("assigned %d images x %d samples", len(anns), len(samples))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from p2det.gradsuite import TOLERANCE, run_suite

    t0 = time.perf_counter()
    results = run_suite(seed=args.seed)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<30} max_rel_err={r.error:.3e}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g} in {time.perf_counter() - t0:.1f}s")
    if args.out:
        report = [{"name": r.name, "error": r.error, "ok": r.ok} for r in results]
        _write(Path(args.out), json.dumps(report, indent=2) + "\n")
    return EXIT_OK if not failed else EXIT_FAIL


def cmd_bench(args) -> int:
    from p2det.bench import run_bench

    rates = run_bench(seconds=args.seconds)
    for name, rate in rates.items():
        print(f"{name:<28} {rate:12.1f} ops/s")
    if args.out:
        _write(Path(args.out), json.dumps(rates, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p2det", description="Prompt-conditioned oriented tower detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate a seeded synthetic dataset")
    p.add_argument("--config", help="run config JSON (scene and data sections are used)")
    p.add_argument("--seed", type=int, help="override data.seed")
    p.add_argument("--n-train", type=int, help="override data.n_train")
    p.add_argument("--n-test", type=int, help="override data.n_test")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector on a dataset's train split")
    p.add_argument("--config", help="run config JSON (defaults if omitted)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-step loss log (default: <out>.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="detect towers in one scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True, help="raw float32 scene file (.f32)")
    p.add_argument("--prompts", required=True, help="prompts.jsonl from a dataset, or a JSON list of [x, y]")
    p.add_argument("--image-id", help="image id for prompt lookup and output (default: scene file stem)")
    p.add_argument("--out", required=True, help="detections JSONL")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="AP/AR of a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", required=True, help="metrics JSON; the PR curve goes next to it as .pr.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("assign", help="dump per-sample label assignments for an annotation file")
    p.add_argument("--annotations", required=True)
    p.add_argument("--grid", type=int, required=True, help="sample cells per side")
    p.add_argument("--stride", type=int, default=8, help="pixels per cell")
    p.add_argument("--w", type=float, default=2.0)
    p.add_argument("--top-k", type=int, default=9)
    p.add_argument("--distance-exponent", type=int, choices=(1, 2), default=1)
    p.add_argument("--axis-frame", action="store_true", help="measure center offsets in image axes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("gradcheck", help="central-difference gradient checks of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional JSON report")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="throughput of geometry and attention kernels")
    p.add_argument("--seconds", type=float, default=0.5, help="time budget per kernel")
    p.add_argument("--out", help="optional JSON report")
    p.set_defaults(func=cmd_bench)
    return parser


def _positive(args) -> str | None:
    for name in ("grid", "stride", "top_k"):
        if getattr(args, name, 1) is not None and getattr(args, name, 1) <= 0:
            return f"--{name.replace('_', '-')} must be positive"
    if getattr(args, "w", 1.0) <= 0:
        return "--w must be positive"
    if getattr(args, "seconds", 1.0) <= 0:
        return "--seconds must be positive"
    return None


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("P2DET_LOG", "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "INFO"
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    problem = _positive(args)
    if problem:
        parser.print_usage(sys.stderr)
        print(f"p2det: error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_USAGE
    except NumericalAbort as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, DatasetError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
