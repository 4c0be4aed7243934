"""``couinseg`` command line: one binary, one subcommand per pipeline stage.

Settings resolve as defaults <- ``--config`` JSON <- command-line flags, and
the resolved record is written to ``<out>/run.json`` before any work starts.
Progress is logged to stderr as one JSON object per line.  Failures print a
JSON error object and exit with a code specific to the failure kind:

    2 usage, 3 missing file, 4 format, 5 config, 6 training diverged,
    7 geometry, 8 domain, 9 output exists, 10 gradient check failed.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__, kernels
from .errors import ConfigError, CouinsegError, EmptyInputError, OutputExistsError

log = logging.getLogger("couinseg")

EXIT_MISSING = 3
EXIT_GRADCHECK = 10


def _event(**kw):
    log.info(json.dumps(kw, sort_keys=True))


# -- config resolution --------------------------------------------------------------


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"bad config JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(raw) - {"model", "train", "phantom"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return raw


def _model_train_configs(args, file_cfg):
    from .model import ModelConfig, TrainConfig

    preset = getattr(args, "preset", "desk")
    if preset == "full":
        model, train = ModelConfig(), TrainConfig()
    else:
        model, train = ModelConfig.desk(), TrainConfig.desk()
    if file_cfg.get("model"):
        model = ModelConfig.from_json({**model.to_json(), **file_cfg["model"]})
    if file_cfg.get("train"):
        train = TrainConfig.from_json({**train.to_json(), **file_cfg["train"]})
    variant = getattr(args, "variant", None)
    if variant:
        flags = {"a": (False, False), "b": (True, False), "c": (False, True), "d": (True, True)}[variant]
        model = replace(model, enable_grid_embeddings=flags[0], enable_graph_reasoning=flags[1])
    m1 = getattr(args, "grid_size", None)
    if m1:
        model = replace(model, grid_size_level1=m1, radius_level1=1.0 / (2 * m1))
    overrides = {k: getattr(args, k, None) for k in ("epochs", "lr")}
    train = replace(train, seed=args.seed, **{k: v for k, v in overrides.items() if v is not None})
    return model, train


def _prepare_out(out, force, record):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise OutputExistsError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    record = {"version": __version__, "backend": kernels.BACKEND, **record}
    (out / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return out


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# -- commands -----------------------------------------------------------------------


def cmd_phantom(args):
    from . import phantom

    file_cfg = _read_config(args.config)
    spec = phantom.PhantomSpec.from_json({**phantom.PhantomSpec().to_json(), **file_cfg.get("phantom", {})})
    over = {}
    if args.dims:
        over["dims"] = tuple(args.dims)
    if args.spacing:
        over["spacing"] = tuple(args.spacing)
    if args.noise_sigma is not None:
        over["noise_sigma"] = args.noise_sigma
    spec = replace(spec, **over).validate()
    jitter = phantom.Jitter.none() if args.no_jitter else phantom.Jitter()
    out = _prepare_out(args.out, args.force, {
        "command": "phantom", "n": args.n, "seed": args.seed, "spec": spec.to_json(),
        "jitter": None if args.no_jitter else vars(jitter),
    })
    manifest = phantom.make_dataset(args.n, spec, args.seed, out, jitter)
    splits = [c["split"] for c in manifest["cases"]]
    _event(event="phantom", cases=len(splits), train=splits.count("train"),
           val=splits.count("val"), test=splits.count("test"))
    return 0


def _read_volume(path, kind):
    from .volume import read_nifti_minimal, read_raw

    path = _require(path, f"{kind} volume")
    if path.suffix == ".nii":
        return read_nifti_minimal(path, kind)
    vol = read_raw(path)
    if vol.kind != kind:
        from .errors import DomainError

        raise DomainError(f"{path} holds a {vol.kind} volume, expected {kind}")
    return vol


def cmd_preprocess(args):
    from .volume import extract_liver_points, save_points

    image = _read_volume(args.image, "intensity")
    mask = _read_volume(args.mask, "mask")
    labels = _read_volume(args.labels, "label") if args.labels else None
    out = _prepare_out(args.out, args.force, {
        "command": "preprocess", "image": str(args.image), "mask": str(args.mask),
        "labels": None if args.labels is None else str(args.labels), "seed": args.seed,
    })
    points = extract_liver_points(image, mask, labels)
    save_points(points, out, image.geometry)
    _event(event="preprocess", points=len(points))
    return 0


def cmd_hierarchy(args):
    from .model.train import rng_stream
    from .neighbors import build_hierarchy, save_hierarchy
    from .volume import load_points

    model, _ = _model_train_configs(args, _read_config(args.config))
    points, _ = load_points(_require(args.points, "points directory"))
    hcfg = model.hierarchy_config(seed=int(rng_stream(args.seed, "hierarchy").integers(2**31)))
    out = _prepare_out(args.out, args.force, {"command": "hierarchy", "seed": args.seed,
                                              "hierarchy": asdict(hcfg)})
    hier = build_hierarchy(points.coords, hcfg)
    save_hierarchy(hier, out)
    _event(event="hierarchy", sizes=[len(lv) for lv in hier.levels],
           fallbacks=[int(lv.fallback.sum()) for lv in hier.levels])
    return 0


def _dataset_cases(data_dir, split):
    data_dir = _require(data_dir, "dataset directory")
    manifest_path = data_dir / "manifest.json"
    if manifest_path.exists():
        cases = json.loads(manifest_path.read_text())["cases"]
        ids = [c["id"] for c in cases if split in (None, "all") or c["split"] == split]
    else:
        ids = sorted(p.name for p in data_dir.iterdir() if (p / "mask.raw").exists())
    if not ids:
        raise EmptyInputError(f"no {split or ''} cases under {data_dir}")
    return [data_dir / i for i in ids]


def cmd_train(args):
    from .model import load_case, train

    model, tcfg = _model_train_configs(args, _read_config(args.config))
    case_dirs = _dataset_cases(args.data, "train")
    out = _prepare_out(args.out, args.force, {
        "command": "train", "seed": args.seed, "data": str(args.data),
        "model": model.to_json(), "train": tcfg.to_json(), "cases": [p.name for p in case_dirs],
    })
    handler = logging.FileHandler(out / "log.jsonl", mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    logging.getLogger("couinseg").addHandler(handler)
    try:
        cases = [load_case(p, model, args.seed, out / "hierarchy_cache") for p in case_dirs]
        state = train(cases, model, tcfg, out_dir=out)
    finally:
        logging.getLogger("couinseg").removeHandler(handler)
        handler.close()
    _event(event="trained", epochs=state.epoch, loss=state.running_loss,
           checkpoint=str(out / "checkpoint_final.json"))
    return 0


def cmd_infer(args):
    import time

    from .model import infer, labels_to_volume, load_case, load_checkpoint
    from .volume import write_raw

    state, model, tcfg = load_checkpoint(_require(Path(args.checkpoint).with_suffix(".json"), "checkpoint"))
    seed = tcfg.seed if args.seed_given is None else args.seed
    case_dirs = [_require(c, "case directory") for c in args.case] if args.case else \
        _dataset_cases(args.data, args.split)
    out = _prepare_out(args.out, args.force, {
        "command": "infer", "checkpoint": str(args.checkpoint), "seed": seed,
        "model": model.to_json(), "cases": [p.name for p in case_dirs],
    })
    for case_dir in case_dirs:
        case = load_case(case_dir, model, seed)
        t0 = time.perf_counter()
        labels = infer(case.points, case.hierarchy, state.params, model)
        seconds = time.perf_counter() - t0
        (out / case.case_id).mkdir(exist_ok=True)
        write_raw(labels_to_volume(case.points, labels, case.geometry), out / case.case_id / "label.raw")
        _event(event="infer", case=case.case_id, points=len(case.points), seconds=round(seconds, 4))
    return 0


def cmd_eval(args):
    from . import metrics
    from .volume import read_raw

    pred_dir = _require(args.pred, "prediction directory")
    gt_dir = _require(args.gt, "ground-truth directory")
    ids = sorted(p.name for p in pred_dir.iterdir() if (p / "label.raw").exists())
    if not ids:
        raise EmptyInputError(f"no <case>/label.raw predictions under {pred_dir}")
    out = _prepare_out(args.out, args.force, {"command": "eval", "pred": str(pred_dir),
                                              "gt": str(gt_dir), "cases": ids})
    reports = []
    for case_id in ids:
        pred = read_raw(pred_dir / case_id / "label.raw")
        gt = read_raw(_require(gt_dir / case_id / "label.raw", "ground-truth labels"))
        mask = read_raw(_require(gt_dir / case_id / "mask.raw", "liver mask"))
        report = metrics.evaluate_case(pred, gt, mask, gt.geometry, case_id)
        metrics.write_report(report, out / f"{case_id}.json")
        reports.append(report)
        _event(event="eval", case=case_id, avg_dice=report.avg_dice, avg_asd=report.avg_asd)
    rows = metrics.write_table_csv(reports, out / "table.csv")
    _event(event="eval_summary", cases=len(reports), avg_dice=rows[-1]["dice_mean"], avg_asd=rows[-1]["asd_mean"])
    return 0


def cmd_gradcheck(args):
    from .diffops import gradcheck

    names = args.op or list(gradcheck.SUITE)
    unknown = [n for n in names if n not in gradcheck.SUITE]
    if unknown:
        raise ConfigError(f"unknown ops {unknown}; choose from {sorted(gradcheck.SUITE)}")
    results = {}
    ok = True
    for name in names:
        err, seconds = gradcheck.run_suite([name], seeds=range(args.seeds), tol=args.tol)[name]
        passed = err <= args.tol
        ok &= passed
        results[name] = {"max_rel_err": err, "seconds": round(seconds, 3), "passed": passed}
        print(json.dumps({"op": name, **results[name]}), flush=True)
    if args.out:
        out = _prepare_out(args.out, args.force, {"command": "gradcheck", "ops": names,
                                                  "seeds": args.seeds, "tol": args.tol})
        (out / "gradcheck.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    return 0 if ok else EXIT_GRADCHECK


def cmd_bench(args):
    from . import bench, phantom
    from .model import init_params, load_checkpoint, make_case
    from .model.flops import count_flops, count_flops_for_hierarchy, time_inference
    from .volume import extract_liver_points

    model, _ = _model_train_configs(args, _read_config(args.config))
    if args.checkpoint:
        state, model, _ = load_checkpoint(_require(Path(args.checkpoint).with_suffix(".json"), "checkpoint"))
        params = state.params
    else:
        params = init_params(model, seed=args.seed)
    out = _prepare_out(args.out, args.force, {"command": "bench", "seed": args.seed, "model": model.to_json()})
    kern = bench.bench_kernels(args.repeats, seed=args.seed)
    print(bench.format_table(kern), flush=True)
    im, mask, lab = phantom.generate(phantom.PhantomSpec(seed=args.seed))
    case = make_case("bench", extract_liver_points(im, mask, lab), model, args.seed)
    flops = count_flops_for_hierarchy(model, case.hierarchy)
    seconds = time_inference(case, params, model, args.repeats)
    result = {
        "kernels": kern,
        "model": {"points": len(case.points), "gflops": flops.total / 1e9, "flops_by_category": flops.by_category,
                  "seconds_per_case": seconds,
                  "gflops_upper_bound": count_flops(model, len(case.points)).total / 1e9},
    }
    (out / "bench.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    _event(event="bench", gflops=round(flops.total / 1e9, 4), seconds_per_case=round(seconds, 4))
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with optional model/train/phantom sections")
    common.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP threads (default: all cores)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--preset", choices=("desk", "full"), default="desk",
                             help="desk: M1=16, 30 epochs; full: M1=64, 400 epochs")
    model_flags.add_argument("--variant", choices="abcd", help="ablation: a baseline, b no Gr, c no f(p), d full")
    model_flags.add_argument("--grid-size", type=int, help="first-level grid size M1")

    ap = argparse.ArgumentParser(prog="couinseg", description="Point-based Couinaud segmentation toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--spacing", type=float, nargs=3)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--no-jitter", action="store_true", help="every case uses the base geometry")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", parents=[common], help="volumes -> liver point cloud")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("hierarchy", parents=[common, model_flags], help="build the ball-query hierarchy")
    p.add_argument("--points", required=True, help="directory written by preprocess")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hierarchy)

    p = sub.add_parser("train", parents=[common, model_flags], help="train on the train split of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="predict label volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (with --split)")
    p.add_argument("--split", default="test", help="train, val, test or all")
    p.add_argument("--case", action="append", help="case directory; repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="Dice/ASD reports and table")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    p.add_argument("--op", action="append", help="op name; repeatable (default: all)")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[common, model_flags], help="kernel timings, FLOPs, time per case")
    p.add_argument("--checkpoint")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return ap


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time (it may be swapped after setup)."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _setup_logging():
    logger = logging.getLogger("couinseg")
    if not any(isinstance(h, _StderrHandler) for h in logger.handlers):
        h = _StderrHandler()
        h.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(h)
    logger.setLevel(logging.INFO)
    logger.propagate = False


def _error(kind, message, code, **extra):
    print(json.dumps({"error": kind, "message": message, "exit_code": code, **extra}), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.seed_given = args.seed
    args.seed = 0 if args.seed is None else args.seed
    if args.seed < 0:
        return _error("ConfigError", "--seed must be a non-negative integer", ConfigError.exit_code)
    _setup_logging()
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
        os.environ["OMP_NUM_THREADS"] = str(args.threads)
    else:
        limiter = contextlib.nullcontext()
    try:
        with limiter:
            return args.func(args)
    except CouinsegError as exc:
        return _error(type(exc).__name__, str(exc), exc.exit_code, **({"diagnostics": exc.diagnostics}
                                                                     if getattr(exc, "diagnostics", None) else {}))
    except FileNotFoundError as exc:
        return _error("FileNotFoundError", str(exc), EXIT_MISSING)


if __name__ == "__main__":
    sys.exit(main())
