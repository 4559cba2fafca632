"""Command-line entry point: ``reskd <command> [flags]``.

Exit codes: 0 success, 2 usage/config error, 3 stage-cap termination,
4 I/O error, 5 numeric failure.
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import data_io
from .errors import (ConfigError, DivergenceError, ParseError, ShapeError,
                     TrainingError)
from .gi import pca2d, residual_chain_report
from .inference import (AdaptiveMode, batch_adaptive_infer, default_thresholds,
                        threshold_sweep)
from .pipeline import DistillConfig, combined_logits, run_reskd

EXIT_OK, EXIT_USAGE, EXIT_STAGE_CAP, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("reskd")


class UsageError(Exception):
    pass


def _load_data(path, artifact=None):
    k = artifact.num_classes if artifact is not None else None
    data = data_io.load_dataset_csv(path, num_classes=k)
    if artifact is not None and data.dim != artifact.s0.in_dim:
        raise UsageError(f"{path}: {data.dim} features, artifact expects {artifact.s0.in_dim}")
    return data


def cmd_gen_data(args):
    if args.kind == "spirals":
        data = data_io.gen_spirals(args.seed, args.n_per_class, args.turns, args.noise)
    else:
        data = data_io.gen_blobs(args.seed, args.n_per_class, args.classes, args.dim, args.spread)
    data_io.save_dataset_csv(data, args.out)
    return EXIT_OK


def cmd_distill(args):
    try:
        raw = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from None
    config = DistillConfig.from_dict(raw)
    data = _load_data(args.data)
    started = time.time()
    artifact = run_reskd(data, config)
    out = Path(args.out)
    data_io.save_artifact(artifact, out, config)
    data_io.write_csv(out / "stages.csv",
                      ["stage", "val_energy", "train_accuracy", "val_accuracy", "mean_l2_to_teacher"],
                      [r.as_dict() for r in artifact.records])
    # run metadata lives in its own file so the bundle stays reproducible
    (out / "run.log").write_text(json.dumps({
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "seconds": round(time.time() - started, 3),
        "n": artifact.n,
        "termination": artifact.termination,
    }) + "\n")
    if artifact.termination == "stage_cap":
        log.warning("energy criterion not met after %d stages", artifact.n)
        return EXIT_STAGE_CAP
    return EXIT_OK


def cmd_infer(args):
    artifact = data_io.load_artifact(args.artifact)
    data = _load_data(args.data, artifact)
    mode = AdaptiveMode(args.mode)
    if args.adaptive:
        th = args.th
    else:
        # an unreachable threshold runs every res-student
        th = float("inf")
    records, report = batch_adaptive_infer(artifact, data.X, mode, th, data.y)
    k = artifact.num_classes
    header = ["sample_id", "stage", "predicted", "label"] + [f"logit_{c}" for c in range(k)] + ["energies"]
    rows = ([r.sample_id, r.stage, r.predicted, int(data.y[r.sample_id]), *map(float, r.logits),
             " ".join(repr(e) for e in r.energies)] for r in records)
    data_io.write_csv(args.out, header, rows)
    report_path = args.report or str(Path(args.out).with_suffix(".cost.json"))
    data_io.write_json(report_path, report.as_dict())
    return EXIT_OK


def _probe(args, artifact):
    data = _load_data(args.data, artifact)
    if args.use_val_split:
        if artifact.val_indices is None or len(artifact.val_indices) == 0:
            raise UsageError("artifact records no validation indices")
        if artifact.val_indices.max() >= len(data):
            raise UsageError("validation indices exceed the data size; pass the distill data file")
        data = data.subset(artifact.val_indices)
    return data


def cmd_analyze_gi(args):
    artifact = data_io.load_artifact(args.artifact)
    data = _probe(args, artifact)
    report = residual_chain_report(artifact, data.X)
    data_io.write_json(args.out, report.as_dict())
    return EXIT_OK


def _parse_stages(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--stages must be comma-separated integers, got {text!r}") from None


def cmd_analyze_pca(args):
    artifact = data_io.load_artifact(args.artifact)
    data = _probe(args, artifact)
    stages = _parse_stages(args.stages)
    bad = [s for s in stages if not 0 <= s <= artifact.n]
    if bad:
        raise UsageError(f"stages {bad} out of range 0..{artifact.n}")
    teacher_logits = artifact.teacher(data.X)
    basis = pca2d(teacher_logits)
    rows = [[j, float(p[0]), float(p[1]), "teacher"] for j, p in enumerate(basis.coords)]
    for s in stages:
        coords = basis.project(combined_logits(artifact, data.X, s))
        rows += [[j, float(p[0]), float(p[1]), f"student_stage_{s}"] for j, p in enumerate(coords)]
    data_io.write_csv(args.out, ["sample_id", "pc1", "pc2", "source_tag"], rows)
    return EXIT_OK


def cmd_sweep_th(args):
    artifact = data_io.load_artifact(args.artifact)
    data = _load_data(args.data, artifact)
    mode = AdaptiveMode(args.mode)
    thresholds = default_thresholds(artifact, args.points, mode)
    rows = threshold_sweep(artifact, data.X, data.y, thresholds, mode)
    header = ["th", "accuracy", "mean_stages"] + [f"skip_r{i}" for i in range(1, artifact.n + 1)]
    data_io.write_csv(args.out, header,
                      ([r["th"], r["accuracy"], r["mean_stages"], *r["skip_fraction"]] for r in rows))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="reskd", description="Residual-guided knowledge distillation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset CSV")
    g.add_argument("--kind", choices=["blobs", "spirals"], required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--n-per-class", type=int, default=1000)
    g.add_argument("--turns", type=float, default=1.0, help="spirals only")
    g.add_argument("--noise", type=float, default=0.05, help="spirals only")
    g.add_argument("--classes", type=int, default=3, help="blobs only")
    g.add_argument("--dim", type=int, default=2, help="blobs only")
    g.add_argument("--spread", type=float, default=1.0, help="blobs only")
    g.set_defaults(func=cmd_gen_data)

    d = sub.add_parser("distill", help="train teacher, S0 and res-students")
    d.add_argument("--config", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distill)

    i = sub.add_parser("infer", help="predict with the full or adaptively truncated chain")
    i.add_argument("--artifact", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--adaptive", action="store_true")
    i.add_argument("--mode", choices=[m.value for m in AdaptiveMode], default="additive")
    i.add_argument("--th", type=float, default=None, help="override the stored threshold")
    i.add_argument("--out", required=True)
    i.add_argument("--report", default=None, help="cost report JSON (default: <out>.cost.json)")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("analyze-gi", help="GI-hat chain and per-layer bound report")
    a.add_argument("--artifact", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--use-val-split", action="store_true",
                   help="probe on the artifact's validation rows of --data")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze_gi)

    c = sub.add_parser("analyze-pca", help="project logits onto the teacher's principal plane")
    c.add_argument("--artifact", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--stages", default="0")
    c.add_argument("--use-val-split", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_analyze_pca)

    s = sub.add_parser("sweep-th", help="accuracy and cost over a threshold grid")
    s.add_argument("--artifact", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--points", type=int, default=10)
    s.add_argument("--mode", choices=[m.value for m in AdaptiveMode], default="additive")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_th)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "points", 2) < 2:
        parser.error("--points must be at least 2")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"reskd: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ShapeError) as exc:
        print(f"reskd: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, DivergenceError, FloatingPointError) as exc:
        print(f"reskd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError) as exc:
        print(f"reskd: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
