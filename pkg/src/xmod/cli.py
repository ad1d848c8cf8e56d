"""Command-line entry point: ``xmod <subcommand>``.

Exit codes: 0 success, 2 config error, 3 data error, 4 training abort,
5 evaluation error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import config as xconfig
from .dataset import (
    DatasetError,
    PhantomSpec,
    generate_phantom_dataset,
    prepare_dataset,
    read_manifest,
    validate_manifest,
)
from .evaluation import MetricError, MetricsReport, arrangement_label, evaluate_segmentation, reproduce_tables
from .models import (
    build_generator,
    build_patch_discriminator,
    build_segmentor,
    build_unet,
    format_summary,
    reconcile_parameter_counts,
    summarize,
)
from .training import (
    CheckpointError,
    TrainingAborted,
    set_deterministic,
    synthesize,
    train_essnet,
    train_unet,
)

log = logging.getLogger("xmod")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4, 5


class StageFailed(Exception):
    def __init__(self, stage: str, code: int, cause: Exception):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage, self.code = stage, code


def _parse_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from err
    return lo, hi


def _config_or_exit(path) -> dict:
    return xconfig.load_config(path) if path else xconfig.resolve({})


# ---------------------------------------------------------------------------
# subcommands


def cmd_prep(args) -> int:
    m = prepare_dataset(args.src, args.modality, args.out, args.liver_range, target_size=args.size, bit_depth=args.bit_depth)
    print(f"{len(m)} slices, {len(m.liver_visible)} liver-visible, {len(m.skipped)} skipped -> {args.out}")
    return EXIT_OK


def cmd_phantom(args) -> int:
    style = {"a": "A_style", "b": "B_style"}[args.style]
    m = generate_phantom_dataset(PhantomSpec(image_size=args.size, n_slices=args.count, modality_contrast=style), args.seed, args.out)
    print(f"{len(m)} phantom slices -> {args.out}")
    return EXIT_OK


def cmd_summary(args) -> int:
    cfg = _config_or_exit(args.config)
    size = args.size or cfg["image_size"]
    gen = xconfig.generator_config(cfg)
    disc = xconfig.discriminator_config(cfg)
    unet = xconfig.unet_config(cfg)
    nets = {
        "generator": lambda: build_generator(gen),
        "segmentor": lambda: build_segmentor(gen),
        "discriminator": lambda: build_patch_discriminator(disc),
        "unet": lambda: build_unet(unet),
    }
    chosen = list(nets) if args.net == "all" else [args.net]
    for name in chosen:
        rows = summarize(nets[name](), (1, 1, size, size))
        print(format_summary(rows, f"== {name} (input 1x1x{size}x{size})"))
        print()
    rec = reconcile_parameter_counts(gen, disc, unet)
    print("== parameter reconciliation")
    print("\n".join(rec.notes))
    return EXIT_OK


def cmd_train_essnet(args) -> int:
    cfg = _config_or_exit(args.config)
    tcfg = xconfig.essnet_train_config(cfg, ablation_no_seg=True if args.ablation_no_seg else None)
    run = train_essnet(tcfg, read_manifest(args.data_a), read_manifest(args.data_b), args.out, run_id=cfg["run_id"])
    print(f"trained {tcfg.epochs} epochs; checkpoints: {', '.join(Path(c).name for c in run.checkpoints)}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    m = synthesize(args.ckpt, read_manifest(args.data_a), args.out)
    print(f"{len(m)} synthetic slices -> {args.out}")
    return EXIT_OK


def cmd_train_unet(args) -> int:
    cfg = _config_or_exit(args.config)
    syn = read_manifest(args.synthetic) if args.synthetic else None
    train_unet(xconfig.unet_train_config(cfg), read_manifest(args.real), args.out, syn, args.take, run_id=cfg["run_id"])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report, roc = evaluate_segmentation(
        args.ckpt, read_manifest(args.data), args.threshold, run_id=args.run_id, arrangement=args.arrangement
    )
    report.write(args.out)
    if args.roc_csv and roc is not None:
        roc.to_csv(args.roc_csv)
    print(f"dice={report.dice:.4f} iou={report.iou:.4f} auc={report.auc}")
    return EXIT_OK


def cmd_report(args) -> int:
    tables = reproduce_tables([MetricsReport.read(p) for p in args.runs])
    if args.format == "txt":
        print(tables.as_text(), end="")
    else:
        for name, text in tables.as_csv().items():
            print(f"# {name}")
            print(text, end="")
    return EXIT_OK


def cmd_validate(args) -> int:
    diags = xconfig.validate_config(args.config)
    for d in diags:
        print(d)
    if not diags:
        print("ok")
    return EXIT_CONFIG if diags else EXIT_OK


def cmd_pipeline(args) -> int:
    return run_pipeline(args.config, args.out)


# ---------------------------------------------------------------------------
# pipeline


def _stage(run_dir: Path, name: str, code: int, fn):
    """Run ``fn`` unless a completion marker exists; failures become StageFailed."""
    marker = run_dir / ".stages" / name
    if marker.exists():
        log.info("stage %s already complete, skipping", name)
        return
    log.info("stage %s", name)
    try:
        fn()
    except (DatasetError, FileNotFoundError) as err:
        raise StageFailed(name, EXIT_DATA if code != EXIT_EVAL else EXIT_EVAL, err) from err
    except (TrainingAborted, CheckpointError, MetricError, ValueError) as err:
        raise StageFailed(name, code, err) from err
    marker.parent.mkdir(parents=True, exist_ok=True)
    marker.touch()


def _data_path(cfg: dict, key: str, base: Path) -> Path:
    v = cfg["data"].get(key)
    if not v:
        raise DatasetError(f"data.{key} is not set; point it at a prepared dataset directory")
    p = Path(v)
    return p if p.is_absolute() else base / p


def _prep_check(cfg: dict, base: Path):
    size = cfg["image_size"]
    manifests = {}
    for key in ("a", "b", "test"):
        path = _data_path(cfg, key, base)
        if not path.is_dir():
            raise DatasetError(f"data.{key}: {path} does not exist (run `xmod prep` or `xmod phantom` first)")
        m = read_manifest(path)
        problems = validate_manifest(m)
        if problems:
            raise DatasetError(f"data.{key}: {len(problems)} manifest problems, first: {problems[0]}")
        wrong = [e.id for e in m.entries if (e.width, e.height) != (size, size)]
        if wrong:
            raise DatasetError(f"data.{key}: {len(wrong)} slices are not {size}x{size} (e.g. {wrong[0]})")
        manifests[key] = m
    if not [e for e in manifests["a"].liver_visible if e.mask_path]:
        raise DatasetError("data.a has no liver-visible masked slices")
    if any(e.mask_path is None for e in manifests["test"].entries):
        raise DatasetError("data.test: every test slice needs a mask")
    return manifests


def run_pipeline(config_path: str | Path, out_root: str | Path) -> int:
    """prep-check -> train-essnet -> synthesize -> train-unet per arrangement -> evaluate -> report."""
    set_deterministic()
    config_path = Path(config_path)
    try:
        cfg = xconfig.load_config(config_path)
    except xconfig.ConfigError as err:
        for d in err.diagnostics:
            print(f"config: {d}", file=sys.stderr)
        return EXIT_CONFIG
    base = config_path.resolve().parent
    run_dir = Path(out_root) / cfg["run_id"]
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = run_dir / "config.json"
    text = xconfig.dumps(cfg)
    if snapshot.exists() and snapshot.read_text() != text:
        print(f"config: {run_dir} belongs to a different resolved config", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with FileLock(str(run_dir / ".lock"), timeout=0):
            snapshot.write_text(text)
            _run_stages(cfg, base, run_dir)
    except Timeout:
        print(f"pipeline: {run_dir} is locked by another process", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailed as err:
        print(f"pipeline: stage {err.stage} failed: {err.__cause__}", file=sys.stderr)
        return err.code
    return EXIT_OK


def _run_stages(cfg: dict, base: Path, run_dir: Path) -> None:
    manifests = {}

    def prep():
        manifests.update(_prep_check(cfg, base))

    # prep-check always runs: later stages need the manifests
    try:
        prep()
    except DatasetError as err:
        raise StageFailed("prep-check", EXIT_DATA, err) from err
    a, b, test = manifests["a"], manifests["b"], manifests["test"]
    n_real = len(b.liver_visible)
    ucfg = xconfig.unet_train_config(cfg)
    threshold = cfg["unet"]["threshold"]
    reports_dir = run_dir / "reports"
    arms = [("essnet", "essnet", "synth", "unet_{}", cfg["unet"]["arrangements"], False)]
    if cfg["pipeline"]["cyclegan_ablation"]:
        arms.append(("cyclegan", "essnet_noseg", "synth_noseg", "unet_cyclegan_{}", cfg["pipeline"]["ablation_takes"], True))

    report_paths = []
    for gen_name, ess_dir, syn_dir, unet_fmt, takes, no_seg in arms:
        needs_synth = any(t > 0 for t in takes)
        if needs_synth:
            ecfg = xconfig.essnet_train_config(cfg, ablation_no_seg=True if no_seg else None)
            _stage(run_dir, f"train-{ess_dir}", EXIT_TRAIN,
                   lambda: train_essnet(ecfg, a, b, run_dir / ess_dir, run_id=cfg["run_id"]))
            _stage(run_dir, f"synthesize-{syn_dir}", EXIT_TRAIN,
                   lambda: synthesize(run_dir / ess_dir, a, run_dir / syn_dir))
        for take in takes:
            if take == 0 and gen_name == "cyclegan":
                continue
            name = unet_fmt.format(take)
            label = arrangement_label(n_real, take, None if take == 0 else gen_name)
            report_path = reports_dir / f"{name}.json"

            def fit(take=take, name=name):
                syn = read_manifest(run_dir / syn_dir) if take else None
                train_unet(ucfg, b, run_dir / name, syn, take or None, run_id=cfg["run_id"])

            def score(take=take, name=name, label=label, report_path=report_path):
                report, roc = evaluate_segmentation(run_dir / name, test, threshold, cfg["run_id"], label)
                report.generator = None if take == 0 else gen_name
                report.n_train = n_real + take
                report.write(report_path)
                if roc is not None:
                    roc.to_csv(reports_dir / f"{name}_roc.csv")

            _stage(run_dir, f"train-{name}", EXIT_TRAIN, fit)
            _stage(run_dir, f"evaluate-{name}", EXIT_EVAL, score)
            report_paths.append(report_path)

    def report():
        tables = reproduce_tables([MetricsReport.read(p) for p in report_paths])
        for key, text in tables.as_csv().items():
            (reports_dir / f"{key}.csv").write_text(text)
        (reports_dir / "tables.txt").write_text(tables.as_text())
        print(tables.as_text(), end="")

    _stage(run_dir, "report", EXIT_EVAL, report)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmod", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prep", help="ingest grayscale slices + label images into the canonical layout")
    s.add_argument("--src", required=True)
    s.add_argument("--modality", choices=["ct", "mr"], required=True)
    s.add_argument("--liver-range", type=_parse_range, default=None, metavar="LO:HI")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--bit-depth", type=int, choices=[8, 12, 16], default=None)
    s.set_defaults(func=cmd_prep)

    s = sub.add_parser("phantom", help="generate a synthetic body/liver phantom dataset")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--style", choices=["a", "b"], required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("summary", help="per-layer tables and parameter reconciliation")
    s.add_argument("--config")
    s.add_argument("--net", choices=["generator", "segmentor", "discriminator", "unet", "all"], default="all")
    s.add_argument("--size", type=int, default=None)
    s.set_defaults(func=cmd_summary)

    s = sub.add_parser("train-essnet", help="stage 1: train the synthesis network")
    s.add_argument("--config")
    s.add_argument("--data-a", required=True)
    s.add_argument("--data-b", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ablation-no-seg", action="store_true")
    s.set_defaults(func=cmd_train_essnet)

    s = sub.add_parser("synthesize", help="translate A slices into synthetic B slices")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data-a", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("train-unet", help="stage 2: train the U-Net segmenter")
    s.add_argument("--config")
    s.add_argument("--real", required=True)
    s.add_argument("--synthetic")
    s.add_argument("--take", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_unet)

    s = sub.add_parser("evaluate", help="score a U-Net checkpoint on a test set")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--arrangement", default="")
    s.add_argument("--run-id", default="")
    s.add_argument("--roc-csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="tabulate evaluation reports")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--format", choices=["csv", "txt"], default="txt")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("pipeline", help="run every stage from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("validate", help="check a config file")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    set_deterministic()
    try:
        return args.func(args)
    except xconfig.ConfigError as err:
        for d in err.diagnostics:
            print(f"config: {d}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, CheckpointError) as err:
        print(f"training error: {err}", file=sys.stderr)
        return EXIT_TRAIN
    except MetricError as err:
        print(f"evaluation error: {err}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
