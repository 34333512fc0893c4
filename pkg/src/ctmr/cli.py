"""``ctmr`` command line.

Exit status: 0 success, 1 usage error (synopsis on stderr), 2 runtime failure.
Experiment settings come from one table (:data:`CONFIG_KEYS`) that defines
both the ``--flag`` and the dotted JSON key of each setting. Precedence is
command-line flag, then ``--config`` file, then ``--preset``, then defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import gradcheck, pipeline
from .data import Manifest, kfold_by_subject, make_phantom_corpus, read_stack, write_stack
from .fcn import FcnTrainer, scan_inputs
from .metrics import aggregate, format_table, report_json
from .nn import load_checkpoint

log = logging.getLogger("ctmr")


class UsageError(Exception):
    """Bad flags or config file; reported with exit status 1."""


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _int_list(text) -> list[int]:
    if isinstance(text, list):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


@dataclass(frozen=True)
class ConfigKey:
    key: str
    field: str
    type: Callable
    help: str

    @property
    def flag(self) -> str:
        if self.key == "cgan.lambda":
            return "--lambda"
        return "--" + self.key.replace(".", "-").replace("_", "-")


CONFIG_KEYS = [
    ConfigKey("manifest", "manifest", str, "corpus manifest JSON"),
    ConfigKey("split", "split", str, "fold split JSON"),
    ConfigKey("out", "out", str, "run output directory"),
    ConfigKey("seed", "seed", int, "master seed; every random draw derives from it"),
    ConfigKey("jobs", "jobs", int, "max folds or scans processed concurrently"),
    ConfigKey("cgan.epochs", "cgan_epochs", int, "CGAN epochs per fold"),
    ConfigKey("cgan.lambda", "lam", float, "weight of the L1 term in the generator objective"),
    ConfigKey("cgan.lr", "lr", float, "Adam learning rate for G and D"),
    ConfigKey("cgan.beta1", "beta1", float, "Adam beta1 (CGAN and FCN)"),
    ConfigKey("cgan.beta2", "beta2", float, "Adam beta2 (CGAN and FCN)"),
    ConfigKey("cgan.base_width", "base_width", int, "generator width after the 7x7 stem"),
    ConfigKey("cgan.resnet_blocks", "resnet_blocks", int, "generator residual blocks"),
    ConfigKey("cgan.d_widths", "d_widths", _int_list, "discriminator hidden widths, comma separated"),
    ConfigKey("cgan.dropout", "dropout", float, "dropout rate inside residual blocks"),
    ConfigKey("cgan.augment", "cgan_augment", _bool, "augment CGAN training pairs"),
    ConfigKey("genmr.dropout", "genmr_dropout", _bool, "keep dropout active when deriving MR"),
    ConfigKey("fcn.epochs", "fcn_epochs", int, "FCN epochs per fold"),
    ConfigKey("fcn.lr", "fcn_lr", float, "FCN Adam learning rate"),
    ConfigKey("fcn.widths", "fcn_widths", _int_list, "FCN stem, mid and trunk widths, comma separated"),
    ConfigKey("fcn.gamma", "gamma", float, "focal loss focusing exponent"),
    ConfigKey("fcn.alpha", "alpha", float, "focal loss positive-class weight"),
    ConfigKey("augment.rotation_deg", "rotation_deg", float, "max |rotation| in degrees"),
    ConfigKey("augment.translation", "translation", float, "max |shift| as a fraction of the side"),
    ConfigKey("augment.scale_min", "scale_min", float, "lower scaling bound"),
    ConfigKey("augment.scale_max", "scale_max", float, "upper scaling bound"),
]
_BY_KEY = {k.key: k for k in CONFIG_KEYS}

PRESETS = {
    "paper": {},
    "desk": {"cgan.epochs": 30, "fcn.epochs": 30, "cgan.base_width": 16, "cgan.resnet_blocks": 3,
             "cgan.d_widths": [32, 64, 128, 256], "fcn.widths": [32, 64, 128]},
}


def flat_config(cfg: pipeline.ExperimentConfig) -> dict:
    return {k.key: getattr(cfg, k.field) for k in CONFIG_KEYS}


def resolve_config(args: argparse.Namespace) -> pipeline.ExperimentConfig:
    """Defaults, then preset, then config file, then explicit flags."""
    file_doc: dict = {}
    if args.config:
        try:
            file_doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(file_doc, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
    preset = args.preset or file_doc.pop("preset", None) or "paper"
    file_doc.pop("preset", None)
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    unknown = sorted(set(file_doc) - set(_BY_KEY))
    if unknown:
        raise UsageError(f"unknown config keys {unknown}")
    values = {**PRESETS[preset], **file_doc}
    cfg = pipeline.ExperimentConfig()
    for key, raw in values.items():
        spec = _BY_KEY[key]
        try:
            setattr(cfg, spec.field, spec.type(raw))
        except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config key {key}: {exc}") from None
    for spec in CONFIG_KEYS:
        value = getattr(args, spec.field)
        if value is not None:
            setattr(cfg, spec.field, value)
    if cfg.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of dotted keys, e.g. {\"cgan.lambda\": 100}")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named starting point (default paper)")
    for spec in CONFIG_KEYS:
        p.add_argument(spec.flag, dest=spec.field, type=spec.type, default=None,
                       help=f"{spec.help} [config key {spec.key}]")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctmr", description="CT perfusion to MR CGAN and lesion segmentation experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom", help="write a synthetic stroke phantom corpus")
    p.add_argument("--out", required=True, help="corpus directory (manifest.json goes here)")
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--scans-per-subject", type=int, default=1)
    p.add_argument("--size", type=int, default=64, help="in-plane side in pixels")
    p.add_argument("--min-slices", type=int, default=2)
    p.add_argument("--max-slices", type=int, default=22)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", action="store_true", help="draw 1..N scans per subject instead of exactly N")

    p = sub.add_parser("split", help="assign subjects to K test folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="split JSON to write")

    p = sub.add_parser("train-cgan", help="train one CGAN per fold and derive MR for its test scans")
    _add_config_flags(p)

    p = sub.add_parser("generate-mr", help="rederive MR for one fold's test scans from its checkpoint")
    _add_config_flags(p)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--scan", action="append", default=None, help="limit to these scan ids (repeatable)")
    p.add_argument("--dest", help="output directory (default OUT/fold_K/genmr)")

    p = sub.add_parser("train-fcn", help="train per-fold FCNs and predict their test scans")
    _add_config_flags(p)
    p.add_argument("--mode", choices=("fcn", "fcn-cgan", "both"), default="both")

    p = sub.add_parser("segment", help="segment one scan with an FCN checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--genmr", help="derived MR stack (FCN-CGAN checkpoints; default from the run index)")
    p.add_argument("--pred", required=True, help="output mask stack")

    p = sub.add_parser("evaluate", help="score one prediction set against ground truth")
    _add_config_flags(p)
    p.add_argument("--mode", choices=("fcn", "fcn-cgan"), required=True)
    p.add_argument("--report", required=True, help="report JSON to write")
    p.add_argument("--unit-spacing", action="store_true", help="distances and volumes in voxel units")

    p = sub.add_parser("compare", help="score both prediction sets and write report.json / report.txt")
    _add_config_flags(p)
    p.add_argument("--unit-spacing", action="store_true", help="distances and volumes in voxel units")

    p = sub.add_parser("export-grid", help="write the segmentation and MR comparison grids")
    _add_config_flags(p)
    p.add_argument("--scans", type=int, default=5, help="number of columns")

    p = sub.add_parser("run", help="every stage in order, then the provenance audit")
    _add_config_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--networks", action="store_true", help="also check the full desk-scale networks")
    return parser


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------
def _tag(mode: str) -> str:
    return mode.replace("-", "_")


def cmd_phantom(args, out) -> None:
    path = make_phantom_corpus(args.subjects, args.scans_per_subject, args.size,
                               (args.min_slices, args.max_slices), seed=args.seed,
                               out_dir=args.out, jitter=args.jitter)
    print(f"wrote {path}", file=out)


def cmd_split(args, out) -> None:
    split = kfold_by_subject(Manifest.load(args.manifest).subject_ids(), args.folds, args.seed)
    split.save(args.out)
    print(f"wrote {args.out}: test fold sizes {[len(f) for f in split.folds]}", file=out)


def cmd_train_cgan(cfg, args, out) -> None:
    index = pipeline.run_cgan_folds(cfg)
    for k in sorted({e["fold"] for e in index.values()}):
        ev = json.loads((Path(cfg.out) / f"fold_{k}" / "cgan_eval.json").read_text())
        print(f"fold {k}: held-out L1 {ev['heldout_l1']:.4f} (untrained {ev['untrained_l1']:.4f})", file=out)


def cmd_generate_mr(cfg, args, out) -> None:
    manifest, split = pipeline._load_inputs(cfg)
    if not 0 <= args.fold < split.k:
        raise UsageError(f"--fold must be in [0, {split.k - 1}]")
    allowed = manifest.scan_ids(split.test(args.fold))
    scans = args.scan or allowed
    outside = [s for s in scans if s not in allowed]
    if outside:
        raise pipeline.PipelineError(f"scans {outside} are not in fold {args.fold}'s test set; "
                                     "their subjects trained this CGAN")
    fdir = Path(cfg.out) / f"fold_{args.fold}"
    model = pipeline.load_cgan(fdir / "cgan.ckpt", cfg.generator_config(manifest.size), cfg.discriminator_config())
    dest = Path(args.dest) if args.dest else fdir / "genmr"
    dest.mkdir(parents=True, exist_ok=True)
    for scan in scans:
        gen = pipeline.generate_mr(model, manifest.load_scan(scan), cfg.seed, cfg.genmr_dropout)
        write_stack(gen, dest / f"{scan}_genmr.ctmr")
        print(f"wrote {dest / f'{scan}_genmr.ctmr'}", file=out)


def cmd_train_fcn(cfg, args, out) -> None:
    channels = {"fcn": (5,), "fcn-cgan": (6,), "both": (5, 6)}[args.mode]
    pipeline.run_fcn_folds(cfg, channels)
    print(f"trained {args.mode} for every fold under {cfg.out}", file=out)


def cmd_segment(cfg, args, out) -> None:
    manifest = Manifest.load(cfg.manifest)
    params, _ = load_checkpoint(args.checkpoint)
    prefixes = {n.split(".")[0] for n in params.names()}
    if prefixes not in ({"fcn5"}, {"fcn6"}):
        raise pipeline.PipelineError(f"{args.checkpoint} is not an FCN checkpoint")
    fcn_cfg = cfg.fcn_config(int(prefixes.pop()[3:]))
    trainer = FcnTrainer.create(fcn_cfg, seed=0)
    trainer.params.load_arrays(params)
    rec = manifest.load_scan(args.scan)
    genmr = None
    if fcn_cfg.in_channels == 6:
        if args.genmr:
            genmr = read_stack(args.genmr)
        else:
            genmr = pipeline.load_genmr(cfg).get(args.scan)
    pred = trainer.segment(scan_inputs(rec, genmr, fcn_cfg))
    write_stack(pred, args.pred)
    print(f"wrote {args.pred}: {int(pred.sum())} lesion voxels", file=out)


def cmd_evaluate(cfg, args, out) -> None:
    label = "FCN" if args.mode == "fcn" else "FCN-CGAN"
    spacing = (1.0, 1.0, 1.0) if args.unit_spacing else None
    report = aggregate(pipeline.evaluate_predictions(cfg, _tag(args.mode), spacing), label)
    Path(args.report).write_text(report_json([report]))
    print(format_table([report]), end="", file=out)


def cmd_compare(cfg, args, out) -> None:
    spacing = (1.0, 1.0, 1.0) if args.unit_spacing else None
    reports = pipeline.compare(cfg, figures_too=False, spacing=spacing)
    print(format_table(list(reports)), end="", file=out)


def cmd_export_grid(cfg, args, out) -> None:
    manifest, _ = pipeline._load_inputs(cfg)
    reports = tuple(aggregate(pipeline.evaluate_predictions(cfg, tag), label)
                    for tag, label in (("fcn", "FCN"), ("fcn_cgan", "FCN-CGAN")))
    pipeline.export_figures(cfg, manifest, pipeline.load_genmr(cfg), reports, n=args.scans)
    print(f"wrote {Path(cfg.out) / 'grid_segmentation.ppm'} and {Path(cfg.out) / 'grid_mr.pgm'}", file=out)


def cmd_run(cfg, args, out) -> None:
    reports = pipeline.run_experiment(cfg)
    print(format_table(list(reports)), end="", file=out)


def cmd_gradcheck(args, out) -> bool:
    results = gradcheck.op_suite(args.seed)
    if args.networks:
        results += gradcheck.network_suite(seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<40} rel_err={r.rel_error:.2e}  n={r.checked}", file=out)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed", file=out)
    return not failed


CONFIG_COMMANDS = {
    "train-cgan": cmd_train_cgan, "generate-mr": cmd_generate_mr, "train-fcn": cmd_train_fcn,
    "segment": cmd_segment, "evaluate": cmd_evaluate, "compare": cmd_compare,
    "export-grid": cmd_export_grid, "run": cmd_run,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, parse errors exit 1 via _Parser.error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        if args.command in CONFIG_COMMANDS:
            cfg = resolve_config(args)
            resolved = flat_config(cfg)
        else:
            cfg = None
            resolved = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
        print(json.dumps({"command": args.command, "config": resolved}, sort_keys=True), file=out)
        if args.command == "phantom":
            cmd_phantom(args, out)
        elif args.command == "split":
            cmd_split(args, out)
        elif args.command == "gradcheck":
            return 0 if cmd_gradcheck(args, out) else 2
        else:
            CONFIG_COMMANDS[args.command](cfg, args, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ctmr: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure past parsing is a runtime error
        log.debug("failure", exc_info=True)
        print(f"ctmr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
