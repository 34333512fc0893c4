"""Cross-validated experiment: per-fold CGANs, derived MR, FCN vs FCN-CGAN.

Output layout under ``out``::

    fold_k/cgan.ckpt  fold_k/genmr/<scan>_genmr.ctmr  fold_k/cgan_eval.json
    fold_k/fcn.ckpt   fold_k/fcn_cgan.ckpt            fold_k/preds/<scan>_<mode>.ctmr
    fold_k/log.jsonl  fold_k/*.done
    genmr_index.json  report.json  report.txt  grid_mr.pgm  grid_segmentation.ppm

Every random draw derives from ``ExperimentConfig.seed`` through
:func:`ctmr.seeding.derive`, so a rerun with the same seed rewrites the same
bytes. Each fold stage ends by writing a ``.done`` marker listing its
outputs; stages whose marker and outputs still load are skipped.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import figures
from .cgan import CGAN, DiscriminatorConfig, GeneratorConfig
from .data import AugmentRanges, FoldSplit, Manifest, ScanRecord, affine_augment, dump_json, read_stack, write_stack
from .fcn import FcnConfig, FcnTrainer, fcn_train_epoch, scan_inputs, slice_dataset
from .metrics import MetricsReport, aggregate, format_table, report_json, scan_metrics
from .nn import AdamState, ParamSet, SchemaError, load_checkpoint, save_checkpoint
from .seeding import derive

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    manifest: str = "manifest.json"
    split: str = "split.json"
    out: str = "run"
    seed: int = 0
    jobs: int = 1
    # CGAN
    cgan_epochs: int = 200
    lam: float = 100.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    base_width: int = 64
    resnet_blocks: int = 9
    d_widths: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    dropout: float = 0.5
    cgan_augment: bool = True
    genmr_dropout: bool = True
    # FCN
    fcn_epochs: int = 30
    fcn_lr: float = 2e-4
    fcn_widths: list[int] = field(default_factory=lambda: [32, 64, 128])
    gamma: float = 2.0
    alpha: float = 0.25
    # augmentation ranges
    rotation_deg: float = 10.0
    translation: float = 0.10
    scale_min: float = 0.9
    scale_max: float = 1.1

    def augment(self) -> AugmentRanges:
        r = AugmentRanges(self.rotation_deg, self.translation, (self.scale_min, self.scale_max))
        r.validate()
        return r

    def generator_config(self, size: int) -> GeneratorConfig:
        return GeneratorConfig(base_width=self.base_width, n_resnet_blocks=self.resnet_blocks,
                               image_size=size, dropout_rate=self.dropout)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(widths=list(self.d_widths))

    def fcn_config(self, in_channels: int) -> FcnConfig:
        w = tuple(self.fcn_widths)
        return FcnConfig(in_channels=in_channels, widths=w, branch_width=max(w[2] // 4, 1),
                         head_width=w[1], gamma=self.gamma, alpha=self.alpha)

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
class JsonlLog:
    """Append-only JSON-lines log; one flushed write per event so concurrent stages never interleave lines."""

    def __init__(self, path: Path):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "a", encoding="utf-8")

    def write(self, **event) -> None:
        self._fh.write(json.dumps(event, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _fold_dir(cfg: ExperimentConfig, k: int) -> Path:
    return Path(cfg.out) / f"fold_{k}"


def _stage_done(marker: Path) -> bool:
    if not marker.exists():
        return False
    try:
        outputs = json.loads(marker.read_text())["outputs"]
        for rel in outputs:
            path = marker.parent / rel
            if path.suffix == ".ckpt":
                load_checkpoint(path)
            elif path.suffix == ".ctmr":
                read_stack(path)
            elif not path.exists():
                return False
    except Exception as exc:  # noqa: BLE001 - any unreadable artifact means redo the stage
        log.warning("stage marker %s does not verify (%s); rerunning", marker, exc)
        return False
    return True


def _mark_done(marker: Path, outputs: list[str]) -> None:
    dump_json({"outputs": outputs}, marker)


def _load_inputs(cfg: ExperimentConfig) -> tuple[Manifest, FoldSplit]:
    manifest = Manifest.load(cfg.manifest)
    split = FoldSplit.load(cfg.split)
    subjects = manifest.subject_ids()
    try:
        split.validate(subjects)
    except ValueError as exc:
        raise PipelineError(f"split does not match manifest: {exc}") from None
    return manifest, split


def _merge_states(a: AdamState, b: AdamState) -> AdamState:
    return AdamState(lr=a.lr, beta1=a.beta1, beta2=a.beta2, eps=a.eps, t=a.t,
                     m={**a.m, **b.m}, v={**a.v, **b.v})


def save_cgan(model: CGAN, path) -> None:
    params = ParamSet(list(model.g_params) + list(model.d_params))
    save_checkpoint(params, path, _merge_states(model.g_adam, model.d_adam))


def load_cgan(path, g_cfg: GeneratorConfig, d_cfg: DiscriminatorConfig) -> CGAN:
    """Rebuild a CGAN (weights and both optimizer states) from :func:`save_cgan` output."""
    params, state = load_checkpoint(path)
    model = CGAN.create(g_cfg, d_cfg)
    for ps in (model.g_params, model.d_params):
        missing = [n for n in ps.names() if n not in params]
        if missing:
            raise SchemaError(f"{path}: checkpoint lacks {missing[:5]}")
        ps.load_arrays({n: params[n].data for n in ps.names()})
    if len(params) != len(model.g_params) + len(model.d_params):
        raise SchemaError(f"{path}: checkpoint holds parameters outside this architecture")
    if state is not None:
        for adam, ps in ((model.g_adam, model.g_params), (model.d_adam, model.d_params)):
            adam.lr, adam.beta1, adam.beta2, adam.eps, adam.t = state.lr, state.beta1, state.beta2, state.eps, state.t
            adam.m = {n: state.m[n] for n in ps.names() if n in state.m}
            adam.v = {n: state.v[n] for n in ps.names() if n in state.v}
    return model


def _pmap(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# CGAN stage
# ---------------------------------------------------------------------------
def train_cgan(cfg: ExperimentConfig, records: list[ScanRecord], fold: int, logger: JsonlLog | None = None) -> CGAN:
    size = records[0].size
    model = CGAN.create(cfg.generator_config(size), cfg.discriminator_config(),
                        seed=derive(cfg.seed, "cgan", fold, "init") % (1 << 31),
                        lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), lam=cfg.lam)
    pairs = [(r.ctp[:, z], r.dwi[:, z], r.mask[:, z]) for r in records for z in range(r.n_slices)]
    ranges = cfg.augment() if cfg.cgan_augment else None
    step = 0
    for epoch in range(cfg.cgan_epochs):
        rng = np.random.default_rng(derive(cfg.seed, "cgan", fold, "epoch", epoch))
        d_losses, g_losses = [], []
        for i in rng.permutation(len(pairs)):
            ctp, dwi, mask = pairs[i]
            if ranges is not None:
                stacked, _ = affine_augment(np.concatenate([ctp, dwi]), mask, ranges, rng)
                ctp, dwi = stacked[:-1], stacked[-1:]
            ld, lg = model.train_step(ctp[None], dwi[None], seed=derive(cfg.seed, "cgan", fold, "step", step))
            if logger is not None:
                logger.write(event="cgan_step", fold=fold, epoch=epoch, step=step, d_loss=ld, g_loss=lg)
            d_losses.append(ld)
            g_losses.append(lg)
            step += 1
        if logger is not None:
            logger.write(event="cgan_epoch", fold=fold, epoch=epoch,
                         d_loss=float(np.mean(d_losses)), g_loss=float(np.mean(g_losses)))
    return model


def generate_mr(model: CGAN, rec: ScanRecord, master_seed: int, dropout_active: bool = True) -> np.ndarray:
    """(1, D, S, S) derived MR for one scan, slice by slice."""
    out = [model.generate(rec.ctp[:, z][None], dropout_active,
                          seed=derive(master_seed, "genmr", rec.scan_id, z))[0]
           for z in range(rec.n_slices)]
    return np.stack(out, axis=1).astype(np.float32)


def mean_l1(model: CGAN, records: list[ScanRecord], master_seed: int, dropout_active: bool = True) -> float:
    vals = [float(np.abs(generate_mr(model, r, master_seed, dropout_active) - r.dwi).mean()) for r in records]
    return float(np.mean(vals))


def _cgan_fold(cfg: ExperimentConfig, manifest: Manifest, split: FoldSplit, k: int) -> None:
    fdir = _fold_dir(cfg, k)
    (fdir / "genmr").mkdir(parents=True, exist_ok=True)
    test_scans = manifest.scan_ids(split.test(k))
    outputs = ["cgan.ckpt", "cgan_eval.json"] + [f"genmr/{s}_genmr.ctmr" for s in test_scans]
    if _stage_done(fdir / "cgan.done"):
        log.info("fold %d: CGAN outputs verified, skipping", k)
        return
    logger = JsonlLog(fdir / "log.jsonl")
    logger.write(event="cgan_fold", fold=k, train_subjects=split.train(k), test_subjects=split.test(k))
    train_recs = manifest.load_all(split.train(k))
    test_recs = manifest.load_all(split.test(k))
    untrained = CGAN.create(cfg.generator_config(manifest.size), cfg.discriminator_config(),
                            seed=derive(cfg.seed, "cgan", k, "init") % (1 << 31))
    l1_before = mean_l1(untrained, test_recs, cfg.seed, cfg.genmr_dropout)
    model = train_cgan(cfg, train_recs, k, logger)
    save_cgan(model, fdir / "cgan.ckpt")
    l1_after = []
    for rec in test_recs:
        gen = generate_mr(model, rec, cfg.seed, cfg.genmr_dropout)
        write_stack(gen, fdir / "genmr" / f"{rec.scan_id}_genmr.ctmr")
        l1_after.append(float(np.abs(gen - rec.dwi).mean()))
    evaluation = {"fold": k, "heldout_l1": float(np.mean(l1_after)), "untrained_l1": l1_before,
                  "per_scan_l1": dict(zip([r.scan_id for r in test_recs], l1_after))}
    dump_json(evaluation, fdir / "cgan_eval.json")
    logger.write(event="cgan_eval", **evaluation)
    logger.close()
    _mark_done(fdir / "cgan.done", outputs)


def run_cgan_folds(cfg: ExperimentConfig) -> dict[str, dict]:
    """Train one CGAN per fold and derive MR for that fold's held-out scans.

    Returns (and writes to ``genmr_index.json``) a mapping scan id ->
    {fold, checkpoint, path}.
    """
    manifest, split = _load_inputs(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _pmap(lambda k: _cgan_fold(cfg, manifest, split, k), range(split.k), cfg.jobs)
    index: dict[str, dict] = {}
    for k in range(split.k):
        for s in manifest.scan_ids(split.test(k)):
            index[s] = {"fold": k, "checkpoint": f"fold_{k}/cgan.ckpt", "path": f"fold_{k}/genmr/{s}_genmr.ctmr"}
    missing = [s for s in manifest.scan_ids() if s not in index]
    if missing:
        raise PipelineError(f"no derived MR for scans {missing[:5]}")
    dump_json(index, out / "genmr_index.json")
    return index


def audit_provenance(cfg: ExperimentConfig) -> list[str]:
    """Check the run for subject leakage using only the emitted fold logs.

    Every logged training set must be disjoint from its fold's test subjects,
    and each scan's derived MR must come from a CGAN whose training set did
    not include the scan's subject. Returns the violations (empty = pass).
    """
    manifest, _ = _load_inputs(cfg)
    out = Path(cfg.out)
    index = json.loads((out / "genmr_index.json").read_text())
    trained_on: dict[int, set[str]] = {}
    problems = []
    for fold_log in sorted(out.glob("fold_*/log.jsonl")):
        for line in fold_log.read_text().splitlines():
            ev = json.loads(line)
            if "train_subjects" not in ev:
                continue
            leaked = sorted(set(ev["train_subjects"]) & set(ev["test_subjects"]))
            if leaked:
                problems.append(f"{fold_log.parent.name} {ev['event']}: test subjects {leaked} in training set")
            if ev["event"] == "cgan_fold":
                trained_on.setdefault(int(ev["fold"]), set()).update(ev["train_subjects"])
    for subject, scan in manifest.scans():
        entry = index.get(scan["id"])
        if entry is None:
            problems.append(f"{scan['id']}: no derived MR")
            continue
        fold = int(entry["fold"])
        if fold not in trained_on:
            problems.append(f"{scan['id']}: fold {fold} has no training log")
        elif subject in trained_on[fold]:
            problems.append(f"{scan['id']}: generated by fold {fold} CGAN trained on {subject}")
        if not (out / entry["path"]).exists():
            problems.append(f"{scan['id']}: derived MR file missing")
    return problems


# ---------------------------------------------------------------------------
# Segmentation stage
# ---------------------------------------------------------------------------
def load_genmr(cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    index = json.loads((Path(cfg.out) / "genmr_index.json").read_text())
    return {scan: read_stack(Path(cfg.out) / e["path"]) for scan, e in index.items()}


def train_fcn(cfg: ExperimentConfig, fcn_cfg: FcnConfig, records: list[ScanRecord],
              genmr: dict[str, np.ndarray], fold: int, logger: JsonlLog | None = None) -> FcnTrainer:
    """Train one FCN; both input modes share init seed, sample order and augmentation draws."""
    trainer = FcnTrainer.create(fcn_cfg, seed=derive(cfg.seed, "fcn", fold, "init") % (1 << 31),
                                lr=cfg.fcn_lr, betas=(cfg.beta1, cfg.beta2))
    inputs = {r.scan_id: scan_inputs(r, genmr.get(r.scan_id), fcn_cfg) for r in records}
    dataset = slice_dataset(records, inputs)
    ranges = cfg.augment()
    for epoch in range(cfg.fcn_epochs):
        rng = np.random.default_rng(derive(cfg.seed, "fcn", fold, "epoch", epoch))
        loss = fcn_train_epoch(trainer, dataset, ranges, rng)
        if logger is not None:
            logger.write(event="fcn_epoch", mode=fcn_cfg.mode, fold=fold, epoch=epoch, loss=loss)
    return trainer


def _mode_tag(in_channels: int) -> str:
    return "fcn" if in_channels == 5 else "fcn_cgan"


def run_fcn_folds(cfg: ExperimentConfig, channels: tuple[int, ...] = (5, 6)) -> None:
    """Train and apply one FCN per fold and input mode; predictions cover every scan once."""
    manifest, split = _load_inputs(cfg)
    genmr = load_genmr(cfg) if 6 in channels else {}
    missing = [s for s in manifest.scan_ids() if 6 in channels and s not in genmr]
    if missing:
        raise PipelineError(f"derived MR missing for {missing[:5]}; run the CGAN stage first")
    jobs = [(k, c) for k in range(split.k) for c in channels]
    _pmap(lambda job: _fcn_fold(cfg, manifest, split, genmr, *job), jobs, cfg.jobs)


def _fcn_fold(cfg: ExperimentConfig, manifest: Manifest, split: FoldSplit,
              genmr: dict[str, np.ndarray], k: int, c: int) -> None:
    fdir = _fold_dir(cfg, k)
    (fdir / "preds").mkdir(parents=True, exist_ok=True)
    tag = _mode_tag(c)
    fcn_cfg = cfg.fcn_config(c)
    test_scans = manifest.scan_ids(split.test(k))
    outputs = [f"{tag}.ckpt"] + [f"preds/{s}_{tag}.ctmr" for s in test_scans]
    if _stage_done(fdir / f"{tag}.done"):
        log.info("fold %d: %s outputs verified, skipping", k, fcn_cfg.mode)
        return
    logger = JsonlLog(fdir / "log.jsonl")
    logger.write(event="fcn_fold", mode=fcn_cfg.mode, fold=k,
                 train_subjects=split.train(k), test_subjects=split.test(k))
    try:
        trainer = train_fcn(cfg, fcn_cfg, manifest.load_all(split.train(k)), genmr, k, logger)
        save_checkpoint(trainer.params, fdir / f"{tag}.ckpt", trainer.adam)
        for rec in manifest.load_all(split.test(k)):
            pred = trainer.segment(scan_inputs(rec, genmr.get(rec.scan_id), fcn_cfg))
            write_stack(pred, fdir / "preds" / f"{rec.scan_id}_{tag}.ctmr")
    except ValueError as exc:
        raise PipelineError(f"fold {k} {fcn_cfg.mode}: {exc}") from exc
    finally:
        logger.close()
    _mark_done(fdir / f"{tag}.done", outputs)


def compare(cfg: ExperimentConfig, figures_too: bool = True, spacing=None) -> tuple[MetricsReport, MetricsReport]:
    """Score both prediction sets against ground truth and write the comparison table."""
    reports = (aggregate(evaluate_predictions(cfg, "fcn", spacing), "FCN"),
               aggregate(evaluate_predictions(cfg, "fcn_cgan", spacing), "FCN-CGAN"))
    write_reports(list(reports), Path(cfg.out))
    if figures_too:
        manifest, _ = _load_inputs(cfg)
        export_figures(cfg, manifest, load_genmr(cfg), reports)
    return reports


def run_segmentation_comparison(cfg: ExperimentConfig) -> tuple[MetricsReport, MetricsReport]:
    run_fcn_folds(cfg)
    return compare(cfg)


def prediction_path(cfg: ExperimentConfig, split: FoldSplit, subject: str, scan_id: str, tag: str) -> Path:
    return _fold_dir(cfg, split.fold_of(subject)) / "preds" / f"{scan_id}_{tag}.ctmr"


def evaluate_predictions(cfg: ExperimentConfig, tag: str, spacing=None) -> list[dict]:
    """Per-scan metric rows for every scan in the manifest, in manifest order.

    ``spacing`` overrides the manifest voxel size, e.g. (1, 1, 1) to report
    distances in voxel units.
    """
    manifest, split = _load_inputs(cfg)
    spacing = manifest.spacing_mm if spacing is None else tuple(spacing)

    def one(item):
        subject, scan = item
        rec = manifest.load_scan(scan["id"])
        pred = read_stack(prediction_path(cfg, split, subject, scan["id"], tag))
        row = {"scan": scan["id"], "subject": subject, "fold": split.fold_of(subject)}
        row.update(scan_metrics(pred, rec.mask, spacing))
        return row

    return _pmap(one, manifest.scans(), cfg.jobs)


def write_reports(reports: list[MetricsReport], out: Path) -> None:
    (out / "report.json").write_text(report_json(reports))
    (out / "report.txt").write_text(format_table(reports))


def export_figures(cfg: ExperimentConfig, manifest: Manifest, genmr: dict[str, np.ndarray],
                   reports: tuple[MetricsReport, MetricsReport], n: int = 5) -> None:
    _, split = _load_inputs(cfg)
    scans = manifest.scans()[:n]
    bases, a, b, gts, real, fake = [], [], [], [], [], []
    dice_of = {tag: {r["scan"]: r["dice"] for r in rep.rows} for tag, rep in zip(("fcn", "fcn_cgan"), reports)}
    for subject, scan in scans:
        rec = manifest.load_scan(scan["id"])
        z = figures.select_slice(rec.mask)
        pa = read_stack(prediction_path(cfg, split, subject, scan["id"], "fcn_cgan"))
        pb = read_stack(prediction_path(cfg, split, subject, scan["id"], "fcn"))
        bases.append(rec.ctp[0, z])
        a.append(pa[0, z])
        b.append(pb[0, z])
        gts.append(rec.mask[0, z])
        real.append(rec.dwi[0, z])
        fake.append(genmr[scan["id"]][0, z])
    out = Path(cfg.out)
    figures.export_comparison_grid(bases, a, b, gts, out / "grid_segmentation.ppm",
                                   [dice_of["fcn_cgan"][s["id"]] for _, s in scans],
                                   [dice_of["fcn"][s["id"]] for _, s in scans])
    figures.export_mr_grid(real, fake, out / "grid_mr.pgm")


def run_experiment(cfg: ExperimentConfig) -> tuple[MetricsReport, MetricsReport]:
    run_cgan_folds(cfg)
    problems = audit_provenance(cfg)
    if problems:
        raise PipelineError("provenance audit failed: " + "; ".join(problems[:5]))
    return run_segmentation_comparison(cfg)


def desk_config(manifest, split, out, seed: int = 0, **overrides) -> ExperimentConfig:
    """Reduced widths and depth that keep a 10-subject, 64 px experiment within a CPU hour."""
    cfg = ExperimentConfig(manifest=str(manifest), split=str(split), out=str(out), seed=seed,
                           cgan_epochs=30, fcn_epochs=30, base_width=16, resnet_blocks=3,
                           d_widths=[32, 64, 128, 256], fcn_widths=[32, 64, 128])
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise KeyError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    return cfg
