"""Experiment orchestration: shared workspace, multi-seed runs and reports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .. import checkpoint, codec
from ..datagen import make_dataset
from ..nets import build_feature_extractor, build_segmenter
from ..task import FrozenSegmenter, metrics, predict_labels, pretrain_segmenter
from ..trainer import (CodecModel, DivergenceError, Evaluation, TrainConfig, TrainingCurves, TrainResult,
                       curve_correlation, evaluate, pretrain_config, pretrain_then_finetune, train)
from .config import ExperimentConfig, dump_config

log = logging.getLogger(__name__)

SWEEP_RS = (2, 4, 8, 16, 32)
ABLATION_SCHEMES = ("ABL_CE", "ABL_KLD", "ABL_VQ_KLD", "ABL_VQ_LPIPS", "ABL_KLD_LPIPS", "GOSVAE")


@dataclass(frozen=True)
class RunRecord:
    """One (scheme, r, seed) training run and its validation evaluation."""
    scheme: str
    r: int
    seed: int
    K: int
    params_count: int
    payload_bytes: float
    payload_fixed_bytes: float
    miou: float
    accuracy: float
    mse: float
    perceptual: float
    checkpoint: str
    checkpoint_digest: str
    diverged: bool = False
    error: str = ""
    jsd_perceptual_corr: float | None = None


@dataclass(frozen=True)
class ReportRow:
    """Mean over seeds for one (scheme, r); spreads describe seed-to-seed stability."""
    scheme: str
    r: int
    K: int
    params_count: int
    payload_bytes: float
    kib: float
    miou: float
    accuracy: float
    mse: float
    perceptual: float
    payload_fixed_bytes: float
    payload_header_bytes: int
    miou_std: float
    miou_min: float
    miou_max: float
    n_seeds: int
    n_diverged: int
    errors: str = ""


CONVENTIONS = {
    "miou": "percent, one confusion matrix accumulated over the whole validation split",
    "accuracy": "percent of validation pixels, same confusion matrix",
    "payload_bytes": "mean coder-1 packet size over validation images, header and code table included",
    "payload_header_bytes": "coder-1 header plus code-length table, the fixed part of payload_bytes",
    "payload_fixed_bytes": "mean coder-0 packet size, header included",
    "kib": "payload_bytes / 1024",
    "miou_std": "sample standard deviation over seeds",
}


@dataclass
class Report:
    kind: str
    rows: list[ReportRow] = field(default_factory=list)
    runs: list[RunRecord] = field(default_factory=list)
    correlations: dict[str, float] = field(default_factory=dict)
    config: str = ""
    segmenter: dict = field(default_factory=dict)

    def row(self, scheme: str, r: int | None = None) -> ReportRow:
        for row in self.rows:
            if row.scheme == scheme and (r is None or row.r == r):
                return row
        raise KeyError((scheme, r))

    @property
    def diverged(self) -> bool:
        return any(run.diverged for run in self.runs)

    def to_json(self) -> str:
        doc = {"kind": self.kind, "conventions": CONVENTIONS, "rows": [asdict(r) for r in self.rows],
               "runs": [asdict(r) for r in self.runs], "correlations": self.correlations,
               "segmenter": self.segmenter, "config": self.config}
        return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path, metric_columns=None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = _report_columns(metric_columns)
        _write_csv(out / f"{self.kind}.csv", cols, [asdict(r) for r in self.rows])
        _write_csv(out / f"{self.kind}_runs.csv", [f.name for f in fields(RunRecord)],
                   [asdict(r) for r in self.runs])
        (out / f"{self.kind}.json").write_text(self.to_json())
        return out / f"{self.kind}.csv"


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_clean(x) for x in v]
    return v


OPTIONAL_METRICS = ("payload_bytes", "kib", "miou", "accuracy", "mse", "perceptual")


def _report_columns(metric_columns) -> list[str]:
    names = [f.name for f in fields(ReportRow)]
    if metric_columns is None:
        return names
    keep = set(metric_columns)
    if "payload_bytes" in keep:
        keep.add("kib")
    return [n for n in names if n not in OPTIONAL_METRICS or n in keep]


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


class Workspace:
    """Dataset, frozen segmenter and extractor shared by every run of one report.

    Runs are cached by (scheme, r, seed, schedule) so later reports can reuse
    earlier training, and pre-training schemes reuse the matching pixel run.
    """

    def __init__(self, cfg: ExperimentConfig, reuse_checkpoints: bool = True):
        self.cfg = cfg
        self.reuse_checkpoints = reuse_checkpoints
        self.out = Path(cfg.out_dir)
        self.train_scenes, self.val_scenes = make_dataset(cfg.dataset)
        self.dtype = cfg.train.dtype
        self.extractor = build_feature_extractor(self.dtype)
        self._F: FrozenSegmenter | None = None
        self._results: dict[tuple, TrainResult] = {}
        self._records: dict[tuple, RunRecord] = {}

    # -- segmenter
    def segmenter_key(self) -> str:
        c = self.cfg
        text = f"{c.dataset}|{c.seed}|{c.segmenter_epochs}|{c.segmenter_lr!r}|{c.train.precision}"
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def segmenter_path(self) -> Path:
        return self.out / f"segmenter-{self.segmenter_key()}.gosw"

    @property
    def F(self) -> FrozenSegmenter:
        if self._F is None:
            self._F = self._load_or_pretrain()
        return self._F

    def _load_or_pretrain(self) -> FrozenSegmenter:
        path = self.segmenter_path()
        m = self.cfg.dataset.m
        if path.exists():
            net = build_segmenter(m, np.random.default_rng(0), self.dtype)
            net.load_state_dict(checkpoint.load(path))
            F = FrozenSegmenter(net, m)
            images = np.stack([s.image for s in self.val_scenes]) if self.val_scenes else None
            if images is not None:
                labels = np.stack([s.labels for s in self.val_scenes])
                F.val_metrics = metrics(predict_labels(F, images), labels, m)
            log.info("loaded segmenter %s", path)
            return F
        F = pretrain_segmenter(self.train_scenes, self.val_scenes, m, epochs=self.cfg.segmenter_epochs,
                               seed=self.cfg.seed, lr=self.cfg.segmenter_lr, dtype=self.dtype)
        self.out.mkdir(parents=True, exist_ok=True)
        checkpoint.save(path, F.net.state_dict())
        log.info("segmenter val mIoU %.2f accuracy %.2f", F.val_metrics.miou, F.val_metrics.accuracy)
        return F

    def segmenter_info(self) -> dict:
        vm = self.F.val_metrics
        return {"digest": self.F.digest(), "val_miou": vm.miou if vm else None,
                "val_accuracy": vm.accuracy if vm else None}

    # -- runs
    def run_name(self, tc: TrainConfig) -> str:
        # the hash ties a checkpoint to its full training config and segmenter
        tag = hashlib.sha256(f"{self._key(tc)!r}|{self.segmenter_key()}".encode()).hexdigest()[:8]
        return f"{tc.scheme}_r{tc.r}_s{tc.seed}_{tag}"

    def _key(self, tc: TrainConfig) -> TrainConfig:
        # the fine-tuning budget only matters to schemes that fine-tune
        return tc if tc.spec.pretrain else replace(tc, finetune_epochs=0)

    def train_run(self, tc: TrainConfig) -> TrainResult:
        key = self._key(tc)
        if key in self._results:
            return self._results[key]
        stored = self._load_stored(tc)
        if stored is not None:
            self._results[key] = stored
            return stored
        if tc.spec.pretrain:
            base = self.train_run(pretrain_config(tc))
            result = pretrain_then_finetune(tc, self.train_scenes, self.val_scenes, self.F,
                                            self.extractor, pretrained=base)
        else:
            result = train(tc, self.train_scenes, self.val_scenes, self.F, self.extractor)
        self._results[key] = result
        self._save(tc, result)
        return result

    def checkpoint_path(self, tc: TrainConfig) -> Path:
        return self.out / "checkpoints" / f"{self.run_name(tc)}.gosw"

    def curves_path(self, tc: TrainConfig) -> Path:
        return self.out / "curves" / f"{self.run_name(tc)}.csv"

    def _load_stored(self, tc: TrainConfig) -> TrainResult | None:
        ck, cv = self.checkpoint_path(tc), self.curves_path(tc)
        if not (self.reuse_checkpoints and ck.exists() and cv.exists()):
            return None
        log.info("reusing %s", ck)
        return TrainResult(load_model(ck, tc), TrainingCurves.read_csv(cv))

    def _save(self, tc: TrainConfig, result: TrainResult) -> None:
        path, curves = self.checkpoint_path(tc), self.curves_path(tc)
        path.parent.mkdir(parents=True, exist_ok=True)
        curves.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(result.model.checkpoint_bytes())
        result.curves.write_csv(curves)

    def record(self, tc: TrainConfig) -> RunRecord:
        """Train (or reuse) one run and evaluate it; failures become a flagged record."""
        key = self._key(tc)
        if key in self._records:
            return self._records[key]
        path = self.checkpoint_path(tc)
        try:
            result = self.train_run(tc)
        except (DivergenceError, FloatingPointError) as exc:
            log.warning("%s diverged: %s", self.run_name(tc), exc)
            rec = _failed(tc, str(exc), diverged=True)
        except Exception as exc:  # recorded in the report; the experiment continues
            log.exception("%s failed", self.run_name(tc))
            rec = _failed(tc, f"{type(exc).__name__}: {exc}", diverged=False)
        else:
            ev = evaluate(result.model, self.F, self.val_scenes, self.extractor)
            rec = RunRecord(
                scheme=tc.scheme, r=tc.r, seed=tc.seed, K=tc.codebook_size,
                params_count=result.model.n_params(), payload_bytes=ev.payload_bytes,
                payload_fixed_bytes=ev.payload_fixed_bytes, miou=ev.miou, accuracy=ev.accuracy,
                mse=ev.mse, perceptual=ev.perceptual, checkpoint=path.relative_to(self.out).as_posix(),
                checkpoint_digest=result.model.digest(), jsd_perceptual_corr=_jsd_corr(result))
        self._records[key] = rec
        return rec

    def curves(self, tc: TrainConfig):
        return self._results[self._key(tc)].curves


def _failed(tc: TrainConfig, msg: str, diverged: bool) -> RunRecord:
    nan = float("nan")
    return RunRecord(tc.scheme, tc.r, tc.seed, tc.codebook_size, 0, nan, nan, nan, nan, nan, nan,
                     "", "", diverged=diverged, error=msg)


def _jsd_corr(result: TrainResult) -> float | None:
    rows = [r for r in result.curves.rows if r["jsd"] is not None and r["perceptual"] is not None]
    if len(rows) < 3:
        return None
    try:
        return curve_correlation([r["jsd"] for r in rows], [r["perceptual"] for r in rows])
    except ValueError:
        return None


def aggregate(scheme: str, r: int, runs: list[RunRecord]) -> ReportRow:
    ok = [x for x in runs if not x.error]
    n_div = sum(x.diverged for x in runs)
    errors = "; ".join(f"seed {x.seed}: {x.error}" for x in runs if x.error)
    K = runs[0].K
    if not ok:
        nan = float("nan")
        return ReportRow(scheme, r, K, 0, nan, nan, nan, nan, nan, nan, nan, codec.header_size(codec.HUFFMAN, K),
                         nan, nan, nan, 0, n_div, errors)

    def mean(name):
        return float(np.mean([getattr(x, name) for x in ok]))

    mious = np.array([x.miou for x in ok])
    payload = mean("payload_bytes")
    return ReportRow(
        scheme=scheme, r=r, K=K, params_count=ok[0].params_count, payload_bytes=payload,
        kib=payload / 1024.0, miou=float(mious.mean()), accuracy=mean("accuracy"), mse=mean("mse"),
        perceptual=mean("perceptual"), payload_fixed_bytes=mean("payload_fixed_bytes"),
        payload_header_bytes=codec.header_size(codec.HUFFMAN, K),
        miou_std=float(mious.std(ddof=1)) if len(ok) > 1 else 0.0,
        miou_min=float(mious.min()), miou_max=float(mious.max()),
        n_seeds=len(ok), n_diverged=n_div, errors=errors)


def _check_workspace(cfg: ExperimentConfig, ws: Workspace | None) -> Workspace:
    if ws is None:
        return Workspace(cfg)
    same = (ws.cfg.dataset == cfg.dataset and ws.cfg.seed == cfg.seed
            and ws.cfg.segmenter_epochs == cfg.segmenter_epochs and ws.cfg.segmenter_lr == cfg.segmenter_lr
            and ws.cfg.train.dtype == cfg.train.dtype)
    if not same:
        raise ValueError("workspace was built for a different dataset or segmenter")
    return ws


def _execute(cfg: ExperimentConfig, kind: str, ws: Workspace | None, write: bool) -> Report:
    ws = _check_workspace(cfg, ws)
    report = Report(kind=kind, config=dump_config(cfg))
    if cfg.schemes:
        report.segmenter = ws.segmenter_info()
    for scheme in cfg.schemes:
        for r in cfg.rs:
            runs = [ws.record(cfg.run_config(scheme, r, s))
                    for s in cfg.seeds]
            report.runs.extend(runs)
            report.rows.append(aggregate(scheme, r, runs))
            corr = [x.jsd_perceptual_corr for x in runs if x.jsd_perceptual_corr is not None]
            if corr:
                report.correlations[f"{scheme}_r{r}"] = float(np.mean(corr))
    if write:
        report.write(cfg.out_dir, cfg.metrics)
    return report


def run_experiment(cfg: ExperimentConfig, workspace: Workspace | None = None, write: bool = True) -> Report:
    """Train and evaluate every (scheme, r, seed) in ``cfg``; writes CSV and JSON reports."""
    return _execute(cfg, "report", workspace, write)


def sweep_r(cfg: ExperimentConfig, rs=SWEEP_RS, workspace: Workspace | None = None,
            write: bool = True) -> Report:
    rs = tuple(rs)
    for r in rs:
        if cfg.dataset.H % r or cfg.dataset.W % r:
            raise ValueError(f"dataset {cfg.dataset.H}x{cfg.dataset.W} not divisible by r={r}")
    return _execute(replace(cfg, rs=rs), "sweep", workspace, write)


def ablation_suite(cfg: ExperimentConfig, workspace: Workspace | None = None, write: bool = True) -> Report:
    return _execute(replace(cfg, schemes=ABLATION_SCHEMES), "ablation", workspace, write)


def load_model(path: str | Path, tc: TrainConfig) -> CodecModel:
    model = CodecModel.build(tc)
    model.load_state_dict(checkpoint.load(path))
    return model


def reevaluate(path: str | Path, tc: TrainConfig, ws: Workspace) -> Evaluation:
    """Independent evaluation pass from a checkpoint file."""
    return evaluate(load_model(path, tc), ws.F, ws.val_scenes, ws.extractor)
