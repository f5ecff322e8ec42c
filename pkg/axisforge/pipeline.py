"""
Batch commands: train a denoiser on a rendered dataset, run guided inference
followed by extraction and the corner solver, and score the predictions.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .camera import Pose
from .config import RunConfig
from .dataset import Dataset, DatasetRecord, load_dataset
from .diffusion import (
    GaussianScoreField, GuidanceConfig, SamplingLog, TrainingExample,
    gaussian_denoiser, load_checkpoint, sample, save_checkpoint, train_denoiser,
)
from .diffusion.schedule import DiffusionSchedule
from .exceptions import (
    ConfigError, CheckpointError, ExtractionError,
    GeometryError, IoError, MissingPrediction, SolverError,
)
from .extraction import extract_axes_hard
from .metrics import MetricsReport, ModelPoints, evaluate_suite, paired_delta
from .tbm import recover_pose
from .utils import (
    derive_seed, dump_json, export_ppm, load_json, make_rng, read_jsonl,
    worker_count, write_jsonl, write_raw_image,
)

logger = logging.getLogger("axisforge.pipeline")

PREDICTIONS_NAME = "predictions.json"
PREDICTIONS_SCHEMA = 1
CHECKPOINT_NAME = "checkpoint.bin"
TRAIN_LOG_NAME = "train_log.jsonl"

# variance of the analytic score field centred on the ground-truth render
ANALYTIC_VARIANCE = 1e-4
# guided Reproj success must beat unguided by this many percentage points
MIN_GUIDANCE_GAIN_PP = 10.0
ABLATION_NAME = "ablation.json"


def training_examples(dataset: Dataset, config: RunConfig) -> List[TrainingExample]:
    with_targets = config.opt.geo_weight > 0
    examples = []
    for rec in dataset.split("train"):
        examples.append(TrainingExample(
            dataset.triaxis(rec).data,
            dataset.query(rec, degraded=True).data,
            rec.target if with_targets else None,
        ))
    return examples


def cmd_train(config: RunConfig, dataset_dir, out_dir, resume: str = None,
              progress: bool = False, limit: int = None) -> Dict:
    """
    Train the MLP denoiser on the train split; writes `checkpoint.bin` and
    the loss curve as `train_log.jsonl` under out_dir. `limit` keeps only
    the first records of the split (overfit runs).
    """
    dataset = load_dataset(dataset_dir)
    if dataset.config.render.size != config.arch.size:
        raise ConfigError(
            f"dataset images are {dataset.config.render.size} px, "
            f"arch.size is {config.arch.size}")

    examples = training_examples(dataset, config)
    if limit is not None:
        examples = examples[:limit]
    sched = config.schedule.build()

    checkpoint = None
    if resume is not None:
        checkpoint = load_checkpoint(resume, config.opt)
        if checkpoint.denoiser.arch != config.arch:
            raise CheckpointError(
                f"checkpoint architecture {checkpoint.denoiser.arch} does not match {config.arch}")
        logger.info("resuming from %s at step %d", resume,
                    checkpoint.optimizer.step if checkpoint.optimizer else 0)

    log = []
    rng = make_rng(config.seeds.seed, "train",
                   0 if checkpoint is None or checkpoint.optimizer is None
                   else checkpoint.optimizer.step)
    opt = config.opt
    if config.seeds.deterministic and opt.workers != 1:
        opt = replace(opt, workers=1)

    logger.info("training on %d examples for %d steps", len(examples), opt.steps)
    result = train_denoiser(examples, config.arch, opt, sched, rng,
                            resume=checkpoint, log_fn=log.append, progress=progress)

    out = Path(out_dir)
    save_checkpoint(out / CHECKPOINT_NAME, result.denoiser, sched, result.optimizer)
    write_jsonl(out / TRAIN_LOG_NAME, log)

    summary = {
        "steps": result.optimizer.step,
        "initial_loss": result.losses[0],
        "final_loss": result.losses[-1],
        "checkpoint": str(out / CHECKPOINT_NAME),
    }
    logger.info("training done: loss %.4g -> %.4g", summary["initial_loss"], summary["final_loss"])
    return summary


@dataclass(frozen=True)
class Prediction:
    id: str
    pose: Optional[Pose] = None
    error: Optional[str] = None
    message: Optional[str] = None
    skipped_steps: int = 0

    def to_record(self) -> Dict:
        return {
            "id": self.id,
            "pose": None if self.pose is None else self.pose.to_record(),
            "error": self.error,
            "message": self.message,
            "skipped_steps": self.skipped_steps,
        }

    @classmethod
    def from_record(cls, rec: Dict) -> "Prediction":
        pose = rec.get("pose")
        return cls(rec["id"], None if pose is None else Pose.from_record(pose),
                   rec.get("error"), rec.get("message"), int(rec.get("skipped_steps", 0)))


class _Inference:

    def __init__(self, config: RunConfig, dataset: Dataset, sched: DiffusionSchedule,
                 denoiser, guidance_on: bool, clean_query: bool, out: Path):
        self.config = config
        self.dataset = dataset
        self.sched = sched
        self.denoiser = denoiser
        self.guidance_on = guidance_on
        self.clean_query = clean_query
        self.out = out

    def guidance(self, rec: DatasetRecord) -> GuidanceConfig:
        params = self.config.guidance
        return GuidanceConfig(
            target=rec.target,
            rho=params.rho_base,
            sharpness=params.sharpness,
            enabled=self.guidance_on and params.enabled,
            normalize=params.normalize,
        )

    def denoiser_for(self, rec: DatasetRecord):
        if self.denoiser is not None:
            return self.denoiser
        field = GaussianScoreField(self.dataset.triaxis(rec).data, ANALYTIC_VARIANCE)
        return gaussian_denoiser(field, self.sched)

    def run(self, rec: DatasetRecord):
        schedule = self.config.schedule
        rng = np.random.default_rng(derive_seed(self.config.seeds.seed, "infer", rec.id))
        cond = self.dataset.query(rec, degraded=not self.clean_query).data
        log = SamplingLog()

        image = sample(self.denoiser_for(rec), cond, self.guidance(rec), self.sched,
                       schedule.sigma, schedule.steps, rng, rec.intrinsics.width,
                       spacing=schedule.spacing, log=log)
        write_raw_image(self.out / "images" / f"{rec.id}_generated.f32", image.data)
        if self.config.render.export_ppm:
            export_ppm(self.out / "ppm" / f"{rec.id}_generated.ppm", image.data)

        sampling = {"id": rec.id, "steps": log.to_records()}
        try:
            obs = extract_axes_hard(image)
            pose = recover_pose(obs, rec.intrinsics, scale_lambda_O=float(rec.pose.T[2]))
        except (ExtractionError, SolverError, GeometryError) as exc:
            logger.error(f"caught an error in record '{rec.id}': {exc}", exc_info=exc)
            return Prediction(rec.id, error=type(exc).__name__, message=str(exc),
                              skipped_steps=len(log.skipped)), sampling

        return Prediction(rec.id, pose, skipped_steps=len(log.skipped)), sampling


def cmd_infer(config: RunConfig, dataset_dir, out_dir, checkpoint: str = None,
              split: str = "test", guidance_on: bool = True, analytic: bool = False,
              clean_query: bool = False, limit: int = None) -> Dict:
    """
    Sample a tri-axis image for every record of `split`, extract its axes and
    solve the pose. Per-record failures are recorded with the error class
    and the run continues.
    """
    dataset = load_dataset(dataset_dir)
    records = dataset.split(split)
    if limit is not None:
        records = records[:limit]
    if not records:
        raise IoError(f"no '{split}' records in dataset '{dataset_dir}'")

    if analytic:
        denoiser, sched = None, config.schedule.build()
    else:
        if checkpoint is None:
            raise ConfigError("infer needs a checkpoint unless running analytic")
        ckpt = load_checkpoint(checkpoint)
        denoiser, sched = ckpt.denoiser, ckpt.sched
        if denoiser.arch.size != dataset.config.render.size:
            raise CheckpointError(
                f"checkpoint expects {denoiser.arch.size} px images, "
                f"dataset has {dataset.config.render.size} px")
        if sched.T < config.schedule.steps:
            raise ConfigError(f"schedule.steps={config.schedule.steps} exceeds checkpoint T={sched.T}")

    out = Path(out_dir)
    job = _Inference(config, dataset, sched, denoiser, guidance_on, clean_query, out)
    workers = worker_count(config.seeds.deterministic)
    mode = "guided" if guidance_on and config.guidance.enabled else "unguided"
    logger.info("%s inference on %d '%s' records (%d workers)", mode, len(records), split, workers)

    if workers == 1:
        results = [job.run(rec) for rec in records]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(job.run, records))

    predictions = [p for p, _ in results]
    failed = sum(1 for p in predictions if p.error is not None)
    if failed:
        logger.warning("%d of %d records failed", failed, len(predictions))

    doc = {
        "schema": PREDICTIONS_SCHEMA,
        "split": split,
        "mode": "analytic" if analytic else mode,
        "records": [p.to_record() for p in predictions],
    }
    dump_json(out / PREDICTIONS_NAME, doc)
    write_jsonl(out / "sampling.jsonl", [s for _, s in results])
    return doc


def load_predictions(path) -> List[Prediction]:
    path = Path(path)
    if path.is_dir():
        path = path / PREDICTIONS_NAME
    doc = load_json(path)
    if doc.get("schema") != PREDICTIONS_SCHEMA:
        raise IoError(f"unsupported predictions schema {doc.get('schema')} in '{path}'")
    return [Prediction.from_record(r) for r in doc["records"]]


def score_predictions(config: RunConfig, dataset: Dataset, predictions: List[Prediction],
                      split: str = "test") -> MetricsReport:
    records = dataset.split(split)
    known = {r.id for r in records}
    unknown = [p.id for p in predictions if p.id not in known]
    if unknown:
        raise IoError(f"predictions for records not in the '{split}' split: {', '.join(unknown[:5])}")

    by_id = {p.id: p for p in predictions}
    missing = []
    pairs = []
    for rec in records:
        pred = by_id.get(rec.id)
        if pred is None:
            missing.append(rec.id)
            pairs.append((rec.id, rec.pose, MissingPrediction.__name__))
        elif pred.pose is None:
            pairs.append((rec.id, rec.pose, pred.error or "failed"))
        else:
            pairs.append((rec.id, rec.pose, pred.pose))

    for record_id in missing:
        logger.warning("%s: no prediction for record '%s'", MissingPrediction.__name__, record_id)

    render = dataset.config.render
    thresholds = config.eval.thresholds(render.size)
    report = evaluate_suite(pairs, ModelPoints.cuboid(), render.intrinsics(), thresholds)
    report.n_missing = len(missing)
    report.aggregates = report.recompute()
    return report


def cmd_eval(config: RunConfig, predictions_dir, dataset_dir, out_dir=None,
             baseline_dir=None, split: str = "test") -> Dict:
    """
    Score predictions against the manifest poses; missing predictions are
    listed and count as failures. With `baseline_dir`, a paired delta of the
    two runs is added to the report.
    """
    dataset = load_dataset(dataset_dir)
    report = score_predictions(config, dataset, load_predictions(predictions_dir), split)
    result = {"summary": report.aggregates, "missing": [
        r.id for r in report.records if r.error == MissingPrediction.__name__]}

    if baseline_dir is not None:
        baseline = score_predictions(config, dataset, load_predictions(baseline_dir), split)
        result["baseline"] = baseline.aggregates
        result["delta"] = paired_delta(report, baseline)

    if out_dir is not None:
        out = Path(out_dir)
        write_jsonl(out / "report.jsonl", report.to_records())
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "summary.csv").write_text(report.summary_csv(), encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write '{out / 'summary.csv'}': {exc}") from exc
        dump_json(out / "summary.json", result)

    agg = report.aggregates
    logger.info("eval: n=%d failed=%d missing=%d reproj_rate=%.3f add_rate=%.3f",
                agg["n"], agg["n_failed"], agg["n_missing"], agg["reproj_rate"], agg["add_rate"])
    return result


def cmd_ablation(config: RunConfig, dataset_dir, out_dir, checkpoint: str = None,
                 analytic: bool = False, split: str = "test", limit: int = None,
                 min_gain_pp: float = MIN_GUIDANCE_GAIN_PP) -> Dict:
    """
    Guided against unguided inference with the same denoiser and seeds on the
    degraded queries of `split`. Writes `guided/`, `unguided/`, `report/` and
    `ablation.json` under out_dir.
    """
    out = Path(out_dir)
    for name, guidance_on in (("guided", True), ("unguided", False)):
        cmd_infer(config, dataset_dir, out / name, checkpoint=checkpoint, split=split,
                  guidance_on=guidance_on, analytic=analytic, limit=limit)
    result = cmd_eval(config, out / "guided", dataset_dir, out / "report",
                      baseline_dir=out / "unguided", split=split)

    guided = result["summary"]["reproj_rate"]
    unguided = result["baseline"]["reproj_rate"]
    gain = 100.0 * (guided - unguided)
    ablation = {
        "guided_reproj_rate": guided,
        "unguided_reproj_rate": unguided,
        "gain_pp": gain,
        "min_gain_pp": min_gain_pp,
        "passed": bool(gain >= min_gain_pp),
        "delta": result["delta"],
    }
    dump_json(out / ABLATION_NAME, ablation)
    logger.info("ablation: reproj rate guided %.3f, unguided %.3f, gain %.1f pp (need %.1f)",
                guided, unguided, gain, min_gain_pp)
    return ablation


def read_train_log(out_dir) -> List[Dict]:
    return read_jsonl(Path(out_dir) / TRAIN_LOG_NAME)
