"""Training harness for every preset.

cimt and unet-joint train in two stages. Stage A ("pretrain") fits the plain
UNet to full volumes with the segmentation loss; a frozen copy of it becomes
the `localizer.*` stomach localizer. Stage B ("main") trains the full model on
ground-truth stomach crops, with the backbone frozen for the first
`freeze_epochs` epochs and then updated at `lr * backbone_lr_multiplier`.
unet-s4c only runs the segmentation stage, on full volumes, and doubles as its
own localizer.

Data order and augmentation are keyed by (seed, stage, epoch, case index), so
a resumed run replays exactly the draws an uninterrupted run would make.
"""
import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from tqdm import tqdm

from evaluation.metrics import auc, select_youden_threshold
from models.maskformer import LossWeights
from models.params import ModelDims, ModelParams
from models.presets import ModelPreset, get_preset
from phantoms.dataset import Dataset
from phantoms.phantom import VolumeSample
from tensor import ops
from tensor.core import Tensor, backward, current_graph
from training.augment import augment
from training.cases import predict_case, prepare, prepare_roi
from training.radam import RAdam
from training.s4c import operating_score, s4c_select_threshold, tumor_volume
from utils.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from utils.config import RunConfig, config_hash
from utils.errors import CheckpointMismatch, CimtError, ConfigError, TrainingDiverged
from utils.rng import generator

logger = logging.getLogger(__name__)

PRETRAIN, MAIN = "pretrain", "main"
LOG_FILES = {PRETRAIN: "pretrain_log.jsonl", MAIN: "train_log.jsonl"}


@dataclass
class TrainResult:
    params: ModelParams
    log: List[Dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")
    threshold: float = 0.5
    checkpoint_dir: Optional[Path] = None
    skipped_steps: int = 0


class Trainer:
    def __init__(self, preset: str, cfg: RunConfig, dataset: Dataset, out_dir: Path, seed: int,
                 jobs: int = 1, progress: bool = False):
        self.model: ModelPreset = get_preset(preset, ModelDims.from_config(cfg.model))
        self.cfg = cfg
        self.tc = cfg.train
        self.seed = int(seed)
        self.out_dir = Path(out_dir)
        self.jobs = max(1, int(jobs))
        self.progress = progress
        self.config_hash = config_hash(cfg)
        self.margin = cfg.model.margin
        self.weights = LossWeights(
            seg=self.tc.seg_weight,
            cls=self.tc.cls_weight,
            deep_supervision=cfg.model.deep_supervision_weight,
            final=cfg.model.final_weight,
        )
        self.two_stage = self.model.name != "unet-s4c"

        train_samples = dataset.samples("train")
        val_samples = dataset.samples("val")
        if not train_samples:
            raise ConfigError("the train split is empty")
        if not val_samples:
            raise ConfigError("the val split is empty; training needs validation cases")
        if len({s.label for s in val_samples}) < 2:
            raise ConfigError("the val split holds a single class; AUC and threshold selection need both")

        self.full_train = [prepare(s) for s in train_samples]
        if self.two_stage:
            self.main_train = [prepare_roi(s, self.margin) for s in train_samples]
            self.val_cases = [prepare_roi(s, self.margin) for s in val_samples]
        else:
            self.main_train = self.full_train
            self.val_cases = [prepare(s) for s in val_samples]
        self.val_labels = np.array([s.label for s in val_samples])

        self.best_arrays: Optional[Dict[str, np.ndarray]] = None
        self.best_epoch = -1
        self.best_val_auc = float("-inf")
        self.logs: Dict[str, List[Dict]] = {PRETRAIN: [], MAIN: []}

    # -- checkpoints -------------------------------------------------------

    def _checkpoint(self, tensors: Dict[str, np.ndarray], extra: Dict) -> Checkpoint:
        return Checkpoint(preset=self.model.name, config_hash=self.config_hash, tensors=tensors,
                          config=self.cfg.to_dict(), extra=extra)

    def _save_last(self, params: ModelParams, optimizer: RAdam, stage: str, epoch: int):
        tensors = params.to_arrays()
        tensors.update(optimizer.state_arrays())
        extra = {
            "stage": stage,
            "epoch": epoch,
            "optimizer": optimizer.state_meta(),
            "best_epoch": self.best_epoch,
            "best_val_auc": None if self.best_epoch < 0 else self.best_val_auc,
            "seed": self.seed,
        }
        save_checkpoint(self._checkpoint(tensors, extra), self.out_dir / "last")

    def _save_best(self, params: ModelParams, epoch: int, val_auc: float):
        self.best_arrays = {n: a.copy() for n, a in params.to_arrays().items()}
        self.best_epoch, self.best_val_auc = epoch, val_auc
        extra = {"best_epoch": epoch, "val_auc": val_auc, "seed": self.seed, "final": False}
        save_checkpoint(self._checkpoint(self.best_arrays, extra), self.out_dir / "checkpoint")

    def _load_resume(self):
        last = self.out_dir / "last"
        if not (last / "manifest.json").exists():
            logger.warning("nothing to resume in %s; starting fresh", last)
            return None
        ckpt = load_checkpoint(last)
        if ckpt.preset != self.model.name or ckpt.config_hash != self.config_hash:
            raise CheckpointMismatch(
                f"resume state in {last} was written by preset {ckpt.preset!r} with config {ckpt.config_hash}, "
                f"not {self.model.name!r} with config {self.config_hash}"
            )
        if ckpt.extra.get("seed") != self.seed:
            raise CheckpointMismatch(f"resume state used seed {ckpt.extra.get('seed')}, this run uses {self.seed}")
        if ckpt.extra.get("best_epoch", -1) >= 0:
            best = load_checkpoint(self.out_dir / "checkpoint")
            self.best_arrays = best.tensors
            self.best_epoch = int(ckpt.extra["best_epoch"])
            self.best_val_auc = float(ckpt.extra["best_val_auc"])
        for stage in (PRETRAIN, MAIN):
            path = self.out_dir / LOG_FILES[stage]
            if path.exists():
                self.logs[stage] = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
        done = ckpt.extra["epoch"]
        self.logs[ckpt.extra["stage"]] = [r for r in self.logs[ckpt.extra["stage"]] if r["epoch"] <= done]
        if ckpt.extra["stage"] == PRETRAIN:
            self.logs[MAIN] = []
        return ckpt

    def _write_logs(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for stage, records in self.logs.items():
            if stage == PRETRAIN and not self.two_stage:
                continue
            lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
            (self.out_dir / LOG_FILES[stage]).write_text(lines, encoding="utf-8")

    # -- loops ---------------------------------------------------------------

    def _loss_fn(self, stage: str) -> Callable:
        if stage == PRETRAIN or not self.two_stage:
            return lambda x, case, params: self.model.pretrain_loss(x, case.labels, params)
        return lambda x, case, params: self.model.loss(x, case.labels, case.label, params, self.weights)

    def _run_epoch(self, stage: str, epoch: int, cases: List[VolumeSample], params: ModelParams,
                   optimizer: RAdam) -> Dict[str, float]:
        loss_fn = self._loss_fn(stage)
        order = generator(self.seed, "order", stage, epoch).permutation(len(cases))
        sums: Dict[str, float] = defaultdict(float)
        counted = 0
        for start in range(0, len(order), self.tc.batch_size):
            batch = order[start:start + self.tc.batch_size]
            optimizer.zero_grad()
            components = []
            for i in batch:
                rng = generator(self.seed, "augment", stage, epoch, int(i))
                case = augment(cases[i], rng, self.tc.augment_flips, self.tc.augment_intensity)
                total, parts = loss_fn(Tensor(case.image), case, params)
                if not np.isfinite(parts["total"]):
                    current_graph().clear()
                    components = None
                    break
                backward(ops.scale(total, 1.0 / len(batch)))
                components.append(parts)
            if components is None:
                optimizer.state.skipped += 1
                logger.warning("non-finite loss at %s epoch %d; skipping step", stage, epoch)
            elif optimizer.step():
                for parts in components:
                    for key, value in parts.items():
                        sums[key] += value
                counted += len(components)
            if optimizer.state.skipped > self.tc.max_skipped_steps:
                raise TrainingDiverged(
                    f"{optimizer.state.skipped} optimizer steps skipped for non-finite values "
                    f"(cap {self.tc.max_skipped_steps}); training diverged"
                )
        return {k: v / max(counted, 1) for k, v in sorted(sums.items())}

    def val_scores(self, params: ModelParams) -> np.ndarray:
        """GC probability (or predicted tumor volume for unet-s4c) of every val case."""
        def score(case):
            labels, prob = predict_case(self.model, params, case)
            return float(prob) if prob is not None else float(tumor_volume(labels))

        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            return np.array(list(pool.map(score, self.val_cases)))

    def _stage(self, stage: str, params: ModelParams, epochs: int, lr: float, multipliers, start_epoch: int,
               optim_state=None) -> int:
        optimizer = RAdam(params, lr=lr, betas=tuple(self.tc.betas), eps=self.tc.eps, multipliers=multipliers)
        if optim_state is not None:
            optimizer.load_state(*optim_state)
        cases = self.full_train if stage == PRETRAIN else self.main_train
        freezing = stage == MAIN and self.two_stage
        frozen_snapshot = params.to_arrays("backbone.") if freezing and start_epoch < self.tc.freeze_epochs else None

        for epoch in tqdm(range(start_epoch, epochs), desc=f"{self.model.name} {stage}", disable=not self.progress,
                          initial=start_epoch, total=epochs, leave=False):
            frozen = freezing and epoch < self.tc.freeze_epochs
            if frozen:
                params.freeze("backbone.")
            elif freezing:
                params.unfreeze("backbone.")
            losses = self._run_epoch(stage, epoch, cases, params, optimizer)
            record = {"epoch": epoch, "stage": stage, "loss": losses, "skipped_steps": optimizer.state.skipped}
            if stage == MAIN:
                backbone_lr = 0.0 if frozen else optimizer.lr_for("backbone.")
                record["lr"] = {"backbone": backbone_lr, "head": optimizer.lr_for("decoder.")}
                record["frozen"] = frozen
                val_auc = auc(self.val_scores(params), self.val_labels)
                record["val_auc"] = val_auc
                if np.isfinite(val_auc) and val_auc > self.best_val_auc:
                    self._save_best(params, epoch, val_auc)
            else:
                record["lr"] = {"backbone": optimizer.lr_for("backbone.")}
            self.logs[stage].append(record)
            logger.info("%s epoch %d: %s", stage, epoch, json.dumps(record, sort_keys=True))

            if frozen_snapshot is not None and epoch == self.tc.freeze_epochs - 1:
                current = params.to_arrays("backbone.")
                if any(not np.array_equal(current[n], frozen_snapshot[n]) for n in frozen_snapshot):
                    raise CimtError("backbone changed while frozen")
            self._save_last(params, optimizer, stage, epoch)
            self._write_logs()
        return optimizer.state.skipped

    def run(self, resume: bool = False) -> TrainResult:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = self._load_resume() if resume else None
        if ckpt is None:
            params = self.model.init_params(generator(self.seed, "init"))
            stage, next_epoch, optim_state = (PRETRAIN if self.two_stage else MAIN), 0, None
        else:
            arrays = {n: a for n, a in ckpt.tensors.items() if not n.startswith("optim.")}
            params = ModelParams.from_arrays(arrays)
            stage, next_epoch = ckpt.extra["stage"], int(ckpt.extra["epoch"]) + 1
            optim_state = ({n: a for n, a in ckpt.tensors.items() if n.startswith("optim.")}, ckpt.extra["optimizer"])
            params.freeze("localizer.")
            logger.info("resuming %s at %s epoch %d", self.model.name, stage, next_epoch)

        skipped = 0
        if stage == PRETRAIN:
            skipped += self._stage(PRETRAIN, params, self.tc.pretrain_epochs, self.tc.pretrain_lr, None,
                                   next_epoch, optim_state)
            params.update(params.rename_prefix("backbone.", "localizer."))
            stage, next_epoch, optim_state = MAIN, 0, None
            self._write_logs()

        if self.two_stage:
            multipliers = {"backbone.": self.tc.backbone_lr_multiplier}
            skipped += self._stage(MAIN, params, self.tc.epochs, self.tc.lr, multipliers, next_epoch, optim_state)
        else:
            skipped += self._stage(MAIN, params, self.tc.epochs, self.tc.pretrain_lr, None, next_epoch, optim_state)

        return self._finish(skipped)

    def _finish(self, skipped: int) -> TrainResult:
        if self.best_arrays is None:
            raise TrainingDiverged(
                f"no {self.model.name} epoch produced a finite validation AUC; nothing to checkpoint"
            )
        best = ModelParams.from_arrays(self.best_arrays)
        scores = self.val_scores(best)
        extra = {"best_epoch": self.best_epoch, "val_auc": self.best_val_auc, "seed": self.seed,
                 "skipped_steps": skipped, "final": True, "margin": list(self.margin)}
        if self.model.name == "unet-s4c":
            volume_threshold = s4c_select_threshold(scores, self.val_labels)
            extra["volume_threshold"] = volume_threshold
            threshold = operating_score(volume_threshold)
        else:
            threshold = select_youden_threshold(scores, self.val_labels)
        extra["operating_threshold"] = threshold
        directory = save_checkpoint(self._checkpoint(self.best_arrays, extra), self.out_dir / "checkpoint")
        logger.info("best val AUC %.4f at epoch %d; operating threshold %.4f",
                    self.best_val_auc, self.best_epoch, threshold)
        return TrainResult(params=best, log=list(self.logs[MAIN]), best_epoch=self.best_epoch,
                           best_val_auc=self.best_val_auc, threshold=threshold, checkpoint_dir=directory,
                           skipped_steps=skipped)


def train(preset: str, dataset: Dataset, cfg: RunConfig, out_dir: Path, seed: int, resume: bool = False,
          jobs: int = 1, progress: bool = False) -> TrainResult:
    return Trainer(preset, cfg, dataset, out_dir, seed, jobs=jobs, progress=progress).run(resume=resume)
