"""
Training loop: seeded micro-batches, cosine learning rate, optional visual pretraining,
NaN guard, per-step loss log, per-epoch routing summary and checkpoints.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from modules import autodiff as ad
from modules.app_logger import setup_training_logger
from modules.checkpoint import save_model
from modules.config import RunConfig
from modules.losses import NonFiniteLossError
from modules.model import PreparedScene, RoutedFusionDetector, aux_objective, batch_objective
from modules.optim import AdamW, cosine_lr
from modules.router import routing_entropy
from modules.run_logger import RunLogger, StepTimer

logger = setup_training_logger()

PRETRAIN_PREFIXES = ("encoder.visual", "aux_head")


def order_rng(seed: int) -> np.random.Generator:
    """Batch-order generator; a child of the run seed distinct from initialisation"""
    return np.random.default_rng(np.random.SeedSequence([seed, 2]))


@dataclass
class TrainResult:
    steps: int
    epoch_losses: List[float] = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = float("inf")
    files: Dict[str, Path] = field(default_factory=dict)


class Trainer:
    """Runs the full training protocol of one config over a list of scenes"""

    def __init__(self, config: RunConfig, vocab_matrix: ad.Tensor, out_dir: Union[str, Path],
                 model: Optional[RoutedFusionDetector] = None):
        self.config = config
        self.vocab_matrix = vocab_matrix
        self.out_dir = Path(out_dir)
        self.model = model or RoutedFusionDetector(config)
        oc = config.optim
        self.optimizer = AdamW(self.model.named_parameters(), lr=oc.lr, betas=(oc.beta1, oc.beta2),
                               eps=oc.adam_eps, weight_decay=oc.weight_decay)
        self.run_logger = RunLogger(self.out_dir)

    def batches(self, rng: np.random.Generator, count: int) -> List[np.ndarray]:
        perm = rng.permutation(count)
        size = self.config.optim.batch_size
        return [perm[i:i + size] for i in range(0, count, size)]

    def train(self, scenes: Sequence, prepared: Optional[List[PreparedScene]] = None) -> TrainResult:
        """
        Train on ``scenes`` for the configured number of epochs

        Args:
            scenes: SceneSamples (ignored when ``prepared`` is given)
            prepared: Already voxelised scenes with targets

        Returns:
            TrainResult with per-epoch mean total loss, best epoch and written files
        """
        oc = self.config.optim
        data = prepared if prepared is not None else [self.model.prepare(s, scene_id=i) for i, s in enumerate(scenes)]
        if not data:
            raise ValueError("Trainer.train: no training scenes")

        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config.write(self.out_dir / "resolved_config.ini")
        logger.info(f"Training {self.model.num_parameters()} parameters on {len(data)} scenes for "
                    f"{oc.epochs} epochs (seed {self.config.seed}, batch {oc.batch_size})")

        rng = order_rng(self.config.seed)
        result = TrainResult(steps=0)
        for epoch in range(oc.epochs):
            lr = cosine_lr(epoch, oc.epochs, oc.lr, oc.lr_min)
            pretraining = epoch < oc.visual_pretrain_epochs
            totals = []
            for index in self.batches(rng, len(data)):
                batch = [data[i] for i in index]
                with StepTimer() as timer:
                    if pretraining:
                        value = self._pretrain_step(batch, lr)
                    else:
                        value = self._step(batch, lr, epoch, result.steps)
                totals.append(value)
                if result.steps % self.config.run.log_every == 0:
                    logger.info(f"epoch {epoch} step {result.steps} lr {lr:.2e} loss {value:.5f} "
                                f"({timer.latency_ms} ms)")
                result.steps += 1

            mean_loss = float(np.mean(totals))
            result.epoch_losses.append(mean_loss)
            phase = "pretrain" if pretraining else "train"
            logger.info(f"epoch {epoch} ({phase}) mean loss {mean_loss:.5f}")
            if not pretraining and mean_loss < result.best_loss:
                result.best_loss, result.best_epoch = mean_loss, epoch
                result.files["best"] = save_model(self.model, self.out_dir / "best.ckpt")

        result.files["final"] = save_model(self.model, self.out_dir / "final.ckpt")
        if "best" not in result.files:
            result.files["best"] = save_model(self.model, self.out_dir / "best.ckpt")
        result.files.update(self.run_logger.flush())
        (self.out_dir / "seed.txt").write_text(f"{self.config.seed}\n", encoding="utf-8")
        logger.info(f"Training finished: best epoch {result.best_epoch} loss {result.best_loss:.5f}")
        return result

    def _pretrain_step(self, batch: List[PreparedScene], lr: float) -> float:
        self.optimizer.zero_grad()
        loss = aux_objective(self.model, batch, self.vocab_matrix)
        if not np.isfinite(loss.item()):
            raise NonFiniteLossError("L_aux", loss.item())
        ad.backward(loss)
        self.optimizer.step(lr=lr, prefixes=PRETRAIN_PREFIXES)
        return loss.item()

    def _step(self, batch: List[PreparedScene], lr: float, epoch: int, step: int) -> float:
        self.optimizer.zero_grad()
        total, breakdown, weights = batch_objective(self.model, batch, self.vocab_matrix, self.config)
        try:
            breakdown.check_finite(step)
        except NonFiniteLossError as e:
            logger.error(f"Aborting: {e}; last finite rows are in {self.out_dir / RunLogger.LOSS_LOG}")
            self.run_logger.flush()
            raise
        ad.backward(total)
        self.optimizer.step(lr=lr)

        self.run_logger.log_step(step, breakdown.as_row())
        for scene, w in zip(batch, weights):
            vector = w.as_array()
            self.run_logger.log_routing(epoch, scene.weather, vector, float(routing_entropy(vector)))
        return float(breakdown.as_row()["total"])
