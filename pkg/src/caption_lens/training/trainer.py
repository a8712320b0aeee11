"""Cross-entropy pre-training and self-critical fine-tuning of the captioner."""

import logging
import math
import time
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike

from caption_lens.analysis.cider import NGramStats, build_idf, cider_d
from caption_lens.core.exceptions import ConfigurationError, ContractError, DecodeError
from caption_lens.core.progress_tracker import ProgressTracker
from caption_lens.core.tensor import Tape, Tensor, add, no_tape
from caption_lens.data.dataset import CaptionDataset
from caption_lens.data.vocab import EOS_ID, PAD_ID
from caption_lens.inference.beam_search import BeamHypothesis, beam_search
from caption_lens.model.captioner import GlobalEnhancedTransformer
from caption_lens.model.checkpoint import save_checkpoint
from caption_lens.reports.run_report import MetricLogWriter
from caption_lens.training.losses import xe_loss
from caption_lens.training.optim import (
    OptimizerState,
    adam_step,
    clip_grad_norm,
    global_norm,
    warmup_lr,
)
from caption_lens.utils.config import TrainConfig

logger = logging.getLogger(__name__)


def teacher_forcing_pair(ids: Sequence[int]) -> tuple[list[int], list[int]]:
    """
    Split ``[BOS, w.., EOS, PAD..]`` into decoder inputs and targets.

    Returns:
        (``[BOS, w..]``, ``[w.., EOS]``), padding dropped
    """
    tokens = [int(t) for t in ids]
    if EOS_ID not in tokens:
        raise ContractError("Encoded caption has no EOS")
    end = tokens.index(EOS_ID) + 1
    return tokens[: end - 1], tokens[1:end]


def reward_baseline(rewards: Sequence[float]) -> float:
    """
    Mean reward of the sampled sequences.

    Equal rewards return the shared value itself so every advantage is
    exactly zero; their float mean can differ from it in the last bit.
    """
    if max(rewards) == min(rewards):
        return float(rewards[0])
    return float(np.mean(rewards))


def scst_loss(sequence_log_probs: Sequence[Tensor], rewards: Sequence[float]) -> Tensor:
    """``-(1/k) sum_i (r_i - b) log p(Y^i)`` with ``b`` the mean reward."""
    if len(sequence_log_probs) != len(rewards) or not rewards:
        raise ContractError("Need one reward per sampled sequence")
    k = len(rewards)
    baseline = reward_baseline(rewards)
    terms = [lp * (-(r - baseline) / k) for lp, r in zip(sequence_log_probs, rewards, strict=True)]
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return total


@dataclass
class ScstSample:
    loss: Tensor
    rewards: list[float]
    baseline: float
    hypotheses: list[BeamHypothesis]


def scst_step(
    model: GlobalEnhancedTransformer,
    features: ArrayLike,
    references: Sequence[Sequence[int]],
    stats: NGramStats,
    k: int,
    max_len: int,
) -> ScstSample:
    """
    Self-critical loss of one image; call inside an active tape.

    Beam search runs without recording, in evaluation mode. The finished
    hypotheses are then re-scored on the tape in the model's current mode.

    Raises:
        ContractError: If ``k < 2``
        DecodeError: If every hypothesis is empty
    """
    if k < 2:
        raise ContractError(f"Self-critical training needs k >= 2, got {k}")

    with no_tape(), model.evaluating():
        hypotheses = beam_search(model.encode(features), model, k, max_len)
    if all(not hyp.words for hyp in hypotheses):
        raise DecodeError(
            "Every beam hypothesis is empty", details={"hypotheses": len(hypotheses)}
        )

    rewards = [cider_d(hyp.words, references, stats) for hyp in hypotheses]
    encoded = model.encode(features)
    log_probs = [model.sequence_log_prob(encoded, hyp.tokens) for hyp in hypotheses]
    return ScstSample(
        loss=scst_loss(log_probs, rewards),
        rewards=rewards,
        baseline=reward_baseline(rewards),
        hypotheses=hypotheses,
    )


@dataclass
class TrainingResult:
    stage: str
    steps: int = 0
    curve: list[float] = field(default_factory=list)
    checkpoint: Path | None = None
    skipped_steps: int = 0
    seconds: float = 0.0

    @property
    def final(self) -> float:
        return self.curve[-1] if self.curve else math.nan


class CaptionTrainer:
    """Drives optimisation of a captioner and writes its run artefacts.

    With ``run_dir`` set, metric logs go to ``run_dir/logs`` and checkpoints to
    ``run_dir/checkpoints``; without it nothing touches disk.
    """

    def __init__(
        self,
        model: GlobalEnhancedTransformer,
        config: TrainConfig,
        seed: int = 0,
        run_dir: Path | None = None,
        tracker: ProgressTracker | None = None,
        max_caption_len: int | None = None,
    ):
        self.model = model
        self.config = config
        self.seed = seed
        self.run_dir = run_dir
        self.tracker = tracker
        self.max_caption_len = max_caption_len or model.max_len

    def _optimizer(self) -> OptimizerState:
        return OptimizerState(
            beta1=self.config.adam_beta1,
            beta2=self.config.adam_beta2,
            eps=self.config.adam_eps,
        )

    def _apply(self, state: OptimizerState, lr: float) -> float:
        grads, norm = clip_grad_norm(self.model.params.grads(), self.config.clip_norm)
        adam_step(dict(self.model.params.named()), grads, state, lr)
        return norm

    def _log(self, name: str) -> MetricLogWriter | None:
        if self.run_dir is None:
            return None
        return MetricLogWriter(self.run_dir / "logs" / name)

    def save(self, name: str, stage: str, step: int, dataset: CaptionDataset) -> Path | None:
        if self.run_dir is None:
            return None
        return save_checkpoint(
            self.run_dir / "checkpoints" / name,
            self.model.params.state_dict(),
            {
                "model": self.model.model_metadata(),
                "stage": stage,
                "step": step,
                "seed": self.seed,
                "vocab": list(dataset.vocab.tokens),
            },
        )

    def _batches(self, items: list, rng: np.random.Generator) -> Iterator[list]:
        size = self.config.batch_size
        while True:
            order = rng.permutation(len(items))
            for start in range(0, len(items), size):
                yield [items[i] for i in order[start : start + size]]

    def train_xe(self, dataset: CaptionDataset) -> TrainingResult:
        """
        Teacher-forced cross-entropy training with the warmup schedule.

        Batch losses are summed over tokens and averaged over captions; the
        logged curve is the mean loss per target token.

        Raises:
            ConfigurationError: If the dataset is empty
        """
        pairs = list(dataset.pairs())
        if not pairs:
            raise ConfigurationError("Cannot train on an empty dataset", "data")

        per_epoch = math.ceil(len(pairs) / self.config.batch_size)
        total_steps = per_epoch * self.config.xe_epochs
        if self.config.xe_max_steps is not None:
            total_steps = min(total_steps, self.config.xe_max_steps)

        rng = np.random.default_rng(self.seed)
        state = self._optimizer()
        log = self._log("xe_loss.jsonl")
        result = TrainingResult(stage="xe")
        started = time.time()
        if self.tracker:
            self.tracker.start_operation("xe", "XE training", total_steps)

        self.model.train()
        for step, batch in enumerate(self._batches(pairs, rng), start=1):
            if step > total_steps:
                break
            self.model.params.zero_grad()
            total: Tensor | None = None
            tokens = 0
            with Tape() as tape:
                for image_id, ids in batch:
                    inputs, targets = teacher_forcing_pair(ids)
                    encoded = self.model.encode(dataset.features.get(image_id))
                    logits = self.model.decode_logits(inputs, encoded)
                    loss = xe_loss(logits, targets, PAD_ID, "sum")
                    total = loss if total is None else add(total, loss)
                    tokens += len(targets)
                assert total is not None
                batch_loss = total / float(len(batch))
            tape.backward(batch_loss)

            lr = warmup_lr(
                step, self.model.encoder_config.d_model, self.config.warmup_steps,
                self.config.lr_factor,
            )
            norm = self._apply(state, lr)
            per_token = total.item() / tokens
            result.curve.append(per_token)
            result.steps = step

            epoch = (step - 1) // per_epoch + 1
            if log:
                log.write(
                    {"step": step, "epoch": epoch, "loss": per_token, "lr": lr, "grad_norm": norm}
                )
            if self.tracker:
                self.tracker.advance("xe", step, {"loss": per_token})
            if step % per_epoch == 0:
                logger.info(f"Epoch {epoch} finished at step {step}: loss {per_token:.4f}")
            else:
                logger.debug(f"step {step}: loss {per_token:.4f}, lr {lr:.3e}")
            if step % self.config.checkpoint_every == 0:
                self.save(f"xe_step{step:06d}.ckpt", "xe", step, dataset)

        self.model.eval()
        result.checkpoint = self.save("xe_final.ckpt", "xe", result.steps, dataset)
        result.seconds = time.time() - started
        if self.tracker:
            self.tracker.complete_operation("xe", {"loss": result.final})
        logger.info(
            f"XE training done: {result.steps} steps, final loss {result.final:.4f}, "
            f"{result.seconds:.1f}s"
        )
        return result

    def finetune_scst(
        self, dataset: CaptionDataset, stats: NGramStats | None = None
    ) -> TrainingResult:
        """
        Self-critical fine-tuning at the fixed SCST learning rate.

        Steps whose gradient is exactly zero (every image's beams earned the
        same reward) leave the parameters and optimiser state untouched.
        """
        image_ids = dataset.image_ids
        if not image_ids:
            raise ConfigurationError("Cannot fine-tune on an empty dataset", "data")
        stats = stats or build_idf(dataset.reference_corpus())

        rng = np.random.default_rng(self.seed)
        state = self._optimizer()
        log = self._log("scst_reward.jsonl")
        result = TrainingResult(stage="scst")
        started = time.time()
        total_steps = self.config.scst_steps
        if self.tracker:
            self.tracker.start_operation("scst", "SCST fine-tuning", total_steps)

        self.model.train()
        for step, batch in enumerate(self._batches(image_ids, rng), start=1):
            if step > total_steps:
                break
            self.model.params.zero_grad()
            with Tape() as tape:
                samples = [
                    scst_step(
                        self.model,
                        dataset.features.get(image_id),
                        dataset.references(image_id),
                        stats,
                        self.config.scst_beam,
                        self.max_caption_len,
                    )
                    for image_id in batch
                ]
                total = samples[0].loss
                for sample in samples[1:]:
                    total = add(total, sample.loss)
                batch_loss = total / float(len(samples))
            tape.backward(batch_loss)

            mean_reward = float(np.mean([s.baseline for s in samples]))
            best_reward = float(np.mean([max(s.rewards) for s in samples]))
            if global_norm(self.model.params.grads()) == 0.0:
                result.skipped_steps += 1
                norm = 0.0
                logger.debug(f"step {step}: constant rewards, update skipped")
            else:
                norm = self._apply(state, self.config.scst_lr)

            result.curve.append(mean_reward)
            result.steps = step
            if log:
                log.write(
                    {
                        "step": step,
                        "mean_reward": mean_reward,
                        "baseline": mean_reward,
                        "best_reward": best_reward,
                        "loss": batch_loss.item(),
                        "grad_norm": norm,
                    }
                )
            if self.tracker:
                self.tracker.advance("scst", step, {"reward": mean_reward})
            if step % self.config.checkpoint_every == 0:
                self.save(f"scst_step{step:06d}.ckpt", "scst", step, dataset)

        self.model.eval()
        result.checkpoint = self.save("scst_final.ckpt", "scst", result.steps, dataset)
        result.seconds = time.time() - started
        if self.tracker:
            self.tracker.complete_operation("scst", {"reward": result.final})
        logger.info(
            f"SCST done: {result.steps} steps ({result.skipped_steps} skipped), "
            f"final mean reward {result.final:.4f}"
        )
        return result
