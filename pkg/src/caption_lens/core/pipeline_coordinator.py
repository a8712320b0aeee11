"""Pipeline coordinator: builds datasets and models from a RunConfig and runs each stage."""

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from caption_lens.analysis.attribution import AttributionResult, attribute_regions
from caption_lens.analysis.cider import CorpusScore, NGramStats, build_idf, score_corpus
from caption_lens.core.exceptions import CheckpointError, ConfigurationError, DecodeError
from caption_lens.core.gradcheck import GradCheckReport, finite_diff_check
from caption_lens.core.progress_tracker import ProgressTracker, SweepProgress
from caption_lens.data.dataset import (
    CaptionDataset,
    load_caption_dataset,
    make_synthetic_dataset,
)
from caption_lens.data.vocab import BOS_ID, EOS_ID, RESERVED_TOKENS, Vocabulary, decode_tokens
from caption_lens.inference.beam_search import caption_features, decode_dataset
from caption_lens.model.captioner import GlobalEnhancedTransformer
from caption_lens.model.checkpoint import load_checkpoint, restore_parameters
from caption_lens.reports.run_report import (
    AblationRow,
    CaptionRecord,
    ReportFormat,
    export_ablation,
    save_attribution,
    save_captions,
)
from caption_lens.training.losses import xe_loss
from caption_lens.training.trainer import CaptionTrainer, TrainingResult
from caption_lens.utils.config import (
    ModelConfig,
    RunConfig,
    require_valid,
    save_config,
    setup_logging,
)

logger = logging.getLogger(__name__)

GRADCHECK_CONTROLLERS = ("gac", "mac")
GRADCHECK_FUSIONS = ("none", "average", "attention", "lstm")
LAYER_AXIS = (2, 3, 4)

# (name, intra_layer, inter_layer, controller) of the component ablation
COMPONENT_AXIS = (
    ("transformer", "plain", "none", "plain"),
    ("gea", "gea", "none", "plain"),
    ("g0+mac", "g0", "none", "mac"),
    ("gea+mac", "gea", "none", "mac"),
    ("gea+avg+mac", "gea", "average", "mac"),
    ("gea+attn+mac", "gea", "attention", "mac"),
    ("gea+lstm+mac", "gea", "lstm", "mac"),
    ("gea+lstm+gac", "gea", "lstm", "gac"),
)
ABLATION_AXES = ("layers", "components")


@dataclass
class CaptionRun:
    records: list[CaptionRecord]
    score: CorpusScore | None = None
    output_path: Path | None = None


class PipelineCoordinator:
    """Runs the captioning stages described by one RunConfig.

    Every stage writes under ``config.run_dir``:
    ``config.yaml``, ``checkpoints/``, ``logs/`` and ``captions/``.
    """

    def __init__(self, config: RunConfig, tracker: ProgressTracker | None = None):
        self.config = require_valid(config)
        self.tracker = tracker
        self.run_dir = config.run_dir

    def prepare_run_dir(self) -> Path:
        for sub in ("checkpoints", "logs", "captions"):
            (self.run_dir / sub).mkdir(parents=True, exist_ok=True)
        setup_logging(self.config.logging, self.run_dir / "logs")
        save_config(self.config, self.run_dir / "config.yaml")
        logger.info(f"Run directory: {self.run_dir}")
        return self.run_dir

    @property
    def caption_max_len(self) -> int:
        """Encoded caption length: decoder positions plus the final target."""
        return self.config.model.max_len + 1

    def synthetic_dataset(self) -> CaptionDataset:
        synthetic = self.config.data.synthetic
        return make_synthetic_dataset(
            seed=self.config.seed,
            images=synthetic.images,
            regions=synthetic.regions,
            d_in=synthetic.d_in,
            vocab_size=synthetic.vocab_size,
            caption_len=synthetic.caption_len,
            max_len=self.caption_max_len,
        )

    def load_dataset(self, split: str = "train", vocab: Vocabulary | None = None) -> CaptionDataset:
        """
        Training or validation split as configured.

        Raises:
            ConfigurationError: If the split is not available for the source
        """
        data = self.config.data
        if data.source == "synthetic":
            if split != "train":
                raise ConfigurationError(
                    "Synthetic data has only a train split", config_key="data.source"
                )
            return self.synthetic_dataset()

        if split == "train":
            captions, manifest = data.captions_path, data.manifest_path
        elif split == "val":
            captions, manifest = data.val_captions_path, data.val_manifest_path
        else:
            raise ConfigurationError(f"Unknown split: {split}")
        if captions is None or manifest is None:
            raise ConfigurationError(f"No {split} split configured", config_key="data")
        return load_caption_dataset(
            captions, manifest, self.caption_max_len, data.min_count, split, vocab
        )

    def build_model(
        self, d_in: int, vocab_size: int, model_config: ModelConfig | None = None
    ) -> GlobalEnhancedTransformer:
        model_config = model_config or self.config.model
        return GlobalEnhancedTransformer(
            model_config.encoder_config(),
            model_config.decoder_config(vocab_size),
            d_in,
            seed=self.config.seed,
            bos_id=BOS_ID,
            eos_id=EOS_ID,
        )

    def restore(
        self, checkpoint: Path, split: str = "train"
    ) -> tuple[GlobalEnhancedTransformer, CaptionDataset]:
        """
        Rebuild the model a checkpoint was trained as, with its vocabulary.

        Raises:
            CheckpointError: If the checkpoint disagrees with the configured model
        """
        _, metadata = load_checkpoint(checkpoint)
        tokens = metadata.get("vocab")
        if not isinstance(tokens, list) or tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise CheckpointError("Checkpoint has no vocabulary", file_path=checkpoint)
        vocab = Vocabulary(tokens=tuple(tokens))

        dataset = self.load_dataset(split, vocab)
        if dataset.vocab.tokens != vocab.tokens:
            raise CheckpointError(
                "Checkpoint vocabulary differs from the configured data",
                file_path=checkpoint,
                details={"checkpoint": len(vocab), "data": len(dataset.vocab)},
            )
        model = self.build_model(dataset.features.feature_dim, len(vocab))
        restore_parameters(model.params, checkpoint, model.model_metadata())
        return model.eval(), dataset

    def trainer(self, model: GlobalEnhancedTransformer, run_dir: Path | None) -> CaptionTrainer:
        return CaptionTrainer(
            model,
            self.config.train,
            seed=self.config.seed,
            run_dir=run_dir,
            tracker=self.tracker,
            max_caption_len=self.config.inference.max_caption_len,
        )

    def train(self) -> TrainingResult:
        self.prepare_run_dir()
        dataset = self.load_dataset()
        model = self.build_model(dataset.features.feature_dim, len(dataset.vocab))
        return self.trainer(model, self.run_dir).train_xe(dataset)

    def finetune(self, checkpoint: Path) -> TrainingResult:
        self.prepare_run_dir()
        model, dataset = self.restore(checkpoint)
        stats = build_idf(dataset.reference_corpus())
        return self.trainer(model, self.run_dir).finetune_scst(dataset, stats)

    def _caption_records(
        self,
        model: GlobalEnhancedTransformer,
        dataset: CaptionDataset,
        image_ids: list[str] | None,
        stats: NGramStats | None,
    ) -> CaptionRun:
        hypotheses = decode_dataset(
            model,
            dataset,
            self.config.inference.beam_size,
            self.config.inference.max_caption_len,
            image_ids,
        )
        score = None
        if stats is not None:
            references = {i: dataset.references(i) for i in hypotheses}
            score = score_corpus(
                {i: h.words for i, h in hypotheses.items()}, references, stats
            )
        records = [
            CaptionRecord(
                image_id=image_id,
                caption=decode_tokens(hyp.words, dataset.vocab),
                tokens=list(hyp.tokens),
                log_prob=hyp.log_prob,
                forced=hyp.forced,
                cider=score.per_image[image_id] if score else None,
            )
            for image_id, hyp in hypotheses.items()
        ]
        return CaptionRun(records=records, score=score)

    def caption(self, checkpoint: Path, image_ids: list[str] | None = None) -> CaptionRun:
        self.prepare_run_dir()
        model, dataset = self.restore(checkpoint)
        run = self._caption_records(model, dataset, image_ids, None)
        run.output_path = save_captions(run.records, self.run_dir / "captions" / "captions.jsonl")
        return run

    def evaluate(self, checkpoint: Path, split: str = "train") -> CaptionRun:
        """Mean CIDEr-D over a split, with IDF from the training references."""
        self.prepare_run_dir()
        model, dataset = self.restore(checkpoint, split)
        train = dataset if split == "train" else self.load_dataset("train", dataset.vocab)
        stats = build_idf(train.reference_corpus())
        run = self._caption_records(model, dataset, None, stats)
        run.output_path = save_captions(
            run.records, self.run_dir / "captions" / f"eval_{split}.jsonl"
        )
        return run

    def attribute(self, checkpoint: Path, image_id: str) -> tuple[AttributionResult, list[Path]]:
        """Attribute the best non-empty beam caption of one image to its regions."""
        self.prepare_run_dir()
        model, dataset = self.restore(checkpoint)
        inference = self.config.inference
        features = dataset.features.get(image_id)
        hypotheses = caption_features(
            model, features, inference.beam_size, inference.max_caption_len
        )
        words = next((hyp.words for hyp in hypotheses if hyp.words), None)
        if words is None:
            raise DecodeError(
                "Every beam hypothesis is empty", details={"image_id": image_id}
            )
        result = attribute_regions(
            model,
            features,
            words,
            inference.attribution_steps,
            inference.attribution_rule,
            dataset.vocab,
            image_id,
            tolerance=inference.attribution_tolerance,
            max_evaluations=inference.attribution_max_evaluations,
        )
        base = self.run_dir / "captions" / f"attribution_{image_id}"
        paths = [
            save_attribution(result, base.with_suffix(".json"), ReportFormat.JSON),
            save_attribution(result, base.with_suffix(".csv"), ReportFormat.CSV),
        ]
        return result, paths

    def gradcheck(self) -> list[tuple[str, GradCheckReport]]:
        """
        Central-difference check of every parameter of a tiny full model, for
        each controller and fusion mode, dropout masks frozen per evaluation.
        """
        self.prepare_run_dir()
        settings = self.config.gradcheck
        rng = np.random.default_rng(self.config.seed)
        features = rng.normal(0.0, 1.0, (settings.regions, settings.d_in))
        words = rng.integers(len(RESERVED_TOKENS), settings.vocab_size, settings.caption_len)
        inputs = [BOS_ID, *(int(w) for w in words)]
        targets = [*(int(w) for w in words), EOS_ID]

        reports: list[tuple[str, GradCheckReport]] = []
        for controller in GRADCHECK_CONTROLLERS:
            for fusion in GRADCHECK_FUSIONS:
                model_config = ModelConfig(
                    layers=settings.layers,
                    d_model=settings.d_model,
                    heads=settings.heads,
                    d_ff=settings.d_ff,
                    keep_prob=self.config.model.keep_prob,
                    intra_layer="gea",
                    inter_layer=fusion,
                    controller=controller,
                    max_len=len(inputs),
                )
                model = self.build_model(settings.d_in, settings.vocab_size, model_config)
                model.train()

                def loss(model: GlobalEnhancedTransformer = model):
                    model.reseed(self.config.seed)
                    encoded = model.encode(features)
                    return xe_loss(model.decode_logits(inputs, encoded), targets)

                report = finite_diff_check(
                    loss,
                    dict(model.params.named()),
                    step=settings.step,
                    tol=settings.tolerance,
                    abs_floor=settings.abs_floor,
                    max_entries=settings.max_entries,
                    seed=self.config.seed,
                )
                label = f"{controller}/{fusion}"
                logger.info(
                    f"gradcheck {label}: max rel error {report.max_rel_error:.2e}, "
                    f"{'pass' if report.passed else 'FAIL'}"
                )
                reports.append((label, report))
        return reports

    def _variants(self, axis: str) -> list[tuple[str, ModelConfig]]:
        base = self.config.model
        if axis == "layers":
            return [(f"L={n}", base.model_copy(update={"layers": n})) for n in LAYER_AXIS]
        if axis == "components":
            return [
                (
                    name,
                    base.model_copy(
                        update={"intra_layer": intra, "inter_layer": inter, "controller": ctrl}
                    ),
                )
                for name, intra, inter, ctrl in COMPONENT_AXIS
            ]
        raise ConfigurationError(
            f"Unknown ablation axis: {axis}", details={"axes": ", ".join(ABLATION_AXES)}
        )

    def _ablation_row(
        self,
        name: str,
        model_config: ModelConfig,
        dataset: CaptionDataset,
        stats: NGramStats,
    ) -> AblationRow:
        started = time.time()
        model = self.build_model(
            dataset.features.feature_dim, len(dataset.vocab), model_config
        )
        result = self.trainer(model, None).train_xe(dataset)
        run = self._caption_records(model, dataset, None, stats)
        return AblationRow(
            name=name,
            layers=model_config.layers,
            intra_layer=model_config.intra_layer,
            inter_layer=model_config.inter_layer,
            controller=model_config.controller,
            steps=result.steps,
            final_loss=result.final,
            cider=run.score.mean if run.score else 0.0,
            seconds=time.time() - started,
        )

    def ablate(self, axis: str = "layers") -> tuple[list[AblationRow], dict[str, Path]]:
        """XE-train and score every variant on the same data and seed."""
        variants = self._variants(axis)
        self.prepare_run_dir()
        dataset = self.load_dataset()
        stats = build_idf(dataset.reference_corpus())

        sweep = SweepProgress(
            self.tracker, "ablate", f"Ablation over {axis}", [name for name, _ in variants]
        )
        rows: list[AblationRow] = []
        for name, model_config in variants:
            with sweep.run(name):
                rows.append(self._ablation_row(name, model_config, dataset, stats))
            logger.info(f"Variant {name}: CIDEr-D {rows[-1].cider:.3f}")

        return rows, export_ablation(rows, self.run_dir)
