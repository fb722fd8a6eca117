"""Contrastive pretraining loop."""
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from medimp.config import PromptConfig, RunConfig
from medimp.contrastive.model import LOGIT_SCALE, MedimpModel, retrieval_accuracy
from medimp.contrastive.optim import AdamW, lr_at
from medimp.encoders import apply_freeze_policy
from medimp.exceptions import ConfigError
from medimp.imaging import augment, normalize_volume
from medimp.numerics import Tape, backward
from medimp.promptgen import (
    AugmentationBank,
    RuleSet,
    TokenizedText,
    build_vocab,
    expand_prompts,
    generate_prompts,
    load_bank,
    load_rules,
    render_all_variants,
    tokenize_batch,
)
from medimp.schemas import Checkpoint, ClinicalRecord, PairedSample
from medimp.seeds import derive_rng, derive_seed

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "split", "loss_sum", "loss_per_pair", "exp_logit_scale", "lr"]


class PromptSampler:
    """Chooses the prompt text paired with each record at each epoch.

    Manual mode always uses the original template. Augmented mode either
    redraws a bank variant every epoch or cycles through a fixed,
    pre-expanded list of prompts per record.
    """

    def __init__(self, config: PromptConfig, mode: str, bank: AugmentationBank, rules: RuleSet, seed: int):
        self.config = config
        self.mode = mode
        self.bank = bank
        self.rules = rules
        self.seed = seed
        self._pools: dict[tuple[str, str], list[str]] = {}

    def text_for(self, record: ClinicalRecord, epoch: int) -> str:
        variables = self.config.variables
        if self.mode == "manual":
            return generate_prompts(record, self.bank, variables, "manual", rules=self.rules)[0].text
        if self.config.resample_per_epoch:
            seed = derive_seed("epoch-prompts", self.seed, epoch)
            return generate_prompts(record, self.bank, variables, "augmented", seed, self.rules)[0].text
        key = (record.subject_id, record.exam.value)
        if key not in self._pools:
            prompts = expand_prompts(record, self.bank, variables, self.config.n_augmentations, self.seed, self.rules)
            self._pools[key] = [p.text for p in prompts]
        pool = self._pools[key]
        return pool[epoch % len(pool)]

    def corpus(self, records: Sequence[ClinicalRecord]) -> list[str]:
        texts = []
        for record in records:
            if self.mode == "manual":
                texts.append(self.text_for(record, 0))
            else:
                texts.extend(render_all_variants(record, self.bank, self.config.variables, self.rules))
        return texts


class Trainer:
    def __init__(self, config: RunConfig):
        self.config = config
        self.seed = config.train_seed
        self.rules = load_rules(config.prompts.rules_path)
        self.bank = load_bank(config.prompts.bank_path)
        self.sampler = PromptSampler(config.prompts, config.train.prompt_mode, self.bank, self.rules, self.seed)
        self.model: MedimpModel | None = None
        self.history: list[dict] = []

    def build_model(self, samples: Sequence[PairedSample]) -> MedimpModel:
        vocab = build_vocab(self.sampler.corpus([s.record for s in samples]))
        train = self.config.train
        model = MedimpModel(
            self.config.image_encoder,
            self.config.text_encoder,
            vocab,
            seed=self.seed,
            init_temperature=train.init_temperature,
            max_logit_scale=train.max_logit_scale,
        )
        apply_freeze_policy(model.text.parameters(), self.config.freeze_policy, self.config.text_encoder.layers)
        return model

    def batch(self, samples: Sequence[PairedSample], epoch: int, augmented: bool) -> tuple[np.ndarray, TokenizedText]:
        voxels = []
        for s in samples:
            volume = s.volume if s.volume.normalized else normalize_volume(s.volume)
            if augmented:
                volume = augment(volume, self.seed, f"{s.sample_id}/{epoch}")
            voxels.append(volume.voxels)
        texts = [self.sampler.text_for(s.record, epoch) for s in samples]
        return np.stack(voxels), tokenize_batch(texts, self.model.vocab, self.config.prompts.max_len)

    def fit(
        self,
        train: Sequence[PairedSample],
        val: Sequence[PairedSample] = (),
        metrics_path: str | Path | None = None,
    ) -> Checkpoint:
        cfg = self.config.train
        n = len(train)
        if n == 0:
            raise ConfigError("cannot pretrain on an empty dataset")
        if cfg.batch_size > n:
            raise ConfigError(f"batch size {cfg.batch_size} exceeds the {n} training pairs")
        self.model = model = self.build_model(train)
        optimizer = AdamW(model.parameters(), cfg, no_decay=[LOGIT_SCALE])
        n_steps = n // cfg.batch_size
        logger.info(
            "Pretraining on %d pairs: %d epochs x %d steps, batch %d, seed %d",
            n, cfg.epochs, n_steps, cfg.batch_size, self.seed,
        )
        for epoch in range(cfg.epochs):
            order = derive_rng("shuffle", self.seed, epoch).permutation(n)
            losses = []
            lr = 0.0
            for step in range(n_steps):
                idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
                voxels, tokens = self.batch([train[i] for i in idx], epoch, augmented=True)
                with Tape() as tape:
                    loss = model.loss(voxels, tokens)
                grads = backward(tape, loss, optimizer.params)
                lr = lr_at(epoch + (step + 1) / n_steps, cfg)
                optimizer.step(grads, lr)
                model.clamp_logit_scale()
                losses.append(loss.item())
            rows = [self._record(epoch, "train", float(np.mean(losses)), cfg.batch_size, lr)]
            if len(val) >= 2:
                rows.append(self._record(epoch, "val", self.evaluate_loss(val, epoch), min(cfg.batch_size, len(val)), lr))
            if metrics_path is not None:
                write_metrics(metrics_path, rows)
        return model.to_checkpoint()

    def evaluate_loss(self, samples: Sequence[PairedSample], epoch: int) -> float:
        """Mean batch loss over full batches, no augmentation, no gradient."""
        bs = min(self.config.train.batch_size, len(samples))
        losses = []
        for start in range(0, len(samples) - bs + 1, bs):
            voxels, tokens = self.batch(samples[start : start + bs], epoch, augmented=False)
            losses.append(self.model.loss(voxels, tokens).item())
        return float(np.mean(losses))

    def _record(self, epoch: int, split: str, loss_sum: float, batch_size: int, lr: float) -> dict:
        scale = math.exp(float(self.model.logit_scale.data))
        row = {
            "epoch": epoch,
            "split": split,
            "loss_sum": loss_sum,
            "loss_per_pair": loss_sum / batch_size,
            "exp_logit_scale": scale,
            "lr": lr,
        }
        self.history.append(row)
        logger.info(
            "[epoch %d] %s loss_sum=%.4f loss_per_pair=%.4f exp(s)=%.3f lr=%.2e",
            epoch, split, loss_sum, row["loss_per_pair"], scale, lr,
        )
        return row

    def retrieval(self, samples: Sequence[PairedSample], batch_size: int | None = None) -> float:
        """Held-out image-to-text top-1 accuracy with manual-template prompts."""
        batch_size = batch_size or self.config.train.batch_size
        manual = PromptSampler(self.config.prompts, "manual", self.bank, self.rules, self.seed)
        texts = [manual.text_for(s.record, 0) for s in samples]
        voxels = np.stack([(s.volume if s.volume.normalized else normalize_volume(s.volume)).voxels for s in samples])
        tokens = tokenize_batch(texts, self.model.vocab, self.config.prompts.max_len)
        return retrieval_accuracy(
            self.model.embed_images(voxels), self.model.embed_texts(tokens), batch_size, seed=self.seed
        )


def write_metrics(path: str | Path, rows: Sequence[dict]) -> Path:
    """Append metric rows to a CSV, writing the header only for a new file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=METRIC_COLUMNS)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)
    logger.info("Appended %d metric rows to %s", len(frame), path)
    return path


def fit(
    train: Sequence[PairedSample],
    config: RunConfig,
    val: Sequence[PairedSample] = (),
    metrics_path: str | Path | None = None,
) -> Checkpoint:
    return Trainer(config).fit(train, val, metrics_path)
