"""Subcommand implementations; each returns a process exit status."""
import argparse
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from medimp.cli.checkpoint import read_checkpoint, write_checkpoint
from medimp.cli.export import embedding_matrix, export_embeddings, read_embeddings, write_embeddings
from medimp.cli.gradsuite import results_table, run_grad_suite
from medimp.cli.plotting import render_scatter_svg, write_scatter_svg
from medimp.cli.tsne import tsne_2d
from medimp.config import RunConfig
from medimp.contrastive import MedimpModel, Trainer
from medimp.downstream import (
    encoder_from_checkpoint,
    evaluate_downstream,
    extract_embeddings,
    shuffled_label_control,
    untrained_encoder,
)
from medimp.exceptions import EvaluationError
from medimp.promptgen import generate_prompts, load_bank, load_rules, write_prompts_jsonl
from medimp.synthcohort import gen_cohort, load_cohort, save_cohort

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunContext:
    config: RunConfig
    seed: int
    out: Path

    @property
    def cohort_dir(self) -> Path:
        return self.out / "cohort"

    @property
    def prompts_path(self) -> Path:
        return self.out / "prompts.jsonl"

    @property
    def metrics_path(self) -> Path:
        return self.out / "metrics.csv"

    @property
    def checkpoint_path(self) -> Path:
        return self.out / "model.ckpt"

    @property
    def embeddings_path(self) -> Path:
        return self.out / "embeddings.csv"

    @property
    def plots_dir(self) -> Path:
        return self.out / "plots"


def synth(ctx: RunContext, args: argparse.Namespace) -> int:
    cohort = gen_cohort(rng_seed=ctx.seed, config=ctx.config.cohort)
    path = save_cohort(cohort, ctx.cohort_dir)
    print(f"Cohort written to {path}: " + ", ".join(f"{k}={len(v)}" for k, v in cohort.splits.items()))
    return 0


def prompts(ctx: RunContext, args: argparse.Namespace) -> int:
    cohort = load_cohort(ctx.cohort_dir)
    rules, bank = load_rules(ctx.config.prompts.rules_path), load_bank(ctx.config.prompts.bank_path)
    mode = ctx.config.train.prompt_mode
    n = 1 if mode == "manual" else ctx.config.prompts.n_augmentations
    generated = []
    for sid in cohort.subjects():
        for record in cohort.records(sid):
            generated.extend(generate_prompts(record, bank, ctx.config.prompts.variables, mode, ctx.seed, rules, n=n))
    path = write_prompts_jsonl(ctx.prompts_path, generated)
    print(f"{len(generated)} prompts ({mode}) written to {path}")
    return 0


def pretrain(ctx: RunContext, args: argparse.Namespace) -> int:
    cohort = load_cohort(ctx.cohort_dir)
    ctx.metrics_path.unlink(missing_ok=True)
    trainer = Trainer(ctx.config)
    checkpoint = trainer.fit(cohort.samples("train"), cohort.samples("val"), metrics_path=ctx.metrics_path)
    write_checkpoint(ctx.checkpoint_path, checkpoint)
    batch = ctx.config.train.batch_size
    try:
        accuracy = trainer.retrieval(cohort.samples("test"), batch)
        print(f"Held-out image-to-text top-1 accuracy: {accuracy:.3f} (chance {1 / batch:.3f})")
    except EvaluationError as e:
        logger.warning("Skipping retrieval check: %s", e.detail)
    print(f"Checkpoint written to {ctx.checkpoint_path}")
    return 0


def embed(ctx: RunContext, args: argparse.Namespace) -> int:
    cohort = load_cohort(ctx.cohort_dir)
    model = MedimpModel.from_checkpoint(read_checkpoint(ctx.checkpoint_path))
    count = ctx.config.plot.augmented_per_exam if args.augmented is None else args.augmented
    table = export_embeddings(model, cohort, count, ctx.seed, load_rules(ctx.config.prompts.rules_path))
    write_embeddings(ctx.embeddings_path, table)
    print(f"{len(table)} embedding rows written to {ctx.embeddings_path}")
    return 0


def evaluate(ctx: RunContext, args: argparse.Namespace) -> int:
    cohort = load_cohort(ctx.cohort_dir)
    if args.untrained:
        encoder = untrained_encoder(ctx.config.image_encoder, ctx.seed)
    else:
        encoder = encoder_from_checkpoint(read_checkpoint(ctx.checkpoint_path))
    embeddings = extract_embeddings(encoder, cohort)
    report = evaluate_downstream(encoder, cohort, ctx.config.downstream, ctx.seed, args.cv, embeddings)
    stem = "report" + (f"_cv{args.cv}" if args.cv else "") + ("_untrained" if args.untrained else "")
    ctx.out.mkdir(parents=True, exist_ok=True)
    report.to_csv(ctx.out / f"{stem}.csv")
    print(report.format_table())
    if args.shuffles:
        aucs = shuffled_label_control(encoder, cohort, ctx.config.downstream, ctx.seed, args.shuffles, embeddings=embeddings)
        pd.DataFrame({"shuffle": range(len(aucs)), "auc": aucs}).to_csv(ctx.out / f"{stem}_shuffled.csv", index=False)
        print(f"Shuffled-label AUC: {np.mean(aucs):.3f} ± {np.std(aucs):.3f} over {len(aucs)} shuffles")
    return 0


def plot(ctx: RunContext, args: argparse.Namespace) -> int:
    table = read_embeddings(ctx.embeddings_path)
    cfg = ctx.config.plot
    coords = tsne_2d(embedding_matrix(table), cfg.perplexity, cfg.iterations, ctx.seed, cfg.learning_rate)
    for variable in args.variables or cfg.variables:
        svg = render_scatter_svg(coords, table[variable].tolist(), table["is_augmented"].tolist(), variable)
        write_scatter_svg(ctx.plots_dir / f"tsne_{variable}.svg", svg)
    print(f"Plots written to {ctx.plots_dir}")
    return 0


def gradcheck(ctx: RunContext, args: argparse.Namespace) -> int:
    results = run_grad_suite(args.configs, ctx.seed)
    print(results_table(results))
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "synth": synth,
    "prompts": prompts,
    "pretrain": pretrain,
    "embed": embed,
    "eval": evaluate,
    "plot": plot,
    "gradcheck": gradcheck,
}
