"""Embedding table: one row per real exam volume plus its augmented copies."""
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from medimp.contrastive import MedimpModel
from medimp.exceptions import ConfigError
from medimp.imaging import augment, normalize_volume
from medimp.promptgen import RuleSet, load_rules, record_labels
from medimp.synthcohort import Cohort

logger = logging.getLogger(__name__)

LABEL_COLUMNS = ["subject_id", "exam", "is_augmented", "gfr", "creat", "donor_age"]


def embedding_columns(width: int) -> list[str]:
    return [f"e{i}" for i in range(width)]


def export_embeddings(
    model: MedimpModel,
    cohort: Cohort,
    include_augmented: int = 0,
    seed: int = 0,
    rules: RuleSet | None = None,
    batch_size: int = 16,
) -> pd.DataFrame:
    rules = rules or load_rules()
    rows, voxels = [], []
    for sid in cohort.subjects():
        for record in cohort.records(sid):
            labels = record_labels(record, rules)
            base = normalize_volume(cohort.volume(sid, record.exam))
            variants = [base] + [augment(base, seed, f"{sid}/{record.exam.value}/export/{j}") for j in range(include_augmented)]
            for j, volume in enumerate(variants):
                rows.append([sid, record.exam.value, j > 0, labels.gfr, labels.creat, labels.donor_age])
                voxels.append(volume.voxels)
    embeddings = model.embed_images(np.stack(voxels), batch_size=batch_size)
    frame = pd.DataFrame(rows, columns=LABEL_COLUMNS)
    emb = pd.DataFrame(embeddings, columns=embedding_columns(embeddings.shape[1]))
    table = pd.concat([frame, emb], axis=1)
    logger.info("Exported %d embedding rows (%d augmented per exam)", len(table), include_augmented)
    return table


def write_embeddings(path: str | Path, table: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format="%.9g")
    logger.info("Wrote embedding table to %s", path)
    return path


def read_embeddings(path: str | Path) -> pd.DataFrame:
    if not Path(path).is_file():
        raise ConfigError(f"embedding table {path} not found; run the embed command first")
    return pd.read_csv(path, dtype={"subject_id": str, "exam": str, "gfr": str, "creat": str, "donor_age": str})


def embedding_matrix(table: pd.DataFrame) -> np.ndarray:
    return table.drop(columns=LABEL_COLUMNS).to_numpy(dtype=np.float64)
