"""Frozen-encoder evaluation: per-horizon creatinine prediction from exam embeddings."""
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.model_selection import KFold
from sklearn.preprocessing import StandardScaler

from medimp.config import DownstreamConfig, ImageEncoderConfig
from medimp.contrastive.model import MedimpModel
from medimp.downstream.labels import horizon_labels
from medimp.downstream.metrics import f1_score, roc_auc
from medimp.downstream.sequence import N_SLOTS, SequenceHead
from medimp.encoders import ImageEncoder, ParameterStore
from medimp.exceptions import EvaluationError, MetricError
from medimp.imaging import normalize_volume
from medimp.schemas import Checkpoint, Exam
from medimp.seeds import derive_rng, derive_seed
from medimp.synthcohort import Cohort

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["horizon", "auc", "f1", "auc_std", "f1_std", "n_subjects"]


def encoder_from_checkpoint(checkpoint: Checkpoint) -> ImageEncoder:
    return MedimpModel.from_checkpoint(checkpoint).image


def untrained_encoder(config: ImageEncoderConfig, seed: int = 0) -> ImageEncoder:
    """Freshly initialized image tower; the baseline the pretrained one has to beat."""
    return ImageEncoder(config, ParameterStore(seed))


def extract_embeddings(encoder: ImageEncoder, cohort: Cohort, batch_size: int = 16) -> dict[tuple[str, Exam], np.ndarray]:
    keys = [(sid, exam) for sid in cohort.subjects() for exam in cohort.profile(sid).exams]
    out = {}
    for start in range(0, len(keys), batch_size):
        chunk = keys[start : start + batch_size]
        voxels = []
        for sid, exam in chunk:
            volume = cohort.volume(sid, exam)
            voxels.append((volume if volume.normalized else normalize_volume(volume)).voxels)
        features = encoder(np.stack(voxels)).data
        out.update({key: features[i].copy() for i, key in enumerate(chunk)})
    logger.info("Extracted %d exam embeddings of width %d", len(out), encoder.config.embed_dim)
    return out


def build_sequences(
    embeddings: dict[tuple[str, Exam], np.ndarray], subjects: Sequence[str], width: int
) -> tuple[np.ndarray, np.ndarray]:
    x = np.zeros((len(subjects), N_SLOTS, width))
    mask = np.zeros((len(subjects), N_SLOTS), dtype=bool)
    for i, sid in enumerate(subjects):
        for exam in Exam:
            if (sid, exam) in embeddings:
                x[i, exam.index] = embeddings[(sid, exam)]
                mask[i, exam.index] = True
    return x, mask


def kfold_split(subjects: Sequence[str], k: int, seed: int = 0) -> list[list[str]]:
    """Subject-level partition into ``k`` near-equal folds."""
    subjects = list(subjects)
    if k < 2:
        raise EvaluationError(f"cross-validation needs k >= 2 folds, got k={k}")
    if k > len(subjects):
        raise EvaluationError(f"cannot split {len(subjects)} subjects into {k} folds")
    kfold = KFold(n_splits=k, shuffle=True, random_state=derive_seed("folds", seed) % 2**32)
    return [[subjects[i] for i in sorted(test)] for _, test in kfold.split(subjects)]


@dataclass
class HorizonScores:
    years: int
    auc: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)
    n_subjects: int = 0


@dataclass
class EvalReport:
    """AUC and F1 per horizon; several values per horizon in cross-validation mode."""

    horizons: list[HorizonScores]
    mode: str = "test"

    def _row(self, name: str, auc: Sequence[float], f1: Sequence[float], n: int) -> dict:
        auc, f1 = np.asarray(auc, dtype=float), np.asarray(f1, dtype=float)
        return {
            "horizon": name,
            "auc": float(np.nanmean(auc)) if np.isfinite(auc).any() else math.nan,
            "f1": float(np.mean(f1)),
            "auc_std": float(np.nanstd(auc)) if np.isfinite(auc).any() else math.nan,
            "f1_std": float(np.std(f1)),
            "n_subjects": n,
        }

    def to_frame(self) -> pd.DataFrame:
        rows = [self._row(f"{h.years}y", h.auc, h.f1, h.n_subjects) for h in self.horizons]
        mean = pd.DataFrame(rows)
        rows.append(
            {
                "horizon": "Mean",
                "auc": float(mean["auc"].mean()),
                "f1": float(mean["f1"].mean()),
                "auc_std": float(mean["auc_std"].mean()),
                "f1_std": float(mean["f1_std"].mean()),
                "n_subjects": int(mean["n_subjects"].sum()),
            }
        )
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def format_table(self) -> str:
        frame = self.to_frame()
        cells = {}
        for _, row in frame.iterrows():
            for metric in ("auc", "f1"):
                value = f"{row[metric]:.3f}"
                if self.mode == "cv":
                    value += f" ± {row[metric + '_std']:.3f}"
                cells[(row["horizon"], metric.upper())] = value
        table = pd.Series(cells).unstack(level=0)[list(frame["horizon"])]
        return table.to_string()

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def _train_and_score(
    x_train, m_train, y_train, x_test, m_test, y_test, config: DownstreamConfig, seed: int
) -> tuple[float, float]:
    scaler = StandardScaler().fit(x_train[m_train])
    width = x_train.shape[-1]

    def scale(x):
        return scaler.transform(x.reshape(-1, width)).reshape(x.shape)

    head = SequenceHead(width, config, seed=seed)
    head.fit(scale(x_train), m_train, y_train)
    prob = head(scale(x_test), m_test)
    try:
        auc = roc_auc(y_test, prob)
    except MetricError:
        auc = math.nan
    return auc, f1_score(y_test, (prob >= config.f1_threshold).astype(int))


def _labelled(embeddings, cohort: Cohort, subjects, years: int, config: DownstreamConfig):
    labels = horizon_labels(cohort, subjects, years, config.window_days, config.threshold)
    kept = [sid for sid in subjects if sid in labels]
    width = len(next(iter(embeddings.values())))
    x, mask = build_sequences(embeddings, kept, width)
    return kept, x, mask, np.array([labels[sid] for sid in kept], dtype=int)


def _check_test_classes(y: np.ndarray, years: int) -> None:
    counts = np.bincount(y, minlength=2)
    if counts.min() < 2:
        raise EvaluationError(
            f"{years}y horizon: test split has {counts[0]} negatives and {counts[1]} positives, need at least 2 of each"
        )


def evaluate_downstream(
    encoder: ImageEncoder | Checkpoint,
    cohort: Cohort,
    config: DownstreamConfig | None = None,
    seed: int = 0,
    cv_folds: int | None = None,
    embeddings: dict | None = None,
) -> EvalReport:
    """Train the sequence head per horizon and score it.

    Test mode trains on the train split and scores the test split. With
    ``cv_folds`` the train split is cross-validated instead and every
    horizon reports the mean and standard deviation over folds.
    """
    config = config or DownstreamConfig()
    if isinstance(encoder, Checkpoint):
        encoder = encoder_from_checkpoint(encoder)
    embeddings = embeddings if embeddings is not None else extract_embeddings(encoder, cohort)
    train_ids = cohort.subjects("train")
    scores = []
    for years in config.horizons_years:
        h = HorizonScores(years)
        head_seed = derive_seed("head", seed, years)
        if cv_folds is None:
            train, x_tr, m_tr, y_tr = _labelled(embeddings, cohort, train_ids, years, config)
            test, x_te, m_te, y_te = _labelled(embeddings, cohort, cohort.subjects("test"), years, config)
            _check_test_classes(y_te, years)
            auc, f1 = _train_and_score(x_tr, m_tr, y_tr, x_te, m_te, y_te, config, head_seed)
            h.auc.append(auc)
            h.f1.append(f1)
            h.n_subjects = len(test)
        else:
            subjects, x, m, y = _labelled(embeddings, cohort, train_ids, years, config)
            index = {sid: i for i, sid in enumerate(subjects)}
            for fold, members in enumerate(kfold_split(subjects, cv_folds, seed)):
                test = np.array([index[sid] for sid in members])
                train = np.setdiff1d(np.arange(len(subjects)), test)
                auc, f1 = _train_and_score(x[train], m[train], y[train], x[test], m[test], y[test], config, head_seed + fold)
                if math.isnan(auc):
                    logger.warning("[%dy fold %d] single-class fold, AUC left out", years, fold)
                h.auc.append(auc)
                h.f1.append(f1)
            h.n_subjects = len(subjects)
        logger.info("[%dy] AUC=%.3f F1=%.3f over %d subjects", years, np.nanmean(h.auc), np.mean(h.f1), h.n_subjects)
        scores.append(h)
    return EvalReport(scores, mode="test" if cv_folds is None else "cv")


def shuffled_label_control(
    encoder: ImageEncoder | Checkpoint,
    cohort: Cohort,
    config: DownstreamConfig | None = None,
    seed: int = 0,
    shuffles: int | None = None,
    years: int | None = None,
    embeddings: dict | None = None,
) -> list[float]:
    """Test AUCs of heads trained on permuted train labels; they should hover around 0.5."""
    config = config or DownstreamConfig()
    if isinstance(encoder, Checkpoint):
        encoder = encoder_from_checkpoint(encoder)
    shuffles = shuffles or config.shuffles
    years = years or config.horizons_years[0]
    embeddings = embeddings if embeddings is not None else extract_embeddings(encoder, cohort)
    _, x_tr, m_tr, y_tr = _labelled(embeddings, cohort, cohort.subjects("train"), years, config)
    _, x_te, m_te, y_te = _labelled(embeddings, cohort, cohort.subjects("test"), years, config)
    _check_test_classes(y_te, years)
    aucs = []
    for i in range(shuffles):
        permuted = derive_rng("shuffle-labels", seed, i).permutation(y_tr)
        auc, _ = _train_and_score(x_tr, m_tr, permuted, x_te, m_te, y_te, config, derive_seed("head", seed, years, i))
        aucs.append(auc)
    logger.info("[%dy] shuffled-label AUC %.3f ± %.3f over %d shuffles", years, np.mean(aucs), np.std(aucs), shuffles)
    return aucs
