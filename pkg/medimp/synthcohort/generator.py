"""Synthetic longitudinal transplant cohort with a planted image/text correlation.

Each subject carries a latent health scalar ``h``. GFR rises with ``h``,
creatinine falls with it, and the volumes show a central ellipsoid whose
brightness and size grow with it. A background texture whose frequency
depends on the exam makes the follow-up date visible in the image.
``signal_strength`` blends the image-side ``h`` and exam with independent
decoys, so 0 gives a cohort where images say nothing about the records.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from medimp.config import CohortConfig
from medimp.exceptions import CohortError
from medimp.imaging.volume import Volume, load_volume
from medimp.schemas import ClinicalRecord, Exam, PairedSample
from medimp.seeds import derive_rng

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class SubjectProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject_id: str
    health: float = Field(ge=0.0, le=1.0)
    # image-side health and per-exam texture index after blending with decoys
    image_health: float = Field(ge=0.0, le=1.0)
    donor_age: float = Field(ge=0.0, le=120.0)
    exams: tuple[Exam, ...]
    gfr: dict[Exam, float]
    texture_index: dict[Exam, float]
    creat_days: tuple[int, ...]
    creat_values: tuple[float, ...]

    @model_validator(mode="after")
    def _check(self):
        if not self.exams:
            raise ValueError(f"subject {self.subject_id} has no exam")
        if set(self.gfr) != set(self.exams):
            raise ValueError(f"subject {self.subject_id}: GFR values must cover exactly the present exams")
        if len(self.creat_days) != len(self.creat_values) or not self.creat_days:
            raise ValueError(f"subject {self.subject_id}: malformed creatinine series")
        if any(b <= a for a, b in zip(self.creat_days, self.creat_days[1:])):
            raise ValueError(f"subject {self.subject_id}: creatinine days must be strictly increasing")
        return self

    def creat_at(self, day: float) -> float:
        """Creatinine interpolated from the blood-test series."""
        return float(np.interp(day, self.creat_days, self.creat_values))


def _creatinine(health: float, day: np.ndarray, config: CohortConfig) -> np.ndarray:
    impairment = 1.0 - health
    base = config.creat_healthy + (config.creat_impaired - config.creat_healthy) * impairment
    drift = config.creat_drift_per_year * (day / 365.0) * impairment
    early = config.creat_early_excess * np.exp(-day / config.creat_early_days)
    return base + drift + early


def gen_record(
    rng_seed: int,
    subject_id: str,
    config: CohortConfig | None = None,
    health: Optional[float] = None,
) -> SubjectProfile:
    """Draw one subject; ``health`` forces the latent scalar instead of sampling it."""
    config = config or CohortConfig()
    rng = derive_rng("subject", rng_seed, subject_id)
    decoy = derive_rng("decoy", rng_seed, subject_id)

    drawn = rng.uniform()
    h = drawn if health is None else float(health)
    if not 0.0 <= h <= 1.0:
        raise CohortError(f"health must lie in [0, 1], got {h}")
    s = config.signal_strength
    image_health = s * h + (1.0 - s) * decoy.uniform()
    lo, hi = config.donor_age_range
    donor_age = float(lo + (hi - lo) * rng.uniform())

    present = [exam for exam in Exam if rng.uniform() >= config.missing_rate]
    if not present:
        present = [list(Exam)[int(rng.integers(len(Exam)))]]
    gfr = {}
    for exam in present:
        noise = float(np.clip(rng.normal(0.0, config.gfr_noise), -config.gfr_noise_clip, config.gfr_noise_clip))
        gfr[exam] = config.gfr_floor + config.gfr_span * h + noise
    texture_index = {exam: s * exam.index + (1.0 - s) * decoy.integers(len(Exam)) for exam in present}

    first, step_hi = config.sample_interval_days
    days = [int(rng.integers(1, first + 1))]
    while days[-1] < config.follow_up_days:
        days.append(days[-1] + int(rng.integers(first, step_hi + 1)))
    day_arr = np.array(days, dtype=np.float64)
    values = _creatinine(h, day_arr, config) + rng.normal(0.0, config.creat_noise, size=len(days))
    values = np.maximum(values, 1.0)

    return SubjectProfile(
        subject_id=subject_id,
        health=h,
        image_health=float(np.clip(image_health, 0.0, 1.0)),
        donor_age=donor_age,
        exams=tuple(present),
        gfr=gfr,
        texture_index=texture_index,
        creat_days=tuple(days),
        creat_values=tuple(float(v) for v in values),
    )


def clinical_records(profile: SubjectProfile) -> list[ClinicalRecord]:
    """One record per present exam; the previous creatinine comes from the previous present exam."""
    records = []
    prev = None
    for exam in profile.exams:
        curr = profile.creat_at(exam.day)
        records.append(
            ClinicalRecord(
                subject_id=profile.subject_id,
                exam=exam,
                gfr_value=profile.gfr[exam],
                creat_prev=prev,
                creat_curr=curr,
                donor_age_value=profile.donor_age,
            )
        )
        prev = curr
    return records


def _grid(shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Voxel-centre coordinates in [-1, 1] along each axis."""
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def ellipsoid_mask(shape: tuple[int, int, int], radius_fraction: float) -> np.ndarray:
    z, y, x = _grid(shape)
    return (z * z + y * y + x * x) <= radius_fraction**2


def ellipsoid_mean(volume: Volume, config: CohortConfig | None = None) -> float:
    """Mean intensity inside the smallest ellipsoid the generator can draw."""
    config = config or CohortConfig()
    return float(volume.voxels[ellipsoid_mask(volume.shape, config.ellipsoid_radius[0])].mean())


def texture(shape: tuple[int, int, int], index: float, amplitude: float) -> np.ndarray:
    """Stripes along x whose frequency grows with the exam index."""
    _, _, x = _grid(shape)
    return amplitude * 0.5 * (1.0 + np.cos(math.pi * (1.0 + index) * 2.0 * x))


def gen_volume(
    profile: SubjectProfile, exam: Exam, rng_seed: int, config: CohortConfig | None = None
) -> Volume:
    config = config or CohortConfig()
    if exam not in profile.exams:
        raise CohortError(f"subject {profile.subject_id} has no {exam.value} exam")
    shape = tuple(config.volume_shape)
    h = profile.image_health
    inside = ellipsoid_mask(shape, config.ellipsoid_radius[0] + config.ellipsoid_radius[1] * h)
    intensity = config.ellipsoid_intensity[0] + config.ellipsoid_intensity[1] * h
    voxels = np.where(inside, intensity, texture(shape, profile.texture_index[exam], config.texture_amplitude))
    if config.noise_amplitude > 0:
        rng = derive_rng("volume-noise", rng_seed, profile.subject_id, exam.value)
        voxels = voxels + config.noise_amplitude * rng.normal(size=shape)
    # stored as float32 on disk; round now so reloaded cohorts are bit-identical
    voxels = voxels.astype(np.float32).astype(np.float64)
    return Volume(voxels=voxels, spacing=tuple(config.spacing))


def split_sizes(n: int, fractions) -> list[int]:
    """Largest-remainder apportionment of ``n`` subjects over the split fractions."""
    quotas = [n * f for f in fractions]
    sizes = [math.floor(q) for q in quotas]
    by_remainder = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in by_remainder[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


@dataclass
class Cohort:
    """Subjects, their split assignment, and volumes generated or loaded on demand."""

    profiles: dict[str, SubjectProfile]
    splits: dict[str, list[str]]
    config: CohortConfig
    seed: int
    volume_paths: dict[tuple[str, Exam], str] = field(default_factory=dict)
    _volumes: dict[tuple[str, Exam], Volume] = field(default_factory=dict, repr=False)

    def subjects(self, split: str | None = None) -> list[str]:
        if split is None:
            return [sid for name in SPLITS for sid in self.splits.get(name, [])]
        if split not in SPLITS:
            raise CohortError(f"unknown split {split!r}; expected one of {SPLITS}")
        return list(self.splits.get(split, []))

    def split_of(self, subject_id: str) -> str:
        for name, members in self.splits.items():
            if subject_id in members:
                return name
        raise CohortError(f"unknown subject {subject_id!r}")

    def profile(self, subject_id: str) -> SubjectProfile:
        try:
            return self.profiles[subject_id]
        except KeyError:
            raise CohortError(f"unknown subject {subject_id!r}")

    def volume(self, subject_id: str, exam: Exam) -> Volume:
        key = (subject_id, exam)
        if key not in self._volumes:
            if key in self.volume_paths:
                self._volumes[key] = load_volume(self.volume_paths[key])
            else:
                self._volumes[key] = gen_volume(self.profile(subject_id), exam, self.seed, self.config)
        return self._volumes[key]

    def records(self, subject_id: str) -> list[ClinicalRecord]:
        return clinical_records(self.profile(subject_id))

    def samples(self, split: str | None = None) -> list[PairedSample]:
        return [
            PairedSample(self.volume(sid, record.exam), record)
            for sid in self.subjects(split)
            for record in self.records(sid)
        ]


def gen_cohort(
    n_subjects: int | None = None,
    splits=None,
    rng_seed: int = 0,
    config: CohortConfig | None = None,
) -> Cohort:
    """Generate ``n_subjects`` profiles and assign them to subject-disjoint splits."""
    config = config or CohortConfig()
    n = config.n_subjects if n_subjects is None else n_subjects
    fractions = tuple(config.split_fractions if splits is None else splits)
    if len(fractions) != len(SPLITS):
        raise CohortError(f"expected {len(SPLITS)} split fractions, got {fractions}")
    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise CohortError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    if n < len(SPLITS):
        raise CohortError(f"need at least {len(SPLITS)} subjects to fill the splits, got {n}")

    ids = [f"S{i:03d}" for i in range(n)]
    profiles = {sid: gen_record(rng_seed, sid, config) for sid in ids}
    order = derive_rng("splits", rng_seed).permutation(n)
    assignment, start = {}, 0
    for name, size in zip(SPLITS, split_sizes(n, fractions)):
        assignment[name] = sorted(ids[i] for i in order[start : start + size])
        start += size
    logger.info(
        "Generated cohort of %d subjects (seed %d): %s",
        n, rng_seed, ", ".join(f"{k}={len(v)}" for k, v in assignment.items()),
    )
    return Cohort(profiles=profiles, splits=assignment, config=config, seed=rng_seed)
