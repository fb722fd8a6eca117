"""Cohort persistence: one JSON manifest plus a raw volume file per present exam."""
import json
import logging
from pathlib import Path

from pydantic import ValidationError

from medimp.config import CohortConfig
from medimp.exceptions import CohortError
from medimp.imaging.volume import save_volume
from medimp.schemas import Exam
from medimp.storage import atomic_write_json
from medimp.synthcohort.generator import Cohort, SubjectProfile

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def save_cohort(cohort: Cohort, out_dir: str | Path) -> Path:
    """Write every volume under ``out_dir/volumes`` and the manifest next to them."""
    out_dir = Path(out_dir)
    subjects = []
    for sid in cohort.subjects():
        profile = cohort.profile(sid)
        exams = {}
        for record in cohort.records(sid):
            rel = Path("volumes") / f"{sid}_{record.exam.value}"
            save_volume(out_dir / rel, cohort.volume(sid, record.exam))
            exams[record.exam.value] = {
                "volume": rel.with_suffix(".raw").as_posix(),
                "record": record.model_dump(mode="json"),
            }
        subjects.append(
            {
                "subject_id": sid,
                "split": cohort.split_of(sid),
                "profile": profile.model_dump(mode="json"),
                "exams": exams,
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": cohort.seed,
        "config": cohort.config.model_dump(mode="json"),
        "splits": cohort.splits,
        "subjects": subjects,
    }
    path = atomic_write_json(out_dir / MANIFEST_NAME, manifest)
    logger.info("Saved cohort of %d subjects to %s", len(subjects), path)
    return path


def load_cohort(path: str | Path) -> Cohort:
    """Read a manifest (or the directory holding one); volumes load lazily from disk."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CohortError(f"Cannot read cohort manifest {path}: {e}")
    if manifest.get("version") != MANIFEST_VERSION:
        raise CohortError(f"cohort manifest version {manifest.get('version')} != supported {MANIFEST_VERSION}")
    try:
        config = CohortConfig.model_validate(manifest["config"])
        profiles, volume_paths = {}, {}
        for entry in manifest["subjects"]:
            profile = SubjectProfile.model_validate(entry["profile"])
            profiles[profile.subject_id] = profile
            for exam, files in entry["exams"].items():
                volume_paths[(profile.subject_id, Exam(exam))] = str(path.parent / files["volume"])
        splits = {name: list(ids) for name, ids in manifest["splits"].items()}
    except (KeyError, ValueError, ValidationError) as e:
        raise CohortError(f"Malformed cohort manifest {path}: {e}")
    logger.info("Loaded cohort of %d subjects from %s", len(profiles), path)
    return Cohort(profiles=profiles, splits=splits, config=config, seed=int(manifest["seed"]), volume_paths=volume_paths)
