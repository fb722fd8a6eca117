from medimp.synthcohort.generator import (
    SPLITS,
    Cohort,
    SubjectProfile,
    clinical_records,
    ellipsoid_mask,
    ellipsoid_mean,
    gen_cohort,
    gen_record,
    gen_volume,
    split_sizes,
)
from medimp.synthcohort.manifest import load_cohort, save_cohort

__all__ = [
    "Cohort",
    "SPLITS",
    "SubjectProfile",
    "clinical_records",
    "ellipsoid_mask",
    "ellipsoid_mean",
    "gen_cohort",
    "gen_record",
    "gen_volume",
    "load_cohort",
    "save_cohort",
    "split_sizes",
]
