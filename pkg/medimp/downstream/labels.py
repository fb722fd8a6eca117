"""Binary creatinine targets at fixed post-transplant horizons."""
from typing import Iterable, Optional, Sequence

import numpy as np

from medimp.synthcohort import Cohort

DAYS_PER_YEAR = 365


def build_creat_label(
    series: Iterable[tuple[float, float]],
    pred_date: float,
    window: float = 90.0,
    threshold: float = 110.0,
) -> Optional[int]:
    """1 if the mean creatinine within ``window`` days of ``pred_date`` reaches ``threshold``.

    Returns None when no sample falls inside the window.
    """
    if window <= 0:
        raise ValueError(f"window must be positive, got {window}")
    values = [value for day, value in series if abs(day - pred_date) <= window]
    if not values:
        return None
    return int(float(np.mean(values)) >= threshold)


def horizon_labels(
    cohort: Cohort, subjects: Sequence[str], years: int, window: float = 90.0, threshold: float = 110.0
) -> dict[str, int]:
    """Labels of the subjects that have one at ``years``; the rest are left out."""
    labels = {}
    for sid in subjects:
        profile = cohort.profile(sid)
        label = build_creat_label(
            zip(profile.creat_days, profile.creat_values), years * DAYS_PER_YEAR, window, threshold
        )
        if label is not None:
            labels[sid] = label
    return labels
