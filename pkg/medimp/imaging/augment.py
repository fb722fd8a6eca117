"""Stochastic image augmentation applied to normalized volumes during pretraining.

Each step fires independently with probability 0.5, in a fixed order: flip,
affine resample, Gaussian blur, Gaussian noise, contrast.
"""
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from medimp.exceptions import VolumeError
from medimp.imaging.volume import Volume
from medimp.seeds import derive_rng

STEP_PROBABILITY = 0.5
MAX_ROTATION_DEG = 10.0
SCALE_RANGE = (0.9, 1.1)
MAX_TRANSLATION = 0.05  # fraction of the extent along each axis
MAX_BLUR_SIGMA = 0.5
MAX_NOISE_SIGMA = 0.05
MAX_LOG_GAMMA = 0.3


class AugmentationParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    do_flip: bool = False
    do_affine: bool = False
    do_blur: bool = False
    do_noise: bool = False
    do_contrast: bool = False
    rotation_deg: float = Field(0.0, ge=-MAX_ROTATION_DEG, le=MAX_ROTATION_DEG)
    scale: float = Field(1.0, ge=SCALE_RANGE[0], le=SCALE_RANGE[1])
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    blur_sigma: float = Field(0.0, ge=0.0, le=MAX_BLUR_SIGMA)
    noise_sigma: float = Field(0.0, ge=0.0, le=MAX_NOISE_SIGMA)
    log_gamma: float = Field(0.0, ge=-MAX_LOG_GAMMA, le=MAX_LOG_GAMMA)
    noise_seed: int = 0


def sample_augmentation_params(rng_seed: int, sample_id: str) -> AugmentationParams:
    rng = derive_rng("augment", rng_seed, sample_id)
    flags = rng.random(5) < STEP_PROBABILITY
    return AugmentationParams(
        do_flip=bool(flags[0]),
        do_affine=bool(flags[1]),
        do_blur=bool(flags[2]),
        do_noise=bool(flags[3]),
        do_contrast=bool(flags[4]),
        rotation_deg=float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)),
        scale=float(rng.uniform(*SCALE_RANGE)),
        translation=tuple(float(t) for t in rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION, size=3)),
        blur_sigma=float(rng.uniform(0.0, MAX_BLUR_SIGMA)),
        noise_sigma=float(rng.uniform(0.0, MAX_NOISE_SIGMA)),
        log_gamma=float(rng.uniform(-MAX_LOG_GAMMA, MAX_LOG_GAMMA)),
        noise_seed=int(rng.integers(0, 2**63 - 1)),
    )


def flip_horizontal(voxels: np.ndarray) -> np.ndarray:
    return voxels[..., ::-1].copy()


def affine_resample(voxels: np.ndarray, rotation_deg: float, scale: float, translation) -> np.ndarray:
    """Rotate in the axial (y, x) plane and scale about the centre, then shift; trilinear, zero fill."""
    theta = math.radians(rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    forward = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]) * scale
    inverse = np.linalg.inv(forward)
    centre = (np.array(voxels.shape, dtype=np.float64) - 1.0) / 2.0
    shift = np.asarray(translation, dtype=np.float64) * np.array(voxels.shape)
    offset = centre - inverse @ (centre + shift)
    return ndimage.affine_transform(voxels, inverse, offset=offset, order=1, mode="constant", cval=0.0)


def gaussian_blur(voxels: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return voxels.copy()
    return ndimage.gaussian_filter(voxels, sigma=sigma, mode="reflect", radius=math.ceil(3 * sigma))


def apply_augmentation(v: Volume, p: AugmentationParams) -> Volume:
    if not v.normalized:
        raise VolumeError("augmentation expects a normalized volume")
    x = v.voxels.astype(np.float64, copy=True)
    if p.do_flip:
        x = flip_horizontal(x)
    if p.do_affine:
        x = affine_resample(x, p.rotation_deg, p.scale, p.translation)
    if p.do_blur:
        x = gaussian_blur(x, p.blur_sigma)
    if p.do_noise:
        x = x + np.random.default_rng(p.noise_seed).normal(0.0, p.noise_sigma, size=x.shape)
    if p.do_contrast:
        x = np.clip(x, 0.0, 1.0) ** math.exp(p.log_gamma)
    return Volume(voxels=np.clip(x, 0.0, 1.0), spacing=v.spacing, normalized=True)


def augment(v: Volume, rng_seed: int, sample_id: str) -> Volume:
    return apply_augmentation(v, sample_augmentation_params(rng_seed, sample_id))
