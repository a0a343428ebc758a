"""Synthetic B-mode phantoms with depth-dependent label noise

A phantom is a background with elliptical organs, an optional horizontal
band that shadows the columns below it, multiplicative
speckle, and a noisy copy of the labels whose boundary flips grow more
likely with depth.
"""

from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from .grids import Image2D, LabelMap, depth_coordinates

BOUNDARY_BAND_PX = 2.0


class Ellipse(BaseModel):
    """An organ: axis-aligned ellipse with constant intensity and class id"""
    model_config = ConfigDict(frozen=True)

    center: Tuple[float, float]
    axes: Tuple[float, float]
    intensity: float = Field(ge=0.0, le=1.0)
    label: int = Field(default=1, ge=1)


class Stripe(BaseModel):
    """A band spanning [columns[0], columns[1]) at rows [row, row + thickness)

    Pixels below it in those columns are multiplied by shadow_factor. A
    bright band is a reflector; a dark one an attenuating layer.
    """
    model_config = ConfigDict(frozen=True)

    row: int = Field(ge=0)
    thickness: int = Field(default=3, ge=1)
    intensity: float = Field(default=0.95, ge=0.0, le=1.0)
    columns: Tuple[int, int] = (16, 48)
    shadow_factor: float = Field(default=0.4, ge=0.0, le=1.0)


def _default_ellipses() -> List[Ellipse]:
    return [Ellipse(center=(44.0, 42.0), axes=(12.0, 10.0), intensity=0.7, label=1)]


def _default_stripe() -> Stripe:
    # dark band left of the organ; the organ lies outside its shadow
    return Stripe(row=20, intensity=0.05, columns=(4, 28))


class PhantomSpec(BaseModel):
    """Everything needed to generate one phantom deterministically

    Attributes
    ----------
    width, height : int
        Image size in pixels.
    background : float
        Background intensity.
    ellipses : List[Ellipse]
        Organs, painted in order.
    stripe : Stripe (optional)
        Shadow-casting reflector.
    speckle_sigma : float
        Std of the multiplicative Gaussian speckle.
    p0, p1 : float
        Boundary flip probability is p0 + p1 * l at normalized depth l.
    seed : int
    """
    model_config = ConfigDict(frozen=True)

    width: int = Field(default=64, ge=3)
    height: int = Field(default=64, ge=3)
    background: float = Field(default=0.3, ge=0.0, le=1.0)
    ellipses: List[Ellipse] = Field(default_factory=_default_ellipses)
    stripe: Optional[Stripe] = Field(default_factory=_default_stripe)
    speckle_sigma: float = Field(default=0.15, ge=0.0)
    p0: float = Field(default=0.02, ge=0.0, le=1.0)
    p1: float = Field(default=0.25, ge=0.0, le=1.0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode='after')
    def _check_noise(self) -> 'PhantomSpec':
        if self.p0 + self.p1 > 0.5:
            msg = f'p0 + p1 must be <= 0.5, got {self.p0 + self.p1}'
            raise ValueError(msg)
        return self

    @property
    def num_classes(self) -> int:
        return max((e.label for e in self.ellipses), default=1) + 1


def _nearest_other_label(labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distance to, and label of, the nearest pixel with a different label"""
    dist = np.full(labels.shape, np.inf)
    other = labels.copy()
    for k in np.unique(labels):
        inside = labels == k
        if inside.all():
            continue
        d, (ri, ci) = ndimage.distance_transform_edt(inside, return_indices=True)
        dist[inside] = d[inside]
        other[inside] = labels[ri[inside], ci[inside]]
    return dist, other


def generate_phantom(spec: PhantomSpec) -> Tuple[Image2D, LabelMap, LabelMap]:
    """Render the image, its clean labels and depth-noisy labels

    Noisy labels differ from clean ones only within 2 px of a class
    boundary, where a pixel takes the label of its nearest other-class
    neighbour with probability p0 + p1 * l.

    Returns
    -------
    Tuple[Image2D, LabelMap, LabelMap]
        image, clean labels, noisy labels.
    """
    rng = np.random.default_rng(spec.seed)
    H, W = spec.height, spec.width
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)

    image = np.full((H, W), spec.background, dtype=np.float64)
    labels = np.zeros((H, W), dtype=np.int64)
    for ellipse in spec.ellipses:
        cx, cy = ellipse.center
        ax, ay = ellipse.axes
        inside = ((cols - cx) / ax) ** 2 + ((rows - cy) / ay) ** 2 <= 1.0
        image[inside] = ellipse.intensity
        labels[inside] = ellipse.label

    stripe = spec.stripe
    if stripe is not None:
        c0, c1 = max(stripe.columns[0], 0), min(stripe.columns[1], W)
        r1 = min(stripe.row + stripe.thickness, H)
        image[stripe.row:r1, c0:c1] = stripe.intensity
        image[r1:, c0:c1] *= stripe.shadow_factor

    speckle = 1.0 + spec.speckle_sigma * rng.standard_normal((H, W))
    image = np.clip(image * speckle, 0.0, 1.0)

    depth = depth_coordinates(H)[:, None]
    flip_prob = spec.p0 + spec.p1 * depth
    draws = rng.random((H, W))
    dist, other = _nearest_other_label(labels)
    flip = (dist <= BOUNDARY_BAND_PX) & (draws < flip_prob)
    noisy = np.where(flip, other, labels)

    n_classes = spec.num_classes
    return (
        Image2D(data=image),
        LabelMap(data=labels, num_classes=n_classes),
        LabelMap(data=noisy, num_classes=n_classes),
    )
