"""Grid data types shared by every confmaplib module

All grids are numpy arrays in row-major order with x varying fastest:
2D grids have shape (H, W), volumes (D, H, W). Spacing tuples are given in
axis order x, y(, z), in millimetres. Row index r is the beam (depth)
direction and maps to normalized depth l = r / (H - 1).
"""

from typing import Any, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .exceptions import InputError


def _frozen(arr: np.ndarray) -> np.ndarray:
    """Return arr marked read-only so models stay immutable"""
    arr.setflags(write=False)
    return arr


def _check_spacing(spacing: Sequence[float]) -> Tuple[float, ...]:
    spacing = tuple(float(s) for s in spacing)
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        msg = f'spacing components must be > 0, got {spacing}'
        raise ValueError(msg)
    return spacing


def _check_unit_range(data: np.ndarray, what: str) -> None:
    if data.size and not np.all(np.isfinite(data)):
        msg = f'{what} contains non-finite values'
        raise ValueError(msg)
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        msg = f'{what} values must lie in [0, 1]'
        raise ValueError(msg)


def depth_coordinates(height: int) -> np.ndarray:
    """Normalized depth l(r) = r / (H - 1) for every row

    A single-row grid has depth 0.
    """
    if height < 2:
        return np.zeros(height, dtype=np.float64)
    return np.arange(height, dtype=np.float64) / (height - 1)


class Image2D(BaseModel):
    """A 2D B-mode slice with intensities in [0, 1]

    Attributes
    ----------
    data : numpy.ndarray
        float32 array of shape (H, W).
    spacing : Tuple[float, float]
        (sx, sy) in mm per pixel.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    spacing: Tuple[float, float] = (1.0, 1.0)

    @field_validator('data', mode='before')
    @classmethod
    def _coerce_data(cls, value: Any) -> np.ndarray:
        arr = np.array(value, dtype=np.float32)
        if arr.ndim != 2 or arr.size == 0:
            msg = f'Image2D data must be a non-empty 2D grid, got shape {arr.shape}'
            raise ValueError(msg)
        _check_unit_range(arr, 'Image2D')
        return _frozen(arr)

    @field_validator('spacing')
    @classmethod
    def _validate_spacing(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        return _check_spacing(value)

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    def depth(self) -> np.ndarray:
        """Normalized depth of each row"""
        return depth_coordinates(self.height)


class Volume3D(BaseModel):
    """A stack of D slices of size H x W

    Attributes
    ----------
    data : numpy.ndarray
        float32 array of shape (D, H, W).
    spacing : Tuple[float, float, float]
        (sx, sy, sz) in mm.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @field_validator('data', mode='before')
    @classmethod
    def _coerce_data(cls, value: Any) -> np.ndarray:
        arr = np.array(value, dtype=np.float32)
        if arr.ndim != 3 or arr.size == 0:
            msg = f'Volume3D data must be a non-empty 3D grid, got shape {arr.shape}'
            raise ValueError(msg)
        _check_unit_range(arr, 'Volume3D')
        return _frozen(arr)

    @field_validator('spacing')
    @classmethod
    def _validate_spacing(
        cls, value: Tuple[float, float, float]
    ) -> Tuple[float, float, float]:
        return _check_spacing(value)

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def depth(self) -> int:
        return int(self.data.shape[0])

    def slice(self, z: int) -> Image2D:
        """Slice z as an Image2D"""
        if not 0 <= z < self.depth:
            msg = f'slice index {z} out of range for depth {self.depth}'
            raise InputError(msg)
        return Image2D(data=self.data[z], spacing=self.spacing[:2])

    @classmethod
    def from_slices(
        cls,
        slices: Sequence[np.ndarray | Image2D],
        spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    ) -> 'Volume3D':
        """Stack equally sized 2D grids along z"""
        if not slices:
            msg = 'at least one slice is required'
            raise InputError(msg)
        arrays = [s.data if isinstance(s, Image2D) else np.asarray(s) for s in slices]
        if len({a.shape for a in arrays}) != 1:
            msg = 'all slices must have the same shape'
            raise InputError(msg)
        return cls(data=np.stack(arrays), spacing=spacing)


class LabelMap(BaseModel):
    """Integer class labels on a 2D (H, W) or 3D (D, H, W) grid

    Attributes
    ----------
    data : numpy.ndarray
        int64 class ids in {0 .. num_classes - 1}.
    num_classes : int
        C >= 2.
    spacing : Tuple[float, ...]
        One entry per spatial axis, in x, y(, z) order.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    num_classes: int
    spacing: Tuple[float, ...] = ()

    @field_validator('data', mode='before')
    @classmethod
    def _coerce_data(cls, value: Any) -> np.ndarray:
        arr = np.asarray(value)
        if arr.ndim not in (2, 3) or arr.size == 0:
            msg = f'LabelMap data must be a non-empty 2D or 3D grid, got shape {arr.shape}'
            raise ValueError(msg)
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                msg = 'LabelMap data must contain integer class ids'
                raise ValueError(msg)
        return _frozen(arr.astype(np.int64))

    @model_validator(mode='after')
    def _check_labels(self) -> 'LabelMap':
        if self.num_classes < 2:
            msg = f'num_classes must be >= 2, got {self.num_classes}'
            raise ValueError(msg)
        if self.data.min() < 0 or self.data.max() >= self.num_classes:
            msg = f'label ids must lie in [0, {self.num_classes - 1}]'
            raise ValueError(msg)
        if not self.spacing:
            object.__setattr__(self, 'spacing', (1.0,) * self.data.ndim)
        elif len(self.spacing) != self.data.ndim:
            msg = f'spacing needs {self.data.ndim} components, got {len(self.spacing)}'
            raise ValueError(msg)
        else:
            object.__setattr__(self, 'spacing', _check_spacing(self.spacing))
        return self

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)


class ProbMap(BaseModel):
    """Per-voxel class probabilities, channels last

    Attributes
    ----------
    data : numpy.ndarray
        float32 array of shape spatial + (C,), values in [0, 1].
    normalized : bool
        When True every voxel sums to 1 within 1e-5.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    normalized: bool = True

    @field_validator('data', mode='before')
    @classmethod
    def _coerce_data(cls, value: Any) -> np.ndarray:
        arr = np.array(value, dtype=np.float32)
        if arr.ndim < 2 or arr.shape[-1] < 2:
            msg = f'ProbMap needs spatial dims plus >= 2 channels, got shape {arr.shape}'
            raise ValueError(msg)
        _check_unit_range(arr, 'ProbMap')
        return _frozen(arr)

    @model_validator(mode='after')
    def _check_normalized(self) -> 'ProbMap':
        if self.normalized:
            sums = self.data.sum(axis=-1, dtype=np.float64)
            if np.any(np.abs(sums - 1.0) > 1e-5):
                msg = 'ProbMap flagged normalized but channel sums deviate from 1'
                raise ValueError(msg)
        return self

    @property
    def channels(self) -> int:
        return int(self.data.shape[-1])

    @property
    def spatial_shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape[:-1])


def normalize_intensities(
    raw: np.ndarray,
    max_value: int,
    spacing: Tuple[float, float] = (1.0, 1.0)
) -> Image2D:
    """Scale an integer grid to [0, 1] by its maximum representable value

    Parameters
    ----------
    raw : numpy.ndarray
        Integer samples of shape (H, W), e.g. decoded PGM data.
    max_value : int
        The format's maximum value (255 for 8-bit, 65535 for 16-bit).
    spacing : Tuple[float, float]
        Pixel spacing (sx, sy) in mm.

    Returns
    -------
    Image2D
        raw / max_value, exactly 1.0 where raw == max_value.

    Raises
    ------
    InputError
        If max_value <= 0 or a sample is negative or above max_value.
    """
    if max_value <= 0:
        msg = f'max_value must be > 0, got {max_value}'
        raise InputError(msg)
    raw = np.asarray(raw)
    if raw.size and raw.max() > max_value:
        msg = f'raw value {raw.max()} exceeds max_value {max_value}'
        raise InputError(msg)
    if raw.size and raw.min() < 0:
        msg = f'raw values must be >= 0, got {raw.min()}'
        raise InputError(msg)
    scaled = raw.astype(np.float64) / float(max_value)
    return Image2D(data=scaled, spacing=spacing)


def one_hot_encode(labels: LabelMap) -> ProbMap:
    """One-hot encode labels into C channels (channels last)"""
    eye = np.eye(labels.num_classes, dtype=np.float32)
    return ProbMap(data=eye[labels.data], normalized=True)


def argmax_labels(probs: ProbMap | np.ndarray) -> LabelMap:
    """Per-voxel argmax over channels, ties resolved to the lowest class id"""
    data = probs.data if isinstance(probs, ProbMap) else np.asarray(probs)
    return LabelMap(data=np.argmax(data, axis=-1), num_classes=data.shape[-1])
