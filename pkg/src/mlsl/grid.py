"""Dense grid containers and geometry.

Images are ``(H, W, 3)`` float arrays in [0, 1], label maps are ``(H, W)``
integer arrays holding a class index or :data:`IGNORE`, and probability
volumes are ``(H, W, C)`` float arrays. Only the accumulator carries state,
so it is the one proper class here.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

#: In-memory marker for unlabeled pixels. Files use 255 instead (see bench).
IGNORE = -1


class GeometryError(ValueError):
    pass


class InvalidLabelError(ValueError):
    pass


class Rect(NamedTuple):
    top: int
    left: int
    h: int
    w: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.h), slice(self.left, self.left + self.w)

    def translate(self, outer: "Rect") -> "Rect":
        """Express a rect given relative to ``outer`` in ``outer``'s parent frame."""
        return Rect(self.top + outer.top, self.left + outer.left, self.h, self.w)


def check_rect(rect: Rect, height: int, width: int) -> None:
    if rect.h < 1 or rect.w < 1:
        raise GeometryError(f"empty rect {rect}")
    if rect.top < 0 or rect.left < 0 or rect.top + rect.h > height or rect.left + rect.w > width:
        raise GeometryError(f"rect {rect} outside {height}x{width} image")


def crop(image: np.ndarray, rect: Rect) -> np.ndarray:
    check_rect(rect, image.shape[0], image.shape[1])
    rows, cols = rect.slices
    return image[rows, cols].copy()


def check_labels(labels: np.ndarray, num_classes: int) -> None:
    labels = np.asarray(labels)
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InvalidLabelError(
            f"label {int(labels[pos])} at pixel {pos} is not a class in [0, {num_classes})"
        )


def onehot_view(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """One-hot volume of a label map; IGNORE pixels are all-zero."""
    labels = np.asarray(labels)
    check_labels(labels, num_classes)
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float64)
    valid = labels != IGNORE
    out[valid, labels[valid]] = 1.0
    return out


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(probs, axis=-1).astype(np.int64)


@dataclass
class AccumVolume:
    """Running per-pixel class sums and patch-coverage counts."""

    sums: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, height: int, width: int, num_classes: int) -> "AccumVolume":
        return cls(
            np.zeros((height, width, num_classes), dtype=np.float64),
            np.zeros((height, width), dtype=np.int64),
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.sums.shape

    def add(self, rect: Rect, values: np.ndarray) -> None:
        """Add a patch's per-pixel class values at ``rect`` and bump its counts."""
        check_rect(rect, self.sums.shape[0], self.sums.shape[1])
        if values.shape != (rect.h, rect.w, self.sums.shape[2]):
            raise GeometryError(f"values of shape {values.shape} do not fit {rect}")
        rows, cols = rect.slices
        self.sums[rows, cols] += values
        self.counts[rows, cols] += 1

    def merge(self, other: "AccumVolume") -> "AccumVolume":
        if self.sums.shape != other.sums.shape:
            raise GeometryError(f"cannot merge {self.sums.shape} with {other.sums.shape}")
        return AccumVolume(self.sums + other.sums, self.counts + other.counts)


# -- raw volume persistence ------------------------------------------------
# Layout: uint32 LE header length, UTF-8 JSON header, then the row-major
# little-endian payload (channel fastest for HxWxC volumes).

_DTYPES = {"float64": "<f8", "float32": "<f4"}


def write_framed(path: Path | str, header: dict, payload: bytes) -> None:
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)


def read_framed(path: Path | str) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", data[:4])
    header = json.loads(data[4 : 4 + n].decode())
    return header, data[4 + n :]


def save_volume(path: Path | str, volume: np.ndarray, normalized: bool, dtype: str = "float64") -> None:
    if volume.ndim != 3:
        raise GeometryError("volume must be HxWxC")
    h, w, c = volume.shape
    header = {"H": h, "W": w, "C": c, "dtype": dtype, "normalized": bool(normalized)}
    payload = np.ascontiguousarray(volume, dtype=_DTYPES[dtype]).tobytes()
    write_framed(path, header, payload)


def load_volume(path: Path | str) -> tuple[np.ndarray, bool]:
    header, payload = read_framed(path)
    shape = (header["H"], header["W"], header["C"])
    dt = np.dtype(_DTYPES[header["dtype"]])
    if len(payload) != int(np.prod(shape)) * dt.itemsize:
        raise ValueError(f"{path}: payload size does not match header {shape}")
    vol = np.frombuffer(payload, dtype=dt).reshape(shape).astype(np.float64)
    return vol, bool(header["normalized"])
