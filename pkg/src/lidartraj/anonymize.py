"""Image anonymisation: sliding-window mask inference and mask application.

The predictor is pluggable (the shipped ones are test fixtures and an adapter
for externally pre-computed score maps; training detectors is out of scope).
Downstream camera fusion only accepts ``AnonymizedImage`` / ``AnonymizedFrame``
values, so unmasked pixels cannot reach the fused output by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image

FRAME_TIME_TOLERANCE_S = 0.05


@dataclass
class RasterImage:
    """8-bit image, row-major from the top-left; 1 (grey) or 3 (RGB) channels."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8")
        if self.pixels.ndim == 2:
            pass
        elif self.pixels.ndim == 3 and self.pixels.shape[2] in (1, 3):
            if self.pixels.shape[2] == 1:
                self.pixels = self.pixels[:, :, 0]
        else:
            raise ValueError(f"unsupported image shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[2]

    @classmethod
    def load(cls, path: str | Path) -> "RasterImage":
        with Image.open(path) as img:
            mode = "L" if img.mode in ("L", "I;16", "1") else "RGB"
            return cls(np.asarray(img.convert(mode), dtype=np.uint8))

    def save(self, path: str | Path) -> None:
        Image.fromarray(self.pixels).save(path)


@dataclass
class BinaryMask:
    """Per-pixel 0/1 mask; 1 marks pixels to conceal."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not np.isin(self.values, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.values = self.values.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class AnonymizedImage:
    """Marker wrapper: the only image type camera fusion will sample from."""

    image: RasterImage
    mask: BinaryMask


@dataclass
class AnonymizedFrame:
    camera_id: int
    t: float
    image: AnonymizedImage


@runtime_checkable
class MaskPredictor(Protocol):
    """Scores image windows; must be deterministic for identical windows."""

    window_size: int
    stride: int

    def predict(self, window: np.ndarray) -> np.ndarray:
        """Per-pixel mask scores in [0, 1] for one window."""
        ...


@dataclass
class ColorKeyPredictor:
    """Test fixture: scores 1.0 exactly on pixels matching a key colour."""

    color: tuple[int, int, int]
    window_size: int = 32
    stride: int = 16

    def predict(self, window: np.ndarray) -> np.ndarray:
        if window.ndim == 2:
            return (window == self.color[0]).astype(float)
        return np.all(window == np.asarray(self.color, np.uint8), axis=2).astype(float)

    @classmethod
    def from_fixture(cls, path: str | Path) -> "ColorKeyPredictor":
        spec = json.loads(Path(path).read_text())
        return cls(
            color=tuple(int(c) for c in spec["color"]),
            window_size=int(spec.get("window_size", 32)),
            stride=int(spec.get("stride", 16)),
        )


def infer_mask(image: RasterImage, predictor: MaskPredictor, threshold: float = 0.5) -> BinaryMask:
    """Slide the predictor over the image and threshold the mean window scores.

    Windows are placed every ``stride`` pixels; windows that would overrun an
    edge are clamped inside, so every pixel is covered at least once.  Where
    windows overlap, scores are averaged before thresholding.
    """
    h, w = image.height, image.width
    win = min(predictor.window_size, h, w)
    stride = max(1, predictor.stride)

    def _starts(extent: int) -> np.ndarray:
        if extent <= win:
            return np.array([0])
        starts = np.arange(0, extent - win + 1, stride)
        if starts[-1] != extent - win:
            starts = np.append(starts, extent - win)
        return starts

    score_sum = np.zeros((h, w))
    hits = np.zeros((h, w))
    for y0 in _starts(h):
        for x0 in _starts(w):
            window = image.pixels[y0:y0 + win, x0:x0 + win]
            scores = np.asarray(predictor.predict(window), dtype=float)
            if scores.shape != window.shape[:2]:
                raise ValueError(
                    f"predictor returned shape {scores.shape} for window {window.shape[:2]}"
                )
            score_sum[y0:y0 + win, x0:x0 + win] += scores
            hits[y0:y0 + win, x0:x0 + win] += 1.0
    mean = score_sum / hits
    return BinaryMask((mean > threshold).astype(np.uint8))


def apply_mask(image: RasterImage, mask: BinaryMask) -> AnonymizedImage:
    """Zero out masked pixels: ``out = in * (1 - mask)``.  Idempotent."""
    if mask.shape != (image.height, image.width):
        raise ValueError(
            f"mask shape {mask.shape} does not match image {(image.height, image.width)}"
        )
    keep = (1 - mask.values).astype(np.uint8)
    if image.channels == 1:
        out = image.pixels * keep
    else:
        out = image.pixels * keep[:, :, None]
    return AnonymizedImage(RasterImage(out), mask)


def load_score_map(path: str | Path, shape: tuple[int, int]) -> np.ndarray:
    """External predictor output: one grey raster per frame, 0..255 -> [0, 1]."""
    raster = RasterImage.load(path)
    if raster.channels != 1:
        raise ValueError(f"score map {path} must be single-channel")
    if (raster.height, raster.width) != shape:
        raise ValueError(f"score map {path} shape {(raster.height, raster.width)} != {shape}")
    return raster.pixels.astype(float) / 255.0


# ---------------------------------------------------------------------------
# frame manifests


@dataclass
class FrameEntry:
    camera_id: int
    t: float
    path: str


@dataclass
class FrameManifest:
    frames: list[FrameEntry] = field(default_factory=list)
    anonymized: bool = False

    def for_camera(self, camera_id: int) -> list[FrameEntry]:
        return sorted((f for f in self.frames if f.camera_id == camera_id), key=lambda f: f.t)


def load_manifest(path: str | Path) -> FrameManifest:
    data = json.loads(Path(path).read_text())
    frames = [FrameEntry(int(f["camera_id"]), float(f["t"]), str(f["path"]))
              for f in data["frames"]]
    return FrameManifest(frames=frames, anonymized=bool(data.get("anonymized", False)))


def save_manifest(manifest: FrameManifest, path: str | Path) -> None:
    data = {
        "anonymized": manifest.anonymized,
        "frames": [
            {"camera_id": f.camera_id, "t": f.t, "path": f.path} for f in manifest.frames
        ],
    }
    Path(path).write_text(json.dumps(data, indent=2) + "\n")
