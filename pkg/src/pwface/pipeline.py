"""Inference-time transforms: anonymize, deanonymize and whole-image paste-back.

Privacy contract: nothing in this module writes a pre-transform image or a
password anywhere. Only transformed outputs are returned or saved, and
passwords never reach a log message.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from PIL import Image

from .data import image_to_tensor, list_images, tensor_to_image
from .networks import ModelBundle, generator_forward
from .passwords import Password, PasswordError, password_tensor

log = logging.getLogger(__name__)

BLEND_MARGIN = 0.08
MODES = ("anonymize", "deanonymize")


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    keypoints: tuple[tuple[float, float], ...] = field(default=())
    confidence: float = 1.0


class Detector(Protocol):
    def detect(self, image: np.ndarray) -> list[Detection]: ...


class PassThroughDetector:
    """Treats the whole image as one pre-cropped face."""

    def detect(self, image: np.ndarray) -> list[Detection]:
        h, w = image.shape[:2]
        kp = ((0.35 * w, 0.4 * h), (0.65 * w, 0.4 * h), (0.5 * w, 0.55 * h), (0.38 * w, 0.72 * h), (0.62 * w, 0.72 * h))
        return [Detection((0, 0, w, h), kp, 1.0)]


def check_detection(det: Detection, height: int, width: int) -> None:
    x0, y0, x1, y1 = det.box
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise PipelineError(f"detection box {det.box} outside a {width}x{height} image")
    for x, y in det.keypoints:
        if not (x0 <= x <= x1 and y0 <= y <= y1):
            raise PipelineError(f"keypoint ({x}, {y}) outside its box {det.box}")


# -------------------------------------------------------------- face crops


def _check_inputs(bundle: ModelBundle, image: torch.Tensor, password: Password) -> torch.Tensor:
    if image.dim() == 3:
        image = image[None]
    size = bundle.image_size
    if image.dim() != 4 or image.shape[1] != 3 or image.shape[-2:] != (size, size):
        raise PipelineError(f"expected 3x{size}x{size} images, got {tuple(image.shape)}")
    if password.n_bits != bundle.password_bits:
        raise PasswordError(f"password has {password.n_bits} bits, model expects {bundle.password_bits}")
    return image


def transform(bundle: ModelBundle, image: torch.Tensor, password: Password) -> torch.Tensor:
    """T_p applied to one face (3xHxW) or a batch (Bx3xHxW) with one password."""
    batch = _check_inputs(bundle, image, password)
    codes = password_tensor([password] * batch.shape[0])
    out = generator_forward(bundle.generator, batch, codes)
    return out[0] if image.dim() == 3 else out


def anonymize(bundle: ModelBundle, image: torch.Tensor, password: Password) -> torch.Tensor:
    return transform(bundle, image, password)


def deanonymize(bundle: ModelBundle, anonymized: torch.Tensor, password: Password) -> torch.Tensor:
    """Recovery when ``password`` is the inverse of the anonymizing one, a decoy
    otherwise. The two cases are indistinguishable here by design."""
    return transform(bundle, anonymized, password)


# -------------------------------------------------------------- whole images


def square_box(box: tuple[int, int, int, int], height: int, width: int) -> tuple[int, int, int, int]:
    """Smallest square around ``box`` (capped by the image), shifted to lie inside it."""
    x0, y0, x1, y1 = box
    side = min(max(x1 - x0, y1 - y0), height, width)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    sx = int(round(cx - side / 2))
    sy = int(round(cy - side / 2))
    sx = min(max(sx, 0), width - side)
    sy = min(max(sy, 0), height - side)
    return sx, sy, sx + side, sy + side


def feather_mask(box: tuple[int, int, int, int], height: int, width: int, margin: float = BLEND_MARGIN) -> np.ndarray:
    """Alpha in [0, 1] over the square crop, ramping linearly to 0 across a band of
    ``margin`` x side pixels. Edges lying on the image border are not feathered."""
    x0, y0, x1, y1 = box
    side = x1 - x0
    band = int(math.ceil(margin * side))
    idx = np.arange(side, dtype=np.float64)
    if band == 0:
        ramp_lo = ramp_hi = np.ones(side)
    else:
        ramp_lo = np.clip((idx + 0.5) / band, 0.0, 1.0)
        ramp_hi = ramp_lo[::-1]
    ones = np.ones(side)
    ax = (ones if x0 == 0 else ramp_lo) * (ones if x1 == width else ramp_hi)
    ay = (ones if y0 == 0 else ramp_lo) * (ones if y1 == height else ramp_hi)
    return ay[:, None] * ax[None, :]


def process_whole_image(
    bundle: ModelBundle,
    image: np.ndarray,
    password: Password,
    detector: Detector | None = None,
    margin: float = BLEND_MARGIN,
) -> np.ndarray:
    """Transform every detected face in an HxWx3 uint8 image and blend it back.
    Pixels outside the square crops are returned untouched."""
    detector = detector or PassThroughDetector()
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise PipelineError("expected an HxWx3 uint8 image")
    h, w = image.shape[:2]
    detections = detector.detect(image)
    if not detections:
        log.warning("no faces detected; image returned unchanged")
        return image.copy()
    out = image.copy()
    size = bundle.image_size
    for det in detections:
        check_detection(det, h, w)
        box = square_box(det.box, h, w)
        x0, y0, x1, y1 = box
        side = x1 - x0
        crop = Image.fromarray(out[y0:y1, x0:x1])
        face = transform(bundle, image_to_tensor(crop, size), password)
        back = tensor_to_image(face)
        if side != size:
            back = back.resize((side, side), Image.BILINEAR)
        alpha = feather_mask(box, h, w, margin)[..., None]
        region = out[y0:y1, x0:x1].astype(np.float64)
        blended = alpha * np.asarray(back, dtype=np.float64) + (1.0 - alpha) * region
        out[y0:y1, x0:x1] = np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)
    return out


def transform_paths(
    bundle: ModelBundle,
    inputs: Sequence[Path] | Path,
    out_dir,
    password: Password,
    detector: Detector | None = None,
    margin: float = BLEND_MARGIN,
) -> list[Path]:
    """Read image files, transform them and write only the results into ``out_dir``."""
    if isinstance(inputs, (str, Path)):
        inputs = list_images(inputs)
    out_dir = Path(out_dir)
    written = []
    for path in inputs:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"))
        result = process_whole_image(bundle, arr, password, detector, margin)
        target = out_dir / (Path(path).stem + ".png")
        if target.resolve() == Path(path).resolve():
            raise PipelineError(f"refusing to overwrite input {path}")
        out_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(result).save(target)
        written.append(target)
    log.info("wrote %d transformed image(s) to %s", len(written), out_dir)
    return written
