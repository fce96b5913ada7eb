"""Image I/O, the identity-folder dataset layout, split manifests and a toy face set.

On disk a dataset is ``<root>/<identity>/<image>.png`` with pre-cropped faces.
Split manifests ``<root>/splits/{train,val,test}.txt`` list one identity name per
line; identities, not images, are split 80/10/10.

Pixels map to reals as ``x / 127.5 - 1`` and back with round-half-up and
clamping to [0, 255].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DataError(RuntimeError):
    pass


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / 127.5 - 1.0


def to_pixels(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor((np.asarray(values, dtype=np.float64) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def image_to_tensor(img: Image.Image, size: int | None = None) -> torch.Tensor:
    img = img.convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return torch.from_numpy(to_unit_range(np.asarray(img))).permute(2, 0, 1).contiguous()


def tensor_to_image(t: torch.Tensor) -> Image.Image:
    arr = t.detach().cpu().permute(1, 2, 0).numpy()
    return Image.fromarray(to_pixels(arr), mode="RGB")


def read_image(path, size: int | None = None) -> torch.Tensor:
    with Image.open(path) as img:
        return image_to_tensor(img, size)


def write_image(t: torch.Tensor, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensor_to_image(t).save(path)


def list_images(path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# --------------------------------------------------------------------- dataset


def list_identities(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    return sorted(p.name for p in root.iterdir() if p.is_dir() and p.name != "splits" and list_images(p))


def split_identities(names: Sequence[str], seed: int = 0, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[str]]:
    names = sorted(names)
    order = np.random.default_rng(seed).permutation(len(names))
    n_train = int(round(fractions[0] * len(names)))
    n_val = int(round(fractions[1] * len(names)))
    shuffled = [names[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train : n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val :]),
    }


def write_splits(root, splits: dict[str, list[str]]) -> None:
    d = Path(root) / "splits"
    d.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        (d / f"{name}.txt").write_text("".join(f"{n}\n" for n in splits.get(name, [])))


def read_split(root, split: str) -> list[str]:
    path = Path(root) / "splits" / f"{split}.txt"
    if not path.exists():
        raise DataError(f"missing split manifest {path}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def ensure_splits(root, seed: int = 0) -> None:
    if not (Path(root) / "splits" / "train.txt").exists():
        write_splits(root, split_identities(list_identities(root), seed))


@dataclass
class FaceDataset:
    images: torch.Tensor  # (M, 3, H, W) in [-1, 1]
    labels: torch.Tensor  # (M,) index into ``identities``
    identities: list[str]
    paths: list[Path]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_identities(self) -> int:
        return len(self.identities)

    def subset(self, index) -> "FaceDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        return FaceDataset(self.images[index], self.labels[index], self.identities, [self.paths[i] for i in index.tolist()])

    def batches(self, batch_size: int, generator: torch.Generator, drop_last: bool = True):
        order = torch.randperm(len(self), generator=generator)
        stop = len(order) - (len(order) % batch_size if drop_last else 0)
        for i in range(0, stop, batch_size):
            idx = order[i : i + batch_size]
            yield self.images[idx], self.labels[idx]


def load_identities(root, identities: Sequence[str], size: int) -> FaceDataset:
    root = Path(root)
    images, labels, paths = [], [], []
    for label, name in enumerate(identities):
        folder = root / name
        if not folder.is_dir():
            raise DataError(f"identity folder {folder} missing")
        for p in list_images(folder):
            images.append(read_image(p, size))
            labels.append(label)
            paths.append(p)
    if not images:
        raise DataError(f"no images found under {root}")
    return FaceDataset(torch.stack(images), torch.tensor(labels, dtype=torch.long), list(identities), paths)


def load_split(root, split: str, size: int) -> FaceDataset:
    return load_identities(root, read_split(root, split), size)


def load_dataset(root, size: int) -> FaceDataset:
    """All identities under ``root`` (no split manifest needed)."""
    return load_identities(root, list_identities(root), size)


# ------------------------------------------------------------------ toy faces


@dataclass
class FaceParams:
    skin: np.ndarray
    hair: np.ndarray
    eyes: np.ndarray
    lips: np.ndarray
    face_rx: float
    face_ry: float
    eye_dx: float
    eye_y: float
    eye_r: float
    mouth_w: float
    mouth_y: float
    hair_h: float
    brow: np.ndarray


def random_face_params(rng: np.random.Generator) -> FaceParams:
    return FaceParams(
        skin=rng.uniform(0.25, 0.95, 3),
        hair=rng.uniform(0.0, 1.0, 3),
        eyes=rng.uniform(0.0, 1.0, 3),
        lips=rng.uniform(0.2, 1.0, 3),
        face_rx=rng.uniform(0.24, 0.34),
        face_ry=rng.uniform(0.32, 0.40),
        eye_dx=rng.uniform(0.10, 0.17),
        eye_y=rng.uniform(-0.10, -0.02),
        eye_r=rng.uniform(0.035, 0.065),
        mouth_w=rng.uniform(0.08, 0.18),
        mouth_y=rng.uniform(0.14, 0.22),
        hair_h=rng.uniform(0.05, 0.22),
        brow=rng.uniform(0.0, 1.0, 3),
    )


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, (cells, cells, 3)).astype(np.float32)
    t =torch.from_numpy(coarse).permute(2, 0, 1)[None]
    up = torch.nn.functional.interpolate(t, size=(size, size), mode="bicubic", align_corners=False)
    return up[0].permute(1, 2, 0).numpy()


def render_face(params: FaceParams, rng: np.random.Generator, size: int = 64, background_texture: float = 0.12) -> np.ndarray:
    """One photo of an identity: H x W x 3 in [0, 1] with per-shot pose, light,
    background and texture."""
    ys, xs = np.meshgrid(np.linspace(-0.5, 0.5, size), np.linspace(-0.5, 0.5, size), indexing="ij")
    cx, cy = rng.uniform(-0.04, 0.04, 2)
    x, y = xs - cx, ys - cy
    light = rng.uniform(0.85, 1.15)

    img = np.broadcast_to(rng.uniform(0.0, 1.0, 3), (size, size, 3)).copy()
    img += background_texture * _smooth_noise(rng, size, 4)

    def paint(mask, color):
        img[mask] = color

    face = (x / params.face_rx) ** 2 + (y / params.face_ry) ** 2 <= 1.0
    hair = ((x / (params.face_rx + 0.03)) ** 2 + ((y + 0.02) / (params.face_ry + 0.03)) ** 2 <= 1.0) & (
        y < -params.face_ry + params.hair_h + 0.02
    )
    paint(face, params.skin)
    img[face] += 0.06 * _smooth_noise(rng, size, 16)[face]
    paint(hair, params.hair)
    for side in (-1, 1):
        ex = side * params.eye_dx
        eye = (x - ex) ** 2 + (y - params.eye_y) ** 2 <= params.eye_r**2
        pupil = (x - ex) ** 2 + (y - params.eye_y) ** 2 <= (0.45 * params.eye_r) ** 2
        brow = (np.abs(x - ex) <= params.eye_r * 1.3) & (np.abs(y - (params.eye_y - params.eye_r - 0.03)) <= 0.012)
        paint(eye, np.array([0.95, 0.95, 0.95]))
        paint(pupil, params.eyes)
        paint(brow, params.brow)
    mouth = (np.abs(x) <= params.mouth_w / 2) & (np.abs(y - params.mouth_y) <= 0.018)
    paint(mouth, params.lips)
    nose = (np.abs(x) <= 0.015) & (y > params.eye_y + 0.03) & (y < params.mouth_y - 0.05)
    img[nose] *= 0.8

    img = img * light + rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_toy_dataset(
    root,
    n_identities: int = 30,
    images_per_identity: int = 12,
    size: int = 64,
    seed: int = 0,
) -> dict[str, list[str]]:
    """Write a procedurally rendered identity-labelled face set plus split manifests."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(n_identities):
        name = f"id{i:04d}"
        names.append(name)
        params = random_face_params(rng)
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        for j in range(images_per_identity):
            arr = render_face(params, rng, size)
            Image.fromarray(np.clip(np.floor(arr * 255 + 0.5), 0, 255).astype(np.uint8)).save(folder / f"{j:03d}.png")
    splits = split_identities(names, seed)
    write_splits(root, splits)
    log.info("wrote %d identities x %d images to %s", n_identities, images_per_identity, root)
    return splits
