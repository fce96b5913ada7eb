"""Image-processing anonymizers used for comparison, and learned deanonymizers for them.

Each baseline maps a batch (B, 3, H, W) in [-1, 1] to the same shape and range.
A deanonymizer for a baseline is the password-free generator trained with the
reconstruction and LSGAN losses only.
"""

from __future__ import annotations

import logging
import random
from dataclasses import asdict, replace
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from skimage.filters import sobel
from skimage.segmentation import slic

from . import losses as L
from .data import DataError, FaceDataset
from .networks import DiscriminatorSet, Generator, ModelBundle, generator_forward
from .trainer import ImageBuffer, NumericError, TrainConfig

log = logging.getLogger(__name__)

KINDS = ("superpixel", "edge", "blur", "noise", "masked")

SUPERPIXEL_SEGMENTS = 64
EDGE_THRESHOLD = 0.1
BLUR_SIZE = 8
NOISE_VARIANCE = 0.5
MASK_FRACTION = 0.6
MASK_FILL = 0.0


class BaselineError(ValueError):
    pass


def _check(images: torch.Tensor) -> torch.Tensor:
    if images.dim() == 3:
        images = images[None]
    if images.dim() != 4 or images.shape[1] != 3:
        raise BaselineError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
    return images


def superpixel_segments(image: torch.Tensor, n_segments: int = SUPERPIXEL_SEGMENTS) -> np.ndarray:
    arr = image.permute(1, 2, 0).double().numpy()
    return slic((arr + 1) / 2, n_segments=n_segments, compactness=10, start_label=0, channel_axis=-1)


def superpixel(images: torch.Tensor, n_segments: int = SUPERPIXEL_SEGMENTS) -> torch.Tensor:
    """Each SLIC segment replaced by its mean colour."""
    out = []
    for img in _check(images):
        arr = img.permute(1, 2, 0).double().numpy()
        seg = superpixel_segments(img, n_segments)
        flat = arr.reshape(-1, 3)
        ids = seg.reshape(-1)
        sums = np.zeros((ids.max() + 1, 3))
        np.add.at(sums, ids, flat)
        means = sums / np.bincount(ids)[:, None]
        out.append(torch.from_numpy(means[ids].reshape(arr.shape)).permute(2, 0, 1))
    return torch.stack(out).to(images.dtype)


def edge(images: torch.Tensor, threshold: float = EDGE_THRESHOLD) -> torch.Tensor:
    """Binary Sobel edge map: white edges on black, replicated to three channels."""
    out = []
    for img in _check(images):
        gray = ((img.double().numpy() + 1) / 2).mean(0)
        mag = sobel(gray)
        binary = np.where(mag > threshold, 1.0, -1.0)
        out.append(torch.from_numpy(binary)[None].expand(3, -1, -1))
    return torch.stack(out).to(images.dtype)


def blur_small(images: torch.Tensor, size: int = BLUR_SIZE) -> torch.Tensor:
    return F.interpolate(_check(images), size=(size, size), mode="area")


def blur(images: torch.Tensor, size: int = BLUR_SIZE) -> torch.Tensor:
    """Area-downsample to ``size`` x ``size`` and bilinearly upsample back."""
    images = _check(images)
    small = blur_small(images, size)
    return F.interpolate(small, size=images.shape[-2:], mode="bilinear", align_corners=False).clamp(-1, 1)


def noise_field(shape, seed: int = 0, variance: float = NOISE_VARIANCE) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(tuple(shape), generator=gen, dtype=torch.float64) * variance**0.5


def noise(images: torch.Tensor, seed: int = 0, variance: float = NOISE_VARIANCE) -> torch.Tensor:
    """Additive Gaussian noise of the given variance, then clamped to [-1, 1]."""
    images = _check(images)
    return (images.double() + noise_field(images.shape, seed, variance)).clamp(-1, 1).to(images.dtype)


def mask_region(height: int, width: int, fraction: float = MASK_FRACTION) -> tuple[slice, slice]:
    mh, mw = int(round(fraction * height)), int(round(fraction * width))
    y0, x0 = (height - mh) // 2, (width - mw) // 2
    return slice(y0, y0 + mh), slice(x0, x0 + mw)


def masked(images: torch.Tensor, fraction: float = MASK_FRACTION, fill: float = MASK_FILL) -> torch.Tensor:
    images = _check(images).clone()
    ys, xs = mask_region(*images.shape[-2:], fraction)
    images[..., ys, xs] = fill
    return images


def apply_baseline(kind: str, images: torch.Tensor, seed: int = 0) -> torch.Tensor:
    if kind == "superpixel":
        return superpixel(images)
    if kind == "edge":
        return edge(images)
    if kind == "blur":
        return blur(images)
    if kind == "noise":
        return noise(images, seed)
    if kind == "masked":
        return masked(images)
    raise BaselineError(f"unknown baseline {kind!r}; choose from {', '.join(KINDS)}")


# ---------------------------------------------------------------- deanonymizers


def deanonymize_baseline(bundle: ModelBundle, degraded: torch.Tensor) -> torch.Tensor:
    """Run a trained baseline deanonymizer. For ``masked`` the pixels outside the
    mask are known, so only the masked square is taken from the network."""
    out = generator_forward(bundle.generator, degraded, None)
    if bundle.meta.get("baseline") == "masked":
        ys, xs = mask_region(*degraded.shape[-2:])
        keep = degraded.clone()
        keep[..., ys, xs] = out[..., ys, xs]
        out = keep
    return out


def train_baseline_deanonymizer(
    kind: str,
    dataset: FaceDataset,
    config: TrainConfig,
    callback: Optional[Callable[[int, dict], None]] = None,
) -> ModelBundle:
    """Fit G: baseline(I) -> I with ``lambda_rec`` x L1 plus LSGAN, using the same
    architecture, batch size, step count and optimiser settings as the main run."""
    if kind not in KINDS:
        raise BaselineError(f"unknown baseline {kind!r}")
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    torch.manual_seed(config.seed)
    G = Generator(replace(config.generator_config(), password_bits=0))
    D = DiscriminatorSet(config.discriminator_config(fine_names=("rec",)))
    betas = (config.beta1, config.beta2)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.lr_g, betas=betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr_d, betas=betas)
    buffer = ImageBuffer(config.buffer_capacity)
    bs = min(config.batch_size, len(dataset))
    per_epoch = max(1, len(dataset) // bs)
    total_steps = config.max_steps or config.epochs * per_epoch
    step = 0
    G.train()
    D.train()
    while step < total_steps:
        gen = torch.Generator().manual_seed(config.seed * 100003 + step // per_epoch)
        for x, _ in dataset.batches(bs, gen):
            if step >= total_steps:
                break
            degraded = apply_baseline(kind, x, seed=config.seed * 1000003 + step)
            fake = G(degraded)

            pooled = buffer.query(fake.detach(), random.Random(f"{config.seed}-{step}"))
            d_loss = L.lsgan_d(D(x, "rec"), D(pooled, "rec"))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            for p in D.parameters():
                p.requires_grad_(False)
            rec = L.l_rec(fake, x)
            gan = L.lsgan_g(D(fake, "rec"))
            g_loss = config.lambda_rec * rec + gan
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            for p in D.parameters():
                p.requires_grad_(True)

            values = {"rec": rec.item(), "gan": gan.item(), "gan_d": d_loss.item()}
            if not all(np.isfinite(v) for v in values.values()):
                raise NumericError(f"non-finite baseline loss at step {step}: {values}")
            step += 1
            if callback is not None:
                callback(step, values)
    bundle = ModelBundle(generator=G, discriminators=D, step=step)
    bundle.meta.update(baseline=kind, train_config=asdict(config))
    return bundle.eval()
