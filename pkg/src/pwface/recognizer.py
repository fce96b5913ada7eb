"""Desk-scale stand-in for a pretrained face recognizer.

The recognizer used inside training and the verifier used for evaluation are
trained the same way from different seeds; the verifier is never touched by
adversarial updates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import FaceDataset
from .networks import ConfigError, FaceRecognizer, RecognizerConfig

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    base_channels: int = 16
    embed_dim: int = 64
    min_train_accuracy: float = 0.9
    label_smoothing: float = 0.0


class PretrainError(RuntimeError):
    pass


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    flip = torch.rand(x.shape[0], generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    gain = 1 + 0.1 * (torch.rand(x.shape[0], 1, 1, 1, generator=gen) * 2 - 1)
    return ((x + 1) * gain - 1).clamp(-1, 1)


@torch.no_grad()
def accuracy(model: FaceRecognizer, dataset: FaceDataset, batch_size: int = 64) -> float:
    model.eval()
    hits = 0
    for i in range(0, len(dataset), batch_size):
        logits = model.classify(dataset.images[i : i + batch_size])
        hits += int((logits.argmax(1) == dataset.labels[i : i + batch_size]).sum())
    return hits / len(dataset)


def recognizer_pretrain(dataset: FaceDataset, config: PretrainConfig | None = None) -> FaceRecognizer:
    config = config or PretrainConfig()
    if dataset.n_identities < 2:
        raise ConfigError("recognizer pretraining needs at least 2 identities")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model = FaceRecognizer(
        RecognizerConfig(
            image_size=dataset.images.shape[-1],
            base_channels=config.base_channels,
            embed_dim=config.embed_dim,
            n_classes=dataset.n_identities,
        )
    )
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    bs = min(config.batch_size, len(dataset))
    for epoch in range(config.epochs):
        model.train()
        for x, y in dataset.batches(bs, gen):
            loss = F.cross_entropy(model.classify(_augment(x, gen)), y, label_smoothing=config.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
        log.debug("pretrain epoch %d loss %.4f", epoch, loss.item())
    acc = accuracy(model, dataset)
    log.info("recognizer (seed %d) train top-1 %.3f", config.seed, acc)
    if acc < config.min_train_accuracy:
        raise PretrainError(f"train accuracy {acc:.3f} below floor {config.min_train_accuracy}")
    model.train_accuracy = acc
    return model.eval()
