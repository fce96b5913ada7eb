import pytest
import torch

from pwface.data import FaceDataset
from pwface.networks import FaceRecognizer, RecognizerConfig
from pwface.trainer import TrainConfig


def tiny_dataset(n_ids=3, per_id=4, size=32, seed=0) -> FaceDataset:
    g = torch.Generator().manual_seed(seed)
    base = torch.rand(n_ids, 3, 1, 1, generator=g) * 1.6 - 0.8
    images = (base.repeat_interleave(per_id, 0) + 0.1 * torch.randn(n_ids * per_id, 3, size, size, generator=g)).clamp(-1, 1)
    labels = torch.arange(n_ids).repeat_interleave(per_id)
    return FaceDataset(images, labels, [f"id{i}" for i in range(n_ids)], [None] * len(labels))


def tiny_config(**kw) -> TrainConfig:
    base = dict(image_size=32, password_bits=8, batch_size=4, g_channels=4, n_residual_blocks=1, d_channels=4, q_channels=4)
    base.update(kw)
    return TrainConfig(**base)


def tiny_recognizer(n_classes=3, size=32, seed=0) -> FaceRecognizer:
    torch.manual_seed(seed)
    return FaceRecognizer(RecognizerConfig(image_size=size, base_channels=8, embed_dim=16, n_classes=n_classes)).eval()


@pytest.fixture
def tiny():
    return tiny_dataset(), tiny_recognizer()
