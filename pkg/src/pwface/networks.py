"""Generator T, patch discriminators D, password predictor Q and face recognizer F."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .passwords import CHUNK_BITS, DEFAULT_BITS, check_bits, plane_tensor


RESIDUAL_CLAMP = 0.999


class ConfigError(ValueError):
    pass


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)


# --------------------------------------------------------------------- generator


@dataclass
class GeneratorConfig:
    image_size: int = 64
    n_residual_blocks: int = 4
    base_channels: int = 8
    password_bits: int = DEFAULT_BITS  # 0 for password-free baseline deanonymizers
    n_downsampling: int = 2
    upsampling_mode: str = "nearest"
    normalization: str = "batch"
    # output = tanh(atanh(input) + h) instead of tanh(h)
    residual_output: bool = True
    # h(x, c) = (net(x, c) - net(x, -c)) / 2 for the centered code c
    odd_in_password: bool = True

    def __post_init__(self):
        if self.password_bits:
            check_bits(self.password_bits)
        if self.image_size % (2**self.n_downsampling):
            raise ConfigError("image_size must be divisible by 2**n_downsampling")
        if self.normalization not in ("batch", "instance"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")

    @classmethod
    def plain(cls, password_bits: int = DEFAULT_BITS) -> "GeneratorConfig":
        return cls(
            image_size=128,
            n_residual_blocks=9,
            base_channels=64,
            password_bits=password_bits,
            residual_output=False,
            odd_in_password=False,
        )


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.InstanceNorm2d(channels, affine=True)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, norm: str):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            _norm(norm, channels),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            _norm(norm, channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """ResNet encoder/decoder; the password is fed as constant extra input planes.

    Upsampling is a nearest resize followed by a 3x3 convolution rather than a
    transposed convolution, which avoids checkerboard artifacts.

    With ``residual_output`` the network predicts an offset added to the input in
    atanh space. With ``odd_in_password`` that offset is antisymmetric in the
    centered code, so the inverse password starts out (approximately) undoing
    the password, and no password-independent edit can be expressed.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        nrm = config.normalization
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(3 + config.password_bits, c, 7),
            _norm(nrm, c),
            nn.ReLU(True),
        ]
        for i in range(config.n_downsampling):
            mult = 2**i
            layers += [nn.Conv2d(c * mult, c * mult * 2, 3, stride=2, padding=1), _norm(nrm, c * mult * 2), nn.ReLU(True)]
        mult = 2**config.n_downsampling
        layers += [ResidualBlock(c * mult, nrm) for _ in range(config.n_residual_blocks)]
        for i in range(config.n_downsampling):
            m = 2 ** (config.n_downsampling - i)
            layers += [
                nn.Upsample(scale_factor=2, mode=config.upsampling_mode),
                nn.ReflectionPad2d(1),
                nn.Conv2d(c * m, c * m // 2, 3),
                _norm(nrm, c * m // 2),
                nn.ReLU(True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(c, 3, 7)]
        self.model = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, image: torch.Tensor, codes: Optional[torch.Tensor] = None) -> torch.Tensor:
        n = self.config.password_bits
        size = self.config.image_size
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[-2:] != (size, size):
            raise ConfigError(f"generator expects (B, 3, {size}, {size}), got {tuple(image.shape)}")
        if n:
            if codes is None or codes.shape != (image.shape[0], n):
                raise ConfigError(f"generator expects password codes of shape (B, {n})")
            codes = codes.to(image.dtype)
            if self.config.odd_in_password:
                # both signs in one batch so they share normalization statistics
                b = image.shape[0]
                both = torch.cat([image, image])
                g = self.model(torch.cat([both, plane_tensor(torch.cat([codes, -codes]), size, size)], dim=1))
                h = 0.5 * (g[:b] - g[b:])
            else:
                h = self.model(torch.cat([image, plane_tensor(codes, size, size)], dim=1))
        else:
            h = self.model(image)
        if self.config.residual_output:
            h = h + torch.atanh(image.clamp(-RESIDUAL_CLAMP, RESIDUAL_CLAMP))
        return torch.tanh(h)


# ----------------------------------------------------------------- discriminators


@dataclass
class DiscriminatorConfig:
    image_size: int = 64
    base_channels: int = 16
    n_layers: int = 2
    in_channels: int = 3
    fine_names: tuple[str, ...] = ("anon", "rec", "wr")

    def __post_init__(self):
        self.fine_names = tuple(self.fine_names)

    def grid_size(self, scale: int = 1) -> int:
        """Side of the score grid for an input downsampled by ``scale``.

        Each of the ``n_layers`` stride-2 k4 p1 convs halves the side; the two
        stride-1 k4 p1 convs each remove one pixel. 64 -> 32 -> 16 -> 15 -> 14
        for the desk default, and 32 -> 16 -> 8 -> 7 -> 6 on the coarse path.
        """
        s = self.image_size // scale
        for _ in range(self.n_layers):
            s = (s + 2 - 4) // 2 + 1
        for _ in range(2):
            s = s + 2 - 4 + 1
        return s


def _patch_trunk(in_ch: int, base: int, n_layers: int) -> tuple[nn.Sequential, int]:
    layers: list[nn.Module] = [nn.Conv2d(in_ch, base, 4, 2, 1), nn.LeakyReLU(0.2, True)]
    ch = base
    for i in range(1, n_layers):
        nxt = base * min(2**i, 8)
        layers += [nn.Conv2d(ch, nxt, 4, 2, 1), nn.BatchNorm2d(nxt), nn.LeakyReLU(0.2, True)]
        ch = nxt
    nxt = base * min(2**n_layers, 8)
    layers += [nn.Conv2d(ch, nxt, 4, 1, 1), nn.BatchNorm2d(nxt), nn.LeakyReLU(0.2, True)]
    return nn.Sequential(*layers), nxt


class PatchDiscriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        trunk, ch = _patch_trunk(config.in_channels, config.base_channels, config.n_layers)
        self.model = nn.Sequential(trunk, nn.Conv2d(ch, 1, 4, 1, 1))
        init_weights(self)

    def forward(self, x):
        return self.model(x)


def downsample(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, 2)


class DiscriminatorSet(nn.Module):
    """One coarse discriminator shared by every stage plus one fine one per stage."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        self.coarse = PatchDiscriminator(config)
        self.fine = nn.ModuleDict({name: PatchDiscriminator(config) for name in config.fine_names})

    def _check(self, x):
        size = self.config.image_size
        if x.dim() != 4 or x.shape[-2:] != (size, size):
            raise ConfigError(f"discriminator expects {size}x{size} input, got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor, stage: str) -> tuple[torch.Tensor, torch.Tensor]:
        """Score grids (coarse, fine) for images from the given stage."""
        self._check(x)
        return self.coarse(downsample(x)), self.fine[stage](x)


# ------------------------------------------------------------------- auxiliary Q


@dataclass
class AuxConfig:
    image_size: int = 64
    base_channels: int = 16
    n_layers: int = 2
    password_bits: int = DEFAULT_BITS

    def __post_init__(self):
        check_bits(self.password_bits)

    @property
    def n_heads(self) -> int:
        return self.password_bits // CHUNK_BITS


class AuxNet(nn.Module):
    """Patch-discriminator trunk on (I, T_p I), global pooling, N/4 16-way heads."""

    def __init__(self, config: AuxConfig):
        super().__init__()
        self.config = config
        self.trunk, ch = _patch_trunk(6, config.base_channels, config.n_layers)
        self.heads = nn.ModuleList(nn.Linear(ch, 2**CHUNK_BITS) for _ in range(config.n_heads))
        init_weights(self)

    def forward(self, original: torch.Tensor, transformed: torch.Tensor) -> torch.Tensor:
        if original.shape != transformed.shape:
            raise ConfigError("aux net inputs must have identical shapes")
        h = self.trunk(torch.cat([original, transformed], dim=1)).mean(dim=(2, 3))
        return torch.stack([head(h) for head in self.heads], dim=1)  # (B, N/4, 16)


# ------------------------------------------------------------------- recognizer F


@dataclass
class RecognizerConfig:
    image_size: int = 64
    base_channels: int = 16
    embed_dim: int = 64
    n_classes: int = 2

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("a recognizer needs at least 2 identities")


class FaceRecognizer(nn.Module):
    """Small convolutional classifier; the pre-softmax projection is the embedding.

    ``features`` exposes the intermediate maps used by the perceptual proxy metric.
    GroupNorm keeps ``embed`` independent of batch composition and train/eval mode.
    """

    def __init__(self, config: RecognizerConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        chans = [3, c, 2 * c, 4 * c, 4 * c]
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1),
                nn.GroupNorm(4, chans[i + 1]),
                nn.LeakyReLU(0.2, True),
                nn.Conv2d(chans[i + 1], chans[i + 1], 3, padding=1),
                nn.GroupNorm(4, chans[i + 1]),
                nn.LeakyReLU(0.2, True),
            )
            for i in range(4)
        )
        self.project = nn.Linear(chans[-1], config.embed_dim)
        self.classifier = nn.Linear(config.embed_dim, config.n_classes)
        init_weights(self)
        nn.init.kaiming_normal_(self.project.weight)
        nn.init.kaiming_normal_(self.classifier.weight)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        size = self.config.image_size
        if x.shape[-2:] != (size, size):
            raise ConfigError(f"recognizer expects {size}x{size} input, got {tuple(x.shape)}")
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.features(x)[-1].mean(dim=(2, 3)))

    def classify(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embed(x))

    def forward(self, x):
        return self.classify(x)


# ------------------------------------------------------------------------ bundle


@dataclass
class ModelBundle:
    """Everything one training run owns. Components absent from a run are None."""

    generator: Generator
    discriminators: Optional[DiscriminatorSet] = None
    aux: Optional[AuxNet] = None
    recognizer: Optional[FaceRecognizer] = None
    verifier: Optional[FaceRecognizer] = None
    optimizers: dict[str, torch.optim.Optimizer] = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def password_bits(self) -> int:
        return self.generator.config.password_bits

    @property
    def image_size(self) -> int:
        return self.generator.config.image_size

    def modules(self) -> dict[str, nn.Module]:
        named = {
            "generator": self.generator,
            "discriminators": self.discriminators,
            "aux": self.aux,
            "recognizer": self.recognizer,
            "verifier": self.verifier,
        }
        return {k: v for k, v in named.items() if v is not None}

    def configs(self) -> dict[str, dict]:
        return {name: asdict(m.config) for name, m in self.modules().items()}

    def eval(self) -> "ModelBundle":
        for m in self.modules().values():
            m.eval()
        return self

    def inference_copy(self) -> "ModelBundle":
        """Detached eval-mode copy without discriminators, Q or optimizer state."""
        out = ModelBundle(
            generator=copy.deepcopy(self.generator),
            recognizer=copy.deepcopy(self.recognizer) if self.recognizer is not None else None,
            verifier=copy.deepcopy(self.verifier) if self.verifier is not None else None,
            step=self.step,
            meta=dict(self.meta),
        )
        return out.eval()


def build_bundle(
    gen_config: GeneratorConfig,
    disc_config: Optional[DiscriminatorConfig] = None,
    aux_config: Optional[AuxConfig] = None,
    recognizer: Optional[FaceRecognizer] = None,
    verifier: Optional[FaceRecognizer] = None,
) -> ModelBundle:
    return ModelBundle(
        generator=Generator(gen_config),
        discriminators=DiscriminatorSet(disc_config) if disc_config is not None else None,
        aux=AuxNet(aux_config) if aux_config is not None else None,
        recognizer=recognizer,
        verifier=verifier,
    )


@torch.no_grad()
def generator_forward(generator: Generator, image: torch.Tensor, codes: Optional[torch.Tensor]) -> torch.Tensor:
    """Inference-mode call; restores the previous train/eval mode afterwards."""
    was_training = generator.training
    generator.eval()
    try:
        return generator(image, codes)
    finally:
        generator.train(was_training)
