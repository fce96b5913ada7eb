"""Two-stage minimax training of the identity transformer.

Per batch, one step graph is built (I -> A1, A2 -> R, WR1, WR2), then the
discriminator stage updates D and F on detached fakes, then the generator stage
updates T and Q. Every random draw of step ``s`` comes from generators seeded
with ``(seed, s)`` so a run is reproducible and resumable.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import losses as L
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DataError, FaceDataset, write_image
from .networks import (
    AuxConfig,
    AuxNet,
    DiscriminatorConfig,
    DiscriminatorSet,
    FaceRecognizer,
    Generator,
    GeneratorConfig,
    ModelBundle,
)
from .passwords import (
    Password,
    chunk_tensor,
    inverse,
    password_tensor,
    sample_distinct_pair,
    sample_wrong_recovery,
)

log = logging.getLogger(__name__)

STAGES = ("anon", "rec", "wr")


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 15
    max_steps: int = 0  # 0: run all epochs
    batch_size: int = 12
    lr_g: float = 1e-4
    lr_q: float = 1e-4
    lr_d: float = 1e-4
    lr_f: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    buffer_capacity: int = 500
    seed: int = 0
    d_steps_per_g_step: int = 1
    password_bits: int = 16
    image_size: int = 64
    n_residual_blocks: int = 4
    g_channels: int = 8
    residual_output: bool = True
    odd_in_password: bool = True
    d_channels: int = 16
    d_layers: int = 2
    q_channels: int = 16
    lambda_aux: float = 1.0
    lambda_feat: float = 2.0
    lambda_adv: float = 2.0
    lambda_rec_cls: float = 1.0
    lambda_l1: float = 10.0
    lambda_rec: float = 100.0
    adv_floor: Optional[float] = None  # None: -2 ln K
    aux_on_wrong: bool = True
    no_dis: bool = False
    no_wr: bool = False
    no_aux: bool = False
    no_rec_cls: bool = False
    non_adversarial_F: bool = False
    log_every: int = 1
    checkpoint_every: int = 0
    sample_every: int = 0

    def __post_init__(self):
        for name in ("lr_g", "lr_q", "lr_d", "lr_f"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.buffer_capacity < self.batch_size:
            raise ValueError("buffer_capacity must be at least batch_size")
        if self.d_steps_per_g_step < 1:
            raise ValueError("d_steps_per_g_step must be >= 1")

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(
            aux=self.lambda_aux,
            feat=self.lambda_feat,
            adv=self.lambda_adv,
            rec_cls=self.lambda_rec_cls,
            l1=self.lambda_l1,
            rec=self.lambda_rec,
        )

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            image_size=self.image_size,
            n_residual_blocks=self.n_residual_blocks,
            base_channels=self.g_channels,
            password_bits=self.password_bits,
            residual_output=self.residual_output,
            odd_in_password=self.odd_in_password,
        )

    def discriminator_config(self, fine_names=STAGES) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            image_size=self.image_size, base_channels=self.d_channels, n_layers=self.d_layers, fine_names=fine_names
        )

    def aux_config(self) -> AuxConfig:
        return AuxConfig(
            image_size=self.image_size, base_channels=self.q_channels, n_layers=self.d_layers, password_bits=self.password_bits
        )

    def generator_terms(self) -> tuple[str, ...]:
        skip = set()
        if self.no_aux:
            skip.add("aux")
        if self.no_rec_cls:
            skip.add("rec_cls")
        return tuple(t for t in L.GENERATOR_TERMS if t not in skip)

    def discriminator_terms(self) -> tuple[str, ...]:
        return ("gan_d",) if self.non_adversarial_F else L.DISCRIMINATOR_TERMS

    def feat_pairs(self) -> tuple[str, ...]:
        if self.no_wr:
            return () if self.no_dis else ("aa",)
        return ("aw",) if self.no_dis else ("aa", "ww", "aw")


class ImageBuffer:
    """Bounded pool of past generator outputs.

    Until full, every new image is stored and returned as is. Once full, each new
    image is, with probability 1/2, swapped with a random stored one (the stored
    one is returned) and otherwise returned directly.
    """

    def __init__(self, capacity: int = 500):
        self.capacity = capacity
        self.images: list[torch.Tensor] = []

    def __len__(self) -> int:
        return len(self.images)

    def query(self, images: torch.Tensor, rng: random.Random) -> torch.Tensor:
        if self.capacity == 0:
            return images
        out = []
        for img in images.detach():
            img = img.clone()
            if len(self.images) < self.capacity:
                self.images.append(img)
                out.append(img)
            elif rng.random() < 0.5:
                j = rng.randrange(self.capacity)
                out.append(self.images[j])
                self.images[j] = img
            else:
                out.append(img)
        return torch.stack(out)


@dataclass
class StepGraph:
    image: torch.Tensor
    p1: list[Password]
    p2: list[Password]
    p1w: list[Password]
    p2w: list[Password]
    A1: torch.Tensor
    A2: torch.Tensor
    R: torch.Tensor
    WR1: Optional[torch.Tensor] = None
    WR2: Optional[torch.Tensor] = None


def check_graph_passwords(p1, p2, p1w, p2w) -> None:
    for a, b, wa, wb in zip(p1, p2, p1w, p2w):
        inv = inverse(a)
        if a == b or wa == inv or wb == inv or wa == wb:
            raise AssertionError(f"step-graph password constraint violated: {a} {b} {wa} {wb}")


def sample_graph_passwords(rng: np.random.Generator, batch: int, n_bits: int):
    p1, p2, p1w, p2w = [], [], [], []
    for _ in range(batch):
        a, b = sample_distinct_pair(rng, n_bits)
        wa = sample_wrong_recovery(rng, a)
        wb = sample_wrong_recovery(rng, a, exclude=[wa])
        p1.append(a)
        p2.append(b)
        p1w.append(wa)
        p2w.append(wb)
    check_graph_passwords(p1, p2, p1w, p2w)
    return p1, p2, p1w, p2w


def build_step_graph(T: Generator, image: torch.Tensor, rng: np.random.Generator, no_wr: bool = False) -> StepGraph:
    """Run T on the five-image graph. Gradients flow unless called under no_grad.

    The two anonymizations share one generator call and the three second-level
    transforms share another, so batch-norm statistics are per level.
    """
    b = image.shape[0]
    n = T.config.password_bits
    p1, p2, p1w, p2w = sample_graph_passwords(rng, b, n)
    codes = password_tensor(p1 + p2, dtype=image.dtype)
    anon = T(torch.cat([image, image]), codes)
    A1, A2 = anon[:b], anon[b:]
    second = [inverse(p) for p in p1] + ([] if no_wr else p1w + p2w)
    reps = len(second) // b
    out = T(A1.repeat(reps, 1, 1, 1), password_tensor(second, dtype=image.dtype))
    R = out[:b]
    WR1 = WR2 = None
    if not no_wr:
        WR1, WR2 = out[b : 2 * b], out[2 * b :]
    return StepGraph(image, p1, p2, p1w, p2w, A1, A2, R, WR1, WR2)


def parameter_hash(*modules: Optional[torch.nn.Module]) -> str:
    h = hashlib.sha256()
    for m in modules:
        if m is None:
            continue
        for name, p in m.named_parameters():
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        if m is not None:
            for p in m.parameters():
                p.requires_grad_(flag)


def _check_finite(breakdown: L.LossBreakdown) -> None:
    values = breakdown.as_floats()
    if not all(math.isfinite(v) for v in values.values()):
        raise NumericError(f"non-finite {breakdown.stage} loss: {values}")


class Trainer:
    """Owns a bundle's mutable state during training. Single-threaded."""

    def __init__(self, bundle: ModelBundle, config: TrainConfig):
        if bundle.recognizer is None:
            raise ValueError("training needs a pretrained recognizer")
        self.bundle = bundle
        self.config = config
        self.weights = config.weights
        self.T = bundle.generator
        self.D = bundle.discriminators
        self.Q = None if config.no_aux else bundle.aux
        self.F = bundle.recognizer
        self.buffers = {k: ImageBuffer(config.buffer_capacity) for k in self.stage_names}
        betas = (config.beta1, config.beta2)
        opts = bundle.optimizers
        opts.setdefault("generator", torch.optim.Adam(self.T.parameters(), lr=config.lr_g, betas=betas))
        opts.setdefault("discriminators", torch.optim.Adam(self.D.parameters(), lr=config.lr_d, betas=betas))
        if self.Q is not None:
            opts.setdefault("aux", torch.optim.Adam(self.Q.parameters(), lr=config.lr_q, betas=betas))
        if not config.non_adversarial_F:
            opts.setdefault("recognizer", torch.optim.Adam(self.F.parameters(), lr=config.lr_f, betas=betas))
        self.opts = opts
        self.K = self.F.config.n_classes

    @property
    def stage_names(self) -> tuple[str, ...]:
        return ("anon", "rec") if self.config.no_wr else STAGES

    def _fakes(self, g: StepGraph) -> dict[str, torch.Tensor]:
        out = {"anon": g.A1, "rec": g.R}
        if g.WR1 is not None:
            out["wr"] = g.WR1
        return out

    def rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, step])

    # ------------------------------------------------------------------ stages

    def discriminator_stage(self, g: StepGraph, labels: torch.Tensor, step: int) -> L.LossBreakdown:
        cfg = self.config
        pyrng = random.Random(f"{cfg.seed}-{step}")
        frozen = [self.T, self.Q]
        _set_requires_grad(frozen, False)
        trainable = [self.D] + ([] if cfg.non_adversarial_F else [self.F])
        _set_requires_grad(trainable, True)
        terms = {}
        gan_d = 0.0
        real = g.image
        for stage, fake in self._fakes(g).items():
            pooled = self.buffers[stage].query(fake.detach(), pyrng)
            real_scores = self.D(real, stage)
            fake_scores = self.D(pooled, stage)
            gan_d = gan_d + L.lsgan_d(real_scores, fake_scores)
        terms["gan_d"] = gan_d
        if not cfg.non_adversarial_F:
            wr = g.WR1.detach() if g.WR1 is not None else None
            terms["adv_d"] = L.l_adv_discriminator(
                self.F.classify(real),
                self.F.classify(g.A1.detach()),
                self.F.classify(wr) if wr is not None else None,
                labels,
            )
        total = L.total_discriminator_loss(terms, self.weights, cfg.discriminator_terms())
        breakdown = L.LossBreakdown("discriminator", terms, total)
        _check_finite(breakdown)
        self.opts["discriminators"].zero_grad()
        if "recognizer" in self.opts:
            self.opts["recognizer"].zero_grad()
        total.backward()
        self.opts["discriminators"].step()
        if "recognizer" in self.opts:
            self.opts["recognizer"].step()
        _set_requires_grad(frozen, True)
        return breakdown

    def generator_terms(self, g: StepGraph, labels: torch.Tensor) -> dict[str, torch.Tensor]:
        """All generator-stage terms for one graph. Apart from the feature
        dissimilarity term, losses only see A1 and WR1."""
        cfg = self.config
        F = self.F
        terms: dict[str, torch.Tensor] = {}
        has_wr = g.WR1 is not None
        if self.Q is not None:
            aux = L.l_aux(self.Q(g.image, g.A1), chunk_tensor(g.p1))
            if has_wr and cfg.aux_on_wrong:
                aux = aux + L.l_aux(self.Q(g.A1, g.WR1), chunk_tensor(g.p1w))
            terms["aux"] = aux
        batch = [g.A1, g.A2, g.R] + ([g.WR1, g.WR2] if has_wr else [])
        emb = F.embed(torch.cat(batch)).chunk(len(batch))
        e_a1, e_a2, e_r = emb[:3]
        e_wr1, e_wr2 = emb[3:] if has_wr else (None, None)
        pairs = cfg.feat_pairs()
        terms["feat"] = L.l_feat(e_a1, e_a2, e_wr1, e_wr2, pairs) if pairs else torch.zeros(())
        logits_wr = F.classifier(e_wr1) if has_wr else None
        terms["adv"] = L.l_adv_generator(F.classifier(e_a1), logits_wr, labels, cfg.adv_floor)
        if not cfg.no_rec_cls:
            terms["rec_cls"] = L.l_rec_cls(F.classifier(e_r), labels)
        terms["rec"] = L.l_rec(g.R, g.image)
        terms["l1"] = L.l_background(g.A1, g.WR1, g.image)
        terms["gan"] = sum(L.lsgan_g(self.D(fake, stage)) for stage, fake in self._fakes(g).items())
        return terms

    def generator_stage(self, g: StepGraph, labels: torch.Tensor) -> L.LossBreakdown:
        cfg = self.config
        frozen = [self.D, self.F]
        _set_requires_grad(frozen, False)
        terms = self.generator_terms(g, labels)
        total = L.total_generator_loss(terms, self.weights, cfg.generator_terms())
        breakdown = L.LossBreakdown("generator", terms, total)
        _check_finite(breakdown)
        self.opts["generator"].zero_grad()
        if self.Q is not None:
            self.opts["aux"].zero_grad()
        total.backward()
        self.opts["generator"].step()
        if self.Q is not None:
            self.opts["aux"].step()
        _set_requires_grad(frozen, True)
        return breakdown

    def train_step(self, images: torch.Tensor, labels: torch.Tensor):
        """One D/F update (repeated ``d_steps_per_g_step`` times) then one T/Q update."""
        step = self.bundle.step
        self.T.train()
        self.D.train()
        if self.Q is not None:
            self.Q.train()
        self.F.eval()
        g = build_step_graph(self.T, images, self.rng(step), self.config.no_wr)
        for _ in range(self.config.d_steps_per_g_step):
            d_break = self.discriminator_stage(g, labels, step)
        g_break = self.generator_stage(g, labels)
        self.bundle.step = step + 1
        return g_break, d_break


# ------------------------------------------------------------------------- run


LOG_COLUMNS = ("step",) + L.GENERATOR_TERMS + ("g_total",) + L.DISCRIMINATOR_TERMS + ("d_total",)


def new_bundle(config: TrainConfig, recognizer: FaceRecognizer, verifier: Optional[FaceRecognizer] = None) -> ModelBundle:
    torch.manual_seed(config.seed)
    bundle = ModelBundle(
        generator=Generator(config.generator_config()),
        discriminators=DiscriminatorSet(config.discriminator_config()),
        aux=None if config.no_aux else AuxNet(config.aux_config()),
        recognizer=recognizer,
        verifier=verifier,
    )
    bundle.meta["train_config"] = asdict(config)
    return bundle


def write_sample_grid(g: StepGraph, path, rows: int = 4) -> None:
    cols = [g.image, g.A1, g.A2, g.R] + ([g.WR1, g.WR2] if g.WR1 is not None else [])
    rows = min(rows, g.image.shape[0])
    grid = torch.cat([torch.cat([c[i].detach() for c in cols], dim=2) for i in range(rows)], dim=1)
    write_image(grid, path)


def train(
    dataset: FaceDataset,
    config: TrainConfig,
    recognizer: FaceRecognizer,
    verifier: Optional[FaceRecognizer] = None,
    out_dir=None,
    resume=None,
    callback: Optional[Callable[[Trainer, L.LossBreakdown, L.LossBreakdown], None]] = None,
) -> ModelBundle:
    """Train from scratch (or resume from a checkpoint) and return the bundle.

    With ``out_dir`` set, writes ``train_log.csv``, periodic and final
    checkpoints (``checkpoint_<step>.pwf``, ``final.pwf``) and sample mosaics.
    """
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    if recognizer.config.n_classes != dataset.n_identities:
        raise DataError(
            f"recognizer has {recognizer.config.n_classes} classes, dataset has {dataset.n_identities} identities"
        )
    if dataset.images.shape[-1] != config.image_size:
        raise DataError(f"dataset images are {dataset.images.shape[-1]}px, config expects {config.image_size}")
    if resume is not None:
        bundle = load_checkpoint(resume, optimizers=True)
        bundle.recognizer = bundle.recognizer or recognizer
        bundle.verifier = bundle.verifier or verifier
        opt_state = bundle.meta.pop("optimizer_state", {})
    else:
        bundle = new_bundle(config, recognizer, verifier)
        opt_state = {}
    trainer = Trainer(bundle, config)
    for name, state in opt_state.items():
        if name in trainer.opts:
            trainer.opts[name].load_state_dict(state)

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        fresh = resume is None or not log_path.exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if fresh:
            writer.writeheader()

    bs = min(config.batch_size, len(dataset))
    per_epoch = max(1, len(dataset) // bs)
    total_steps = config.max_steps or config.epochs * per_epoch
    try:
        while bundle.step < total_steps:
            epoch = bundle.step // per_epoch
            gen = torch.Generator().manual_seed(config.seed * 100003 + epoch)
            skip = bundle.step - epoch * per_epoch
            for i, (x, y) in enumerate(dataset.batches(bs, gen)):
                if i < skip:
                    continue
                if bundle.step >= total_steps:
                    break
                g_break, d_break = trainer.train_step(x, y)
                step = bundle.step
                if writer is not None and step % config.log_every == 0:
                    row = {"step": step, **g_break.as_floats(), **d_break.as_floats()}
                    row["g_total"] = row.pop("total")
                    row["d_total"] = float(d_break.total.detach())
                    writer.writerow({k: row.get(k, "") for k in LOG_COLUMNS})
                if callback is not None:
                    callback(trainer, g_break, d_break)
                if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_checkpoint(bundle, out / f"checkpoint_{step:06d}.pwf")
                if out is not None and config.sample_every and step % config.sample_every == 0:
                    with torch.no_grad():
                        g = build_step_graph(bundle.generator.eval(), x, trainer.rng(step), config.no_wr)
                    write_sample_grid(g, out / f"samples_{step:06d}.png")
    finally:
        if fh is not None:
            fh.close()
    bundle.meta["train_config"] = asdict(config)
    if out is not None:
        save_checkpoint(bundle, out / "final.pwf")
    return bundle.eval()
