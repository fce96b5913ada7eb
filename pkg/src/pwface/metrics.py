"""Evaluation: verifier-based rates, reconstruction distances, multimodality,
detector drift and the exhaustive password sweep.

SSIM uses an 11x11 Gaussian window (sigma 1.5), C1 = (0.01 L)^2, C2 = (0.03 L)^2
with dynamic range L = 2 for images in [-1, 1]. Windows are zero-padded at the
border and renormalised to sum to one over in-image pixels, so every pixel has a
value and small images are well defined. SSIM is averaged over pixels and
channels.

``lpips_proxy`` is not the published LPIPS network: it is the mean of
(1 - channel cosine) over every spatial position of the verifier's intermediate
feature maps.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import FaceDataset, write_image
from .networks import FaceRecognizer, ModelBundle, generator_forward
from .passwords import (
    Password,
    all_passwords,
    inverse,
    password_tensor,
    sample_password,
    sample_wrong_recovery,
)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
DYNAMIC_RANGE = 2.0
SWEEP_MAX_BITS = 12


class MetricsError(ValueError):
    pass


# ------------------------------------------------------------------ distances


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _local_mean(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Gaussian-weighted mean over the in-image part of each window (x: B,C,H,W)."""
    c = x.shape[1]
    pad = len(g) // 2
    kx = g.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    ky = g.view(1, 1, -1, 1).repeat(c, 1, 1, 1)

    def blur(t):
        t = F.conv2d(t, kx, padding=(0, pad), groups=c)
        return F.conv2d(t, ky, padding=(pad, 0), groups=c)

    return blur(x) / blur(torch.ones_like(x))


def ssim_map(x: torch.Tensor, y: torch.Tensor, data_range: float = DYNAMIC_RANGE) -> torch.Tensor:
    if x.shape != y.shape:
        raise MetricsError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 3:
        x, y = x[None], y[None]
    x, y = x.double(), y.double()
    g = gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _local_mean(x, g), _local_mean(y, g)
    vx = _local_mean(x * x, g) - mx**2
    vy = _local_mean(y * y, g) - my**2
    cxy = _local_mean(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def ssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-image SSIM (B,) or a scalar for a single image."""
    m = ssim_map(x, y)
    out = m.flatten(1).mean(1)
    return out[0] if x.dim() == 3 else out


def dssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return ((1 - ssim(x, y)) / 2).clamp(0, 1)


def lpips_proxy(verifier: FaceRecognizer, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        fx, fy = verifier.features(x), verifier.features(y)
    per_layer = [(1 - F.cosine_similarity(a, b, dim=1, eps=1e-8)).flatten(1).mean(1) for a, b in zip(fx, fy)]
    return torch.stack(per_layer).mean(0).clamp_min(0)


def reconstruction_distances(
    recovered: torch.Tensor, original: torch.Tensor, verifier: Optional[FaceRecognizer] = None
) -> dict[str, float]:
    if recovered.shape != original.shape:
        raise MetricsError(f"length/shape mismatch {tuple(recovered.shape)} vs {tuple(original.shape)}")
    diff = (recovered.double() - original.double())
    out = {
        "dssim": float(dssim(recovered, original).mean()),
        "l1": float(diff.abs().mean()),
        "l2": float((diff**2).mean()),
    }
    if verifier is not None:
        out["lpips_proxy"] = float(lpips_proxy(verifier, recovered, original).mean())
    return out


# ---------------------------------------------------------------- verification


@torch.no_grad()
def embed(verifier: FaceRecognizer, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    verifier.eval()
    out = [verifier.embed(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return F.normalize(torch.cat(out).double(), dim=1)


def pair_cosines(e1: torch.Tensor, e2: torch.Tensor) -> torch.Tensor:
    return (e1 * e2).sum(1)


def verification_pairs(labels: torch.Tensor, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """All same-identity pairs and an equal number of random impostor pairs."""
    labels = np.asarray(labels)
    n = len(labels)
    ii, jj = np.triu_indices(n, 1)
    same = labels[ii] == labels[jj]
    genuine = np.stack([ii[same], jj[same]], 1)
    impostor_all = np.stack([ii[~same], jj[~same]], 1)
    if len(genuine) == 0 or len(impostor_all) == 0:
        raise MetricsError("need both genuine and impostor pairs (at least two identities with two images)")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(impostor_all), size=min(len(genuine), len(impostor_all)), replace=False)
    return genuine, impostor_all[np.sort(pick)]


def calibrate_threshold(genuine: Sequence[float], impostor: Sequence[float]) -> tuple[float, float]:
    """Threshold on cosine maximising balanced accuracy; returns (tau, accuracy).

    Candidates are midpoints between consecutive distinct scores plus both
    ends; "same" means cosine >= tau. Ties go to the smallest tau.
    """
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(impostor, dtype=np.float64))
    if len(g) == 0 or len(i) == 0:
        raise MetricsError("calibration needs genuine and impostor scores")
    values = np.unique(np.concatenate([g, i]))
    cands = np.concatenate([[values[0] - 1e-6], (values[:-1] + values[1:]) / 2, [values[-1] + 1e-6]])
    tpr = 1 - np.searchsorted(g, cands, side="left") / len(g)
    tnr = np.searchsorted(i, cands, side="left") / len(i)
    acc = (tpr + tnr) / 2
    best = int(np.argmax(acc))
    return float(cands[best]), float(acc[best])


@dataclass
class Calibration:
    tau: float
    accuracy: float
    genuine_mean: float
    n_pairs: int


def calibrate(verifier: FaceRecognizer, test: FaceDataset, seed: int = 0) -> Calibration:
    e = embed(verifier, test.images)
    genuine, impostor = verification_pairs(test.labels.numpy(), seed)
    gs = pair_cosines(e[genuine[:, 0]], e[genuine[:, 1]]).numpy()
    im = pair_cosines(e[impostor[:, 0]], e[impostor[:, 1]]).numpy()
    tau, acc = calibrate_threshold(gs, im)
    return Calibration(tau, acc, float(gs.mean()), len(genuine))


def judged_same(e1: torch.Tensor, e2: torch.Tensor, tau: float) -> torch.Tensor:
    return pair_cosines(e1, e2) >= tau


def _run(generator, images, passwords: Sequence[Password], batch_size: int = 64) -> torch.Tensor:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(generator_forward(generator, images[i : i + batch_size], password_tensor(passwords[i : i + batch_size])))
    return torch.cat(out)


@dataclass
class TransformSet:
    image: torch.Tensor
    anon: torch.Tensor
    rec: torch.Tensor
    wrong: torch.Tensor
    passwords: list[Password]
    wrong_passwords: list[Password]


def transform_set(bundle: ModelBundle, images: torch.Tensor, seed: int = 0) -> TransformSet:
    if len(images) == 0:
        raise MetricsError("empty test set")
    rng = np.random.default_rng(seed)
    n = bundle.password_bits
    p = [sample_password(rng, n) for _ in range(len(images))]
    pw = [sample_wrong_recovery(rng, q) for q in p]
    T = bundle.generator
    A = _run(T, images, p)
    R = _run(T, A, [inverse(q) for q in p])
    WR = _run(T, A, pw)
    return TransformSet(images, A, R, WR, p, pw)


def verification_rates(verifier: FaceRecognizer, tau: float, ts: TransformSet) -> dict[str, float]:
    """Fractions judged same identity for the pairs (I,A), (I,R), (I,WR), (A,WR)."""
    eI, eA, eR, eW = (embed(verifier, x) for x in (ts.image, ts.anon, ts.rec, ts.wrong))
    rate = lambda a, b: float(judged_same(a, b, tau).double().mean())
    return {"I_A": rate(eI, eA), "I_R": rate(eI, eR), "I_WR": rate(eI, eW), "A_WR": rate(eA, eW)}


def _mean_pairwise(embs: Sequence[torch.Tensor]) -> float:
    sims = [pair_cosines(a, b) for a, b in combinations(embs, 2)]
    return float(torch.stack(sims).mean())


def multimodality_score(
    bundle: ModelBundle, verifier: FaceRecognizer, images: torch.Tensor, k: int = 4, seed: int = 0
) -> dict[str, float]:
    """Mean pairwise verifier cosine among k anonymizations of each face with
    distinct passwords, and among k wrong recoveries of one anonymization.
    Lower is more multimodal."""
    n = bundle.password_bits
    if k < 2:
        raise MetricsError("multimodality needs k >= 2")
    if k > 2**n - 1:
        raise MetricsError(f"k={k} exceeds the usable password space of {n} bits")
    rng = np.random.default_rng(seed)
    T = bundle.generator
    anon_sets, wrong_sets = [], []
    for _ in range(len(images)):
        chosen = rng.choice(2**n, size=k, replace=False)
        anon_sets.append([Password.from_int(int(c), n) for c in chosen])
    anon_e, wrong_e = [], []
    for j in range(k):
        anon_e.append(embed(verifier, _run(T, images, [s[j] for s in anon_sets])))
    A = _run(T, images, [s[0] for s in anon_sets])
    for p in (s[0] for s in anon_sets):
        inv = inverse(p).to_int()
        pool = [c for c in rng.permutation(2**n)[: k + 1].tolist() if c != inv][:k]
        wrong_sets.append([Password.from_int(int(c), n) for c in pool])
    for j in range(k):
        wrong_e.append(embed(verifier, _run(T, A, [s[j] for s in wrong_sets])))
    return {"anon": _mean_pairwise(anon_e), "wrong": _mean_pairwise(wrong_e)}


# --------------------------------------------------------------- detector drift


def detection_drift(originals: Sequence[Sequence], transformed: Sequence[Sequence]) -> dict[str, float]:
    """Mean |delta| of box corners and keypoints (pixels) over matched detections.

    Per image, each original detection is matched to the unused transformed one
    with the nearest box centre. Unmatched detections on either side are counted.
    """
    box_d, kp_d, unmatched, matched = [], [], 0, 0
    for orig, trans in zip(originals, transformed):
        free = list(range(len(trans)))
        for d in orig:
            if not free:
                unmatched += 1
                continue
            c = np.array([(d.box[0] + d.box[2]) / 2, (d.box[1] + d.box[3]) / 2])
            dist = [np.linalg.norm(c - np.array([(trans[j].box[0] + trans[j].box[2]) / 2, (trans[j].box[1] + trans[j].box[3]) / 2])) for j in free]
            t = trans[free.pop(int(np.argmin(dist)))]
            matched += 1
            box_d.extend(np.abs(np.subtract(t.box, d.box, dtype=np.float64)).tolist())
            if d.keypoints and t.keypoints:
                kp_d.extend(np.abs(np.subtract(t.keypoints, d.keypoints, dtype=np.float64)).ravel().tolist())
        unmatched += len(free)
    return {
        "available": True,
        "box": float(np.mean(box_d)) if box_d else math.nan,
        "keypoints": float(np.mean(kp_d)) if kp_d else math.nan,
        "matched": matched,
        "unmatched": unmatched,
    }


def detector_drift(detector, originals: Sequence[np.ndarray], transformed: Sequence[np.ndarray]) -> dict:
    if detector is None:
        return {"available": False}
    return detection_drift([detector.detect(x) for x in originals], [detector.detect(x) for x in transformed])


# ---------------------------------------------------------------------- sweep


def sweep_layout(n_bits: int) -> tuple[int, int]:
    """Mosaic (rows, cols); the tile at (r, c) shows password integer r * cols + c."""
    cols = 2 ** ((n_bits + 1) // 2)
    return 2**n_bits // cols, cols


def tile_password(row: int, col: int, n_bits: int) -> Password:
    return Password.from_int(row * sweep_layout(n_bits)[1] + col, n_bits)


def tile_position(p: Password) -> tuple[int, int]:
    return divmod(p.to_int(), sweep_layout(p.n_bits)[1])


@dataclass
class SweepResult:
    outputs: torch.Tensor  # (2^N, 3, H, W), index = password integer
    cosine_to_input: torch.Tensor  # (2^N,)
    pairwise: dict[str, float]
    changed_fraction: Optional[float] = None


def password_sweep(
    bundle: ModelBundle,
    image: torch.Tensor,
    verifier: Optional[FaceRecognizer] = None,
    tau: Optional[float] = None,
    mosaic_path=None,
) -> SweepResult:
    n = bundle.password_bits
    if n > SWEEP_MAX_BITS:
        raise MetricsError(f"{n}-bit passwords are too many to enumerate (limit {SWEEP_MAX_BITS})")
    if image.dim() == 4:
        image = image[0]
    passwords = list(all_passwords(n))
    outs = _run(bundle.generator, image[None].expand(len(passwords), -1, -1, -1), passwords)
    verifier = verifier or bundle.verifier
    cos = torch.full((len(passwords),), math.nan, dtype=torch.float64)
    pairwise: dict[str, float] = {}
    changed = None
    if verifier is not None:
        e = embed(verifier, outs)
        cos = pair_cosines(e, embed(verifier, image[None]).expand_as(e))
        sims = e @ e.T
        iu = torch.triu_indices(len(e), len(e), 1)
        vals = sims[iu[0], iu[1]]
        pairwise = {"mean": float(vals.mean()), "min": float(vals.min()), "max": float(vals.max()), "std": float(vals.std())}
        if tau is not None:
            changed = float((cos < tau).double().mean())
    if mosaic_path is not None:
        rows, cols = sweep_layout(n)
        grid = outs.view(rows, cols, *outs.shape[1:])
        mosaic = torch.cat([torch.cat(list(grid[r]), dim=2) for r in range(rows)], dim=1)
        write_image(mosaic, mosaic_path)
    return SweepResult(outs, cos, pairwise, changed)


# --------------------------------------------------------------------- report


@dataclass
class EvalReport:
    calibration: dict
    methods: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"calibration": self.calibration, "methods": self.methods}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        keys = sorted({k for m in self.methods.values() for k in m})
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["method"] + keys)
        for name, vals in sorted(self.methods.items()):
            w.writerow([name] + [vals.get(k, "") for k in keys])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n")
        (out / "report.csv").write_text(self.to_csv())


def evaluate_model(
    bundle: ModelBundle, verifier: FaceRecognizer, test: FaceDataset, seed: int = 0, k: int = 4, calibration: Calibration | None = None
) -> tuple[EvalReport, TransformSet]:
    cal = calibration or calibrate(verifier, test, seed)
    ts = transform_set(bundle, test.images, seed)
    rates = verification_rates(verifier, cal.tau, ts)
    row = {
        "anonymization_error_rate": rates["I_A"],
        "recovery_accuracy": rates["I_R"],
        "wrong_recovery_leak_I": rates["I_WR"],
        "wrong_recovery_leak_A": rates["A_WR"],
        "anon_l1": float((ts.anon - ts.image).abs().mean()),
    }
    row.update(reconstruction_distances(ts.rec, ts.image, verifier))
    mm = multimodality_score(bundle, verifier, test.images, k, seed)
    row["multimodality_anon"] = mm["anon"]
    row["multimodality_wrong"] = mm["wrong"]
    cal_dict = {"tau": cal.tau, "accuracy": cal.accuracy, "genuine_mean": cal.genuine_mean, "n_pairs": cal.n_pairs}
    return EvalReport(cal_dict, {"ours": row}), ts
