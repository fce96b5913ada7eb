import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

from conftest import tiny_recognizer
from pwface.metrics import (
    EvalReport,
    MetricsError,
    TransformSet,
    _mean_pairwise,
    calibrate_threshold,
    detection_drift,
    detector_drift,
    dssim,
    multimodality_score,
    password_sweep,
    reconstruction_distances,
    ssim,
    sweep_layout,
    tile_password,
    tile_position,
    verification_pairs,
    verification_rates,
)
from pwface.networks import GeneratorConfig, ModelBundle
from pwface.passwords import Password, all_passwords
from pwface.pipeline import Detection


# ------------------------------------------------------------------ SSIM


def ssim_oracle(x, y, L=2.0, size=11, sigma=1.5):
    """Direct per-pixel formula with border windows renormalised over in-image pixels."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    C, H, W = x.shape
    half = size // 2
    g = [math.exp(-((k - half) ** 2) / (2 * sigma**2)) for k in range(size)]
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    total = 0.0
    for c in range(C):
        for i in range(H):
            for j in range(W):
                wsum = mx = my = 0.0
                pts = []
                for u in range(size):
                    for v in range(size):
                        a, b = i + u - half, j + v - half
                        if 0 <= a < H and 0 <= b < W:
                            w = g[u] * g[v]
                            pts.append((w, x[c, a, b], y[c, a, b]))
                            wsum += w
                mx = sum(w * p for w, p, _ in pts) / wsum
                my = sum(w * q for w, _, q in pts) / wsum
                vx = sum(w * (p - mx) ** 2 for w, p, _ in pts) / wsum
                vy = sum(w * (q - my) ** 2 for w, _, q in pts) / wsum
                cxy = sum(w * (p - mx) * (q - my) for w, p, q in pts) / wsum
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return total / (C * H * W)


def test_ssim_matches_brute_force_on_8x8():
    g = torch.Generator().manual_seed(0)
    for _ in range(5):
        x = torch.rand(3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
        y = (x + 0.5 * torch.randn(3, 8, 8, generator=g, dtype=torch.float64)).clamp(-1, 1)
        assert abs(float(ssim(x, y)) - ssim_oracle(x.numpy(), y.numpy())) < 1e-6


def test_dssim_properties():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, 16, 16, generator=g) * 2 - 1
    y = torch.rand(2, 3, 16, 16, generator=g) * 2 - 1
    assert torch.all(dssim(x, x) == 0)
    torch.testing.assert_close(dssim(x, y), dssim(y, x))
    assert torch.all((dssim(x, y) >= 0) & (dssim(x, y) <= 1))
    assert torch.all(dssim(x, -x) > dssim(x, y) - 1)  # finite
    with pytest.raises(MetricsError):
        ssim(x, y[:, :, :8])


def test_reconstruction_distances_zero_on_identity():
    x = torch.rand(3, 3, 32, 32) * 2 - 1
    d = reconstruction_distances(x, x.clone(), tiny_recognizer())
    assert d == {"dssim": 0.0, "l1": 0.0, "l2": 0.0, "lpips_proxy": pytest.approx(0.0, abs=1e-6)}
    with pytest.raises(MetricsError):
        reconstruction_distances(x, x[:2])


# ---------------------------------------------------------- verification


def test_calibration_separable_and_chance():
    rng = np.random.default_rng(0)
    gen = rng.uniform(0.9, 1.0, 200)
    imp = rng.uniform(-0.2, 0.1, 200)
    tau, acc = calibrate_threshold(gen, imp)
    assert acc == 1.0 and 0.1 < tau < 0.9
    same = rng.normal(0, 1, 4000)
    tau, acc = calibrate_threshold(same[:2000], same[2000:])
    assert acc < 0.56
    assert calibrate_threshold(gen, imp) == calibrate_threshold(gen, imp)


def test_verification_pairs_counts():
    labels = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2])
    gen, imp = verification_pairs(labels, seed=0)
    assert len(gen) == 3 + 1 + 6 == len(imp)
    assert np.all(labels[gen[:, 0]] == labels[gen[:, 1]])
    assert np.all(labels[imp[:, 0]] != labels[imp[:, 1]])
    with pytest.raises(MetricsError):
        verification_pairs(np.zeros(4, dtype=int))


def test_rates_on_literal_recovery():
    V = tiny_recognizer()
    g = torch.Generator().manual_seed(0)
    I = torch.rand(6, 3, 32, 32, generator=g) * 2 - 1
    other = torch.rand(6, 3, 32, 32, generator=g) * 2 - 1
    ts = TransformSet(I, other, I.clone(), other, [], [])
    r = verification_rates(V, 0.5, ts)
    assert r["I_R"] == 1.0
    assert all(0.0 <= v <= 1.0 for v in r.values())
    assert r["A_WR"] == 1.0


# -------------------------------------------------------- multimodality


class _Stub(torch.nn.Module):
    """Fake generator whose output encodes the password integer as a flat grey level."""

    def __init__(self, n_bits, size=32, ignore_password=False):
        super().__init__()
        self.config = GeneratorConfig(image_size=size, password_bits=n_bits)
        self.ignore = ignore_password

    def forward(self, image, codes):
        if self.ignore:
            return image.clone()
        bits = (codes + 0.5).round()
        weights = 2.0 ** torch.arange(codes.shape[1] - 1, -1, -1, dtype=codes.dtype)
        value = (bits * weights).sum(1) / (2 ** codes.shape[1] - 1) * 2 - 1
        return value[:, None, None, None].expand_as(image).clone()


def test_multimodality_degenerate_and_orthogonal():
    b = ModelBundle(generator=_Stub(8, ignore_password=True))
    x = torch.rand(3, 3, 32, 32) * 2 - 1
    s = multimodality_score(b, tiny_recognizer(), x, k=4)
    assert s["anon"] == pytest.approx(1.0) and s["wrong"] == pytest.approx(1.0)
    eye = torch.eye(4, dtype=torch.float64)
    assert _mean_pairwise([eye[i : i + 1] for i in range(4)]) == 0.0
    with pytest.raises(MetricsError):
        multimodality_score(b, tiny_recognizer(), x, k=1)
    with pytest.raises(MetricsError):
        multimodality_score(ModelBundle(generator=_Stub(4, ignore_password=True)), tiny_recognizer(), x, k=16)


# ------------------------------------------------------------- drift


def _det(box, kp_shift=0.0):
    x0, y0, x1, y1 = box
    kp = tuple((x0 + 5 + k + kp_shift, y0 + 5 + k + kp_shift) for k in range(5))
    return Detection(box, kp, 0.99)


def test_detector_drift_exact_shift():
    orig = [[_det((10, 10, 40, 40)), _det((60, 5, 90, 35))], [_det((0, 0, 20, 20))]]
    shifted = [[_det((b.box[0] + 2, b.box[1] + 2, b.box[2] + 2, b.box[3] + 2)) for b in reversed(im)] for im in orig]
    d = detection_drift(orig, shifted)
    assert d["box"] == 2.0 and d["keypoints"] == 2.0 and d["matched"] == 3 and d["unmatched"] == 0
    same = detection_drift(orig, orig)
    assert same["box"] == 0.0 and same["keypoints"] == 0.0
    missing = detection_drift(orig, [[orig[0][0]], []])
    assert missing["matched"] == 1 and missing["unmatched"] == 2


def test_detector_drift_without_detector_is_unavailable():
    assert detector_drift(None, [], []) == {"available": False}


# -------------------------------------------------------------- sweep


def test_sweep_mosaic_bijective(tmp_path):
    b = ModelBundle(generator=_Stub(8))
    x = torch.zeros(3, 32, 32)
    res = password_sweep(b, x, verifier=None, mosaic_path=tmp_path / "m.png")
    assert res.outputs.shape == (256, 3, 32, 32)
    assert sweep_layout(8) == (16, 16)
    mosaic = np.asarray(Image.open(tmp_path / "m.png"))
    assert mosaic.shape == (16 * 32, 16 * 32, 3)
    seen = set()
    for r in range(16):
        for c in range(16):
            p = tile_password(r, c, 8)
            assert tile_position(p) == (r, c)
            tile = mosaic[r * 32 : (r + 1) * 32, c * 32 : (c + 1) * 32]
            assert np.all(tile == p.to_int())  # the stub paints the password integer
            seen.add(p)
    assert seen == set(all_passwords(8))
    again = password_sweep(b, x)
    assert torch.equal(again.outputs, res.outputs)
    with pytest.raises(MetricsError):
        password_sweep(ModelBundle(generator=_Stub(16)), x)


def test_sweep_statistics_with_verifier():
    b = ModelBundle(generator=_Stub(4))
    res = password_sweep(b, torch.zeros(3, 32, 32), tiny_recognizer(), tau=2.0)
    assert res.changed_fraction == 1.0  # every cosine is below an impossible threshold
    assert set(res.pairwise) == {"mean", "min", "max", "std"}


# ------------------------------------------------------------- report


def test_report_serialisation(tmp_path):
    rep = EvalReport({"tau": 0.5}, {"ours": {"l1": 0.1, "recovery_accuracy": 1.0}, "baseline_blur": {"l1": 0.2}})
    rep.write(tmp_path)
    assert json.loads((tmp_path / "report.json").read_text())["methods"]["ours"]["l1"] == 0.1
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == "method,l1,recovery_accuracy"
    assert lines[1] == "baseline_blur,0.2,"
