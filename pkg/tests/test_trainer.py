import csv
import random

import numpy as np
import pytest
import torch

from conftest import tiny_config, tiny_dataset, tiny_recognizer
from pwface import losses as L
from pwface.data import DataError
from pwface.passwords import inverse, password_tensor
from pwface.trainer import (
    ImageBuffer,
    Trainer,
    build_step_graph,
    check_graph_passwords,
    new_bundle,
    parameter_hash,
    sample_graph_passwords,
    train,
)


def test_graph_password_constraints_10k():
    rng = np.random.default_rng(0)
    n = 0
    for _ in range(100):
        p1, p2, p1w, p2w = sample_graph_passwords(rng, 100, 16)
        for a, b, wa, wb in zip(p1, p2, p1w, p2w):
            assert a != b and wa != inverse(a) and wb != inverse(a) and wa != wb
            n += 1
    assert n == 10_000


def test_constraint_checker_rejects_violations():
    rng = np.random.default_rng(1)
    p1, p2, p1w, p2w = sample_graph_passwords(rng, 1, 8)
    with pytest.raises(AssertionError):
        check_graph_passwords(p1, p1, p1w, p2w)
    with pytest.raises(AssertionError):
        check_graph_passwords(p1, p2, [inverse(p1[0])], p2w)


def test_step_graph_uses_inverse_for_recovery():
    cfg = tiny_config()
    b = new_bundle(cfg, tiny_recognizer())
    T = b.generator.eval()
    x = tiny_dataset().images[:4]
    with torch.no_grad():
        g = build_step_graph(T, x, np.random.default_rng(3))
        R = T(g.A1, password_tensor([inverse(p) for p in g.p1]))
        A1 = T(x, password_tensor(g.p1))
    torch.testing.assert_close(g.R, R)
    torch.testing.assert_close(g.A1, A1)
    assert g.WR1.shape == x.shape
    with torch.no_grad():
        g2 = build_step_graph(T, x, np.random.default_rng(3), no_wr=True)
    assert g2.WR1 is None and g2.WR2 is None and g2.p1 == g.p1


def test_buffer_bounded_and_swap_policy():
    buf = ImageBuffer(500)
    rng = random.Random(0)
    returned_old = 0
    for i in range(120):
        batch = torch.full((12, 1, 2, 2), float(i))
        out = buf.query(batch, rng)
        assert len(buf) <= 500
        if len(buf) < 500:
            assert torch.equal(out, batch)
        returned_old += int((out[:, 0, 0, 0] != i).sum())
    assert len(buf) == 500
    # after filling (~42 batches) roughly half of each later batch is swapped
    later = (120 - 42) * 12
    assert 0.4 * later < returned_old < 0.6 * later
    assert torch.equal(ImageBuffer(0).query(batch, rng), batch)


def test_stage_isolation_50_steps():
    data, F = tiny_dataset(), tiny_recognizer()
    cfg = tiny_config()
    tr = Trainer(new_bundle(cfg, F), cfg)
    gen = torch.Generator().manual_seed(0)
    steps = 0
    while steps < 50:
        for x, y in data.batches(4, gen):
            g = build_step_graph(tr.T.train(), x, tr.rng(steps))
            tq, df = parameter_hash(tr.T, tr.Q), parameter_hash(tr.D, tr.F)
            tr.discriminator_stage(g, y, steps)
            assert parameter_hash(tr.T, tr.Q) == tq
            assert parameter_hash(tr.D, tr.F) != df
            df = parameter_hash(tr.D, tr.F)
            tr.generator_stage(g, y)
            assert parameter_hash(tr.D, tr.F) == df
            assert parameter_hash(tr.T, tr.Q) != tq
            steps += 1
            if steps == 50:
                break
    assert all(p.requires_grad for p in tr.F.parameters())


def test_non_adversarial_F_is_never_updated():
    data, F = tiny_dataset(), tiny_recognizer()
    cfg = tiny_config(non_adversarial_F=True, max_steps=5)
    before = parameter_hash(F)
    b = train(data, cfg, F)
    assert parameter_hash(b.recognizer) == before
    assert "recognizer" not in b.optimizers


def test_generator_breakdown_terms_and_decomposition():
    data, F = tiny_dataset(), tiny_recognizer()
    cfg = tiny_config()
    tr = Trainer(new_bundle(cfg, F), cfg)
    w = cfg.weights
    for seed in range(3):
        g = build_step_graph(tr.T, data.images[:4], np.random.default_rng(seed))
        brk = tr.generator_stage(g, data.labels[:4])
        assert set(brk.terms) == set(L.GENERATOR_TERMS)
        vals = brk.as_floats()
        manual = sum(w.for_term(k) * v for k, v in vals.items() if k != "total")
        assert abs(vals["total"] - manual) <= 1e-6 * max(1.0, abs(manual))
    assert w.for_term("gan") == 1.0


def test_zero_feat_weight_gives_no_gradient_to_second_samples():
    data, F = tiny_dataset(), tiny_recognizer()
    cfg = tiny_config(lambda_feat=0.0)
    tr = Trainer(new_bundle(cfg, F), cfg)
    g = build_step_graph(tr.T, data.images[:4], np.random.default_rng(0))
    terms = tr.generator_terms(g, data.labels[:4])
    total = L.total_generator_loss(terms, cfg.weights, cfg.generator_terms())
    ga2, gw2, ga1 = torch.autograd.grad(total, [g.A2, g.WR2, g.A1], allow_unused=True)
    assert ga2 is None or float(ga2.abs().max()) == 0.0
    assert gw2 is None or float(gw2.abs().max()) == 0.0
    assert float(ga1.abs().max()) > 0


def test_ablation_switches():
    assert tiny_config(no_dis=True).feat_pairs() == ("aw",)
    assert tiny_config(no_wr=True).feat_pairs() == ("aa",)
    assert "aux" not in tiny_config(no_aux=True).generator_terms()
    assert "rec_cls" not in tiny_config(no_rec_cls=True).generator_terms()
    assert tiny_config(non_adversarial_F=True).discriminator_terms() == ("gan_d",)
    data, F = tiny_dataset(), tiny_recognizer()
    for kw in ({"no_wr": True}, {"no_aux": True}, {"no_dis": True}, {"no_rec_cls": True}):
        b = train(data, tiny_config(max_steps=2, **kw), F)
        assert b.step == 2


def test_input_validation(tmp_path):
    data, F = tiny_dataset(), tiny_recognizer()
    with pytest.raises(DataError):
        train(data.subset([]), tiny_config(), F)
    with pytest.raises(DataError):
        train(data, tiny_config(), tiny_recognizer(n_classes=5))
    with pytest.raises(ValueError):
        tiny_config(lr_g=0)


def _log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_determinism_and_resume(tmp_path):
    data, F = tiny_dataset(), tiny_recognizer()
    cfg = tiny_config(max_steps=4, checkpoint_every=2, sample_every=2)
    train(data, cfg, tiny_recognizer(), out_dir=tmp_path / "a")
    train(data, cfg, tiny_recognizer(), out_dir=tmp_path / "b")
    assert _log(tmp_path / "a" / "train_log.csv") == _log(tmp_path / "b" / "train_log.csv")
    assert (tmp_path / "a" / "checkpoint_000002.pwf").exists()
    assert (tmp_path / "a" / "samples_000004.png").exists()

    cfg6 = tiny_config(max_steps=6)
    b = train(data, cfg6, F, out_dir=tmp_path / "a", resume=tmp_path / "a" / "final.pwf")
    assert b.step == 6
    steps = [int(r["step"]) for r in _log(tmp_path / "a" / "train_log.csv")]
    assert steps == [1, 2, 3, 4, 5, 6]


def test_overfit_smoke_reconstruction_falls():
    data = tiny_dataset(n_ids=2, per_id=4)
    F = tiny_recognizer(n_classes=2)
    cfg = tiny_config(max_steps=200, batch_size=8, lr_g=1e-3, lr_q=1e-3)
    rec = {}

    def cb(tr, g, d):
        rec[tr.bundle.step] = g.as_floats()["rec"]

    train(data, cfg, F, callback=cb)
    late = np.mean([rec[s] for s in range(191, 201)])
    assert late <= 0.5 * rec[10], (rec[10], late)
