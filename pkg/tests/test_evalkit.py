import math

import numpy as np
import pytest
import torch

from srstar.corpus import scan_corpus
from srstar.degradation import Domain, ShapeError, synth_lr, to_canonical_grid
from srstar.evalkit import (
    EvalRecord, average_record, evaluate, identity_generator, lpips, make_panel, psnr,
    records_to_rows, ssim, write_results_table,
)
from srstar.losses import fixed_random_backbone

from oracles import psnr_loop, ssim_loop


def test_psnr_examples():
    a = torch.rand(3, 8, 8)
    assert psnr(a, a) == 99.0
    assert psnr(torch.zeros(3, 4, 4), torch.ones(3, 4, 4)) == 0.0
    with pytest.raises(ShapeError):
        psnr(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))


def test_psnr_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a, b = rng.random((3, 12, 12)), rng.random((3, 12, 12))
        assert abs(psnr(a, b) - psnr_loop(a, b)) < 1e-6


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(1)
    a = rng.random((3, 64, 64))
    base = rng.normal(size=a.shape)
    values = [psnr(a, a + s * base) for s in (0.01, 0.05, 0.1)]
    assert values[0] > values[1] > values[2]


def test_ssim_examples():
    a = torch.rand(3, 16, 16)
    assert abs(ssim(a, a) - 1.0) < 1e-12
    c1 = 0.01**2
    assert abs(ssim(torch.zeros(3, 16, 16), torch.ones(3, 16, 16)) - c1 / (1 + c1)) < 1e-6
    b = torch.rand(3, 16, 16)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    with pytest.raises(ShapeError):
        ssim(torch.zeros(3, 10, 16), torch.zeros(3, 10, 16))


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(3):
        a = rng.random((3, 14, 15))
        b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
        assert abs(ssim(a, b) - ssim_loop(a, b)) < 1e-4


def test_ssim_range_and_identity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
        assert -1 <= ssim(a, b) <= 1
        assert ssim(a, b) < 1
        assert ssim(-a, a) >= -1


def test_lpips_examples():
    bb = fixed_random_backbone()
    a = torch.rand(3, 32, 32)
    assert lpips(a, a, bb) == 0
    assert lpips(a, torch.rand(3, 32, 32), bb) >= 0
    assert lpips(a, a, None) is None


def test_lpips_noise_monotone():
    bb = fixed_random_backbone()
    gen = torch.Generator().manual_seed(5)
    wins = 0
    for _ in range(100):
        a = torch.rand(3, 32, 32, generator=gen)
        n = torch.randn(3, 32, 32, generator=gen)
        wins += lpips(a, a + 0.2 * n, bb) > lpips(a, a + 0.05 * n, bb)
    assert wins >= 95


def test_evaluate_identity_stub_is_bicubic_baseline(desk_root):
    man = scan_corpus([desk_root])
    recs = evaluate(identity_generator, man, ["bicubic"])
    assert [r.domain for r in recs] == ["bicubic", "average"]
    from srstar.corpus import load_entry
    expected = []
    for e in man.entries:
        hr, _ = load_entry(e)
        up = to_canonical_grid(synth_lr(hr, Domain.BICUBIC_LR)).clamp(0, 1)
        expected.append(psnr(up, hr))
    assert recs[0].count == 8
    assert np.allclose(recs[0].psnr_values, expected, atol=1e-9)
    assert abs(recs[1].psnr - recs[0].psnr) < 1e-9


def test_evaluate_empty_domains(desk_root):
    assert evaluate(identity_generator, scan_corpus([desk_root]), []) == []


def test_evaluate_skips_missing_real_lr(desk_root):
    recs = evaluate(identity_generator, scan_corpus([desk_root]), ["real"])
    assert recs[0].count == 0 and recs[0].skipped == 8


def test_evaluate_all_domains_average(paired_root):
    man = scan_corpus([paired_root])
    bb = fixed_random_backbone()
    recs = evaluate(identity_generator, man, ["bicubic", "bilinear", "nearest", "real"], backbone=bb)
    assert [r.domain for r in recs] == ["bicubic", "bilinear", "nearest", "real", "average"]
    per = recs[:4]
    for r in per:
        assert r.count == 8
        assert abs(r.psnr - sum(r.psnr_values) / 8) < 1e-9
    assert abs(recs[4].psnr - np.mean([r.psnr for r in per])) < 1e-9
    assert abs(recs[4].ssim - np.mean([r.ssim for r in per])) < 1e-9
    assert abs(recs[4].lpips - np.mean([r.lpips for r in per])) < 1e-9
    assert recs[0].lpips_note == "non-comparable-to-paper"
    again = evaluate(identity_generator, man, ["bicubic", "bilinear", "nearest", "real"], backbone=bb)
    assert [r.psnr_values for r in again] == [r.psnr_values for r in recs]


def test_lpips_unavailable_marked(desk_root):
    recs = evaluate(identity_generator, scan_corpus([desk_root]), ["nearest"])
    assert recs[0].lpips is None and recs[0].lpips_note == "unavailable"
    rows = records_to_rows(recs)
    assert rows[0]["lpips"] == "n/a"


def test_results_table(tmp_path, desk_root):
    recs = evaluate(identity_generator, scan_corpus([desk_root]), ["bicubic", "nearest"])
    path = write_results_table(recs, tmp_path / "results.tsv")
    lines = path.read_text().strip().splitlines()
    assert lines[0].split("\t")[:4] == ["domain", "images", "skipped", "psnr_db"]
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["bicubic", "nearest", "average"]


def test_average_record_single_domain():
    r = EvalRecord("bicubic", [20.0, 22.0], [0.5, 0.7])
    avg = average_record([r])
    assert avg.psnr == 21.0 and abs(avg.ssim - 0.6) < 1e-12


def test_panel_layout():
    lr = torch.rand(3, 8, 8)
    panel = make_panel(lr, torch.rand(3, 32, 32), torch.rand(3, 32, 32))
    assert panel.shape == (3, 32, 3 * 32 + 2 * 4)
