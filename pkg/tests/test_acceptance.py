"""Acceptance gate: one reported line per criterion, each at its pinned tolerance."""

import math
import time

import numpy as np
import pytest

from tumorseg.attention import attention_cost, axial_decoder_block, count_macs, full_attention, init_axial_attention
from tumorseg.autodiff import Tensor
from tumorseg.cli import loglog_slope
from tumorseg.data import make_folds, preprocess, synth_phantom
from tumorseg.gradcheck import layer_gradient_checks, network_gradient_check
from tumorseg.inference import (ensemble, labels_to_regions, postprocess_et, predict_labels, regions_to_labels,
                                sliding_window_predict)
from tumorseg.losses import LossConfig, bce_dice_loss, poly_lr, soft_dice
from tumorseg.metrics import aggregate_report, dice, evaluate_case, hd95
from tumorseg.trainer import TrainConfig, train
from tumorseg.unet import PRESETS, build_network, checkpoint_bytes

from .test_metrics import brute_dice, brute_hd95


def test_1_gradient_integrity(acceptance):
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    layers = layer_gradient_checks(seed=0)
    for name, err in layers.errors.items():
        if err > worst:
            worst, where = err, name
    tensors = 0
    for preset in PRESETS:
        rep = network_gradient_check(preset, levels=3, patch=8, batch=2, seed=0)
        tensors += len(rep.errors)
        for name, err in rep.errors.items():
            if err > worst:
                worst, where = err, f"{preset}:{name}"
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 300 and layers.max_error < 1e-6
    acceptance(1, ok, f"max rel. error {worst:.2e} ({where}) over {len(layers.errors)} layer checks and "
                      f"{tensors} network tensors, layers max {layers.max_error:.2e}; {secs:.0f} s "
                      f"(need < 1e-4, layers < 1e-6, < 300 s)")
    assert ok


def test_2_architecture_laws(acceptance):
    t0 = time.perf_counter()
    bl = build_network("BL", scale="full", materialize=False)
    bll = build_network("BL+L", scale="full", materialize=False)
    aa = build_network("BL+AA", scale="full", materialize=False)
    checks = {
        "BL encoder": bl.encoder_channels == [32, 64, 128, 256, 320],
        "BL+L encoder": bll.encoder_channels == [64, 128, 256, 512, 512],
        "BL+L decoder": bll.decoder_channels == bl.decoder_channels == [32, 64, 128, 256],
        "deep supervision": all(s.deep_supervision_levels == list(range(s.levels - 2)) for s in (bl, bll, aa)),
        "supervised resolutions": [128 // 2 ** lv for lv in aa.deep_supervision_levels] == [128, 64, 32],
        "attention resolutions": [128 // 2 ** lv for lv in aa.attention_levels] == [64, 32, 16, 8],
        "attention schedule": [aa.attention_schedule[lv] for lv in aa.attention_levels]
        == [(4, 16), (8, 32), (16, 64), (32, 128)],
        "attention only in BL+AA": not bl.attention_levels and not bll.attention_levels,
        "three region heads": all(b.out_ch == 3 for s in (bl, bll, aa) for b in s.blocks if b.kind == "head"),
    }
    secs = time.perf_counter() - t0
    ok = all(checks.values()) and secs < 1.0
    failed = [k for k, v in checks.items() if not v]
    acceptance(2, ok, f"{len(checks) - len(failed)}/{len(checks)} structural laws hold"
                      + (f" (failed: {', '.join(failed)})" if failed else "") + f"; {secs * 1e3:.0f} ms (need < 1 s)")
    assert ok


def test_3_axial_attention_complexity(acceptance):
    t0 = time.perf_counter()
    c, heads, dim = 8, 2, 4
    params = init_axial_attention(np.random.default_rng(0), c, heads, dim, np.float64)
    exact = True
    for s in (2, 4, 8):
        x = Tensor(np.random.default_rng(s).standard_normal((1, c, s, s, s)))
        with count_macs() as ca:
            axial_decoder_block(x, params)
        with count_macs() as cf:
            full_attention(x, params)
        exact &= ca == attention_cost((s,) * 3, c, heads, dim, "axial").as_counter()
        exact &= cf == attention_cost((s,) * 3, c, heads, dim, "full").as_counter()
    sides = [4, 8, 16]
    ax = loglog_slope(sides, [attention_cost((s,) * 3, c, heads, dim, "axial").scores for s in sides])
    fu = loglog_slope(sides, [attention_cost((s,) * 3, c, heads, dim, "full").scores for s in sides])
    secs = time.perf_counter() - t0
    ok = exact and abs(ax - 4.0) <= 0.1 and abs(fu - 6.0) <= 0.1 and secs < 600
    acceptance(3, ok, f"instrumented MACs {'equal' if exact else 'DIFFER from'} closed form at sides 2,4,8; "
                      f"score slopes axial {ax:.3f} / full {fu:.3f} (need 4.0±0.1 / 6.0±0.1); {secs:.1f} s")
    assert ok


def test_4_poly_schedule(acceptance):
    lrs = [poly_lr(e) for e in range(1000)]
    err = max(abs(lr - 0.01 * (1 - e / 1000) ** 0.9) for e, lr in enumerate(lrs))
    monotone = all(a > b for a, b in zip(lrs, lrs[1:]))
    ok = err <= 1e-12 and monotone
    acceptance(4, ok, f"max |lr - 0.01(1-e/1000)^0.9| = {err:.1e} over epochs 0..999 (need <= 1e-12); "
                      f"{'strictly decreasing' if monotone else 'NOT monotone'}")
    assert ok


def test_5_metric_oracles(acceptance):
    rng = np.random.default_rng(2024)
    dice_exact, hd_err = True, 0.0
    for _ in range(200):
        shape = tuple(rng.integers(1, 13, 3))
        p = rng.random(shape) < rng.uniform(0.02, 0.7)
        g = rng.random(shape) < rng.uniform(0.02, 0.7)
        dice_exact &= dice(p, g) == brute_dice(p, g)
        if p.any() and g.any():
            hd_err = max(hd_err, abs(hd95(p, g) - brute_hd95(p, g)))
        else:
            hd_err = max(hd_err, 0.0 if (hd95(p, g) == 0.0) == (not p.any() and not g.any()) else math.inf)
    labels = np.full((10, 10, 10), 2, np.uint8)
    at199, at200 = labels.copy(), labels.copy()
    at199.ravel()[:199] = 4
    at200.ravel()[:200] = 4
    out199, out200 = postprocess_et(at199), postprocess_et(at200)
    rule = (not (out199 == 4).any() and (out199 == 1).sum() == 199 and np.array_equal(out199 == 2, at199 == 2)
            and np.array_equal(out200, at200))
    ok = dice_exact and hd_err <= 1e-9 and rule
    acceptance(5, ok, f"200 mask pairs up to 12^3: dice {'exact' if dice_exact else 'MISMATCH'}, "
                      f"hd95 max error {hd_err:.1e} (need <= 1e-9); ET rule 199 -> NCR, 200 -> kept: "
                      f"{'exact' if rule else 'WRONG'}")
    assert ok


def test_6_region_algebra(acceptance):
    rng = np.random.default_rng(6)
    alphabet = np.array([0, 1, 2, 4], np.uint8)
    round_trip = nested = 0
    for _ in range(1000):
        labels = rng.choice(alphabet, size=tuple(rng.integers(1, 9, 3)))
        round_trip += np.array_equal(regions_to_labels(labels_to_regions(labels)), labels)
        masks = rng.integers(0, 2, (3,) + labels.shape)
        r = labels_to_regions(regions_to_labels(masks)).astype(bool)
        nested += bool(np.all(r[0] <= r[1]) and np.all(r[1] <= r[2]))
    ok = round_trip == 1000 and nested == 1000
    acceptance(6, ok, f"labels<->regions identity on {round_trip}/1000 maps; "
                      f"decode of arbitrary masks nested ET<=TC<=WT on {nested}/1000")
    assert ok


def test_7_batch_dice_semantics(acceptance):
    rng = np.random.default_rng(7)
    equal = True
    for _ in range(50):
        logits = Tensor(rng.standard_normal((1, 3, 4, 4, 4)) * 3)
        t = (rng.random((1, 3, 4, 4, 4)) < 0.3).astype(np.float64)
        equal &= (bce_dice_loss(logits, t, LossConfig(dice_mode="batch")).item()
                  == bce_dice_loss(logits, t, LossConfig(dice_mode="sample")).item())
    # sample A: prediction equals its 4-voxel target; sample B: 2 of its 4 target voxels predicted
    t = np.zeros((2, 1, 2, 2, 2))
    t[0, 0, 0] = 1
    t[1, 0, :, 0] = 1
    p = t.copy()
    p[1, 0] = 0
    p[1, 0, 0, 0] = 1
    e = 1e-5
    predicted = (12 + e) / (14 + e) - ((8 + e) / (8 + e) + (4 + e) / (6 + e)) / 2
    measured = soft_dice(Tensor(p), Tensor(t), "batch").item() - soft_dice(Tensor(p), Tensor(t), "sample").item()
    err = abs(measured - predicted)
    ok = equal and err <= 1e-10 and measured != 0
    acceptance(7, ok, f"batch == sample at batch size 1: {'exact' if equal else 'DIFFERENT'} (50 draws); "
                      f"2-sample gap {measured:.6f} vs oracle {predicted:.6f}, error {err:.1e} (need <= 1e-10)")
    assert ok


@pytest.mark.slow
def test_8_overfit_drill(acceptance):
    t0 = time.perf_counter()
    raw = [synth_phantom(s, 32, case_id=f"phantom{s}") for s in (1, 2)]
    cases = [preprocess(c) for c in raw]
    split = make_folds([c.case_id for c in cases], k=2, seed=0)
    by_id = {c.case_id: c for c in cases}
    models, best = [], []
    for fold in range(split.k):
        train_cases = [by_id[c] for c in split.training(fold)]
        spec = build_network("BL+L+GN", seed=fold)
        cfg = TrainConfig.drill(batch_size=2, seed=fold)
        res = train(spec, train_cases, train_cases, cfg, fold=fold)
        best.append(max(r.val_dice["WT"] for r in res.records))
        models.append(spec)
    results = {}
    for raw_case, case in zip(raw, cases):
        prob = ensemble([sliding_window_predict(m, case) for m in models])
        labels = postprocess_et(predict_labels(prob, min_et_voxels=None), 200)
        results[case.case_id] = evaluate_case(labels, raw_case.labels)
    report = aggregate_report(results)
    table = report.table("BL+L+GN").splitlines()
    shaped = (table[0].split("|")[1].split() == ["ET", "TC", "WT", "Average"]
              and table[2].startswith("Dice") and table[3].startswith("HD95") and len(table) == 4)
    secs = time.perf_counter() - t0
    print(report.table("BL+L+GN"), end="")
    ok = min(best) > 0.90 and shaped and secs < 1800
    wt = report.mean("dice")["WT"]
    acceptance(8, ok, f"best train WT dice per fold {', '.join(f'{b:.3f}' for b in best)} within 60 epochs "
                      f"(need > 0.90); 2-fold ensemble WT dice {wt:.3f}; report "
                      f"{'has' if shaped else 'LACKS'} the ET/TC/WT/Average layout; {secs / 60:.1f} min (need < 30)")
    assert ok


def test_9_determinism(acceptance):
    def run():
        cases = [preprocess(synth_phantom(s, 24, case_id=f"d{s}")) for s in (3, 4)]
        spec = build_network("BL+AA", patch_size=8, levels=3, seed=11, dtype=np.float64)
        cfg = TrainConfig(epochs=2, minibatches_per_epoch=3, batch_size=2, seed=11, patch_size=(8, 8, 8))
        train(spec, cases, cases, cfg)
        prob = sliding_window_predict(spec, cases[0], (8, 8, 8), 0.5)
        return checkpoint_bytes(spec), prob

    (ck1, p1), (ck2, p2) = run(), run()
    same_ckpt, same_pred = ck1 == ck2, np.array_equal(p1, p2) and p1.dtype == np.float64
    ok = same_ckpt and same_pred
    acceptance(9, ok, f"two 64-bit runs with one seed: checkpoints {'bit-identical' if same_ckpt else 'DIFFER'} "
                      f"({len(ck1)} bytes), predictions {'bit-identical' if same_pred else 'DIFFER'}")
    assert ok
