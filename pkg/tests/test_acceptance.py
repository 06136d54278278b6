"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v -s`` (or just
``python3 tests/test_acceptance.py``); the summary lines are also repeated at
the end of every pytest run that includes this file.
"""

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from regiondebias.cli import main as cli_main
from regiondebias.data import GeneratorParams
from regiondebias.debias import DebiasConfig, prompt_embeddings, reconstruct, run_pipeline
from regiondebias.encoder import EncoderConfig, ToyViTEncoder
from regiondebias.experiment import BenchmarkConfig, build_benchmark, evaluate_seed
from regiondebias.masks import OracleMaskProvider, apply_mask
from regiondebias.metrics import GroupedPrediction, attention_iou, attention_threshold, group_metrics

SEEDS = (0, 1, 2)
BENCHMARK = BenchmarkConfig(generator=GeneratorParams(n_samples=1000, correlation=0.9))
RESULTS: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print("\n" + line, flush=True)


@pytest.fixture(scope="module")
def pipeline_runs():
    """50 seeded single-sample pipeline runs on the seed-0 benchmark encoder."""
    t0 = time.perf_counter()
    bench = build_benchmark(BENCHMARK.with_seed(0), DebiasConfig().prompts)
    samples = bench.test[:50]
    provider = OracleMaskProvider.from_samples(samples, "bird")
    runs = [(s, run_pipeline(s, DebiasConfig(seed=k), bench.encoder, provider)) for k, s in enumerate(samples)]
    return bench.encoder, runs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def seed_reports():
    t0 = time.perf_counter()
    reports = [evaluate_seed(BENCHMARK, DebiasConfig(), seed) for seed in SEEDS]
    return reports, time.perf_counter() - t0


def test_criterion_01_support_constraint(pipeline_runs):
    _, runs, elapsed = pipeline_runs
    violations = sum(int(np.count_nonzero(r.state.delta[r.state.support == 0])) for _, r in runs)
    support_ok = all(np.array_equal(r.state.support, 1 - s.target_mask) for s, r in runs)
    ok = len(runs) == 50 and violations == 0 and support_ok and elapsed < 120
    report(1, ok, f"{len(runs)} runs, {violations} nonzero delta pixels outside the non-target region, "
                  f"{elapsed:.1f}s (limit 120s)")
    assert ok


def test_criterion_02_stopping_soundness(pipeline_runs):
    encoder, runs, _ = pipeline_runs
    text = prompt_embeddings(encoder, DebiasConfig().prompts)
    text = text / np.linalg.norm(text, axis=1, keepdims=True)
    bad, converged = 0, 0
    for s, r in runs:
        bg = np.clip(apply_mask(s.image, r.state.support) + r.state.delta, 0.0, 1.0)
        z = encoder.encode_image(bg)  # independent forward pass
        sims = text @ z
        spread = float(sims.max() - sims.min())
        converged += r.converged
        if r.converged and not spread < 1e-3:
            bad += 1
        if r.converged != (spread < 1e-3):
            bad += 1
    ok = bad == 0 and converged > 0
    report(2, ok, f"{converged}/{len(runs)} converged; {bad} runs where the flag disagrees with a fresh "
                  f"forward pass at tolerance 1e-3")
    assert ok


def test_criterion_03_reconstruction_identities(pipeline_runs):
    _, runs, _ = pipeline_runs
    zero_ok = True
    target_ok = True
    for s, r in runs:
        zero = replace(r.state, delta=np.zeros_like(r.state.delta))
        zero_ok &= np.array_equal(reconstruct(s.image, s.target_mask, zero), s.image)
        keep = s.target_mask == 1
        target_ok &= np.array_equal(r.reconstructed[keep], s.image[keep])
    ok = bool(zero_ok and target_ok)
    report(3, ok, f"delta=0 reproduces x exactly: {bool(zero_ok)}; target pixels bit-exact in all "
                  f"{len(runs)} runs: {bool(target_ok)}")
    assert ok


def test_criterion_04_gradient_correctness():
    eps, worst, checked = 1e-3, 0.0, 0
    for seed in range(5):
        enc = ToyViTEncoder(EncoderConfig(seed=seed))
        rng = np.random.default_rng(100 + seed)
        x = rng.uniform(0.05, 0.95, (enc.image_size, enc.image_size, 3))
        t = torch.from_numpy(enc.encode_texts(["A photo of a landbird", "A photo of a waterbird"]))

        def f(z):
            s = t @ z
            return (s[0] - s[1]) ** 2

        grad = enc.image_gradient(x, f)
        for _ in range(20):
            i, j, c = (int(v) for v in (rng.integers(0, 32), rng.integers(0, 32), rng.integers(0, 3)))
            xp, xm = x.copy(), x.copy()
            xp[i, j, c] += eps
            xm[i, j, c] -= eps
            fp = float(f(torch.from_numpy(enc.encode_image(xp))))
            fm = float(f(torch.from_numpy(enc.encode_image(xm))))
            fd = (fp - fm) / (2 * eps)
            rel = abs(grad[i, j, c] - fd) / max(abs(fd), abs(grad[i, j, c]), 1e-12)
            worst = max(worst, rel)
            checked += 1
    ok = checked == 100 and worst < 1e-3
    report(4, ok, f"{checked} pixels over 5 seeds, worst relative error {worst:.2e} (limit 1e-3)")
    assert ok


def _brute_force(att, target):
    values = att.ravel()
    best = None
    for v in np.unique(values):
        if math.fsum(values[values >= v]) >= 0.5 and (best is None or v > best):
            best = v
    sel = att >= best
    union = (sel | target).sum()
    return best, ((sel & target).sum() / union if union else 0.0)


def test_criterion_05_attention_iou_oracle():
    rng = np.random.default_rng(5)
    mismatches = 0
    for k in range(100):
        raw = rng.integers(1, 5, (4, 4)).astype(float) if k % 2 else rng.random((4, 4))
        att = raw / raw.sum()
        target = rng.integers(0, 2, (4, 4)).astype(bool)
        res = attention_iou(att, target.astype(int))
        tau, iou = _brute_force(att, target)
        mismatches += (attention_threshold(att) != tau) or (res.iou != iou)
    ok = mismatches == 0
    report(5, ok, f"100 random 4x4 maps (50 with ties), {mismatches} mismatches against brute force")
    assert ok


def test_criterion_06_metric_identities():
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        preds = [GroupedPrediction(int(p), int(t), int(g)) for p, t, g in
                 zip(rng.integers(0, 2, n), rng.integers(0, 2, n), rng.integers(0, 4, n))]
        m = group_metrics(preds)
        bad += (m.gap != m.avg - m.wg) or (m.wg > m.avg)
    arithmetic = round(88.2 - 71.6, 1) == 16.6
    ok = bad == 0 and arithmetic
    report(6, ok, f"1000 randomized prediction sets, {bad} identity violations; 88.2 - 71.6 = 16.6: {arithmetic}")
    assert ok


def _mean(reports, variant, attr):
    return float(np.mean([getattr(r.metrics[variant], attr) for r in reports]))


def test_criterion_07_directional_end_to_end(seed_reports):
    reports, elapsed = seed_reports
    wg_full, wg_zs = _mean(reports, "full", "wg"), _mean(reports, "zero_shot", "wg")
    gap_full = _mean(reports, "full", "gap")
    gap_nf, gap_rr = _mean(reports, "noise_filled", "gap"), _mean(reports, "random_repaint", "gap")
    ok = wg_full >= wg_zs and gap_full <= gap_nf and gap_full <= gap_rr and elapsed < 600
    report(7, ok, f"mean over seeds {SEEDS}: WG full {wg_full:.3f} vs zero-shot {wg_zs:.3f}; Gap full "
                  f"{gap_full:.3f} vs noise_filled {gap_nf:.3f}, random_repaint {gap_rr:.3f}; "
                  f"{elapsed:.0f}s (limit 600s)")
    assert ok


def test_criterion_08_directional_correlation(seed_reports):
    reports, _ = seed_reports
    coeffs = [r.correlation for r in reports]
    ok = all(c is not None and c > 0 for c in coeffs)
    report(8, ok, "Pearson(delta_nontarget, delta_full) per seed: " + ", ".join(f"{c:.3f}" for c in coeffs))
    assert ok


def test_criterion_09_attention_alignment(seed_reports):
    reports, _ = seed_reports
    before = float(np.mean([r.iou_before for r in reports]))
    after = float(np.mean([r.iou_after for r in reports]))
    per_seed = ", ".join(f"{r.iou_before:.3f}->{r.iou_after:.3f}" for r in reports)
    ok = after >= before
    report(9, ok, f"mean Attention-IoU before {before:.3f}, after {after:.3f} (per seed {per_seed})")
    assert ok


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_cli_determinism(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("run_id: determinism\ndataset:\n  generator: {n_samples: 200}\nencoder:\n  bias: {epochs: 2}\n")
    outcomes = {}
    for cmd in ("generate", "evaluate", "attention"):
        trees = []
        for rep in ("first", "second"):
            out = tmp_path / f"{cmd}-{rep}"
            extra = [] if cmd == "generate" else ["--variant", "all", "--workers", "2"]
            code = cli_main([cmd, "--config", str(cfg), "--seed", "3", "--out", str(out)] + extra)
            trees.append((code, _tree(out)))
        outcomes[cmd] = trees[0][0] == trees[1][0] == 0 and trees[0][1] == trees[1][1] and bool(trees[0][1])
    ok = all(outcomes.values())
    report(10, ok, "byte-identical output trees on rerun: "
                   + ", ".join(f"{k}={'yes' if v else 'no'}" for k, v in outcomes.items()))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
