import numpy as np
import pytest

from regiondebias.data import GeneratorParams
from regiondebias.debias import DebiasConfig
from regiondebias.exceptions import InputError, MissingMaskError
from regiondebias.experiment import (BenchmarkConfig, _map_chunks, attention_records, build_benchmark,
                                     delta_pairs, evaluate_seed, run_variant, score)
from regiondebias.training import BiasInductionParams

from conftest import PROMPTS


def test_map_chunks_order_is_worker_independent():
    fn = lambda sl: list(range(sl.start, sl.stop))  # noqa: E731
    assert _map_chunks(fn, 200, 1, 64) == _map_chunks(fn, 200, 4, 64) == list(range(200))


def test_run_variant_and_score(biased_encoder, small_samples):
    cfg = DebiasConfig()
    zs = run_variant(small_samples, "zero_shot", cfg, biased_encoder)
    full = run_variant(small_samples, "full", cfg, biased_encoder, workers=2)
    assert len(zs) == len(full) == len(small_samples)
    m = score(small_samples, full)
    assert m.gap == m.avg - m.wg and set(m.group_counts) == {0, 1, 2, 3}
    with pytest.raises(InputError):
        run_variant(small_samples, "nope", cfg, biased_encoder)
    assert run_variant([], "full", cfg, biased_encoder) == []


def test_missing_masks_named(biased_encoder, small_samples):
    from regiondebias.data import Sample
    s = small_samples[0]
    bad = [Sample(s.image, 0, 0, None, "lonely")]
    with pytest.raises(MissingMaskError, match="lonely"):
        run_variant(bad, "full", DebiasConfig(), biased_encoder)
    assert len(run_variant(bad, "zero_shot", DebiasConfig(), biased_encoder)) == 1


def test_delta_pairs_and_attention(biased_encoder, small_samples):
    pairs = delta_pairs(small_samples[:10], biased_encoder, PROMPTS)
    assert all(-2 <= p.delta_full <= 2 and -2 <= p.delta_nontarget <= 2 for p in pairs)
    res = run_variant(small_samples[:5], "full", DebiasConfig(), biased_encoder)
    recs = attention_records(small_samples[:5], res, biased_encoder)
    for r in recs:
        assert r.before.shape == r.after.shape == (4, 4)
        assert 0 <= r.iou_before <= 1 and 0 <= r.iou_after <= 1


def test_small_benchmark_end_to_end():
    bc = BenchmarkConfig(generator=GeneratorParams(n_samples=100), bias=BiasInductionParams(epochs=1))
    bench = build_benchmark(bc.with_seed(1), PROMPTS)
    assert len(bench.train) + len(bench.val) + len(bench.test) == 100
    rep = evaluate_seed(bc, DebiasConfig(), 1, variants=("zero_shot", "full"))
    assert set(rep.metrics) == {"zero_shot", "full"}
    assert rep.iou_before is not None and rep.converged_fraction is not None
    assert np.isfinite(rep.correlation)
