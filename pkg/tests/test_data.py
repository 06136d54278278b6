import warnings

import numpy as np
import pytest

from regiondebias.data import (GROUP_NAMES, GeneratorParams, generate, group_counts, load_manifest, split,
                               write_manifest)
from regiondebias.exceptions import GenerationError, InputError, ManifestParseError, StratificationError


def test_group_counts_at_correlation_09():
    params = GeneratorParams(n_samples=1000, correlation=0.9, class_balance=0.5, seed=0)
    assert group_counts(params) == (450, 50, 50, 450)
    samples = generate(params)
    counts = np.bincount([s.group_id for s in samples], minlength=4)
    assert tuple(counts) == (450, 50, 50, 450)


def test_correlation_one_reports_empty_groups():
    with pytest.warns(UserWarning, match="waterbird_on_land"):
        samples = generate(GeneratorParams(n_samples=20, correlation=1.0))
    assert all(s.background_label == s.class_label for s in samples)


def test_infeasible_proportions_name_the_group():
    with pytest.raises(GenerationError, match="landbird_on_water"):
        group_counts(GeneratorParams(n_samples=4, correlation=0.9))


@pytest.mark.parametrize("kwargs", [dict(correlation=0.3), dict(class_balance=1.5), dict(n_samples=-1),
                                    dict(target_coverage=0.0), dict(image_size=4)])
def test_invalid_params(kwargs):
    with pytest.raises(GenerationError):
        GeneratorParams(**kwargs)


def test_empty_dataset():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert generate(GeneratorParams(n_samples=0)) == []


def test_determinism():
    a = generate(GeneratorParams(n_samples=30, seed=5))
    b = generate(GeneratorParams(n_samples=30, seed=5))
    assert all(x.same_as(y) for x, y in zip(a, b))
    c = generate(GeneratorParams(n_samples=30, seed=6))
    assert not all(x.same_as(y) for x, y in zip(a, c))


def test_coverage_and_mask_fidelity():
    samples = generate(GeneratorParams(n_samples=200, seed=1, target_coverage=0.25))
    for s in samples:
        cov = s.target_mask.mean()
        assert 0.25 * 0.9 <= cov <= 0.25 * 1.1
        assert s.target_mask.any()
        assert s.group_id == 2 * s.class_label + s.background_label
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert np.array_equal(np.round(s.image * 255) / 255, s.image)


def test_silhouette_is_class_independent():
    samples = generate(GeneratorParams(n_samples=400, seed=2))
    # at coverage 0.25 on 32x32 a square is 16x16 = 256 pixels; disks rasterize differently
    square_frac = [np.mean([s.target_mask.sum() == 256 for s in samples if s.class_label == c]) for c in (0, 1)]
    assert 0.3 < square_frac[0] < 0.7 and 0.3 < square_frac[1] < 0.7
    assert abs(square_frac[0] - square_frac[1]) < 0.15


def test_group_names():
    assert GROUP_NAMES == ("landbird_on_land", "landbird_on_water", "waterbird_on_land", "waterbird_on_water")


def test_split_properties():
    samples = generate(GeneratorParams(n_samples=200, seed=4))
    parts = split(samples, (0.6, 0.2, 0.2), seed=1)
    ids = [s.id for p in parts for s in p]
    assert sorted(ids) == sorted(s.id for s in samples)
    assert len(set(ids)) == len(ids)
    again = split(samples, (0.6, 0.2, 0.2), seed=1)
    assert [[s.id for s in p] for p in parts] == [[s.id for s in p] for p in again]
    for g in range(4):
        total = sum(s.group_id == g for s in samples)
        for frac, part in zip((0.6, 0.2, 0.2), parts):
            assert abs(sum(s.group_id == g for s in part) - frac * total) <= 1


def test_split_all_train_and_errors():
    samples = generate(GeneratorParams(n_samples=40, seed=4))
    train, val, test = split(samples, (1, 0, 0))
    assert len(train) == 40 and not val and not test
    with pytest.raises(InputError):
        split(samples, (0.5, 0.2, 0.2))
    tiny = generate(GeneratorParams(n_samples=20, seed=4))  # minority groups of 1
    with pytest.raises(StratificationError):
        split(tiny, (0.6, 0.2, 0.2))


def test_manifest_round_trip(tmp_path, small_samples):
    for s, name in zip(small_samples, ["train", "val", "test"] * 20):
        s.split = name
    path = write_manifest(small_samples, tmp_path)
    loaded = load_manifest(path)
    assert len(loaded) == len(small_samples)
    assert all(a.same_as(b) for a, b in zip(small_samples, loaded))
    assert [s.split for s in loaded] == [s.split for s in small_samples]
    assert all(s.split == "test" for s in load_manifest(path, "test"))


def test_empty_manifest(tmp_path):
    (tmp_path / "m.csv").write_text("")
    assert load_manifest(tmp_path / "m.csv") == []
    (tmp_path / "h.csv").write_text("image_path,mask_path,class_label,group_id,split\n")
    assert load_manifest(tmp_path / "h.csv") == []


def test_manifest_errors(tmp_path, small_samples):
    path = write_manifest(small_samples[:3], tmp_path)
    lines = path.read_text().splitlines()
    (tmp_path / "bad.csv").write_text("\n".join(lines[:2] + ["images/x.png,,zero,0,test"]) + "\n")
    with pytest.raises(ManifestParseError, match=":3:"):
        load_manifest(tmp_path / "bad.csv")
    (tmp_path / "short.csv").write_text("\n".join(lines[:1] + ["a,b,c"]) + "\n")
    with pytest.raises(ManifestParseError, match=":2:"):
        load_manifest(tmp_path / "short.csv")
    (tmp_path / "missing.csv").write_text("\n".join(lines[:1] + ["images/nope.png,,0,0,test"]) + "\n")
    with pytest.raises(FileNotFoundError, match="nope.png"):
        load_manifest(tmp_path / "missing.csv")
    (tmp_path / "split.csv").write_text("\n".join(lines[:1] + [lines[1].rsplit(",", 1)[0] + ",holdout"]) + "\n")
    with pytest.raises(ManifestParseError, match="holdout"):
        load_manifest(tmp_path / "split.csv")


def test_maskless_rows(tmp_path, small_samples):
    path = write_manifest(small_samples[:2], tmp_path)
    lines = path.read_text().splitlines()
    fields = lines[1].split(",")
    fields[1] = ""
    (tmp_path / "nomask.csv").write_text("\n".join([lines[0], ",".join(fields)]) + "\n")
    (s,) = load_manifest(tmp_path / "nomask.csv")
    assert not s.has_mask
