import math

import numpy as np
import pytest

from trainprove.errors import MissingClass, SpecMismatch
from trainprove.synth import (
    LabeledDataset,
    class_means,
    distribution_gap,
    dump_dataset,
    make_generator,
    make_prompt,
    make_prototypes,
    make_real_source,
    mix_datasets,
    parse_dataset,
    sample_real,
    sample_synthetic,
)


@pytest.fixture
def world():
    protos = make_prototypes(seed=11)
    return protos, make_generator("g", protos, seed=5), make_prompt("t1", seed=21)


def chi_mean_bound(k, d, z=4.0):
    """Upper bound, in units of sigma/sqrt(n), on the mean over k classes of
    the norm of a d-dimensional Gaussian mean error: E[chi_d] + z sd / sqrt(k)."""
    mean = math.sqrt(2) * math.exp(math.lgamma((d + 1) / 2) - math.lgamma(d / 2))
    sd = math.sqrt(d - mean ** 2)
    return mean + z * sd / math.sqrt(k)


def test_prototypes_on_sphere():
    p = make_prototypes(10, 16, 4.0, seed=3)
    assert p.shape == (10, 16)
    assert np.allclose(np.linalg.norm(p, axis=1), 4.0)


def test_transform_is_well_conditioned():
    protos = make_prototypes(seed=0)
    for s in range(20):
        gen = make_generator("g", protos, seed=s)
        assert np.linalg.cond(gen.transform) <= 10.0


def test_sampling_is_deterministic(world):
    _, gen, prompt = world
    a = sample_synthetic(gen, prompt, 30, seed=4)
    b = sample_synthetic(gen, prompt, 30, seed=4)
    c = sample_synthetic(gen, prompt, 30, seed=5)
    assert a.equals(b)
    assert not a.equals(c)


def test_labels_balanced_and_finite(world):
    protos, gen, prompt = world
    for data in (sample_synthetic(gen, prompt, 17, 0), sample_real(make_real_source(protos, 2), 17, 0)):
        assert np.all(data.class_counts() == 17)
        assert np.all(np.isfinite(data.features))


def test_noiseless_rows_equal_class_means(world):
    protos, _, prompt = world
    gen = make_generator("g", protos, seed=5, noise_scale=0.0)
    data = sample_synthetic(gen, prompt, 1, seed=0)
    expected = protos @ gen.transform.T + gen.bias + prompt.shift_scale * prompt.directions
    assert np.allclose(data.features, expected[data.labels], atol=1e-12)


def test_class_mean_recovery_bound(world):
    _, gen, prompt = world
    n = 500
    data = sample_synthetic(gen, prompt, n, seed=9)
    err = np.linalg.norm(class_means(data) - gen.class_means(prompt), axis=1).mean()
    assert err < chi_mean_bound(gen.num_classes, gen.dim) * gen.noise_scale / np.sqrt(n)


def test_real_class_mean_recovery():
    protos = make_prototypes(seed=1)
    spec = make_real_source(protos, 4)
    n = 500
    data = sample_real(spec, n, 3)
    err = np.linalg.norm(class_means(data) - protos, axis=1).mean()
    # mixture std is sqrt(0.9 + 0.1 * 9) sigma
    assert err < chi_mean_bound(10, 16) * np.sqrt(1.8) * spec.noise_scale / np.sqrt(n)


def test_zero_shift_prompts_share_distribution(world):
    protos, gen, _ = world
    t1 = make_prompt("a", seed=1, shift_scale=0.0)
    t2 = make_prompt("b", seed=2, shift_scale=0.0)
    n = 400
    a, b = sample_synthetic(gen, t1, n, 0), sample_synthetic(gen, t2, n, 1)
    diff = np.abs(class_means(a) - class_means(b))
    assert np.all(diff < 3 * gen.noise_scale * np.sqrt(2.0 / n) * 1.5)


def test_heavy_tail_off_is_gaussian():
    protos = make_prototypes(seed=2)
    data = sample_real(make_real_source(protos, 1, heavy_tail_mix=0.0), 2000, 0)
    resid = data.features - protos[data.labels]
    assert resid.std() == pytest.approx(0.5, rel=0.02)
    kurt = ((resid - resid.mean()) ** 4).mean() / resid.var() ** 2
    assert kurt == pytest.approx(3.0, abs=0.15)


def test_mix_counts_and_identity(world):
    protos, gen, prompt = world
    a = sample_synthetic(gen, prompt, 5, 0)
    b = sample_real(make_real_source(protos, 1), 7, 0)
    m = mix_datasets(a, b, 3)
    assert len(m) == len(a) + len(b)
    assert np.array_equal(m.class_counts(), a.class_counts() + b.class_counts())
    empty = LabeledDataset(np.zeros((0, a.dim)), np.zeros(0, dtype=np.int64), a.num_classes)
    solo = mix_datasets(a, empty, 3)
    assert sorted(map(tuple, solo.features)) == sorted(map(tuple, a.features))


def test_mix_rejects_mismatch(world):
    _, gen, prompt = world
    a = sample_synthetic(gen, prompt, 2, 0)
    other = LabeledDataset(np.zeros((4, 3)), np.array([0, 1, 0, 1]), a.num_classes)
    with pytest.raises(SpecMismatch):
        mix_datasets(a, other, 0)


def test_distribution_gap_basics(world):
    _, gen, prompt = world
    a = sample_synthetic(gen, prompt, 10, 0)
    assert distribution_gap(a, a) == 0.0
    t = 0.3
    shifted = LabeledDataset(a.features + t, a.labels, a.num_classes)
    assert distribution_gap(a, shifted) == pytest.approx(t * np.sqrt(a.dim), rel=1e-12)


def test_missing_class_raises(world):
    _, gen, prompt = world
    a = sample_synthetic(gen, prompt, 3, 0)
    keep = np.flatnonzero(a.labels != 0)
    with pytest.raises(MissingClass):
        class_means(a.subset(keep))


def test_gap_structure_over_seeds():
    same, cross, real = [], [], []
    for seed in range(20):
        protos = make_prototypes(seed=seed)
        g = make_generator("g", protos, seed=1000 + seed)
        g2 = make_generator("g2", protos, seed=2000 + seed)
        t1, t2, tt = (make_prompt(n, seed=s + 10 * seed) for n, s in (("t1", 1), ("t2", 2), ("tt", 3)))
        target = sample_synthetic(g, tt, 200, seed)
        same.append(distribution_gap(sample_synthetic(g, t1, 200, seed), target))
        cross.append(distribution_gap(sample_synthetic(g2, t2, 200, seed), target))
        real.append(distribution_gap(sample_real(make_real_source(protos, seed), 200, seed), target))
    assert np.mean(same) < np.mean(cross)
    assert np.mean(same) < np.mean(real)


def test_csv_round_trip_is_exact(world):
    protos, gen, prompt = world
    for data in (sample_synthetic(gen, prompt, 4, 1), sample_real(make_real_source(protos, 3), 4, 1)):
        again = parse_dataset(dump_dataset(data))
        assert again.equals(data)
        assert again.source_tag == data.source_tag


def test_csv_row_count_checked(world):
    _, gen, prompt = world
    text = dump_dataset(sample_synthetic(gen, prompt, 2, 1))
    with pytest.raises(ValueError):
        parse_dataset(text.rsplit("\n", 2)[0] + "\n")
