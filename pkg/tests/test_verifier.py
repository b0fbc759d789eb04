import dataclasses
import math

import numpy as np
import pytest

from trainprove.bench import WorldConfig, build_world, derive_seed
from trainprove.blackbox import InProcessEndpoint, Prediction, serve
from trainprove.learner import MlpClassifier, TrainConfig, train
from trainprove.service import Mode
from trainprove.stats import Direction, grubbs_one_sided
from trainprove.synth import sample_synthetic
from trainprove.verifier import (
    AccuracySeries,
    Variant,
    Verdict,
    VerificationConfig,
    VerificationReport,
    batch_statistics,
    check_suspect,
    prepare_shadow,
    random_verify,
    verify,
)

SEEDS = range(20)
SUSPECT_TRAIN = TrainConfig(epochs=20, batch_size=64, learning_rate=0.2, weight_decay=1e-3)


class ConstantModel:
    def __init__(self, k, label=0):
        self.k, self.label = k, label

    def predict(self, inputs, mode):
        labels = np.full(len(inputs), self.label, dtype=np.int64)
        logits = np.eye(self.k)[labels] if Mode(mode) is Mode.LOGITS else None
        return Prediction(labels, logits)


@pytest.fixture(scope="module")
def worlds():
    """(world, shadow reference for the first generator) per seed."""
    out = []
    for seed in SEEDS:
        world = build_world(WorldConfig(), seed, VerificationConfig())
        gen = world.generators["gen-a"]
        out.append((world, prepare_shadow(gen, VerificationConfig(), derive_seed(seed, 8))))
    return out


def fit(world, gen_id, seed):
    gen = world.generators[gen_id]
    data = sample_synthetic(gen, world.suspect_prompt, 200, seed)
    return train(MlpClassifier.create(gen.dim, gen.num_classes, 32, seed=seed), data,
                 dataclasses.replace(SUSPECT_TRAIN, shuffle_seed=seed))[0]


def test_batch_lengths_with_partial_last_batch():
    truth = np.arange(260) % 10
    responses = [Prediction(truth[s:s + 50]) for s in range(0, 260, 50)]
    series = batch_statistics(responses, truth, Variant.ACCURACY, 50)
    assert [len(r) for r in responses] == [50, 50, 50, 50, 50, 10]
    assert series.values == (1.0,) * 6
    wrong = [Prediction(r.labels.copy()) for r in responses]
    wrong[-1].labels[:3] = (wrong[-1].labels[:3] + 1) % 10
    assert batch_statistics(wrong, truth, Variant.ACCURACY, 50).values[-1] == pytest.approx(0.7)


def test_similarity_identical_vectors_and_skips():
    truth = np.array([0, 0, 1, 1, 2, 3])
    logits = np.array([[1, 2, 3], [1, 2, 3], [0, 5, 1], [0, 5, 1], [9, 9, 9], [1, 0, 0]], dtype=float)
    series = batch_statistics([Prediction(truth, logits)], truth, Variant.SIMILARITY, 6)
    assert series.values == (pytest.approx(1.0),)
    warnings = []
    truth = np.array([0, 1, 2, 0, 0, 1])
    parts = [Prediction(truth[:3], logits[:3]), Prediction(truth[3:], logits[3:])]
    series = batch_statistics(parts, truth, Variant.SIMILARITY, 3, warnings)
    assert series.skipped_batches == (0,)
    assert len(series.values) == 1
    assert warnings


def test_series_invariant_checked():
    with pytest.raises(ValueError):
        AccuracySeries((0.5, 0.5), 50, 260)


def test_logit_variants_need_logits():
    with pytest.raises(ValueError):
        VerificationConfig(variant=Variant.ENTROPY, query_mode=Mode.LABELS)
    with pytest.raises(ValueError):
        VerificationConfig(shadow_prompt_seed=5, validation_prompt_seed=5)


def test_config_round_trip():
    cfg = VerificationConfig(variant="similarity", alpha=0.01, val_n_per_class=40)
    assert VerificationConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.mode is Mode.LOGITS


def test_shadow_itself_is_illegal_every_seed(worlds):
    for world, ref in worlds:
        for variant in Variant:
            report = check_suspect(ref, ref.shadow, variant)
            assert report.verdict is Verdict.ILLEGAL, (world.seed, variant)
            assert abs(report.grubbs.g) < 1e-9 or report.variant is not Variant.ACCURACY


def test_constant_model_is_legal(worlds):
    _, ref = worlds[0]
    report = check_suspect(ref, ConstantModel(10))
    assert report.verdict is Verdict.LEGAL
    assert report.suspect_mean == pytest.approx(0.1)


def test_same_generator_illegal_other_generator_legal(worlds):
    illegal = legal = 0
    for world, ref in worlds:
        seed = world.seed
        illegal += check_suspect(ref, fit(world, "gen-a", seed)).verdict is Verdict.ILLEGAL
        legal += check_suspect(ref, fit(world, "gen-b", seed)).verdict is Verdict.LEGAL
    assert illegal >= 0.95 * len(SEEDS)
    assert legal >= 0.95 * len(SEEDS)


def test_batch_order_invariance(worlds):
    world, ref = worlds[1]
    suspect = fit(world, "gen-b", 1)
    bs = ref.config.inference_batch_size
    nb = math.ceil(len(ref.validation) / bs)
    perm_batches = np.random.default_rng(0).permutation(nb)
    idx = np.concatenate([np.arange(b * bs, min((b + 1) * bs, len(ref.validation))) for b in perm_batches])
    shuffled = dataclasses.replace(ref, validation=ref.validation.subset(idx), _responses={})
    a, b = check_suspect(ref, suspect), check_suspect(shuffled, suspect)
    assert a.verdict == b.verdict
    assert sorted(a.shadow_series.values) == sorted(b.shadow_series.values)
    assert sorted(a.suspect_series.values) == sorted(b.suspect_series.values)
    assert a.grubbs.g == pytest.approx(b.grubbs.g, rel=1e-9)


def test_entropy_high_test_equals_low_test_on_negation(worlds):
    world, ref = worlds[2]
    report = check_suspect(ref, fit(world, "gen-c", 2), Variant.ENTROPY)
    assert report.grubbs.direction is Direction.HIGH
    mirrored = grubbs_one_sided([-v for v in report.shadow_series.values], -report.suspect_mean, Direction.LOW)
    assert mirrored.g == pytest.approx(report.grubbs.g, rel=1e-12)
    assert mirrored.is_outlier == report.grubbs.is_outlier


def test_zero_variance_fallback(worlds):
    _, ref = worlds[0]
    perfect = dataclasses.replace(ref, _responses={})
    truth = ref.validation.labels
    # force a perfect shadow series by answering with the truth
    perfect._responses[Mode.LABELS] = [Prediction(truth[s:s + 50]) for s in range(0, len(truth), 50)]
    worse = check_suspect(perfect, ConstantModel(10))
    assert worse.verdict is Verdict.LEGAL and worse.grubbs.g == math.inf and worse.warnings
    same = check_suspect(perfect, InProcessEndpoint(ref.shadow), responses=perfect._responses[Mode.LABELS])
    assert same.verdict is Verdict.ILLEGAL and same.grubbs.g == 0.0


def test_report_json_round_trip(tmp_path, worlds):
    _, ref = worlds[0]
    report = check_suspect(ref, ConstantModel(10), Variant.SIMILARITY)
    path = tmp_path / "r.json"
    report.save(path)
    again = VerificationReport.load(path)
    assert again.to_dict() == report.to_dict()
    assert again.illegality_score == -report.grubbs.g


def test_verify_over_http_matches_in_process(worlds):
    world, _ = worlds[3]
    suspect = fit(world, "gen-a", 3)
    gen = world.generators["gen-a"]
    local = verify(gen, suspect, seed=11)
    with serve(suspect) as handle:
        remote = verify(gen, handle.endpoint(), seed=11)
    assert remote.to_dict() == local.to_dict()


def test_random_baseline_is_fair():
    verdicts = [random_verify(s) for s in range(4000)]
    rate = sum(v is Verdict.ILLEGAL for v in verdicts) / len(verdicts)
    assert abs(rate - 0.5) < 4 * math.sqrt(0.25 / len(verdicts))
    assert random_verify(7) == random_verify(7)
