"""Provenance verification: shadow model, per-batch statistics, Grubbs decision.

The defender samples a shadow set and a validation set from its own
generator under two different prompt sets, trains a shadow classifier on the
first, and sends the validation set through both the shadow and the suspect
in identical batches. If the suspect's mean per-batch score is a one-sided
Grubbs outlier relative to the shadow's per-batch scores, the suspect
generalizes unlike a model trained on the defender's data and is judged
Legal; otherwise it is judged Illegal.

Variants:

* ``accuracy``   - per-batch accuracy, low-outlier test (the main method)
* ``entropy``    - per-batch mean softmax entropy, high-outlier test
* ``similarity`` - per-batch mean within-class pairwise cosine similarity of
  logits (classes taken from validation ground truth), low-outlier test
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from trainprove.blackbox import InProcessEndpoint, Prediction, query_batches
from trainprove.errors import InsufficientBatches, ZeroVariance
from trainprove.learner import CrossEntropy, MlpClassifier, TrainConfig, train
from trainprove.service.schemas import Mode
from trainprove.stats import (
    Direction,
    GrubbsResult,
    SignificanceConfig,
    grubbs_critical,
    grubbs_one_sided,
    class_mean_cosine,
    softmax_entropies,
)
from trainprove.synth import (
    DEFAULT_PROMPT_SHIFT,
    GeneratorSpec,
    LabeledDataset,
    PromptSpec,
    make_prompt,
    sample_synthetic,
)


class Variant(str, enum.Enum):
    ACCURACY = "accuracy"
    ENTROPY = "entropy"
    SIMILARITY = "similarity"

    @property
    def direction(self) -> Direction:
        return Direction.HIGH if self is Variant.ENTROPY else Direction.LOW

    @property
    def default_mode(self) -> Mode:
        return Mode.LABELS if self is Variant.ACCURACY else Mode.LOGITS


class Verdict(str, enum.Enum):
    ILLEGAL = "illegal"
    LEGAL = "legal"


def default_shadow_train() -> TrainConfig:
    return TrainConfig(epochs=20, batch_size=64, learning_rate=0.05, weight_decay=1e-3, loss=CrossEntropy())


@dataclass(frozen=True)
class VerificationConfig:
    shadow_n_per_class: int = 500
    val_n_per_class: int = 100
    inference_batch_size: int = 50
    alpha: float = 0.05
    variant: Variant = Variant.ACCURACY
    query_mode: Mode | None = None
    shadow_hidden: int = 64
    shadow_train: TrainConfig = field(default_factory=default_shadow_train)
    shadow_prompt_seed: int = 1001
    validation_prompt_seed: int = 1002
    prompt_shift: float = DEFAULT_PROMPT_SHIFT

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.query_mode is not None:
            object.__setattr__(self, "query_mode", Mode(self.query_mode))
        SignificanceConfig(self.alpha)
        if self.shadow_prompt_seed == self.validation_prompt_seed:
            raise ValueError("shadow and validation prompt sets must differ")
        if self.shadow_n_per_class < 1 or self.val_n_per_class < 1:
            raise ValueError("dataset sizes must be positive")
        if self.inference_batch_size < 1:
            raise ValueError("inference_batch_size must be >= 1")
        if self.mode is Mode.LABELS and self.variant is not Variant.ACCURACY:
            raise ValueError(f"the {self.variant.value} variant needs logits access")

    @property
    def mode(self) -> Mode:
        return self.query_mode or self.variant.default_mode

    def batch_count(self, num_classes: int) -> int:
        return math.ceil(self.val_n_per_class * num_classes / self.inference_batch_size)

    def prompts(self, gen: GeneratorSpec) -> tuple[PromptSpec, PromptSpec]:
        k, d = gen.num_classes, gen.dim
        return (
            make_prompt("shadow", k, d, self.shadow_prompt_seed, self.prompt_shift),
            make_prompt("validation", k, d, self.validation_prompt_seed, self.prompt_shift),
        )

    def to_dict(self) -> dict:
        return {
            "shadow_n_per_class": self.shadow_n_per_class,
            "val_n_per_class": self.val_n_per_class,
            "inference_batch_size": self.inference_batch_size,
            "alpha": self.alpha,
            "variant": self.variant.value,
            "query_mode": None if self.query_mode is None else self.query_mode.value,
            "shadow_hidden": self.shadow_hidden,
            "shadow_train": self.shadow_train.to_dict(),
            "shadow_prompt_seed": self.shadow_prompt_seed,
            "validation_prompt_seed": self.validation_prompt_seed,
            "prompt_shift": self.prompt_shift,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationConfig":
        d = dict(d)
        if "shadow_train" in d:
            d["shadow_train"] = TrainConfig.from_dict(d["shadow_train"])
        return cls(**d)


@dataclass(frozen=True)
class AccuracySeries:
    """Per-batch statistic (accuracy, entropy, or similarity) over a dataset.

    ``skipped_batches`` lists batches that produced no value (only possible
    for the similarity statistic), so ``len(values) + len(skipped_batches)``
    always equals ``ceil(item_count / batch_size)``.
    """

    values: tuple[float, ...]
    batch_size: int
    item_count: int
    skipped_batches: tuple[int, ...] = ()

    def __post_init__(self):
        expected = math.ceil(self.item_count / self.batch_size)
        if len(self.values) + len(self.skipped_batches) != expected:
            raise ValueError(f"series covers {len(self.values)} batches, expected {expected}")

    def mean(self) -> float:
        return float(np.mean(self.values))

    def to_dict(self) -> dict:
        return {
            "values": list(self.values),
            "batch_size": self.batch_size,
            "item_count": self.item_count,
            "skipped_batches": list(self.skipped_batches),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracySeries":
        return cls(
            tuple(float(v) for v in d["values"]),
            int(d["batch_size"]),
            int(d["item_count"]),
            tuple(int(v) for v in d.get("skipped_batches", ())),
        )


def batch_statistics(
    responses: Sequence[Prediction],
    truth,
    variant: Variant = Variant.ACCURACY,
    batch_size: int | None = None,
    warnings: list | None = None,
) -> AccuracySeries:
    """Reduce ordered per-batch predictions to one value per batch."""
    variant = Variant(variant)
    truth = np.asarray(truth, dtype=np.int64)
    sizes = [len(r) for r in responses]
    if sum(sizes) != truth.size:
        raise ValueError(f"responses cover {sum(sizes)} items, truth has {truth.size}")
    if batch_size is None:
        batch_size = sizes[0] if sizes else 1
    values, skipped = [], []
    start = 0
    for i, resp in enumerate(responses):
        y = truth[start:start + len(resp)]
        start += len(resp)
        if variant is Variant.ACCURACY:
            values.append(float(np.mean(resp.labels == y)))
            continue
        if resp.logits is None:
            raise ValueError(f"the {variant.value} statistic needs logits (batch {i})")
        if variant is Variant.ENTROPY:
            values.append(float(softmax_entropies(resp.logits).mean()))
            continue
        sim = class_mean_cosine(resp.logits, y)
        if sim is not None:
            values.append(sim)
        else:
            skipped.append(i)
            if warnings is not None:
                warnings.append(f"batch {i}: no class with two or more items; skipped")
    return AccuracySeries(tuple(values), batch_size, truth.size, tuple(skipped))


@dataclass
class VerificationReport:
    verdict: Verdict
    grubbs: GrubbsResult
    illegality_score: float
    shadow_series: AccuracySeries
    suspect_series: AccuracySeries
    suspect_mean: float
    variant: Variant
    defender_id: str
    seed: int
    config: dict
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "variant": self.variant.value,
            "illegality_score": self.illegality_score,
            "grubbs": self.grubbs.to_dict(),
            "shadow_mean": self.shadow_series.mean(),
            "suspect_mean": self.suspect_mean,
            "shadow_series": self.shadow_series.to_dict(),
            "suspect_series": self.suspect_series.to_dict(),
            "defender_id": self.defender_id,
            "seed": self.seed,
            "config": self.config,
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        # Non-finite G (zero-variance fallback) is written as +/-Infinity.
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        return cls(
            verdict=Verdict(d["verdict"]),
            grubbs=GrubbsResult.from_dict(d["grubbs"]),
            illegality_score=float(d["illegality_score"]),
            shadow_series=AccuracySeries.from_dict(d["shadow_series"]),
            suspect_series=AccuracySeries.from_dict(d["suspect_series"]),
            suspect_mean=float(d["suspect_mean"]),
            variant=Variant(d["variant"]),
            defender_id=d["defender_id"],
            seed=int(d["seed"]),
            config=d["config"],
            warnings=list(d.get("warnings", [])),
        )

    @classmethod
    def from_json(cls, text: str) -> "VerificationReport":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "VerificationReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class ShadowReference:
    """Everything the defender prepares once and reuses across suspects."""

    defender_id: str
    config: VerificationConfig
    seed: int
    shadow_data: LabeledDataset
    validation: LabeledDataset
    shadow: MlpClassifier
    _responses: dict = field(default_factory=dict, repr=False)

    def shadow_responses(self, mode: Mode) -> list[Prediction]:
        mode = Mode(mode)
        if mode not in self._responses:
            self._responses[mode] = query_batches(
                InProcessEndpoint(self.shadow), self.validation, self.config.inference_batch_size, mode
            )
        return self._responses[mode]


def prepare_shadow(defender_gen: GeneratorSpec, config: VerificationConfig, seed: int) -> ShadowReference:
    """Sample the shadow and validation sets and train the shadow model."""
    n_batches = config.batch_count(defender_gen.num_classes)
    if n_batches < 3:
        raise InsufficientBatches(f"validation set yields {n_batches} batches; need at least 3")
    shadow_prompt, val_prompt = config.prompts(defender_gen)
    shadow_data = sample_synthetic(defender_gen, shadow_prompt, config.shadow_n_per_class, seed)
    validation = sample_synthetic(defender_gen, val_prompt, config.val_n_per_class, seed)
    model = MlpClassifier.create(defender_gen.dim, defender_gen.num_classes, config.shadow_hidden, seed=seed)
    train_cfg = replace(config.shadow_train, shuffle_seed=seed)
    shadow, _ = train(model, shadow_data, train_cfg)
    return ShadowReference(defender_gen.id, config, seed, shadow_data, validation, shadow)


def _as_predictor(suspect):
    if isinstance(suspect, MlpClassifier):
        return InProcessEndpoint(suspect)
    return suspect


def check_suspect(
    reference: ShadowReference,
    suspect,
    variant: Variant | None = None,
    responses: Sequence[Prediction] | None = None,
) -> VerificationReport:
    """Run the hypothesis test for one suspect against a prepared reference.

    ``responses`` may carry already-collected suspect predictions for the
    validation set (in batch order); otherwise the suspect is queried.
    """
    cfg = reference.config if variant is None else replace(reference.config, variant=Variant(variant))
    variant, mode = cfg.variant, cfg.mode
    warnings: list[str] = []
    truth = reference.validation.labels
    if responses is None:
        responses = query_batches(_as_predictor(suspect), reference.validation, cfg.inference_batch_size, mode)
    shadow_series = batch_statistics(
        reference.shadow_responses(mode), truth, variant, cfg.inference_batch_size, warnings
    )
    suspect_series = batch_statistics(responses, truth, variant, cfg.inference_batch_size, warnings)
    suspect_mean = suspect_series.mean()
    sig = SignificanceConfig(cfg.alpha)
    try:
        result = grubbs_one_sided(shadow_series.values, suspect_mean, variant.direction, sig)
    except ZeroVariance as exc:
        result = _zero_variance_result(exc, shadow_series, suspect_mean, variant.direction, sig)
        warnings.append(
            f"shadow series has zero variance; verdict decided by comparing means "
            f"({exc.candidate_mean!r} vs {exc.reference_mean!r})"
        )
    verdict = Verdict.LEGAL if result.is_outlier else Verdict.ILLEGAL
    return VerificationReport(
        verdict=verdict,
        grubbs=result,
        illegality_score=-result.g,
        shadow_series=shadow_series,
        suspect_series=suspect_series,
        suspect_mean=suspect_mean,
        variant=variant,
        defender_id=reference.defender_id,
        seed=reference.seed,
        config=cfg.to_dict(),
        warnings=warnings,
    )


def _zero_variance_result(exc, series, candidate, direction, sig) -> GrubbsResult:
    mean = exc.reference_mean
    gap = (mean - candidate) if direction is Direction.LOW else (candidate - mean)
    g = math.inf if gap > 0 else (0.0 if gap == 0 else -math.inf)
    n = len(series.values)
    return GrubbsResult(
        g=g, g0=grubbs_critical(n, sig), n=n, is_outlier=gap > 0,
        direction=direction, alpha=sig.alpha,
    )


def verify(defender_gen: GeneratorSpec, suspect, config: VerificationConfig | None = None, seed: int = 0) -> VerificationReport:
    """Full pipeline for one suspect: shadow preparation plus the Grubbs decision.

    ``suspect`` may be an :class:`~trainprove.blackbox.Endpoint`, an
    in-process model, or anything with a ``predict(inputs, mode)`` method.
    """
    config = config or VerificationConfig()
    return check_suspect(prepare_shadow(defender_gen, config, seed), suspect)


def random_verify(seed: int) -> Verdict:
    """Fair-coin baseline."""
    coin = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0xC014])).random()
    return Verdict.ILLEGAL if coin < 0.5 else Verdict.LEGAL
