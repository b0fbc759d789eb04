"""Parametric stand-ins for text-to-image generators, prompt sets, and real data.

A *generator* maps shared class prototypes through its own affine transform,
a *prompt set* nudges each class mean along a fixed unit direction, and the
real-data source draws around the raw prototypes with a heavier tail. Prompt
shifts are small next to generator changes, so samples from one generator
under different prompts stay closer to each other than to any other source.

Dataset file format (CSV, UTF-8)::

    K,d,N[,source_tag]
    label,f_1,...,f_d        # N rows

Floats are written with ``repr`` so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trainprove.errors import MissingClass, SpecMismatch

DEFAULT_NUM_CLASSES = 10
DEFAULT_DIM = 16
DEFAULT_NOISE = 0.5
DEFAULT_PROMPT_SHIFT = 0.2
DEFAULT_PROTOTYPE_RADIUS = 4.0
DEFAULT_MIX_GAMMA = 0.35
DEFAULT_BIAS_SCALE = 0.25
DEFAULT_HEAVY_TAIL_MIX = 0.1
DEFAULT_HEAVY_TAIL_FACTOR = 3.0


def _rng(*seeds: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(s) & 0xFFFFFFFF for s in seeds]))


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    id: str
    class_prototypes: np.ndarray  # K x d
    transform: np.ndarray  # d x d
    bias: np.ndarray  # d
    noise_scale: float = DEFAULT_NOISE
    seed: int = 0

    def __post_init__(self):
        k, d = self.class_prototypes.shape
        if self.transform.shape != (d, d) or self.bias.shape != (d,):
            raise SpecMismatch("transform/bias shapes do not match the prototypes")
        if not self.noise_scale >= 0:
            raise ValueError("noise_scale must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.class_prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.class_prototypes.shape[1]

    def class_means(self, prompt: "PromptSpec | None" = None) -> np.ndarray:
        means = self.class_prototypes @ self.transform.T + self.bias
        if prompt is not None:
            means = means + prompt.shift_scale * prompt.directions
        return means


@dataclass(frozen=True, eq=False)
class PromptSpec:
    id: str
    directions: np.ndarray  # K x d, unit rows
    shift_scale: float = DEFAULT_PROMPT_SHIFT
    seed: int = 0

    def __post_init__(self):
        if self.shift_scale < 0:
            raise ValueError("shift_scale must be non-negative")
        norms = np.linalg.norm(self.directions, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-12):
            raise ValueError("prompt shift directions must have unit norm")

    @property
    def num_classes(self) -> int:
        return self.directions.shape[0]

    @property
    def dim(self) -> int:
        return self.directions.shape[1]


@dataclass(frozen=True, eq=False)
class RealSourceSpec:
    class_prototypes: np.ndarray
    noise_scale: float = DEFAULT_NOISE
    heavy_tail_mix: float = DEFAULT_HEAVY_TAIL_MIX
    heavy_tail_factor: float = DEFAULT_HEAVY_TAIL_FACTOR
    seed: int = 0
    id: str = "real"

    def __post_init__(self):
        if not 0.0 <= self.heavy_tail_mix <= 1.0:
            raise ValueError("heavy_tail_mix must lie in [0, 1]")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive")

    @property
    def num_classes(self) -> int:
        return self.class_prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.class_prototypes.shape[1]


@dataclass(eq=False)
class LabeledDataset:
    features: np.ndarray  # N x d
    labels: np.ndarray  # N, int64
    num_classes: int
    source_tag: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be an N x d matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on N")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, K)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, self.source_tag)

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def make_prototypes(
    num_classes: int = DEFAULT_NUM_CLASSES,
    dim: int = DEFAULT_DIM,
    radius: float = DEFAULT_PROTOTYPE_RADIUS,
    seed: int = 0,
) -> np.ndarray:
    """K points drawn uniformly on the sphere of the given radius."""
    rng = _rng(seed, 0x5EED)
    raw = rng.standard_normal((num_classes, dim))
    return radius * raw / np.linalg.norm(raw, axis=1, keepdims=True)


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def make_generator(
    gen_id: str,
    prototypes: np.ndarray,
    seed: int,
    gamma: float = DEFAULT_MIX_GAMMA,
    noise_scale: float = DEFAULT_NOISE,
    bias_scale: float = DEFAULT_BIAS_SCALE,
) -> GeneratorSpec:
    """Generator with transform (1 - gamma) I + gamma R for a seeded rotation R."""
    rng = _rng(seed, 0x6E4)
    dim = prototypes.shape[1]
    rot = random_rotation(dim, rng)
    transform = (1.0 - gamma) * np.eye(dim) + gamma * rot
    bias = bias_scale * rng.standard_normal(dim) / np.sqrt(dim)
    return GeneratorSpec(
        id=gen_id,
        class_prototypes=np.array(prototypes, dtype=np.float64),
        transform=transform,
        bias=bias,
        noise_scale=noise_scale,
        seed=seed,
    )


def make_prompt(
    prompt_id: str,
    num_classes: int = DEFAULT_NUM_CLASSES,
    dim: int = DEFAULT_DIM,
    seed: int = 0,
    shift_scale: float = DEFAULT_PROMPT_SHIFT,
) -> PromptSpec:
    rng = _rng(seed, 0x7A)
    raw = rng.standard_normal((num_classes, dim))
    return PromptSpec(
        id=prompt_id,
        directions=raw / np.linalg.norm(raw, axis=1, keepdims=True),
        shift_scale=shift_scale,
        seed=seed,
    )


def make_real_source(
    prototypes: np.ndarray,
    seed: int = 0,
    noise_scale: float = DEFAULT_NOISE,
    heavy_tail_mix: float = DEFAULT_HEAVY_TAIL_MIX,
) -> RealSourceSpec:
    return RealSourceSpec(
        class_prototypes=np.array(prototypes, dtype=np.float64),
        noise_scale=noise_scale,
        heavy_tail_mix=heavy_tail_mix,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _balanced_labels(num_classes: int, n_per_class: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    return labels[rng.permutation(labels.size)]


def sample_synthetic(
    gen: GeneratorSpec, prompt: PromptSpec, n_per_class: int, seed: int
) -> LabeledDataset:
    """Draw ``n_per_class`` rows per class from ``gen`` under ``prompt``.

    Rows come out in a seeded random order with exactly balanced classes.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if prompt.dim != gen.dim or prompt.num_classes != gen.num_classes:
        raise SpecMismatch(
            f"prompt {prompt.id!r} is {prompt.num_classes}x{prompt.dim}, "
            f"generator {gen.id!r} is {gen.num_classes}x{gen.dim}"
        )
    rng = _rng(gen.seed, prompt.seed, seed, 0x51)
    labels = _balanced_labels(gen.num_classes, n_per_class, rng)
    means = gen.class_means(prompt)
    noise = rng.standard_normal((labels.size, gen.dim))
    feats = means[labels] + gen.noise_scale * noise
    return LabeledDataset(feats, labels, gen.num_classes, f"{gen.id}|{prompt.id}|{seed}")


def sample_real(spec: RealSourceSpec, n_per_class: int, seed: int) -> LabeledDataset:
    """Raw prototypes plus a two-component Gaussian noise mixture."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = _rng(spec.seed, seed, 0x8E)
    labels = _balanced_labels(spec.num_classes, n_per_class, rng)
    noise = rng.standard_normal((labels.size, spec.dim))
    wide = rng.random(labels.size) < spec.heavy_tail_mix
    scale = np.where(wide, spec.heavy_tail_factor * spec.noise_scale, spec.noise_scale)
    feats = spec.class_prototypes[labels] + scale[:, None] * noise
    return LabeledDataset(feats, labels, spec.num_classes, f"{spec.id}|{seed}")


def mix_datasets(a: LabeledDataset, b: LabeledDataset, seed: int) -> LabeledDataset:
    if a.num_classes != b.num_classes:
        raise SpecMismatch(f"class counts differ: {a.num_classes} vs {b.num_classes}")
    if len(a) and len(b) and a.dim != b.dim:
        raise SpecMismatch(f"feature dims differ: {a.dim} vs {b.dim}")
    dim = a.dim if len(a) else b.dim
    feats = np.concatenate([a.features.reshape(-1, dim), b.features.reshape(-1, dim)])
    labels = np.concatenate([a.labels, b.labels])
    order = _rng(seed, 0x313).permutation(labels.size)
    return LabeledDataset(feats[order], labels[order], a.num_classes, f"mix({a.source_tag}+{b.source_tag})")


def class_means(data: LabeledDataset) -> np.ndarray:
    counts = data.class_counts()
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise MissingClass(f"classes {missing.tolist()} absent from {data.source_tag!r}")
    sums = np.zeros((data.num_classes, data.dim))
    np.add.at(sums, data.labels, data.features)
    return sums / counts[:, None]


def distribution_gap(a: LabeledDataset, b: LabeledDataset) -> float:
    """Mean over classes of the distance between per-class empirical means."""
    if a.num_classes != b.num_classes or a.dim != b.dim:
        raise SpecMismatch("datasets disagree on K or d")
    diff = class_means(a) - class_means(b)
    return float(np.linalg.norm(diff, axis=1).mean())


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def dump_dataset(data: LabeledDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = [data.num_classes, data.dim, len(data)]
    if data.source_tag:
        header.append(data.source_tag)
    w.writerow(header)
    for y, row in zip(data.labels.tolist(), data.features.tolist()):
        w.writerow([y] + [repr(v) for v in row])
    return buf.getvalue()


def parse_dataset(text: str) -> LabeledDataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty dataset file")
    head = rows[0]
    k, d, n = (int(v) for v in head[:3])
    tag = head[3] if len(head) > 3 else ""
    body = rows[1:]
    if len(body) != n:
        raise ValueError(f"header promises {n} rows, file has {len(body)}")
    labels = np.array([int(r[0]) for r in body], dtype=np.int64)
    feats = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(n, d)
    return LabeledDataset(feats, labels, k, tag)


def save_dataset(data: LabeledDataset, path) -> None:
    Path(path).write_text(dump_dataset(data), encoding="utf-8")


def load_dataset(path) -> LabeledDataset:
    return parse_dataset(Path(path).read_text(encoding="utf-8"))
