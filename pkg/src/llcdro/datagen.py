"""Synthetic datasets with imbalanced subpopulations, spurious features and label noise."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class SpecError(ValueError):
    """Raised when a dataset or noise specification is invalid."""


@dataclass(frozen=True)
class SubpopSpec:
    class_id: int
    group_id: int
    n_samples: int
    core_mean: tuple[float, ...]
    spurious_mean: tuple[float, ...]
    stddev: float


@dataclass(frozen=True)
class DatasetSpec:
    subpops: tuple[SubpopSpec, ...]
    d_core: int
    d_spur: int
    seed: int = 0

    @property
    def n_samples(self) -> int:
        return sum(s.n_samples for s in self.subpops)

    @property
    def dim(self) -> int:
        return self.d_core + self.d_spur

    @property
    def n_classes(self) -> int:
        return max(s.class_id for s in self.subpops) + 1

    def validate(self) -> None:
        if not self.subpops:
            raise SpecError("dataset spec has no subpopulations")
        if self.d_core < 0 or self.d_spur < 0 or self.dim < 1:
            raise SpecError(f"bad feature dimensions d_core={self.d_core}, d_spur={self.d_spur}")
        groups = [s.group_id for s in self.subpops]
        if len(set(groups)) != len(groups):
            raise SpecError(f"duplicate group ids: {groups}")
        for s in self.subpops:
            if s.n_samples < 1:
                raise SpecError(f"group {s.group_id}: n_samples must be >= 1")
            if not s.stddev > 0:
                raise SpecError(f"group {s.group_id}: stddev must be > 0")
            if s.class_id < 0 or s.group_id < 0:
                raise SpecError(f"group {s.group_id}: negative class or group id")
            if len(s.core_mean) != self.d_core or len(s.spurious_mean) != self.d_spur:
                raise SpecError(f"group {s.group_id}: mean lengths do not match d_core/d_spur")
        missing = set(range(self.n_classes)) - {s.class_id for s in self.subpops}
        if missing:
            raise SpecError(f"classes without any group: {sorted(missing)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        subpops = tuple(
            SubpopSpec(
                class_id=int(s["class_id"]),
                group_id=int(s["group_id"]),
                n_samples=int(s["n_samples"]),
                core_mean=tuple(float(v) for v in s["core_mean"]),
                spurious_mean=tuple(float(v) for v in s["spurious_mean"]),
                stddev=float(s["stddev"]),
            )
            for s in d["subpops"]
        )
        return cls(subpops=subpops, d_core=int(d["d_core"]), d_spur=int(d["d_spur"]),
                   seed=int(d.get("seed", 0)))


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "symmetric"
    rate: float = 0.0
    transition: Optional[tuple[tuple[float, ...], ...]] = None
    include_self: bool = False

    def validate(self, n_classes: Optional[int] = None) -> None:
        if self.kind not in ("symmetric", "asymmetric"):
            raise SpecError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise SpecError(f"noise rate {self.rate} outside [0, 1]")
        if self.kind == "asymmetric":
            if self.transition is None:
                raise SpecError("asymmetric noise requires a transition matrix")
            T = np.asarray(self.transition, dtype=float)
            if T.ndim != 2 or T.shape[0] != T.shape[1]:
                raise SpecError(f"transition matrix must be square, got shape {T.shape}")
            if n_classes is not None and T.shape[0] != n_classes:
                raise SpecError(f"transition matrix is {T.shape[0]}x{T.shape[0]}, need {n_classes}")
            if (T < 0).any() or np.abs(T.sum(axis=1) - 1.0).max() > 1e-9:
                raise SpecError("transition rows must be nonnegative and sum to 1")
        elif self.transition is not None:
            raise SpecError("transition matrix given for symmetric noise")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        T = d.get("transition")
        return cls(
            kind=d.get("kind", "symmetric"),
            rate=float(d.get("rate", 0.0)),
            transition=None if T is None else tuple(tuple(float(v) for v in row) for row in T),
            include_self=bool(d.get("include_self", False)),
        )


@dataclass(frozen=True)
class NoisyData:
    """What a training procedure is allowed to see: features and noisy labels."""

    features: np.ndarray
    noisy_labels: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return len(self.noisy_labels)


@dataclass
class Dataset:
    features: np.ndarray
    noisy_labels: np.ndarray
    true_labels: np.ndarray
    group_ids: np.ndarray
    corrupted: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.true_labels)

    @property
    def n_groups(self) -> int:
        return int(self.group_ids.max()) + 1

    def training_view(self) -> NoisyData:
        return NoisyData(self.features, self.noisy_labels, self.n_classes)

    def group_sizes(self) -> dict[int, int]:
        g, n = np.unique(self.group_ids, return_counts=True)
        return {int(a): int(b) for a, b in zip(g, n)}


def generate(spec: DatasetSpec, rng: Optional[np.random.Generator] = None) -> Dataset:
    """Draw every subpopulation from an isotropic Gaussian and shuffle the rows."""
    spec.validate()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    xs, ys, gs = [], [], []
    for s in spec.subpops:
        mean = np.concatenate([np.asarray(s.core_mean, float), np.asarray(s.spurious_mean, float)])
        xs.append(mean + s.stddev * rng.standard_normal((s.n_samples, spec.dim)))
        ys.append(np.full(s.n_samples, s.class_id, dtype=np.int64))
        gs.append(np.full(s.n_samples, s.group_id, dtype=np.int64))
    order = rng.permutation(spec.n_samples)
    x = np.concatenate(xs)[order]
    y = np.concatenate(ys)[order]
    g = np.concatenate(gs)[order]
    return Dataset(
        features=x,
        noisy_labels=y.copy(),
        true_labels=y,
        group_ids=g,
        corrupted=np.zeros(len(y), dtype=bool),
        n_classes=spec.n_classes,
        meta={"dataset_spec": spec.to_dict()},
    )


def inject_noise(ds: Dataset, spec: NoiseSpec, rng: np.random.Generator) -> Dataset:
    """Return a copy of ``ds`` whose noisy labels are re-drawn from its true labels."""
    spec.validate(ds.n_classes)
    y = ds.true_labels
    n, c = len(y), ds.n_classes
    noisy = y.copy()
    if spec.kind == "symmetric":
        m = int(round(spec.rate * n))
        picked = rng.choice(n, size=m, replace=False)
        if spec.include_self:
            noisy[picked] = rng.integers(0, c, size=m)
        elif c > 1:
            # offset in [1, C-1] lands uniformly on the other classes
            noisy[picked] = (y[picked] + rng.integers(1, c, size=m)) % c
    else:
        T = np.asarray(spec.transition, dtype=float)
        cdf = np.cumsum(T, axis=1)
        u = rng.random(n)
        noisy = np.minimum((u[:, None] >= cdf[y]).sum(axis=1), c - 1).astype(np.int64)
    meta = dict(ds.meta)
    meta["noise_spec"] = spec.to_dict()
    return Dataset(
        features=ds.features,
        noisy_labels=noisy,
        true_labels=y,
        group_ids=ds.group_ids,
        corrupted=noisy != y,
        n_classes=c,
        meta=meta,
    )


def feature_scale(features: np.ndarray) -> np.ndarray:
    """Per-dimension standard deviation, used to size augmentation jitter."""
    return features.std(axis=0)


def augment_weak(x: np.ndarray, rng: np.random.Generator, sigma: float | np.ndarray = 0.0) -> np.ndarray:
    return x + sigma * rng.standard_normal(np.shape(x))


def augment_strong(
    x: np.ndarray,
    rng: np.random.Generator,
    sigma: float | np.ndarray = 0.0,
    p_drop: float = 0.0,
) -> np.ndarray:
    jittered = x + sigma * rng.standard_normal(np.shape(x))
    keep = rng.random(np.shape(x)) >= p_drop
    return np.where(keep, jittered, 0.0)


# -- presets ---------------------------------------------------------------

def _two_by_two(
    sizes: Sequence[int],
    core: float,
    spur: float,
    stddev: float,
    d_core: int,
    d_spur: int,
    seed: int,
    tail_shift: float = 0.0,
    tails: tuple[int, ...] = (1, 3),
) -> DatasetSpec:
    """Two classes, each with a head and a tail group on opposite spurious sides.

    Groups are (class 0, spur -), (class 0, spur +), (class 1, spur +), (class 1, spur -),
    so each class's head shares its spurious mean with the other class's tail.
    Core coordinate 0 carries the class; the last core coordinate moves the tail
    groups of both classes by ``tail_shift``, which sets them apart as clusters
    without carrying class information.
    """
    def vec(first: float, d: int, last: float = 0.0) -> list[float]:
        v = [0.0] * d
        if d:
            v[0] = first
            v[-1] += last
        return v

    layout = [(0, -1.0, -1.0), (0, -1.0, 1.0), (1, 1.0, 1.0), (1, 1.0, -1.0)]
    if tail_shift and d_core < 2:
        raise SpecError("tail_shift needs d_core >= 2")
    subpops = tuple(
        SubpopSpec(
            class_id=cls,
            group_id=g,
            n_samples=int(n),
            core_mean=tuple(vec(core * c_sign, d_core, tail_shift if g in tails else 0.0)),
            spurious_mean=tuple(vec(spur * s_sign, d_spur)),
            stddev=stddev,
        )
        for g, ((cls, c_sign, s_sign), n) in enumerate(zip(layout, sizes))
    )
    return DatasetSpec(subpops=subpops, d_core=d_core, d_spur=d_spur, seed=seed)


@dataclass(frozen=True)
class Scenario:
    """Train/validation/test specs sharing one generative geometry."""

    name: str
    train: DatasetSpec
    valid: DatasetSpec
    test: DatasetSpec
    noise: NoiseSpec
    tail_groups: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "train": self.train.to_dict(),
            "valid": self.valid.to_dict(),
            "test": self.test.to_dict(),
            "noise": self.noise.to_dict(),
            "tail_groups": list(self.tail_groups),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(
            name=d.get("name", "custom"),
            train=DatasetSpec.from_dict(d["train"]),
            valid=DatasetSpec.from_dict(d["valid"]),
            test=DatasetSpec.from_dict(d["test"]),
            noise=NoiseSpec.from_dict(d["noise"]),
            tail_groups=tuple(int(g) for g in d.get("tail_groups", ())),
        )


# Class signal sits on core coordinate 0 with a narrow margin, the spurious
# coordinate has a wide one, and tail groups share an offset on the last core
# coordinate so they form their own clusters. Other coordinates are nuisance,
# which gives a network room to memorise flipped labels.
WATERBIRDS_GEOMETRY = dict(core=0.5, spur=2.0, stddev=0.35, d_core=10, d_spur=3, tail_shift=1.5)
CELEBA_GEOMETRY = dict(core=0.5, spur=2.0, stddev=0.35, d_core=10, d_spur=3, tail_shift=1.5)


def _scenario(name: str, sizes, n_eval_per_group: int, seed: int, tails, noise_rate: float,
              geo: dict) -> Scenario:
    # validation follows the training distribution so model selection stays
    # group-oblivious; test is balanced so every group is measured precisely
    valid_sizes = tuple(max(1, int(n) // 2) for n in sizes)
    ev = (n_eval_per_group,) * 4
    return Scenario(
        name=name,
        train=_two_by_two(tuple(sizes), seed=seed, tails=tails, **geo),
        valid=_two_by_two(valid_sizes, seed=seed + 100_003, tails=tails, **geo),
        test=_two_by_two(ev, seed=seed + 200_003, tails=tails, **geo),
        noise=NoiseSpec("symmetric", noise_rate),
        tail_groups=tails,
    )


def waterbirds_like(noise_rate: float = 0.3, seed: int = 0, n_train: int = 2000,
                    n_eval_per_group: int = 250, **geometry) -> Scenario:
    """2 classes x 2 backgrounds, 95/5 split inside each class, global symmetric flips.

    Validation (half the training size) has the training mix of groups; test
    has ``n_eval_per_group`` samples in every group.
    """
    geo = {**WATERBIRDS_GEOMETRY, **geometry}
    head = int(round(0.475 * n_train))
    tail = n_train // 2 - head
    return _scenario("waterbirds-like", (head, tail, head, tail), n_eval_per_group, seed,
                     (1, 3), noise_rate, geo)


def celeba_like(noise_rate: float = 0.2, seed: int = 0, n_train: int = 2000,
                n_eval_per_group: int = 250, **geometry) -> Scenario:
    """Hair colour with gender as the spurious attribute; blond males are about 1%.

    Group order matches the two-by-two layout: (dark, female), (dark, male),
    (blond, male), (blond, female).
    """
    geo = {**CELEBA_GEOMETRY, **geometry}
    frac = np.array([71629, 66874, 1387, 22880], dtype=float)
    frac /= frac.sum()
    sizes = np.maximum(2, np.round(frac * n_train)).astype(int)
    return _scenario("celeba-like", tuple(int(n) for n in sizes), n_eval_per_group, seed,
                     (2,), noise_rate, geo)


PRESETS = {"waterbirds-like": waterbirds_like, "celeba-like": celeba_like}


# -- serialization ---------------------------------------------------------

def save_csv(ds: Dataset, path: str | Path, extra_meta: Optional[dict] = None) -> None:
    """Write the dataset as CSV plus a ``.json`` sidecar holding the generating specs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = ds.features.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(d)] + ["noisy_label", "true_label", "group_id", "corrupted"])
        for i in range(len(ds)):
            w.writerow([repr(float(v)) for v in ds.features[i]]
                       + [int(ds.noisy_labels[i]), int(ds.true_labels[i]),
                          int(ds.group_ids[i]), int(ds.corrupted[i])])
    meta = {**ds.meta, "n_classes": ds.n_classes, **(extra_meta or {})}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_csv(path: str | Path) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("f"))
    arr = np.array(body, dtype=float) if body else np.zeros((0, d + 4))
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    noisy = arr[:, d].astype(np.int64)
    true = arr[:, d + 1].astype(np.int64)
    n_classes = int(meta.get("n_classes", max(noisy.max(), true.max()) + 1))
    return Dataset(
        features=arr[:, :d],
        noisy_labels=noisy,
        true_labels=true,
        group_ids=arr[:, d + 2].astype(np.int64),
        corrupted=arr[:, d + 3].astype(bool),
        n_classes=n_classes,
        meta=meta,
    )
