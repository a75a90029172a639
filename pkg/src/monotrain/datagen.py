"""Synthetic data with covariate shift, CSV ingestion, and Gaussian blobs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TASKS = ("regression", "classification")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    monotone: tuple[int, ...]
    box: tuple[np.ndarray, np.ndarray]
    split: str = "train"
    task: str = "regression"
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got '{self.task}'")
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if len(self.features) != len(self.targets):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.targets)} targets")
        self.features.setflags(write=False)
        self.targets.setflags(write=False)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        if self.task != "classification":
            raise ValueError("n_classes is defined for classification data only")
        return int(self.targets.max()) + 1

    def subset(self, rows) -> "Dataset":
        return Dataset(
            self.features[rows].copy(), self.targets[rows].copy(), self.monotone, self.box,
            self.split, self.task, self.feature_names,
        )


def data_box(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension [min, max]; constant columns are widened so lower < upper."""
    lower = features.min(axis=0).astype(np.float64)
    upper = features.max(axis=0).astype(np.float64)
    flat = upper <= lower
    lower[flat] -= 0.5
    upper[flat] += 0.5
    return lower, upper


# -- synthetic regression with covariate shift ------------------------


def softplus(t: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, t)


def monotone_term(t: np.ndarray) -> np.ndarray:
    return t + 0.5 * softplus(t)


def nonmonotone_term(t: np.ndarray) -> np.ndarray:
    return np.sin(0.5 * t)


@dataclass(frozen=True)
class SynthSpec:
    n: int = 2000
    dim: int = 100
    monotone: tuple[int, ...] = ()
    n_monotone: int = 20
    alpha: float = 0.8
    seed: int = 0
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    standardize: bool = True

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError(f"dim={self.dim} gives latent dimension floor(0.3*dim) < 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        mono = self.monotone_dims
        if any(not 0 <= i < self.dim for i in mono):
            raise ValueError("monotone dimensions out of range")
        if abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) <= 0:
            raise ValueError("split fractions must be positive and sum to 1")

    @property
    def latent_dim(self) -> int:
        return int(math.floor(0.3 * self.dim))

    @property
    def monotone_dims(self) -> tuple[int, ...]:
        if self.monotone:
            return tuple(sorted(int(i) for i in self.monotone))
        return tuple(range(min(self.n_monotone, self.dim)))

    def split_sizes(self) -> tuple[int, int, int]:
        n_train = int(round(self.fractions[0] * self.n))
        n_valid = int(round(self.fractions[1] * self.n))
        return n_train, n_valid, self.n - n_train - n_valid


@dataclass(frozen=True)
class SynthArtifacts:
    """Expansion matrices behind a synthetic draw, kept for inspection."""

    expansion: np.ndarray
    shifted: np.ndarray
    test_expansion: np.ndarray
    feature_mean: np.ndarray = field(repr=False)
    feature_scale: np.ndarray = field(repr=False)
    target_mean: float = 0.0
    target_scale: float = 1.0


def synthetic_target(x: np.ndarray, monotone: Sequence[int]) -> np.ndarray:
    mono = np.zeros(x.shape[1], dtype=bool)
    mono[list(monotone)] = True
    return monotone_term(x[:, mono]).sum(axis=1) + nonmonotone_term(x[:, ~mono]).sum(axis=1)


def generate_synthetic_full(spec: SynthSpec) -> tuple[Dataset, Dataset, Dataset, SynthArtifacts]:
    rng = np.random.default_rng(spec.seed)
    d, D = spec.latent_dim, spec.dim
    A = rng.uniform(0.0, 1.0, size=(d, D))
    A_new = rng.uniform(0.0, 1.0, size=(d, D))
    A_test = spec.alpha * A_new + (1.0 - spec.alpha) * A
    n_train, n_valid, n_test = spec.split_sizes()
    latent = [rng.uniform(-10.0, 10.0, size=(m, d)) for m in (n_train, n_valid, n_test)]
    raw = [latent[0] @ A, latent[1] @ A, latent[2] @ A_test]
    mono = spec.monotone_dims
    targets = [synthetic_target(x, mono) for x in raw]

    y_mean, y_scale = float(targets[0].mean()), float(targets[0].std())
    if spec.standardize:
        x_mean, x_scale = raw[0].mean(axis=0), raw[0].std(axis=0)
        x_scale = np.where(x_scale > 0, x_scale, 1.0)
    else:
        x_mean, x_scale = np.zeros(D), np.ones(D)
    feats = [(x - x_mean) / x_scale for x in raw]
    ys = [(y - y_mean) / y_scale for y in targets]
    box = data_box(feats[0])
    splits = [
        Dataset(f, y, mono, box, name, "regression")
        for f, y, name in zip(feats, ys, ("train", "valid", "test"))
    ]
    artifacts = SynthArtifacts(A, A_new, A_test, x_mean, x_scale, y_mean, y_scale)
    return splits[0], splits[1], splits[2], artifacts


def generate_synthetic(spec: SynthSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Train, validation and covariate-shifted test splits.

    Latent rows are U[-10, 10]^d with d = floor(0.3 D), expanded to D
    features through a U[0, 1] matrix A.  The test split uses
    alpha * A' + (1 - alpha) * A for a fresh A'.  Features and targets are
    standardized with train-split statistics.
    """
    train, valid, test, _ = generate_synthetic_full(spec)
    return train, valid, test


# -- Gaussian blobs for classification --------------------------------


def blob_means(n_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    if dim >= n_classes:
        means = np.zeros((n_classes, dim))
        means[np.arange(n_classes), np.arange(n_classes)] = 1.0
    else:
        means = rng.normal(size=(n_classes, dim))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    return separation * means


def generate_blobs(n_classes: int, per_class: int, dim: int, separation: float, seed: int = 0, std: float = 1.0) -> Dataset:
    """Isotropic Gaussian clusters; class k is centred at ``separation * e_k``."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1 or dim < 1:
        raise ValueError("per_class and dim must be positive")
    if separation < 0 or std <= 0:
        raise ValueError("separation must be >= 0 and std > 0")
    rng = np.random.default_rng(seed)
    means = blob_means(n_classes, dim, separation, rng)
    labels = np.repeat(np.arange(n_classes), per_class)
    features = means[labels] + std * rng.normal(size=(len(labels), dim))
    order = rng.permutation(len(labels))
    features, labels = features[order], labels[order]
    return Dataset(features, labels.astype(np.int64), (), data_box(features), "train", "classification")


def split_dataset(data: Dataset, fractions: Sequence[float], seed: int = 0) -> list[Dataset]:
    """Shuffle and cut ``data`` into consecutive parts; every part keeps the first part's box."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    bounds = np.round(np.cumsum([0.0, *fractions]) / sum(fractions) * len(data)).astype(int)
    names = ("train", "valid", "test")
    parts = [order[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]
    first_box = data_box(data.features[parts[0]])
    return [
        Dataset(data.features[p].copy(), data.targets[p].copy(), data.monotone, first_box,
                names[i] if i < 3 else f"part{i}", data.task, data.feature_names)
        for i, p in enumerate(parts)
    ]


# -- CSV ingestion -----------------------------------------------------


class CsvError(ValueError):
    pass


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        scale = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(scale > 0, scale, 1.0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale


def read_csv_table(path) -> tuple[list[str], np.ndarray]:
    """Header and numeric body of a comma-separated file."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CsvError(f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
            values = []
            for name, cell in zip(header, row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise CsvError(f"{path}: row {lineno}, column '{name}': non-numeric value {cell!r}") from None
            rows.append(values)
    if not rows:
        raise CsvError(f"{path}: no data rows")
    body = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(body)):
        bad = np.argwhere(~np.isfinite(body))[0]
        raise CsvError(f"{path}: row {bad[0] + 2}, column '{header[bad[1]]}': non-finite value")
    return header, body


def load_csv(
    path,
    target: str,
    monotone: Sequence[str] = (),
    task: str = "regression",
    features: Sequence[str] | None = None,
    standardizer: Standardizer | None = None,
    box: tuple[np.ndarray, np.ndarray] | None = None,
    split: str = "train",
) -> tuple[Dataset, Standardizer]:
    """Read a CSV into a standardized :class:`Dataset`.

    Pass the training split's ``standardizer`` and ``box`` when loading
    validation or test files so all splits share one coordinate system.
    """
    header, body = read_csv_table(path)
    if target not in header:
        raise CsvError(f"{path}: missing target column '{target}'")
    names = list(features) if features is not None else [h for h in header if h != target]
    for name in [*names, *monotone]:
        if name not in header:
            raise CsvError(f"{path}: missing column '{name}'")
    for name in monotone:
        if name not in names:
            raise CsvError(f"{path}: monotone column '{name}' is not a feature")
    x = body[:, [header.index(n) for n in names]]
    y = body[:, header.index(target)]
    if task == "classification":
        if np.any(y != np.round(y)) or y.min() < 0:
            raise CsvError(f"{path}: classification target '{target}' must hold labels 0..K-1")
        y = y.astype(np.int64)
    standardizer = standardizer or Standardizer.fit(x)
    x = standardizer.apply(x)
    mono = tuple(sorted(names.index(m) for m in monotone))
    data = Dataset(x, y, mono, box or data_box(x), split, task, tuple(names))
    return data, standardizer


@dataclass(frozen=True)
class Manifest:
    target: str
    task: str
    monotone: tuple[str, ...]
    files: dict[str, Path]
    features: tuple[str, ...] | None = None
    fractions: tuple[float, ...] = (0.7, 0.15, 0.15)
    seed: int = 0


def parse_key_values(text: str, source: str = "<text>") -> dict[str, str]:
    """``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _names(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def read_manifest(path) -> Manifest:
    path = Path(path)
    kv = parse_key_values(path.read_text(encoding="utf-8"), str(path))
    known = {"target", "task", "monotone", "features", "train", "valid", "test", "data", "fractions", "seed"}
    for key in kv:
        if key not in known:
            raise ValueError(f"{path}: unknown manifest key '{key}'")
    if "target" not in kv:
        raise ValueError(f"{path}: manifest must declare 'target'")
    files = {k: (path.parent / kv[k]) for k in ("train", "valid", "test", "data") if k in kv}
    if "train" not in files and "data" not in files:
        raise ValueError(f"{path}: manifest needs 'train' or 'data'")
    fractions = tuple(float(f) for f in _names(kv["fractions"])) if "fractions" in kv else (0.7, 0.15, 0.15)
    return Manifest(
        target=kv["target"],
        task=kv.get("task", "regression"),
        monotone=_names(kv.get("monotone", "")),
        files=files,
        features=_names(kv["features"]) if "features" in kv else None,
        fractions=fractions,
        seed=int(kv.get("seed", 0)),
    )


def _select(header: list[str], body: np.ndarray, m: "Manifest", source) -> tuple[np.ndarray, np.ndarray, list[str], tuple[int, ...]]:
    if m.target not in header:
        raise CsvError(f"{source}: missing target column '{m.target}'")
    names = list(m.features) if m.features is not None else [h for h in header if h != m.target]
    for name in [*names, *m.monotone]:
        if name not in header:
            raise CsvError(f"{source}: missing column '{name}'")
    x = body[:, [header.index(n) for n in names]]
    y = body[:, header.index(m.target)]
    if m.task == "classification":
        y = y.astype(np.int64)
    return x, y, names, tuple(sorted(names.index(n) for n in m.monotone))


def load_manifest(path) -> tuple[Dataset, Dataset, Dataset]:
    """Train / valid / test splits described by a manifest file.

    Either ``data`` names one file that is shuffled and cut by
    ``fractions``, or ``train`` / ``valid`` / ``test`` name one file each.
    """
    m = read_manifest(path)
    if "data" in m.files:
        header, body = read_csv_table(m.files["data"])
        x, y, names, mono = _select(header, body, m, m.files["data"])
        order = np.random.default_rng(m.seed).permutation(len(x))
        bounds = np.round(np.cumsum([0.0, *m.fractions]) / sum(m.fractions) * len(x)).astype(int)
        parts = [order[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]
        if len(parts) != 3 or any(len(p) == 0 for p in parts):
            raise ValueError(f"{path}: fractions must yield three nonempty splits")
        std = Standardizer.fit(x[parts[0]])
        x = std.apply(x)
        box = data_box(x[parts[0]])
        return tuple(
            Dataset(x[p].copy(), y[p].copy(), mono, box, name, m.task, tuple(names))
            for p, name in zip(parts, ("train", "valid", "test"))
        )
    for name in ("valid", "test"):
        if name not in m.files:
            raise ValueError(f"{path}: manifest with 'train' must also name '{name}'")
    common = dict(target=m.target, monotone=m.monotone, task=m.task, features=m.features)
    train, std = load_csv(m.files["train"], **common)
    valid, _ = load_csv(m.files["valid"], **common, standardizer=std, box=train.box, split="valid")
    test, _ = load_csv(m.files["test"], **common, standardizer=std, box=train.box, split="test")
    return train, valid, test


def write_csv(path, data: Dataset, target_name: str = "y") -> None:
    names = list(data.feature_names) or [f"x{i}" for i in range(data.dim)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*names, target_name])
        for row, y in zip(data.features, data.targets):
            writer.writerow([repr(float(v)) for v in row] + [repr(y.item())])
