"""Impression data: schema sidecar files, CSV I/O, synthetic generation, batching."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np


class SchemaError(ValueError):
    pass


class LoadError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Schema:
    fields: tuple[tuple[str, int], ...]
    funnel_constraint: bool = True

    def __post_init__(self):
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in schema: {names}")
        for name, card in self.fields:
            if not name or "=" in name or "," in name:
                raise SchemaError(f"invalid field name {name!r}")
            if int(card) < 1:
                raise SchemaError(f"field '{name}' has cardinality {card}; must be >= 1")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.fields]

    @property
    def cardinalities(self) -> list[int]:
        return [int(c) for _, c in self.fields]

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    def to_text(self) -> str:
        lines = [f"{name}={card}" for name, card in self.fields]
        lines.append(f"funnel={'true' if self.funnel_constraint else 'false'}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<schema>") -> "Schema":
        fields = []
        funnel = True
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{source}:{lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "funnel":
                if value.lower() not in ("true", "false"):
                    raise SchemaError(f"{source}:{lineno}: funnel must be true or false")
                funnel = value.lower() == "true"
                continue
            try:
                card = int(value)
            except ValueError:
                raise SchemaError(f"{source}:{lineno}: cardinality {value!r} is not an integer")
            fields.append((key, card))
        return cls(tuple(fields), funnel)


def load_schema(path) -> Schema:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read schema file {path}: {exc}") from exc
    return Schema.from_text(text, str(path))


def write_schema(schema: Schema, path) -> None:
    Path(path).write_text(schema.to_text(), encoding="utf-8")


@dataclass(frozen=True)
class ImpressionRecord:
    user_id: int
    feature_ids: tuple[int, ...]
    y_ctr: int
    y_cvr: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Columnar store of impressions; ``records`` gives the row view."""

    schema: Schema
    user_ids: np.ndarray
    features: np.ndarray
    y_ctr: np.ndarray
    y_cvr: np.ndarray

    def __post_init__(self):
        n = len(self.user_ids)
        F = self.schema.num_fields
        feats = np.asarray(self.features, dtype=np.int64).reshape(n, F)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "user_ids", np.asarray(self.user_ids, dtype=np.int64))
        object.__setattr__(self, "y_ctr", np.asarray(self.y_ctr, dtype=np.int64))
        object.__setattr__(self, "y_cvr", np.asarray(self.y_cvr, dtype=np.int64))
        for arr in (self.features, self.user_ids, self.y_ctr, self.y_cvr):
            arr.setflags(write=False)
        validate(self)

    def __len__(self) -> int:
        return len(self.user_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and np.array_equal(self.user_ids, other.user_ids)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.y_ctr, other.y_ctr)
            and np.array_equal(self.y_cvr, other.y_cvr)
        )

    @property
    def records(self) -> list[ImpressionRecord]:
        return [
            ImpressionRecord(int(u), tuple(int(v) for v in f), int(c), int(v))
            for u, f, c, v in zip(self.user_ids, self.features, self.y_ctr, self.y_cvr)
        ]

    @classmethod
    def from_records(cls, schema: Schema, records: Sequence[ImpressionRecord]) -> "Dataset":
        n = len(records)
        return cls(
            schema,
            np.array([r.user_id for r in records], dtype=np.int64),
            np.array([r.feature_ids for r in records], dtype=np.int64).reshape(n, schema.num_fields),
            np.array([r.y_ctr for r in records], dtype=np.int64),
            np.array([r.y_cvr for r in records], dtype=np.int64),
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.schema, self.user_ids[idx], self.features[idx], self.y_ctr[idx], self.y_cvr[idx]
        )


def validate(ds: Dataset) -> None:
    """Raise LoadError (row numbers are 1-based data rows) on the first bad record."""
    if ds.user_ids.size and ds.user_ids.min() < 0:
        raise LoadError(f"record {int(np.argmax(ds.user_ids < 0)) + 1}: negative user_id")
    for name, y in (("y_ctr", ds.y_ctr), ("y_cvr", ds.y_cvr)):
        bad = (y != 0) & (y != 1)
        if bad.any():
            raise LoadError(f"record {int(np.argmax(bad)) + 1}: {name} must be 0 or 1")
    for f, (name, card) in enumerate(ds.schema.fields):
        col = ds.features[:, f]
        bad = (col < 0) | (col >= card)
        if bad.any():
            i = int(np.argmax(bad))
            raise LoadError(
                f"record {i + 1}: feature id {int(col[i])} out of range for field '{name}' "
                f"(cardinality {card})"
            )
    if ds.schema.funnel_constraint:
        bad = ds.y_cvr > ds.y_ctr
        if bad.any():
            raise LoadError(f"record {int(np.argmax(bad)) + 1}: conversion without click")


# --------------------------------------------------------------------------
# CSV


def csv_header(schema: Schema) -> list[str]:
    return ["user_id", "y_click", "y_conversion"] + [f"f_{n}" for n in schema.names]


def write_csv(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(ds.schema))
        for u, c, v, feats in zip(ds.user_ids, ds.y_ctr, ds.y_cvr, ds.features):
            writer.writerow([int(u), int(c), int(v), *(int(x) for x in feats)])


def load_csv(path, schema_path) -> Dataset:
    schema = load_schema(schema_path) if not isinstance(schema_path, Schema) else schema_path
    path = Path(path)
    expected = csv_header(schema)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise LoadError(f"cannot read data file {path}: {exc}") from exc
    users, labels_c, labels_v, feats = [], [], [], []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise LoadError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        missing = [c for c in expected if c not in header]
        if missing:
            raise LoadError(f"{path}:1: missing column(s) {', '.join(missing)}")
        pos = [header.index(c) for c in expected]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise LoadError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            values = []
            for col, p in zip(expected, pos):
                try:
                    values.append(int(row[p]))
                except ValueError:
                    raise LoadError(
                        f"{path}:{lineno}: column '{col}' has non-integer value {row[p]!r}"
                    ) from None
            u, c, v, *f = values
            if u < 0:
                raise LoadError(f"{path}:{lineno}: negative user_id {u}")
            for name, y in (("y_click", c), ("y_conversion", v)):
                if y not in (0, 1):
                    raise LoadError(f"{path}:{lineno}: {name} must be 0 or 1, got {y}")
            for (name, card), fid in zip(schema.fields, f):
                if not 0 <= fid < card:
                    raise LoadError(
                        f"{path}:{lineno}: feature id {fid} out of range for field '{name}' "
                        f"(cardinality {card})"
                    )
            if schema.funnel_constraint and v > c:
                raise LoadError(f"{path}:{lineno}: conversion without click violates funnel")
            users.append(u)
            labels_c.append(c)
            labels_v.append(v)
            feats.append(f)
    n = len(users)
    return Dataset(
        schema,
        np.array(users, dtype=np.int64),
        np.array(feats, dtype=np.int64).reshape(n, schema.num_fields),
        np.array(labels_c, dtype=np.int64),
        np.array(labels_v, dtype=np.int64),
    )


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class GenConfig:
    n_records: int = 10_000
    n_fields: int = 8
    cardinality: int = 50
    n_users: int = 500
    latent_dim: int = 4
    rho: float = 0.6
    ctr_rate: float = 0.1
    cvr_rate: float = 0.0025
    funnel: bool = True
    signal: float = 1.5

    def validate(self) -> None:
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [-1, 1], got {self.rho}")
        for name in ("ctr_rate", "cvr_rate"):
            rate = getattr(self, name)
            if not 0.0 < rate < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {rate}")
        if self.funnel and self.cvr_rate >= self.ctr_rate:
            raise ConfigError("with the funnel constraint cvr_rate must be below ctr_rate")
        for name in ("n_records", "n_fields", "cardinality", "n_users", "latent_dim"):
            if getattr(self, name) < (0 if name == "n_records" else 1):
                raise ConfigError(f"{name} must be positive")
        if self.signal < 0:
            raise ConfigError("signal must be non-negative")

    def schema(self) -> Schema:
        return Schema(
            tuple((f"c{i}", self.cardinality) for i in range(self.n_fields)), self.funnel
        )


class SynthData(NamedTuple):
    dataset: Dataset
    ctr_logits: np.ndarray
    cvr_logits: np.ndarray


def _solve_intercept(logits: np.ndarray, target: float, weights: np.ndarray | None = None) -> float:
    """Bisection for ``a`` with mean(sigmoid(a + logits) * weights) == target."""
    w = np.ones_like(logits) if weights is None else weights
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rate = np.mean(w / (1.0 + np.exp(-(mid + logits))))
        if rate < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _field_component(rng, cfg: GenConfig, ids: np.ndarray) -> np.ndarray:
    """Sum over fields of a random per-id latent effect, scaled to unit variance."""
    tables = rng.standard_normal((cfg.n_fields, cfg.cardinality, cfg.latent_dim))
    proj = rng.standard_normal(cfg.latent_dim) / np.sqrt(cfg.latent_dim)
    effects = tables @ proj  # (F, card)
    comp = effects[np.arange(cfg.n_fields)[None, :], ids].sum(axis=1)
    sd = comp.std()
    return (comp - comp.mean()) / sd if sd > 0 else comp - comp.mean()


def synth_generate_full(cfg: GenConfig, seed: int) -> SynthData:
    """Generate a dataset and also return the latent logits behind the labels."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    n, F = cfg.n_records, cfg.n_fields
    ids = rng.integers(0, cfg.cardinality, size=(n, F))
    users = rng.integers(0, cfg.n_users, size=n)
    # user identity drives the first field so per-user groups carry signal
    ids[:, 0] = users % cfg.cardinality

    common = _field_component(rng, cfg, ids)
    own_ctr = _field_component(rng, cfg, ids)
    own_cvr = _field_component(rng, cfg, ids)
    a = np.sqrt(abs(cfg.rho))
    s = np.sqrt(1.0 - abs(cfg.rho))
    ctr_logit = cfg.signal * (a * common + s * own_ctr)
    cvr_logit = cfg.signal * (np.sign(cfg.rho) * a * common + s * own_cvr)

    ctr_logit = ctr_logit + _solve_intercept(ctr_logit, cfg.ctr_rate)
    p_ctr = 1.0 / (1.0 + np.exp(-ctr_logit))
    if cfg.funnel:
        cvr_logit = cvr_logit + _solve_intercept(cvr_logit, cfg.cvr_rate, weights=p_ctr)
    else:
        cvr_logit = cvr_logit + _solve_intercept(cvr_logit, cfg.cvr_rate)
    p_cvr = 1.0 / (1.0 + np.exp(-cvr_logit))

    y_ctr = (rng.random(n) < p_ctr).astype(np.int64)
    y_cvr = (rng.random(n) < p_cvr).astype(np.int64)
    if cfg.funnel:
        y_cvr = y_cvr * y_ctr
    ds = Dataset(cfg.schema(), users, ids, y_ctr, y_cvr)
    return SynthData(ds, ctr_logit, cvr_logit)


def synth_generate(cfg: GenConfig, seed: int) -> Dataset:
    return synth_generate_full(cfg, seed).dataset


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# --------------------------------------------------------------------------
# batching


class Batch(NamedTuple):
    user_ids: np.ndarray
    features: np.ndarray
    y_ctr: np.ndarray
    y_cvr: np.ndarray

    def __len__(self) -> int:
        return len(self.y_ctr)


def batch_of(ds: Dataset, idx=None) -> Batch:
    if idx is None:
        return Batch(ds.user_ids, ds.features, ds.y_ctr, ds.y_cvr)
    return Batch(ds.user_ids[idx], ds.features[idx], ds.y_ctr[idx], ds.y_cvr[idx])


def batch_iter(
    ds: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True, epoch: int = 0
) -> Iterator[Batch]:
    """Yield batches of ``batch_size`` rows; the last batch may be shorter."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    n = len(ds)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        yield batch_of(ds, order[start : start + batch_size])
