"""Dataset schema, CSV ingestion, label-combination partitioning, bootstrap
sampling of quadruplets and pairs, label corruption, and a synthetic
correlated-feedback generator used by the end-to-end experiments.

The canonical on-disk format is a plain CSV with integer feature ids:
``f_<name>,...,label_a,label_b`` (optionally a ``split`` column with values
train/valid/test). Labels are strictly 0/1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DegenerateLabels
from .numgrad import sigmoid_values as _sigmoid

SPLIT_TAGS = ("train", "valid", "test")


@dataclass(frozen=True)
class Sample:
    """One record: categorical ids per field plus the two binary labels."""

    field_ids: tuple[int, ...]
    y_a: int
    y_b: int


@dataclass(frozen=True)
class Dataset:
    """Immutable column store of samples.

    ``vocab_sizes[f]`` is always at least 1 + the largest id seen in field
    ``f``. ``split_tags`` is None unless the source carried a split column.
    """

    field_names: tuple[str, ...]
    vocab_sizes: tuple[int, ...]
    field_ids: np.ndarray  # (N, F) int64
    y_a: np.ndarray  # (N,) int64
    y_b: np.ndarray  # (N,) int64
    split_tags: np.ndarray | None = None  # (N,) int64 indices into SPLIT_TAGS

    def __post_init__(self):
        ids = np.asarray(self.field_ids, dtype=np.int64)
        ya = np.asarray(self.y_a, dtype=np.int64)
        yb = np.asarray(self.y_b, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != len(self.field_names):
            raise ConfigError(f"field_ids shape {ids.shape} does not match {len(self.field_names)} fields")
        if len(self.vocab_sizes) != len(self.field_names):
            raise ConfigError("one vocabulary size per field required")
        if ya.shape != (ids.shape[0],) or yb.shape != (ids.shape[0],):
            raise ConfigError("label arrays must be 1-D and aligned with field_ids")
        for arr in (ya, yb):
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise ConfigError("labels must be 0 or 1")
        if ids.size:
            if ids.min() < 0:
                raise ConfigError("feature ids must be nonnegative")
            for f, name in enumerate(self.field_names):
                top = int(ids[:, f].max())
                if self.vocab_sizes[f] < top + 1:
                    raise ConfigError(
                        f"field '{name}': vocabulary size {self.vocab_sizes[f]} < 1 + max id {top}"
                    )
        for arr in (ids, ya, yb):
            arr.setflags(write=False)
        object.__setattr__(self, "field_ids", ids)
        object.__setattr__(self, "y_a", ya)
        object.__setattr__(self, "y_b", yb)
        if self.split_tags is not None:
            tags = np.asarray(self.split_tags, dtype=np.int64)
            if tags.shape != (ids.shape[0],):
                raise ConfigError("split_tags must align with samples")
            tags.setflags(write=False)
            object.__setattr__(self, "split_tags", tags)

    def __len__(self) -> int:
        return self.field_ids.shape[0]

    @property
    def n_fields(self) -> int:
        return len(self.field_names)

    def sample(self, i: int) -> Sample:
        return Sample(tuple(int(v) for v in self.field_ids[i]), int(self.y_a[i]), int(self.y_b[i]))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.field_names,
            self.vocab_sizes,
            self.field_ids[idx].copy(),
            self.y_a[idx].copy(),
            self.y_b[idx].copy(),
            None if self.split_tags is None else self.split_tags[idx].copy(),
        )


@dataclass(frozen=True)
class LabelPartition:
    """Index sets for the four label combinations and their four unions."""

    pos_pos: np.ndarray  # y_a=1, y_b=1
    pos_neg: np.ndarray  # y_a=1, y_b=0
    neg_pos: np.ndarray  # y_a=0, y_b=1
    neg_neg: np.ndarray  # y_a=0, y_b=0
    pos_any: np.ndarray  # y_a=1
    neg_any: np.ndarray  # y_a=0
    any_pos: np.ndarray  # y_b=1
    any_neg: np.ndarray  # y_b=0

    def base_subsets(self) -> dict[str, np.ndarray]:
        return {
            "pos_pos": self.pos_pos,
            "pos_neg": self.pos_neg,
            "neg_pos": self.neg_pos,
            "neg_neg": self.neg_neg,
        }

    def sizes(self) -> dict[str, int]:
        return {name: arr.size for name, arr in self.base_subsets().items()}


@dataclass(frozen=True)
class QuadrupletBatch:
    """Per-step bootstrap draws, one index array per base subset."""

    pos_pos: np.ndarray
    pos_neg: np.ndarray
    neg_pos: np.ndarray
    neg_neg: np.ndarray


@dataclass(frozen=True)
class PairBatch:
    """Bootstrap draws from a positive union and its matching negative union."""

    task: str
    pos: np.ndarray
    neg: np.ndarray


def partition(ds: Dataset) -> LabelPartition:
    """Split sample indices by the combination of the two labels."""
    a = ds.y_a == 1
    b = ds.y_b == 1
    idx = np.arange(len(ds), dtype=np.int64)
    return LabelPartition(
        pos_pos=idx[a & b],
        pos_neg=idx[a & ~b],
        neg_pos=idx[~a & b],
        neg_neg=idx[~a & ~b],
        pos_any=idx[a],
        neg_any=idx[~a],
        any_pos=idx[b],
        any_neg=idx[~b],
    )


def _draw(pool: np.ndarray, name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    if pool.size == 0:
        raise DegenerateLabels(f"label subset '{name}' is empty")
    return pool[rng.integers(0, pool.size, size=size)]


def sample_quadruplets(part: LabelPartition, batch_size: int, rng: np.random.Generator) -> QuadrupletBatch:
    """Uniform draws with replacement from each of the four base subsets."""
    return QuadrupletBatch(
        pos_pos=_draw(part.pos_pos, "pos_pos", batch_size, rng),
        pos_neg=_draw(part.pos_neg, "pos_neg", batch_size, rng),
        neg_pos=_draw(part.neg_pos, "neg_pos", batch_size, rng),
        neg_neg=_draw(part.neg_neg, "neg_neg", batch_size, rng),
    )


def sample_pairs(part: LabelPartition, task: str, batch_size: int, rng: np.random.Generator) -> PairBatch:
    """Uniform draws with replacement from the task's positive/negative unions."""
    if task == "a":
        pos, neg, pn, nn = part.pos_any, part.neg_any, "pos_any", "neg_any"
    elif task == "b":
        pos, neg, pn, nn = part.any_pos, part.any_neg, "any_pos", "any_neg"
    else:
        raise ConfigError(f"sample_pairs: unknown task {task!r}")
    return PairBatch(
        task=task,
        pos=_draw(pos, pn, batch_size, rng),
        neg=_draw(neg, nn, batch_size, rng),
    )


# ---------------------------------------------------------------------------
# CSV ingestion / emission
# ---------------------------------------------------------------------------


def load_csv(path) -> Dataset:
    """Read a dataset CSV (header ``f_<name>,...,label_a,label_b[,split]``).

    Every feature column must be prefixed ``f_``; any other column name is
    rejected. Labels parse strictly as 0/1, ids as nonnegative integers, and
    malformed rows report their line number.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        feature_cols: list[tuple[int, str]] = []
        label_a_col = label_b_col = split_col = None
        for i, name in enumerate(header):
            if name.startswith("f_"):
                feature_cols.append((i, name[2:]))
            elif name == "label_a":
                label_a_col = i
            elif name == "label_b":
                label_b_col = i
            elif name == "split":
                split_col = i
            else:
                raise DataError(f"{path}: unknown column {name!r}")
        if label_a_col is None or label_b_col is None:
            raise DataError(f"{path}: header must include label_a and label_b")
        if not feature_cols:
            raise DataError(f"{path}: no feature columns (expected names prefixed 'f_')")

        ids_rows: list[list[int]] = []
        ya_rows: list[int] = []
        yb_rows: list[int] = []
        tag_rows: list[int] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} values, got {len(row)}")
            try:
                ids_rows.append([int(row[i]) for i, _ in feature_cols])
            except ValueError as e:
                raise DataError(f"{path}: line {lineno}: non-integer feature id ({e})") from None
            for col, sink in ((label_a_col, ya_rows), (label_b_col, yb_rows)):
                value = row[col]
                if value not in ("0", "1"):
                    raise DataError(f"{path}: line {lineno}: label {header[col]}={value!r} not in {{0,1}}")
                sink.append(int(value))
            if split_col is not None:
                tag = row[split_col]
                if tag not in SPLIT_TAGS:
                    raise DataError(f"{path}: line {lineno}: split={tag!r} not in {SPLIT_TAGS}")
                tag_rows.append(SPLIT_TAGS.index(tag))

    n = len(ids_rows)
    field_names = tuple(name for _, name in feature_cols)
    ids = np.asarray(ids_rows, dtype=np.int64).reshape(n, len(field_names))
    if n and ids.min() < 0:
        raise DataError(f"{path}: negative feature id")
    vocab = tuple(int(ids[:, f].max()) + 1 if n else 1 for f in range(len(field_names)))
    return Dataset(
        field_names,
        vocab,
        ids,
        np.asarray(ya_rows, dtype=np.int64),
        np.asarray(yb_rows, dtype=np.int64),
        np.asarray(tag_rows, dtype=np.int64) if split_col is not None else None,
    )


def save_csv(ds: Dataset, path) -> None:
    """Write a dataset in the canonical CSV schema (no quoting needed)."""
    with open(path, "w", encoding="utf-8") as fh:
        cols = [f"f_{name}" for name in ds.field_names] + ["label_a", "label_b"]
        if ds.split_tags is not None:
            cols.append("split")
        fh.write(",".join(cols) + "\n")
        for i in range(len(ds)):
            row = [str(int(v)) for v in ds.field_ids[i]]
            row.append(str(int(ds.y_a[i])))
            row.append(str(int(ds.y_b[i])))
            if ds.split_tags is not None:
                row.append(SPLIT_TAGS[int(ds.split_tags[i])])
            fh.write(",".join(row) + "\n")


def split_dataset(ds: Dataset, fractions, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Random disjoint train/valid/test split; fractions must sum to 1."""
    frac = tuple(float(f) for f in fractions)
    if len(frac) != 3 or any(f < 0 for f in frac) or abs(sum(frac) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three nonnegative values summing to 1, got {frac}")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_train = int(round(frac[0] * len(ds)))
    n_valid = int(round(frac[1] * len(ds)))
    return (
        ds.subset(order[:n_train]),
        ds.subset(order[n_train : n_train + n_valid]),
        ds.subset(order[n_train + n_valid :]),
    )


def split_by_column(ds: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    """Split along the dataset's own split column (e.g. day-based protocols)."""
    if ds.split_tags is None:
        raise ConfigError("dataset has no split column")
    return tuple(ds.subset(np.flatnonzero(ds.split_tags == t)) for t in range(3))


# ---------------------------------------------------------------------------
# synthetic correlated-feedback generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic two-task feedback generator.

    Task utilities are built from latent id embeddings: task A's utility is
    a standardized user-item dot product (plus per-id context offsets), and
    task B mixes that same signal with an independent one at correlation
    ``rho``. Labels are Bernoulli draws through a sigmoid whose bias is
    bisected until the expected positive rate hits ``rate_a``/``rate_b``.
    """

    n_users: int = 300
    n_items: int = 300
    n_context_fields: int = 1
    context_vocab: int = 8
    latent_dim: int = 8
    rho: float = 0.7
    rate_a: float = 0.3
    rate_b: float = 0.25
    n_samples: int = 50_000
    utility_scale: float = 2.0

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [-1, 1], got {self.rho}")
        for name in ("rate_a", "rate_b"):
            r = getattr(self, name)
            if not 0.0 < r < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {r}")
        for name in ("n_users", "n_items", "context_vocab", "latent_dim", "n_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.n_context_fields < 0:
            raise ConfigError("n_context_fields must be nonnegative")
        if self.utility_scale <= 0:
            raise ConfigError("utility_scale must be positive")

    def field_names(self) -> tuple[str, ...]:
        return ("user", "item") + tuple(f"ctx{i}" for i in range(self.n_context_fields))

    def vocab_sizes(self) -> tuple[int, ...]:
        return (self.n_users, self.n_items) + (self.context_vocab,) * self.n_context_fields


def _fit_bias(z: np.ndarray, target: float, max_iter: int = 200, tol: float = 5e-5) -> float:
    """Bisect b so that mean(sigmoid(z + b)) hits the target rate."""
    lo, hi = -40.0, 40.0
    if _sigmoid(z + lo).mean() > target or _sigmoid(z + hi).mean() < target:
        raise ConfigError(f"positive rate {target} unreachable for this utility distribution")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        rate = _sigmoid(z + mid).mean()
        if abs(rate - target) < tol:
            return mid
        if rate < target:
            lo = mid
        else:
            hi = mid
    raise ConfigError(f"bias bisection did not converge to rate {target} in {max_iter} steps")


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    if sd < 1e-12:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def generate_synthetic(cfg: SynthConfig, rng: np.random.Generator) -> tuple[Dataset, np.ndarray]:
    """Draw a dataset plus the (N, 2) ground-truth utilities behind its labels.

    The utilities returned are the final logits (bias included); their order
    is the oracle ranking used by the end-to-end checks.
    """
    n, d = cfg.n_samples, cfg.latent_dim
    users = rng.integers(0, cfg.n_users, size=n)
    items = rng.integers(0, cfg.n_items, size=n)
    ctx = [rng.integers(0, cfg.context_vocab, size=n) for _ in range(cfg.n_context_fields)]

    user_core = rng.normal(size=(cfg.n_users, d))
    item_core = rng.normal(size=(cfg.n_items, d))
    user_ind = rng.normal(size=(cfg.n_users, d))
    item_ind = rng.normal(size=(cfg.n_items, d))
    ctx_core = [rng.normal(scale=0.3, size=cfg.context_vocab) for _ in range(cfg.n_context_fields)]
    ctx_ind = [rng.normal(scale=0.3, size=cfg.context_vocab) for _ in range(cfg.n_context_fields)]

    core = (user_core[users] * item_core[items]).sum(axis=1) / np.sqrt(d)
    ind = (user_ind[users] * item_ind[items]).sum(axis=1) / np.sqrt(d)
    for f in range(cfg.n_context_fields):
        core = core + ctx_core[f][ctx[f]]
        ind = ind + ctx_ind[f][ctx[f]]
    core = _standardize(core)
    ind = _standardize(ind)
    mix = cfg.rho * core + np.sqrt(max(0.0, 1.0 - cfg.rho**2)) * ind

    z_a = cfg.utility_scale * core
    z_b = cfg.utility_scale * mix
    u_a = z_a + _fit_bias(z_a, cfg.rate_a)
    u_b = z_b + _fit_bias(z_b, cfg.rate_b)
    y_a = (rng.random(n) < _sigmoid(u_a)).astype(np.int64)
    y_b = (rng.random(n) < _sigmoid(u_b)).astype(np.int64)

    ids = np.column_stack([users, items] + ctx).astype(np.int64)
    ds = Dataset(cfg.field_names(), cfg.vocab_sizes(), ids, y_a, y_b)
    return ds, np.column_stack([u_a, u_b])


def corrupt_labels(ds: Dataset, task: str, ratio: float, rng: np.random.Generator) -> Dataset:
    """Swap a fraction of one task's positives with an equal count of negatives.

    Picks floor(ratio * #positives) positives uniformly without replacement,
    an equal-sized uniform set of negatives, and flips both groups, so the
    task's positive count is preserved exactly. The other task is untouched.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"corruption ratio must lie in [0, 1], got {ratio}")
    if task not in ("a", "b"):
        raise ConfigError(f"corrupt_labels: unknown task {task!r}")
    y = (ds.y_a if task == "a" else ds.y_b).copy()
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if pos.size == 0 or neg.size == 0:
        raise DegenerateLabels(f"task {task}: need at least one positive and one negative to corrupt")
    k = int(ratio * pos.size)
    if k > neg.size:
        raise DegenerateLabels(f"task {task}: {k} flips requested but only {neg.size} negatives available")
    if k:
        flip_pos = rng.choice(pos, size=k, replace=False)
        flip_neg = rng.choice(neg, size=k, replace=False)
        y[flip_pos] = 0
        y[flip_neg] = 1
    return Dataset(
        ds.field_names,
        ds.vocab_sizes,
        ds.field_ids.copy(),
        y if task == "a" else ds.y_a.copy(),
        y if task == "b" else ds.y_b.copy(),
        None if ds.split_tags is None else ds.split_tags.copy(),
    )
