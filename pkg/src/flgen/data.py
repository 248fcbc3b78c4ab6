"""Synthetic classification worlds, client partitioning, and pool CSV I/O.

The world is a class- and domain-conditional Gaussian mixture. Training pools
are split across clients either by label skew (one Dirichlet draw per class)
or by domain groups; both are deterministic given the partition seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flgen.numerics import Batch

ORIGIN_PRIVATE = 0
ORIGIN_GENERATED = 1
ORIGIN_NAMES = {ORIGIN_PRIVATE: "private", ORIGIN_GENERATED: "generated"}
ORIGIN_CODES = {name: code for code, name in ORIGIN_NAMES.items()}

PARTITION_MODES = ("label", "feature")
_MAX_PARTITION_TRIES = 100


class PartitionError(RuntimeError):
    """Partitioning could not satisfy its invariants within the retry bound."""


class PoolFormatError(ValueError):
    """A pool CSV file is malformed."""


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Parameters of the synthetic world.

    ``means`` has shape (num_classes, num_domains, feature_dim): one Gaussian
    component mean per class/domain cell, all with isotropic std ``sigma_w``.
    ``generator_gap`` is the d-vector offset separating the generator's
    component means from the world's; ``generator_diversity`` scales the
    generator's sampling std.
    """

    num_classes: int
    feature_dim: int
    num_domains: int
    means: np.ndarray
    sigma_w: float
    train_per_class: int
    test_per_class: int
    generator_gap: np.ndarray
    generator_diversity: float

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.feature_dim < 1 or self.num_domains < 1:
            raise ValueError("feature_dim and num_domains must be positive")
        if self.sigma_w <= 0.0:
            raise ValueError(f"sigma_w must be positive, got {self.sigma_w}")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise ValueError("per-class sample counts must be non-negative")
        if self.generator_diversity < 0.0:
            raise ValueError("generator_diversity must be non-negative")
        means = np.ascontiguousarray(self.means, dtype=np.float64)
        expected = (self.num_classes, self.num_domains, self.feature_dim)
        if means.shape != expected:
            raise ValueError(f"means shape {means.shape} != {expected}")
        gap = np.ascontiguousarray(self.generator_gap, dtype=np.float64)
        if gap.shape != (self.feature_dim,):
            raise ValueError(f"generator_gap shape {gap.shape} != ({self.feature_dim},)")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "generator_gap", gap)


def make_task_spec(
    num_classes: int,
    feature_dim: int,
    num_domains: int = 1,
    sigma_w: float = 1.0,
    mean_scale: float = 3.0,
    domain_scale: float = 1.0,
    train_per_class: int = 200,
    test_per_class: int = 50,
    generator_gap: float = 0.0,
    generator_diversity: float = 1.0,
    rng: np.random.Generator | None = None,
) -> SyntheticTaskSpec:
    """Draw a world: class means N(0, mean_scale^2 I), then per-domain offsets
    N(0, domain_scale^2 I) when num_domains > 1. The generator gap vector is
    gap/sqrt(d) in every coordinate, so its L2 norm equals ``generator_gap``.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if generator_gap < 0.0:
        raise ValueError("generator_gap must be non-negative")
    class_means = rng.normal(0.0, mean_scale, size=(num_classes, feature_dim))
    if num_domains > 1:
        offsets = rng.normal(0.0, domain_scale, size=(num_domains, feature_dim))
    else:
        offsets = np.zeros((1, feature_dim))
    means = class_means[:, None, :] + offsets[None, :, :]
    gap_vec = np.full(feature_dim, generator_gap / np.sqrt(feature_dim))
    return SyntheticTaskSpec(
        num_classes=num_classes,
        feature_dim=feature_dim,
        num_domains=num_domains,
        means=means,
        sigma_w=sigma_w,
        train_per_class=train_per_class,
        test_per_class=test_per_class,
        generator_gap=gap_vec,
        generator_diversity=generator_diversity,
    )


@dataclass(frozen=True)
class LabeledPool:
    """Columnar sample store: features, labels, domains, origins, uids.

    uids are unique within a pool; origins are ORIGIN_PRIVATE or
    ORIGIN_GENERATED.
    """

    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    origins: np.ndarray
    uids: np.ndarray

    def __post_init__(self) -> None:
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        domains = np.ascontiguousarray(self.domains, dtype=np.int64)
        origins = np.ascontiguousarray(self.origins, dtype=np.int64)
        uids = np.ascontiguousarray(self.uids, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        n = features.shape[0]
        for name, col in (("labels", labels), ("domains", domains),
                          ("origins", origins), ("uids", uids)):
            if col.shape != (n,):
                raise ValueError(f"{name} shape {col.shape} does not match {n} rows")
        if n and np.unique(uids).size != n:
            raise ValueError("duplicate uid in pool")
        if n and not set(np.unique(origins)).issubset(ORIGIN_NAMES):
            raise ValueError("unknown origin code")
        for name, arr in (("features", features),):
            if arr.size and not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite value in {name}")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "domains", domains)
        object.__setattr__(self, "origins", origins)
        object.__setattr__(self, "uids", uids)

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: np.ndarray) -> "LabeledPool":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledPool(
            self.features[idx], self.labels[idx], self.domains[idx],
            self.origins[idx], self.uids[idx],
        )

    def subset_by_uids(self, uids: np.ndarray) -> "LabeledPool":
        wanted = np.asarray(uids, dtype=np.int64)
        pos = {int(u): i for i, u in enumerate(self.uids)}
        try:
            idx = np.array([pos[int(u)] for u in wanted], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"uid {exc.args[0]} not in pool") from None
        return self.subset(idx)


def empty_pool(feature_dim: int) -> LabeledPool:
    z = np.zeros(0, dtype=np.int64)
    return LabeledPool(np.zeros((0, feature_dim)), z, z, z, z)


def concat_pools(*pools: LabeledPool) -> LabeledPool:
    """Concatenate pools in order; uids must stay unique across the result."""
    if not pools:
        raise ValueError("no pools to concatenate")
    return LabeledPool(
        np.concatenate([p.features for p in pools], axis=0),
        np.concatenate([p.labels for p in pools]),
        np.concatenate([p.domains for p in pools]),
        np.concatenate([p.origins for p in pools]),
        np.concatenate([p.uids for p in pools]),
    )


def pool_batch(pool: LabeledPool) -> Batch:
    if len(pool) == 0:
        raise ValueError("cannot build a batch from an empty pool")
    return Batch(pool.features, pool.labels)


def build_task(spec: SyntheticTaskSpec, rng: np.random.Generator) -> tuple[LabeledPool, LabeledPool]:
    """Draw train and test pools. Per class: domain indices uniform over
    domains, then feature noise N(0, sigma_w^2 I); train first, then test.
    uids are insertion order, separate per pool.
    """
    train = _draw_pool(spec, spec.train_per_class, rng)
    test = _draw_pool(spec, spec.test_per_class, rng)
    return train, test


def _draw_pool(spec: SyntheticTaskSpec, per_class: int, rng: np.random.Generator) -> LabeledPool:
    feats = []
    labels = []
    domains = []
    for c in range(spec.num_classes):
        doms = rng.integers(0, spec.num_domains, size=per_class)
        noise = rng.normal(0.0, spec.sigma_w, size=(per_class, spec.feature_dim))
        feats.append(spec.means[c, doms] + noise)
        labels.append(np.full(per_class, c, dtype=np.int64))
        domains.append(doms.astype(np.int64))
    n = per_class * spec.num_classes
    if n == 0:
        return empty_pool(spec.feature_dim)
    return LabeledPool(
        np.concatenate(feats, axis=0),
        np.concatenate(labels),
        np.concatenate(domains),
        np.full(n, ORIGIN_PRIVATE, dtype=np.int64),
        np.arange(n, dtype=np.int64),
    )


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    beta: float
    mode: str
    seed: int

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.beta <= 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.mode not in PARTITION_MODES:
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.seed < 0:
            raise ValueError("partition seed must be non-negative")


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer split of ``total`` proportional to non-negative weights.

    Floors the proportional targets, then hands the remaining units to the
    largest fractional parts, ties to the lowest index. Sum is exactly total.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total < 0:
        raise ValueError("total must be non-negative")
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty 1-D array")
    if np.any(w < 0.0):
        raise ValueError("weights must be non-negative")
    if total == 0:
        return np.zeros(w.size, dtype=np.int64)
    s = w.sum()
    if s == 0.0:
        raise ValueError("all weights zero with a positive total")
    target = w / s * total
    base = np.floor(target).astype(np.int64)
    leftover = total - int(base.sum())
    frac = target - base
    order = np.argsort(-frac, kind="stable")
    base[order[:leftover]] += 1
    return base


def partition_dirichlet(train: LabeledPool, ps: PartitionSpec) -> list[np.ndarray]:
    """Split a pool across clients by per-class Dirichlet(beta) proportions.

    Per class (ascending label): one Dirichlet draw over clients, counts by
    largest-remainder rounding, then a permutation of that class's uids split
    into consecutive chunks. Redraws the whole assignment (up to 100 tries)
    until no client is empty.
    """
    if ps.mode != "label":
        raise ValueError(f"partition_dirichlet expects mode 'label', got {ps.mode!r}")
    if len(train) == 0:
        raise PartitionError("cannot partition an empty pool")
    rng = np.random.default_rng(ps.seed)
    classes = np.unique(train.labels)
    for _ in range(_MAX_PARTITION_TRIES):
        parts: list[list[np.ndarray]] = [[] for _ in range(ps.num_clients)]
        for c in classes:
            uids_c = train.uids[train.labels == c]
            props = rng.dirichlet(np.full(ps.num_clients, ps.beta))
            counts = largest_remainder(props, uids_c.size)
            perm = rng.permutation(uids_c.size)
            shuffled = uids_c[perm]
            start = 0
            for k in range(ps.num_clients):
                parts[k].append(shuffled[start:start + counts[k]])
                start += counts[k]
        out = [np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for p in parts]
        if all(p.size > 0 for p in out):
            return out
    raise PartitionError(
        f"no non-empty assignment for {ps.num_clients} clients after "
        f"{_MAX_PARTITION_TRIES} tries; increase beta ({ps.beta}) or reduce clients"
    )


def partition_feature_domains(
    train: LabeledPool, ps: PartitionSpec, clients_per_domain: int
) -> list[np.ndarray]:
    """Domain-wise split: clients_per_domain clients share each domain's data,
    with label-Dirichlet skew inside the domain group. Client k serves domain
    k // clients_per_domain.
    """
    if ps.mode != "feature":
        raise ValueError(f"partition_feature_domains expects mode 'feature', got {ps.mode!r}")
    if len(train) == 0:
        raise PartitionError("cannot partition an empty pool")
    if clients_per_domain < 1:
        raise ValueError("clients_per_domain must be >= 1")
    num_domains = int(train.domains.max()) + 1
    if ps.num_clients != num_domains * clients_per_domain:
        raise ValueError(
            f"num_clients {ps.num_clients} != num_domains {num_domains} x "
            f"clients_per_domain {clients_per_domain}"
        )
    rng = np.random.default_rng(ps.seed)
    for _ in range(_MAX_PARTITION_TRIES):
        parts: list[list[np.ndarray]] = [[] for _ in range(ps.num_clients)]
        for dom in range(num_domains):
            dom_mask = train.domains == dom
            dom_labels = train.labels[dom_mask]
            dom_uids = train.uids[dom_mask]
            for c in np.unique(dom_labels):
                uids_c = dom_uids[dom_labels == c]
                props = rng.dirichlet(np.full(clients_per_domain, ps.beta))
                counts = largest_remainder(props, uids_c.size)
                perm = rng.permutation(uids_c.size)
                shuffled = uids_c[perm]
                start = 0
                for j in range(clients_per_domain):
                    parts[dom * clients_per_domain + j].append(shuffled[start:start + counts[j]])
                    start += counts[j]
        out = [np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for p in parts]
        if all(p.size > 0 for p in out):
            return out
    raise PartitionError(
        f"no non-empty assignment for {ps.num_clients} clients after "
        f"{_MAX_PARTITION_TRIES} tries; increase beta ({ps.beta}) or reduce clients"
    )


def _pool_header(feature_dim: int) -> list[str]:
    return ["uid", "label", "domain", "origin"] + [f"f{i}" for i in range(feature_dim)]


def save_pool(pool: LabeledPool, path) -> None:
    """Write a pool as CSV: uid,label,domain,origin,f0..f{d-1}.

    Floats are written with repr so a load round-trips bit for bit.
    """
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(_pool_header(pool.feature_dim)) + "\n")
        for i in range(len(pool)):
            row = [
                str(int(pool.uids[i])),
                str(int(pool.labels[i])),
                str(int(pool.domains[i])),
                ORIGIN_NAMES[int(pool.origins[i])],
            ]
            row.extend(repr(float(v)) for v in pool.features[i])
            fh.write(",".join(row) + "\n")


def load_external_pool(
    path, num_classes: int | None = None, feature_dim: int | None = None
) -> LabeledPool:
    """Read a pool CSV written by save_pool (or an external generator).

    Malformed rows are rejected with their line number. When num_classes or
    feature_dim are given, labels and width are validated against them.
    """
    try:
        with open(path, "r") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise PoolFormatError(f"cannot read pool file {path}: {exc}") from exc
    if not lines:
        raise PoolFormatError(f"{path}: empty file, expected a header row")
    header = lines[0].split(",")
    if len(header) < 5 or header[:4] != ["uid", "label", "domain", "origin"]:
        raise PoolFormatError(f"{path}: line 1: bad header {lines[0]!r}")
    d = len(header) - 4
    if header[4:] != [f"f{i}" for i in range(d)]:
        raise PoolFormatError(f"{path}: line 1: feature columns must be f0..f{d - 1}")
    if feature_dim is not None and d != feature_dim:
        raise PoolFormatError(f"{path}: expected {feature_dim} feature columns, found {d}")

    uids, labels, domains, origins, feats = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != 4 + d:
            raise PoolFormatError(f"{path}: line {lineno}: expected {4 + d} cells, got {len(cells)}")
        try:
            uid = int(cells[0])
            label = int(cells[1])
            domain = int(cells[2])
        except ValueError:
            raise PoolFormatError(f"{path}: line {lineno}: non-integer id field") from None
        if cells[3] not in ORIGIN_CODES:
            raise PoolFormatError(f"{path}: line {lineno}: unknown origin {cells[3]!r}")
        if label < 0:
            raise PoolFormatError(f"{path}: line {lineno}: negative label {label}")
        if num_classes is not None and label >= num_classes:
            raise PoolFormatError(
                f"{path}: line {lineno}: label {label} out of range for {num_classes} classes"
            )
        if domain < 0:
            raise PoolFormatError(f"{path}: line {lineno}: negative domain {domain}")
        try:
            row = [float(v) for v in cells[4:]]
        except ValueError:
            raise PoolFormatError(f"{path}: line {lineno}: non-numeric feature value") from None
        if not all(np.isfinite(row)):
            raise PoolFormatError(f"{path}: line {lineno}: non-finite feature value")
        uids.append(uid)
        labels.append(label)
        domains.append(domain)
        origins.append(ORIGIN_CODES[cells[3]])
        feats.append(row)

    n = len(uids)
    if n and len(set(uids)) != n:
        raise PoolFormatError(f"{path}: duplicate uid in file")
    return LabeledPool(
        np.asarray(feats, dtype=np.float64).reshape(n, d),
        np.asarray(labels, dtype=np.int64),
        np.asarray(domains, dtype=np.int64),
        np.asarray(origins, dtype=np.int64),
        np.asarray(uids, dtype=np.int64),
    )
