"""Budget allocation across clients/classes and synthetic sample generation.

Allocation plans are (num_clients x num_classes) integer matrices whose total
is exactly the budget; rows of clients outside the capable set are zero.
Generation itself mimics an imperfect conditional generator: component means
shifted by the task's generator gap, spread scaled by its diversity, or a
noisy copy of a real private sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flgen.data import LabeledPool, SyntheticTaskSpec, largest_remainder

ALLOCATIONS = ("equal", "inverse", "waterfill")
GUIDANCE_MODES = ("prompt_only", "real_data", "mixed")

# Sampling-std width multiplier per prompt diversity profile.
PROFILE_WIDTHS = {"single": 0.5, "multiple": 1.0, "llm": 1.5}


@dataclass(frozen=True)
class GenerationSpec:
    total_budget: int
    allocation: str
    guidance: str
    diversity_profile: str
    real_guidance_noise: float
    generation_capable: frozenset[int]

    def __post_init__(self) -> None:
        if self.total_budget < 0:
            raise ValueError(f"total_budget must be >= 0, got {self.total_budget}")
        if self.allocation not in ALLOCATIONS:
            raise ValueError(f"unknown allocation {self.allocation!r}")
        if self.guidance not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.guidance!r}")
        if self.diversity_profile not in PROFILE_WIDTHS:
            raise ValueError(f"unknown diversity profile {self.diversity_profile!r}")
        if self.real_guidance_noise < 0.0:
            raise ValueError("real_guidance_noise must be non-negative")
        object.__setattr__(self, "generation_capable", frozenset(int(k) for k in self.generation_capable))


@dataclass(frozen=True)
class SampleBlock:
    """Generated samples before uid assignment: features, labels, domains."""

    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    def __post_init__(self) -> None:
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        domains = np.ascontiguousarray(self.domains, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got {features.shape}")
        n = features.shape[0]
        if labels.shape != (n,) or domains.shape != (n,):
            raise ValueError("labels/domains do not match feature rows")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "domains", domains)

    def __len__(self) -> int:
        return int(self.features.shape[0])


def empty_block(feature_dim: int) -> SampleBlock:
    z = np.zeros(0, dtype=np.int64)
    return SampleBlock(np.zeros((0, feature_dim)), z, z)


def concat_blocks(blocks: list[SampleBlock], feature_dim: int) -> SampleBlock:
    if not blocks:
        return empty_block(feature_dim)
    return SampleBlock(
        np.concatenate([b.features for b in blocks], axis=0),
        np.concatenate([b.labels for b in blocks]),
        np.concatenate([b.domains for b in blocks]),
    )


def _check_alloc_args(total: int, num_clients: int, num_classes: int, capable) -> list[int]:
    if total < 0:
        raise ValueError("budget must be non-negative")
    if num_clients < 1 or num_classes < 1:
        raise ValueError("need at least one client and one class")
    cap = sorted(int(k) for k in capable)
    for k in cap:
        if k < 0 or k >= num_clients:
            raise ValueError(f"capable client id {k} out of range 0..{num_clients - 1}")
    if total > 0 and not cap:
        raise ValueError("positive budget but no generation-capable clients")
    return cap


def allocate_equal(total: int, num_clients: int, num_classes: int, capable) -> np.ndarray:
    """Even split over capable (client, class) cells.

    Every capable cell gets floor(M / (K'*C)); the remainder goes one sample
    each to the first cells in (client, class) lexicographic order.
    """
    cap = _check_alloc_args(total, num_clients, num_classes, capable)
    plan = np.zeros((num_clients, num_classes), dtype=np.int64)
    if total == 0:
        return plan
    cells = len(cap) * num_classes
    base, extra = divmod(total, cells)
    for k in cap:
        plan[k, :] = base
    handed = 0
    for k in cap:
        for c in range(num_classes):
            if handed == extra:
                return plan
            plan[k, c] += 1
            handed += 1
    return plan


def allocate_inverse(total: int, client_counts, num_classes: int, capable) -> np.ndarray:
    """Weight clients by how far below the largest capable dataset they sit.

    Client k's share of each class column is proportional to N_max - N_k over
    capable clients. Column budgets are an even split of M over classes; both
    splits use largest-remainder rounding. All capable counts equal falls back
    to the even split.
    """
    counts = np.asarray(client_counts, dtype=np.int64)
    num_clients = counts.size
    cap = _check_alloc_args(total, num_clients, num_classes, capable)
    if np.any(counts < 0):
        raise ValueError("client counts must be non-negative")
    plan = np.zeros((num_clients, num_classes), dtype=np.int64)
    if total == 0:
        return plan
    weights = counts[cap].max() - counts[cap]
    if weights.sum() == 0:
        return allocate_equal(total, num_clients, num_classes, cap)
    column_budgets = largest_remainder(np.ones(num_classes), total)
    for c in range(num_classes):
        if column_budgets[c] == 0:
            continue
        shares = largest_remainder(weights.astype(np.float64), int(column_budgets[c]))
        for j, k in enumerate(cap):
            plan[k, c] = shares[j]
    return plan


def allocate_waterfill(total: int, num_clients: int, class_counts, capable) -> np.ndarray:
    """Per client, raise the lowest class totals first.

    Each capable client gets an equal largest-remainder share of M, then
    repeatedly grants one sample to its class with the lowest count+allocated,
    ties to the lowest class index.
    """
    counts = np.asarray(class_counts, dtype=np.int64)
    if counts.ndim != 2:
        raise ValueError(f"class_counts must be (clients, classes), got {counts.shape}")
    if counts.shape[0] != num_clients:
        raise ValueError("class_counts rows do not match num_clients")
    if np.any(counts < 0):
        raise ValueError("class counts must be non-negative")
    num_classes = counts.shape[1]
    cap = _check_alloc_args(total, num_clients, num_classes, capable)
    plan = np.zeros((num_clients, num_classes), dtype=np.int64)
    if total == 0:
        return plan
    budgets = largest_remainder(np.ones(len(cap)), total)
    for j, k in enumerate(cap):
        plan[k] = waterfill_row(counts[k], int(budgets[j]))
    return plan


def waterfill_row(counts, budget: int) -> np.ndarray:
    """Greedy min-fill of one client's class totals; ties to lowest index."""
    levels = np.asarray(counts, dtype=np.int64).copy()
    alloc = np.zeros(levels.size, dtype=np.int64)
    for _ in range(budget):
        target = int(np.argmin(levels))
        levels[target] += 1
        alloc[target] += 1
    return alloc


def generate_prompt_only(
    task: SyntheticTaskSpec,
    class_id: int,
    count: int,
    profile: str,
    rng: np.random.Generator,
) -> SampleBlock:
    """Text-guided surrogate: draw near the generator's shifted class means.

    Domain uniform over all domains; feature std is
    sigma_w * generator_diversity * PROFILE_WIDTHS[profile].
    """
    if class_id < 0 or class_id >= task.num_classes:
        raise ValueError(f"unknown class {class_id} for {task.num_classes}-class task")
    if profile not in PROFILE_WIDTHS:
        raise ValueError(f"unknown diversity profile {profile!r}")
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return empty_block(task.feature_dim)
    std = task.sigma_w * task.generator_diversity * PROFILE_WIDTHS[profile]
    doms = rng.integers(0, task.num_domains, size=count)
    noise = rng.normal(0.0, std, size=(count, task.feature_dim))
    feats = task.means[class_id, doms] + task.generator_gap + noise
    return SampleBlock(feats, np.full(count, class_id, dtype=np.int64), doms.astype(np.int64))


def generate_real_guided(
    real: SampleBlock,
    count: int,
    noise_scale: float,
    sigma_w: float,
    rng: np.random.Generator,
) -> SampleBlock:
    """Perturb uniformly chosen real samples with N(0, (noise_scale*sigma_w)^2).

    Labels and domains are copied from the chosen source samples.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return empty_block(real.features.shape[1])
    if len(real) == 0:
        raise ValueError("real-guided generation needs at least one real sample")
    if noise_scale < 0.0:
        raise ValueError("noise_scale must be non-negative")
    picks = rng.integers(0, len(real), size=count)
    noise = rng.normal(0.0, noise_scale * sigma_w, size=(count, real.features.shape[1]))
    return SampleBlock(
        real.features[picks] + noise,
        real.labels[picks],
        real.domains[picks],
    )


def generate_for_client(
    private: LabeledPool,
    plan_row,
    spec: GenerationSpec,
    task: SyntheticTaskSpec,
    rng: np.random.Generator,
) -> SampleBlock:
    """Fill one client's plan row, class by class (ascending).

    mixed guidance gives ceil(n/2) prompt-only plus floor(n/2) real-guided
    samples when the client holds the class privately and all prompt-only
    otherwise; real_data guidance falls back to prompt-only for absent
    classes. Per class, prompt-only draws happen before real-guided draws.
    """
    row = np.asarray(plan_row, dtype=np.int64)
    if row.shape != (task.num_classes,):
        raise ValueError(f"plan row shape {row.shape} != ({task.num_classes},)")
    if np.any(row < 0):
        raise ValueError("plan row must be non-negative")
    blocks: list[SampleBlock] = []
    for c in range(task.num_classes):
        n = int(row[c])
        if n == 0:
            continue
        mask = private.labels == c
        present = bool(mask.any())
        if spec.guidance == "prompt_only" or not present:
            blocks.append(generate_prompt_only(task, c, n, spec.diversity_profile, rng))
            continue
        real = SampleBlock(private.features[mask], private.labels[mask], private.domains[mask])
        if spec.guidance == "real_data":
            blocks.append(generate_real_guided(real, n, spec.real_guidance_noise, task.sigma_w, rng))
        else:  # mixed
            n_prompt = (n + 1) // 2
            if n_prompt:
                blocks.append(generate_prompt_only(task, c, n_prompt, spec.diversity_profile, rng))
            n_real = n - n_prompt
            if n_real:
                blocks.append(generate_real_guided(real, n_real, spec.real_guidance_noise, task.sigma_w, rng))
    return concat_blocks(blocks, task.feature_dim)
