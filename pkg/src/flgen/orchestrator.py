"""Federated training loop.

Builds the synthetic world, partitions it, provisions generated data per an
allocation plan, then runs rounds: sample clients, train locally under the
chosen strategy, aggregate by trained-set size, and collect metrics.

Every random draw comes from a named substream of one master seed
(``stream(seed, tag, ...)``), so changing e.g. the participation rate cannot
disturb the data or the generator draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from flgen.algorithms import (
    ClientTrainState,
    ServerState,
    aggregate,
    scaffold_server_control,
    server_update,
    train_schedule,
)
from flgen.config import STRATEGIES, ExperimentConfig
from flgen.data import (
    ORIGIN_GENERATED,
    LabeledPool,
    PartitionError,
    PartitionSpec,
    PoolFormatError,
    SyntheticTaskSpec,
    build_task,
    concat_pools,
    empty_pool,
    load_external_pool,
    make_task_spec,
    partition_dirichlet,
    partition_feature_domains,
    pool_batch,
)
from flgen.evaluation import (
    AttackSpec,
    RoundRecord,
    accuracy,
    avg_local_global_acc,
    dataset_heterogeneity,
    mean_offdiagonal,
    mia_attack,
    model_divergence,
    model_losses,
    random_projection,
)
from flgen.generation import (
    GenerationSpec,
    allocate_equal,
    allocate_inverse,
    allocate_waterfill,
    generate_for_client,
)
from flgen.numerics import ModelParams, init_params, zeros_like_values

# Substream tags. Per-client and per-round labels keep streams independent:
# a client that sits out a round consumes nothing from anyone else's stream.
STREAM_TASK = 1
STREAM_DATA = 2
STREAM_PARTITION = 3
STREAM_INIT = 4
STREAM_CAPABLE = 5
STREAM_GENERATION = 6  # + client id
STREAM_SAMPLING = 7    # + round index
STREAM_TRAIN = 8       # + round index, client id
STREAM_ATTACK = 9      # + round index
STREAM_METRICS = 10


def stream(seed: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng((seed, tag, *extra))


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for CLI reporting."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage


@dataclass
class ClientData:
    """One client's data: the private shard, the full generated cache, and
    the currently active (post-filter) generated subset."""

    private: LabeledPool
    generated: LabeledPool
    active_generated: LabeledPool

    def __post_init__(self) -> None:
        if self.private.feature_dim != self.generated.feature_dim:
            raise ValueError("private and generated feature widths differ")
        overlap = np.intersect1d(self.private.uids, self.generated.uids)
        if overlap.size:
            raise ValueError(f"uid {overlap[0]} appears in both private and generated data")
        extra = np.setdiff1d(self.active_generated.uids, self.generated.uids)
        if extra.size:
            raise ValueError(f"active generated uid {extra[0]} not in the generated cache")


@dataclass
class ExperimentState:
    config: ExperimentConfig
    task: SyntheticTaskSpec
    train_pool: LabeledPool
    test_pool: LabeledPool
    clients: list[ClientData]
    capable: frozenset[int]
    plan: np.ndarray  # (clients, classes) generation counts
    server: ServerState
    client_states: list[ClientTrainState]
    projection: np.ndarray | None


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    state: ExperimentState


def sample_clients(num_clients: int, rate: float, round_index: int, seed: int) -> np.ndarray:
    """ceil(rate * K) distinct client ids for one round, sorted ascending."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"participation rate must be in (0, 1], got {rate}")
    count = min(num_clients, math.ceil(rate * num_clients))
    rng = stream(seed, STREAM_SAMPLING, round_index)
    ids = rng.choice(num_clients, size=count, replace=False)
    return np.sort(ids)


def build_training_set(cd: ClientData, strategy: str, phase: str = "first") -> LabeledPool:
    """The pool a strategy trains on in the named phase.

    Only the sequential strategies have a second phase: p2g moves to generated
    data, g2p moves to private data.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if phase == "second":
        if strategy == "p2g":
            return cd.active_generated
        if strategy == "g2p":
            return cd.private
        raise ValueError(f"strategy {strategy!r} has no second phase")
    if phase != "first":
        raise ValueError(f"unknown phase {phase!r}")
    if strategy == "pri":
        return cd.private
    if strategy == "gen":
        return cd.active_generated
    if strategy == "p2g":
        return cd.private
    if strategy == "g2p":
        return cd.active_generated
    return concat_pools(cd.private, cd.active_generated)  # mixed


def training_schedule(cd: ClientData, strategy: str, local_iters: int) -> list[tuple[LabeledPool, int]]:
    """(pool, iterations) phases for one client's round.

    Sequential strategies split the budget ceil/floor between their phases and
    collapse to private-only training when the client holds no generated data,
    which makes them coincide exactly with 'pri' in that case.
    """
    if strategy == "gen":
        if len(cd.active_generated) == 0:
            raise ValueError("strategy 'gen' requires generated samples and this client has none")
        return [(cd.active_generated, local_iters)]
    if strategy in ("p2g", "g2p"):
        if len(cd.active_generated) == 0:
            return [(cd.private, local_iters)]
        first = build_training_set(cd, strategy, "first")
        second = build_training_set(cd, strategy, "second")
        head = (local_iters + 1) // 2
        phases = [(first, head)]
        if local_iters - head:
            phases.append((second, local_iters - head))
        return phases
    return [(build_training_set(cd, strategy, "first"), local_iters)]


def training_view(cd: ClientData, strategy: str) -> LabeledPool:
    """Union of the pools a client would touch this round. Its size is the
    client's aggregation weight; its mean feature feeds the heterogeneity
    metrics."""
    if strategy == "pri":
        return cd.private
    if strategy == "gen":
        return cd.active_generated
    return concat_pools(cd.private, cd.active_generated)


def filter_generated(
    cd: ClientData, model: ModelParams, keep_percent: float, category_wise: bool
) -> LabeledPool:
    """Lowest-loss slice of the full generated cache under the current model.

    Keeps floor(keep_percent/100 * n) samples, per class when category_wise,
    ranking by (loss, uid) ascending. Always re-filters the full cache, so a
    sample dropped under one model can return under a later one.
    """
    pool = cd.generated
    n = len(pool)
    if n == 0:
        return pool
    losses = model_losses(model, pool)

    def pick(indices: np.ndarray) -> list[int]:
        m = math.floor(keep_percent * len(indices) / 100.0)
        ranked = sorted(indices, key=lambda i: (losses[i], pool.uids[i]))
        return [int(i) for i in ranked[:m]]

    if category_wise:
        kept: list[int] = []
        for c in np.unique(pool.labels):
            kept.extend(pick(np.flatnonzero(pool.labels == c)))
    else:
        kept = pick(np.arange(n))
    return pool.subset(np.sort(np.asarray(kept, dtype=np.int64)))


def _build_plan(cfg: ExperimentConfig, clients: list[ClientData], capable: frozenset[int]) -> np.ndarray:
    num_clients = cfg.partition.num_clients
    num_classes = cfg.task.num_classes
    total = cfg.generation.total_budget
    if total == 0 or not capable:
        # nothing to allocate; an empty capable set simply produces no samples
        return np.zeros((num_clients, num_classes), dtype=np.int64)
    mode = cfg.generation.allocation
    if mode == "equal":
        return allocate_equal(total, num_clients, num_classes, capable)
    if mode == "inverse":
        counts = np.array([len(cd.private) for cd in clients], dtype=np.int64)
        return allocate_inverse(total, counts, num_classes, capable)
    class_counts = np.zeros((num_clients, num_classes), dtype=np.int64)
    for k, cd in enumerate(clients):
        class_counts[k] = np.bincount(cd.private.labels, minlength=num_classes)
    return allocate_waterfill(total, num_clients, class_counts, capable)


def _deal_imported(
    imported: LabeledPool, plan: np.ndarray, uid_base: int, path: str
) -> list[LabeledPool]:
    """Assign imported rows to clients by walking the plan.

    Clients ascending, classes ascending, taking label-matching rows in file
    order; surplus rows are ignored. uids are reassigned sequentially so they
    cannot collide with private data.
    """
    if len(imported) and np.any(imported.origins != ORIGIN_GENERATED):
        raise PoolFormatError(f"{path}: imported pool must contain only generated-origin rows")
    num_clients, num_classes = plan.shape
    by_class = [list(np.flatnonzero(imported.labels == c)) for c in range(num_classes)]
    cursor = [0] * num_classes
    pools: list[LabeledPool] = []
    next_uid = uid_base
    for k in range(num_clients):
        rows: list[int] = []
        for c in range(num_classes):
            need = int(plan[k, c])
            have = len(by_class[c]) - cursor[c]
            if have < need:
                raise PoolFormatError(
                    f"{path}: plan needs {need} more class-{c} rows for client {k}, "
                    f"file has {have} left"
                )
            rows.extend(by_class[c][cursor[c]:cursor[c] + need])
            cursor[c] += need
        idx = np.asarray(rows, dtype=np.int64)
        pools.append(LabeledPool(
            imported.features[idx],
            imported.labels[idx],
            imported.domains[idx],
            np.full(idx.size, ORIGIN_GENERATED, dtype=np.int64),
            np.arange(next_uid, next_uid + idx.size, dtype=np.int64),
        ))
        next_uid += idx.size
    return pools


def prepare_experiment(cfg: ExperimentConfig) -> ExperimentState:
    """Everything up to round 1: world, shards, plan, generated data, model."""
    t = cfg.task
    try:
        task = make_task_spec(
            num_classes=t.num_classes,
            feature_dim=t.feature_dim,
            num_domains=t.num_domains,
            sigma_w=t.sigma_w,
            mean_scale=t.mean_scale,
            domain_scale=t.domain_scale,
            train_per_class=t.train_per_class,
            test_per_class=t.test_per_class,
            generator_gap=t.generator_gap,
            generator_diversity=t.generator_diversity,
            rng=stream(cfg.seed, STREAM_TASK),
        )
        train_pool, test_pool = build_task(task, stream(cfg.seed, STREAM_DATA))
    except ValueError as exc:
        raise StageError("task", exc) from exc

    part_seed = int(stream(cfg.seed, STREAM_PARTITION).integers(0, 2**63))
    try:
        ps = PartitionSpec(cfg.partition.num_clients, cfg.partition.beta, cfg.partition.mode, part_seed)
        if cfg.partition.mode == "label":
            shards = partition_dirichlet(train_pool, ps)
        else:
            shards = partition_feature_domains(train_pool, ps, cfg.partition.clients_per_domain)
    except (ValueError, PartitionError) as exc:
        raise StageError("partition", exc) from exc

    d = task.feature_dim
    clients = [
        ClientData(
            private=train_pool.subset_by_uids(uids),
            generated=empty_pool(d),
            active_generated=empty_pool(d),
        )
        for uids in shards
    ]

    num_clients = cfg.partition.num_clients
    want = int(round(cfg.generation.capable_fraction * num_clients))
    if want:
        picks = stream(cfg.seed, STREAM_CAPABLE).choice(num_clients, size=want, replace=False)
        capable = frozenset(int(k) for k in picks)
    else:
        capable = frozenset()

    try:
        plan = _build_plan(cfg, clients, capable)
    except ValueError as exc:
        raise StageError("allocation", exc) from exc

    g = cfg.generation
    try:
        gen_spec = GenerationSpec(
            total_budget=g.total_budget,
            allocation=g.allocation,
            guidance=g.guidance,
            diversity_profile=g.diversity_profile,
            real_guidance_noise=g.real_guidance_noise,
            generation_capable=capable,
        )
        uid_base = len(train_pool)
        if g.import_path:
            imported = load_external_pool(g.import_path, num_classes=t.num_classes, feature_dim=d)
            gen_pools = _deal_imported(imported, plan, uid_base, g.import_path)
        else:
            gen_pools = []
            next_uid = uid_base
            for k in range(num_clients):
                if plan[k].sum() == 0:
                    gen_pools.append(empty_pool(d))
                    continue
                block = generate_for_client(
                    clients[k].private, plan[k], gen_spec, task,
                    stream(cfg.seed, STREAM_GENERATION, k),
                )
                n = block.features.shape[0]
                gen_pools.append(LabeledPool(
                    block.features, block.labels, block.domains,
                    np.full(n, ORIGIN_GENERATED, dtype=np.int64),
                    np.arange(next_uid, next_uid + n, dtype=np.int64),
                ))
                next_uid += n
    except (ValueError, PoolFormatError) as exc:
        raise StageError("generation", exc) from exc

    for cd, gen in zip(clients, gen_pools):
        cd.generated = gen
        cd.active_generated = gen

    try:
        layer_dims = [d, *cfg.hidden_dims, t.num_classes]
        global_model = init_params(layer_dims, stream(cfg.seed, STREAM_INIT))
    except ValueError as exc:
        raise StageError("init", exc) from exc

    if cfg.metrics.identity_projection:
        projection = None
    else:
        proj_seed = int(stream(cfg.seed, STREAM_METRICS).integers(0, 2**63))
        projection = random_projection(d, cfg.metrics.projection_dim, proj_seed)

    return ExperimentState(
        config=cfg,
        task=task,
        train_pool=train_pool,
        test_pool=test_pool,
        clients=clients,
        capable=capable,
        plan=plan,
        server=ServerState(global_model),
        client_states=[ClientTrainState() for _ in range(num_clients)],
        projection=projection,
    )


def run_round(state: ExperimentState, round_index: int) -> RoundRecord:
    """One communication round; mutates state, returns that round's metrics."""
    cfg = state.config
    num_clients = cfg.partition.num_clients

    if cfg.filter is not None and round_index >= cfg.filter.start_round:
        for cd in state.clients:
            cd.active_generated = filter_generated(
                cd, state.server.global_model, cfg.filter.keep_percent, cfg.filter.category_wise
            )

    selected = sample_clients(num_clients, cfg.participation_rate, round_index, cfg.seed)
    received = state.server.global_model

    local_models: list[ModelParams] = []
    sizes: list[int] = []
    control_deltas: list[np.ndarray] = []
    for k in (int(i) for i in selected):
        cd = state.clients[k]
        try:
            pool_phases = training_schedule(cd, cfg.strategy, cfg.algorithm.local_iters)
            phases = [(pool_batch(pool), iters) for pool, iters in pool_phases]
            before = state.client_states[k]
            model, after = train_schedule(
                received, phases, cfg.algorithm, before, state.server,
                stream(cfg.seed, STREAM_TRAIN, round_index, k),
            )
        except ValueError as exc:
            raise StageError("training", ValueError(f"client {k}, round {round_index}: {exc}")) from exc
        state.client_states[k] = after
        local_models.append(model)
        sizes.append(len(training_view(cd, cfg.strategy)))
        if cfg.algorithm.kind == "scaffold":
            prev = before.control_variate
            if prev is None:
                prev = zeros_like_values(received)
            control_deltas.append(after.control_variate - prev)

    agg = aggregate(local_models, sizes)
    divergence = model_divergence(local_models, agg)
    if cfg.algorithm.kind == "scaffold":
        scaffold_server_control(state.server, control_deltas, num_clients)
    new_global = server_update(state.server, agg.values - received.values, cfg.algorithm)

    views = [training_view(cd, cfg.strategy) for cd in state.clients]
    views = [v for v in views if len(v) > 0]
    if len(views) >= 2:
        cos, l2 = dataset_heterogeneity(views, state.projection)
        het_cos = mean_offdiagonal(cos)
        het_l2 = mean_offdiagonal(l2)
    else:
        het_cos, het_l2 = 1.0, 0.0

    attack_acc = None
    if cfg.attack_every > 0 and round_index % cfg.attack_every == 0:
        spec = AttackSpec(
            attacker_known_fraction=cfg.attack.known_fraction,
            eval_member_count=cfg.attack.eval_members,
            eval_nonmember_count=cfg.attack.eval_nonmembers,
        )
        attack_acc = mia_attack(
            new_global, state.train_pool, state.test_pool, spec,
            stream(cfg.seed, STREAM_ATTACK, round_index),
        )

    return RoundRecord(
        round=round_index,
        global_test_acc=accuracy(new_global, state.test_pool),
        avg_local_global_acc=avg_local_global_acc(local_models, state.test_pool),
        divergence=divergence,
        mean_pairwise_cosine=het_cos,
        mean_pairwise_l2=het_l2,
        attack_acc=attack_acc,
    )


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    state = prepare_experiment(cfg)
    records = [run_round(state, r) for r in range(1, cfg.rounds + 1)]
    return ExperimentResult(records=records, state=state)


def combined_generated(state: ExperimentState) -> LabeledPool:
    """All clients' generated caches as one pool, client order preserved."""
    pools = [cd.generated for cd in state.clients if len(cd.generated)]
    if not pools:
        return empty_pool(state.task.feature_dim)
    return concat_pools(*pools)
