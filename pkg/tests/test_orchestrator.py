import numpy as np
import pytest

from flgen.config import build_config
from flgen.data import ORIGIN_GENERATED, ORIGIN_PRIVATE, LabeledPool, save_pool
from flgen.numerics import ModelParams
from flgen.orchestrator import (
    ClientData,
    StageError,
    build_training_set,
    combined_generated,
    filter_generated,
    prepare_experiment,
    run_experiment,
    run_round,
    sample_clients,
    training_schedule,
    training_view,
)


def make_pool(features, labels, uids, origin=ORIGIN_PRIVATE):
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    return LabeledPool(features, np.asarray(labels, dtype=np.int64),
                       np.zeros(n, dtype=np.int64), np.full(n, origin),
                       np.asarray(uids, dtype=np.int64))


def client_with(n_priv=4, n_gen=3, d=2):
    rng = np.random.default_rng(0)
    priv = make_pool(rng.normal(size=(n_priv, d)), np.arange(n_priv) % 2, np.arange(n_priv))
    gen = make_pool(rng.normal(size=(n_gen, d)), np.arange(n_gen) % 2,
                    100 + np.arange(n_gen), origin=ORIGIN_GENERATED)
    return ClientData(private=priv, generated=gen, active_generated=gen)


# ------------------------------------------------------------- client data

def test_client_data_rejects_uid_overlap():
    rng = np.random.default_rng(1)
    priv = make_pool(rng.normal(size=(2, 2)), [0, 1], [0, 1])
    gen = make_pool(rng.normal(size=(2, 2)), [0, 1], [1, 2], origin=ORIGIN_GENERATED)
    with pytest.raises(ValueError, match="uid 1"):
        ClientData(private=priv, generated=gen, active_generated=gen)


def test_client_data_active_must_be_subset():
    rng = np.random.default_rng(2)
    priv = make_pool(rng.normal(size=(2, 2)), [0, 1], [0, 1])
    gen = make_pool(rng.normal(size=(1, 2)), [0], [100], origin=ORIGIN_GENERATED)
    stray = make_pool(rng.normal(size=(1, 2)), [0], [999], origin=ORIGIN_GENERATED)
    with pytest.raises(ValueError, match="999"):
        ClientData(private=priv, generated=gen, active_generated=stray)


# ---------------------------------------------------------------- sampling

def test_sample_clients_count_and_order():
    ids = sample_clients(10, 0.5, round_index=1, seed=0)
    assert ids.size == 5
    assert np.array_equal(ids, np.sort(ids))
    assert np.unique(ids).size == 5


def test_sample_clients_full_participation_is_everyone():
    ids = sample_clients(7, 1.0, round_index=3, seed=4)
    assert np.array_equal(ids, np.arange(7))


def test_sample_clients_deterministic_per_round():
    a = sample_clients(10, 0.3, round_index=2, seed=9)
    b = sample_clients(10, 0.3, round_index=2, seed=9)
    c = sample_clients(10, 0.3, round_index=3, seed=9)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)  # different rounds draw differently


def test_sample_clients_ceil_rounding():
    assert sample_clients(10, 0.11, 1, 0).size == 2  # ceil(1.1)
    assert sample_clients(10, 0.95, 1, 0).size == 10


# ------------------------------------------------------------ training sets

def test_build_training_set_table():
    cd = client_with()
    assert build_training_set(cd, "pri") is cd.private
    assert build_training_set(cd, "gen") is cd.active_generated
    assert build_training_set(cd, "p2g") is cd.private
    assert build_training_set(cd, "g2p") is cd.active_generated
    mixed = build_training_set(cd, "mixed")
    assert len(mixed) == len(cd.private) + len(cd.active_generated)
    assert build_training_set(cd, "p2g", "second") is cd.active_generated
    assert build_training_set(cd, "g2p", "second") is cd.private


def test_build_training_set_rejects_bad_args():
    cd = client_with()
    with pytest.raises(ValueError):
        build_training_set(cd, "nope")
    with pytest.raises(ValueError):
        build_training_set(cd, "pri", "second")
    with pytest.raises(ValueError):
        build_training_set(cd, "pri", "third")


def test_training_schedule_single_phase_strategies():
    cd = client_with()
    for strategy in ("pri", "gen", "mixed"):
        phases = training_schedule(cd, strategy, 10)
        assert len(phases) == 1
        assert phases[0][1] == 10


def test_training_schedule_sequential_split():
    cd = client_with()
    phases = training_schedule(cd, "p2g", 9)
    assert [it for _, it in phases] == [5, 4]  # ceil then floor
    assert phases[0][0] is cd.private
    assert phases[1][0] is cd.active_generated
    g2p = training_schedule(cd, "g2p", 9)
    assert g2p[0][0] is cd.active_generated
    assert g2p[1][0] is cd.private


def test_training_schedule_one_iteration_drops_empty_phase():
    cd = client_with()
    phases = training_schedule(cd, "p2g", 1)
    assert len(phases) == 1 and phases[0][1] == 1


def test_training_schedule_collapses_without_generated_data():
    cd = client_with(n_gen=0)
    for strategy in ("p2g", "g2p"):
        phases = training_schedule(cd, strategy, 8)
        assert len(phases) == 1
        assert phases[0][0] is cd.private
        assert phases[0][1] == 8


def test_training_schedule_gen_requires_data():
    cd = client_with(n_gen=0)
    with pytest.raises(ValueError, match="gen"):
        training_schedule(cd, "gen", 8)


def test_training_view_union_sizes():
    cd = client_with(n_priv=4, n_gen=3)
    assert len(training_view(cd, "pri")) == 4
    assert len(training_view(cd, "gen")) == 3
    for s in ("p2g", "g2p", "mixed"):
        assert len(training_view(cd, s)) == 7


# ---------------------------------------------------------------- filtering

def linear_model_for(d):
    shapes = ((d, d),)
    return ModelParams(np.concatenate([np.eye(d).ravel(), np.zeros(d)]), shapes)


def filter_fixture():
    # logits == features, so per-sample loss is monotone in the margin:
    # bigger first coordinate for label 0 means smaller loss
    margins = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
    feats = np.stack([margins, np.zeros(5)], axis=1)
    gen = make_pool(feats, np.zeros(5, dtype=int), 100 + np.arange(5), origin=ORIGIN_GENERATED)
    priv = make_pool(np.ones((1, 2)), [0], [0])
    return ClientData(private=priv, generated=gen, active_generated=gen)


def test_filter_keeps_lowest_loss_floor():
    cd = filter_fixture()
    kept = filter_generated(cd, linear_model_for(2), keep_percent=50.0, category_wise=False)
    # floor(0.5 * 5) = 2 lowest-loss samples = largest margins = uids 100, 101
    assert np.array_equal(kept.uids, [100, 101])


def test_filter_keep_all_is_identity():
    cd = filter_fixture()
    kept = filter_generated(cd, linear_model_for(2), 100.0, False)
    assert np.array_equal(kept.uids, cd.generated.uids)


def test_filter_ties_break_by_uid():
    feats = np.ones((4, 2))  # identical losses everywhere
    gen = make_pool(feats, np.zeros(4, dtype=int), [103, 101, 102, 100], origin=ORIGIN_GENERATED)
    priv = make_pool(np.ones((1, 2)), [0], [0])
    cd = ClientData(private=priv, generated=gen, active_generated=gen)
    kept = filter_generated(cd, linear_model_for(2), 50.0, False)
    assert set(kept.uids) == {100, 101}
    # original pool order preserved in the subset
    assert np.array_equal(kept.uids, [101, 100])


def test_filter_category_wise_keeps_per_class():
    feats = np.array([[5.0, 0.0], [1.0, 0.0], [0.0, 5.0], [0.0, 1.0]])
    gen = make_pool(feats, [0, 0, 1, 1], 100 + np.arange(4), origin=ORIGIN_GENERATED)
    priv = make_pool(np.ones((1, 2)), [0], [0])
    cd = ClientData(private=priv, generated=gen, active_generated=gen)
    kept = filter_generated(cd, linear_model_for(2), 50.0, True)
    # one per class: the confident sample of each
    assert np.array_equal(kept.uids, [100, 102])


def test_filter_refilters_from_full_cache():
    cd = filter_fixture()
    cd.active_generated = filter_generated(cd, linear_model_for(2), 40.0, False)
    assert len(cd.active_generated) == 2
    # a later pass with a looser cut restores dropped samples
    restored = filter_generated(cd, linear_model_for(2), 100.0, False)
    assert len(restored) == 5


def test_filter_empty_cache_is_noop():
    cd = client_with(n_gen=0)
    out = filter_generated(cd, linear_model_for(2), 50.0, False)
    assert len(out) == 0


# ------------------------------------------------------------- preparation

def test_prepare_no_budget_means_no_generated(tiny_kv):
    cfg = build_config(tiny_kv({"generation.total_budget": "0"}))
    state = prepare_experiment(cfg)
    assert state.plan.sum() == 0
    assert all(len(cd.generated) == 0 for cd in state.clients)


def test_prepare_plan_respects_capable_fraction(tiny_kv):
    cfg = build_config(tiny_kv({"generation.capable_fraction": "0.5"}))
    state = prepare_experiment(cfg)
    assert len(state.capable) == 2  # round(0.5 * 4)
    for k, cd in enumerate(state.clients):
        if k in state.capable:
            assert state.plan[k].sum() > 0
        else:
            assert state.plan[k].sum() == 0
            assert len(cd.generated) == 0


def test_prepare_capable_zero_behaves_like_no_budget(tiny_kv):
    cfg = build_config(tiny_kv({"generation.capable_fraction": "0.0"}))
    state = prepare_experiment(cfg)
    assert state.capable == frozenset()
    assert state.plan.sum() == 0


def test_prepare_generated_uids_disjoint_from_private(tiny_kv):
    cfg = build_config(tiny_kv())
    state = prepare_experiment(cfg)
    n_train = len(state.train_pool)
    for cd in state.clients:
        if len(cd.generated):
            assert cd.generated.uids.min() >= n_train
        assert len(cd.active_generated) == len(cd.generated)
    all_gen = combined_generated(state)
    assert len(all_gen) == cfg.generation.total_budget
    assert np.array_equal(all_gen.uids, n_train + np.arange(len(all_gen)))


def test_prepare_partition_shards_cover_training_pool(tiny_kv):
    cfg = build_config(tiny_kv())
    state = prepare_experiment(cfg)
    uids = np.concatenate([cd.private.uids for cd in state.clients])
    assert np.array_equal(np.sort(uids), state.train_pool.uids)


def test_prepare_model_dims_follow_config(tiny_kv):
    cfg = build_config(tiny_kv({"model.hidden_dims": "12,5"}))
    state = prepare_experiment(cfg)
    assert state.server.global_model.layer_shapes == ((8, 12), (12, 5), (5, 4))


def test_prepare_infeasible_partition_raises_stage_error(tiny_kv):
    cfg = build_config(tiny_kv({
        "partition.num_clients": "50",
        "task.train_per_class": "2",
        "partition.beta": "0.05",
    }))
    with pytest.raises(StageError) as err:
        prepare_experiment(cfg)
    assert err.value.stage == "partition"


# ------------------------------------------------------------- import path

def export_then_modify(tmp_path, tiny_kv, mutate):
    cfg = build_config(tiny_kv())
    state = prepare_experiment(cfg)
    pool = combined_generated(state)
    pool = mutate(pool)
    path = tmp_path / "gen.csv"
    save_pool(pool, path)
    return build_config(tiny_kv({"generation.import_path": str(path)})), state


def test_import_reproduces_generated_assignment(tmp_path, tiny_kv):
    cfg2, state1 = export_then_modify(tmp_path, tiny_kv, lambda p: p)
    state2 = prepare_experiment(cfg2)
    for a, b in zip(state1.clients, state2.clients):
        assert np.array_equal(a.generated.features, b.generated.features)
        assert np.array_equal(a.generated.labels, b.generated.labels)
        assert np.array_equal(a.generated.uids, b.generated.uids)


def test_import_with_too_few_rows_fails(tmp_path, tiny_kv):
    cfg2, _ = export_then_modify(tmp_path, tiny_kv, lambda p: p.subset(np.arange(len(p) - 3)))
    with pytest.raises(StageError) as err:
        prepare_experiment(cfg2)
    assert err.value.stage == "generation"


def test_import_surplus_rows_ignored(tmp_path, tiny_kv):
    def double(p):
        import flgen.data as data
        twin = LabeledPool(p.features + 0.5, p.labels, p.domains, p.origins,
                           p.uids + 10_000)
        return data.concat_pools(p, twin)

    cfg2, state1 = export_then_modify(tmp_path, tiny_kv, double)
    state2 = prepare_experiment(cfg2)
    total = sum(len(cd.generated) for cd in state2.clients)
    assert total == cfg2.generation.total_budget
    for a, b in zip(state1.clients, state2.clients):
        assert np.array_equal(a.generated.features, b.generated.features)


def test_import_rejects_private_origin_rows(tmp_path, tiny_kv):
    def poison(p):
        origins = p.origins.copy()
        origins[0] = ORIGIN_PRIVATE
        return LabeledPool(p.features, p.labels, p.domains, origins, p.uids)

    cfg2, _ = export_then_modify(tmp_path, tiny_kv, poison)
    with pytest.raises(StageError, match="generated-origin"):
        prepare_experiment(cfg2)


# ------------------------------------------------------------------ rounds

def test_run_round_record_fields(tiny_kv):
    cfg = build_config(tiny_kv({"attack_every": "2", "rounds": "2"}))
    state = prepare_experiment(cfg)
    r1 = run_round(state, 1)
    r2 = run_round(state, 2)
    assert r1.round == 1 and r2.round == 2
    assert r1.attack_acc is None          # 1 % 2 != 0
    assert r2.attack_acc is not None      # 2 % 2 == 0
    for rec in (r1, r2):
        assert 0.0 <= rec.global_test_acc <= 1.0
        assert 0.0 <= rec.avg_local_global_acc <= 1.0
        assert rec.divergence >= 0.0


def test_attack_disabled_with_zero_interval(tiny_kv):
    cfg = build_config(tiny_kv({"attack_every": "0", "rounds": "2"}))
    result = run_experiment(cfg)
    assert all(r.attack_acc is None for r in result.records)


def test_filtering_starts_at_configured_round(tiny_kv):
    cfg = build_config(tiny_kv({
        "filter.enabled": "true",
        "filter.start_round": "2",
        "filter.keep_percent": "50",
        "rounds": "1",
    }))
    state = prepare_experiment(cfg)
    full = [len(cd.active_generated) for cd in state.clients]
    run_round(state, 1)
    assert [len(cd.active_generated) for cd in state.clients] == full  # untouched
    run_round(state, 2)
    kept = [len(cd.active_generated) for cd in state.clients]
    assert all(k == f // 2 for k, f in zip(kept, full))


def test_scaffold_zero_lr_raises_training_stage_error(tiny_kv):
    cfg = build_config(tiny_kv({"algorithm.kind": "scaffold", "algorithm.lr": "0.0"}))
    state = prepare_experiment(cfg)
    with pytest.raises(StageError) as err:
        run_round(state, 1)
    assert err.value.stage == "training"


def test_single_client_fedavg_global_equals_local(tiny_kv):
    cfg = build_config(tiny_kv({
        "partition.num_clients": "1",
        "strategy": "pri",
        "rounds": "1",
    }))
    result = run_experiment(cfg)
    assert result.records[0].divergence == pytest.approx(0.0)
    # with one client the aggregate is that client's model
    assert result.records[0].mean_pairwise_cosine == 1.0
    assert result.records[0].mean_pairwise_l2 == 0.0


def test_partial_participation_trains_fewer_clients(tiny_kv):
    cfg = build_config(tiny_kv({
        "participation_rate": "0.5",
        "algorithm.kind": "scaffold",
        "rounds": "1",
    }))
    state = prepare_experiment(cfg)
    run_round(state, 1)
    touched = [st.control_variate is not None for st in state.client_states]
    assert sum(touched) == 2  # ceil(0.5 * 4)


def test_rerun_is_bit_identical(tiny_kv):
    cfg = build_config(tiny_kv({"rounds": "3", "attack_every": "3"}))
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    assert a.records == b.records
    assert np.array_equal(a.state.server.global_model.values,
                          b.state.server.global_model.values)


def test_strategy_changes_only_training_data(tiny_kv):
    # same seed: the world, partition, and generated pools agree across
    # strategies; only the training trajectories differ
    runs = {}
    for strategy in ("pri", "mixed"):
        cfg = build_config(tiny_kv({"strategy": strategy, "rounds": "1"}))
        runs[strategy] = run_experiment(cfg)
    a, b = runs["pri"].state, runs["mixed"].state
    assert np.array_equal(a.train_pool.features, b.train_pool.features)
    assert np.array_equal(a.plan, b.plan)
    for ca, cb in zip(a.clients, b.clients):
        assert np.array_equal(ca.generated.features, cb.generated.features)


def test_gen_strategy_without_budget_raises(tiny_kv):
    cfg = build_config(tiny_kv({"strategy": "gen", "generation.total_budget": "0"}))
    state = prepare_experiment(cfg)
    with pytest.raises(StageError) as err:
        run_round(state, 1)
    assert err.value.stage == "training"
