"""Flat ``key = value`` experiment configuration.

One schema drives parsing, validation, defaults, and serialization, so a
resolved config written next to a run's outputs parses back to the same
experiment. Lines starting with ``#`` and blank lines are ignored; unknown
keys and ill-typed values are rejected with the offending key and line.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from flgen.algorithms import ALGORITHM_KINDS, AlgorithmConfig
from flgen.data import PARTITION_MODES
from flgen.generation import ALLOCATIONS, GUIDANCE_MODES, PROFILE_WIDTHS

STRATEGIES = ("pri", "gen", "p2g", "g2p", "mixed")


class ConfigError(Exception):
    """Invalid configuration input; the CLI reports these with exit code 1."""


def _int(lo: int | None = None, hi: int | None = None) -> Callable[[str], int]:
    def cast(raw: str) -> int:
        try:
            v = int(raw)
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}") from None
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}, got {v}")
        return v
    return cast


def _float(
    lo: float | None = None,
    hi: float | None = None,
    lo_open: bool = False,
    hi_open: bool = False,
) -> Callable[[str], float]:
    def cast(raw: str) -> float:
        try:
            v = float(raw)
        except ValueError:
            raise ValueError(f"expected a number, got {raw!r}") from None
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}, got {v}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise ValueError(f"must be {'<' if hi_open else '<='} {hi}, got {v}")
        return v
    return cast


def _bool(raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ValueError(f"expected true or false, got {raw!r}")


def _enum(options: tuple[str, ...]) -> Callable[[str], str]:
    def cast(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {raw!r}")
        return raw
    return cast


def _int_list(raw: str) -> tuple[int, ...]:
    if raw == "":
        return ()
    try:
        vals = tuple(int(x.strip()) for x in raw.split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {raw!r}") from None
    if any(v < 1 for v in vals):
        raise ValueError("layer widths must be >= 1")
    return vals


def _str(raw: str) -> str:
    return raw


# key -> (cast, default-as-string)
SCHEMA: dict[str, tuple[Callable[[str], object], str]] = {
    "seed": (_int(lo=0), "0"),
    "rounds": (_int(lo=1), "100"),
    "participation_rate": (_float(lo=0.0, hi=1.0, lo_open=True), "1.0"),
    "strategy": (_enum(STRATEGIES), "mixed"),
    "attack_every": (_int(lo=0), "10"),
    "model.hidden_dims": (_int_list, "64,64"),
    "task.num_classes": (_int(lo=2), "10"),
    "task.feature_dim": (_int(lo=1), "20"),
    "task.num_domains": (_int(lo=1), "1"),
    "task.sigma_w": (_float(lo=0.0, lo_open=True), "1.0"),
    "task.mean_scale": (_float(lo=0.0), "3.0"),
    "task.domain_scale": (_float(lo=0.0), "1.0"),
    "task.train_per_class": (_int(lo=0), "200"),
    "task.test_per_class": (_int(lo=1), "50"),
    "task.generator_gap": (_float(lo=0.0), "0.0"),
    "task.generator_diversity": (_float(lo=0.0), "1.0"),
    "partition.num_clients": (_int(lo=1), "10"),
    "partition.beta": (_float(lo=0.0, lo_open=True), "0.5"),
    "partition.mode": (_enum(PARTITION_MODES), "label"),
    "partition.clients_per_domain": (_int(lo=1), "1"),
    "generation.total_budget": (_int(lo=0), "0"),
    "generation.allocation": (_enum(ALLOCATIONS), "equal"),
    "generation.guidance": (_enum(GUIDANCE_MODES), "mixed"),
    "generation.diversity_profile": (_enum(tuple(PROFILE_WIDTHS)), "multiple"),
    "generation.real_guidance_noise": (_float(lo=0.0), "0.5"),
    "generation.capable_fraction": (_float(lo=0.0, hi=1.0), "1.0"),
    "generation.import_path": (_str, ""),
    "algorithm.kind": (_enum(ALGORITHM_KINDS), "fedavg"),
    "algorithm.local_iters": (_int(lo=1), "200"),
    "algorithm.batch_size": (_int(lo=1), "64"),
    "algorithm.lr": (_float(lo=0.0), "0.01"),
    "algorithm.mu": (_float(lo=0.0), "0.01"),
    "algorithm.server_momentum": (_float(lo=0.0, hi=1.0, hi_open=True), "0.9"),
    "algorithm.tau": (_float(lo=0.0, lo_open=True), "0.5"),
    "algorithm.moon_weight": (_float(lo=0.0), "1.0"),
    "algorithm.decorr_weight": (_float(lo=0.0), "0.1"),
    "filter.enabled": (_bool, "false"),
    "filter.start_round": (_int(lo=1), "1"),
    "filter.keep_percent": (_float(lo=0.0, hi=100.0, lo_open=True), "90.0"),
    "filter.category_wise": (_bool, "false"),
    "attack.known_fraction": (_float(lo=0.0, hi=1.0, lo_open=True, hi_open=True), "0.3"),
    "attack.eval_members": (_int(lo=1), "200"),
    "attack.eval_nonmembers": (_int(lo=1), "200"),
    "metrics.projection_dim": (_int(lo=1), "16"),
    "metrics.identity_projection": (_bool, "false"),
}


@dataclass(frozen=True)
class TaskParams:
    num_classes: int
    feature_dim: int
    num_domains: int
    sigma_w: float
    mean_scale: float
    domain_scale: float
    train_per_class: int
    test_per_class: int
    generator_gap: float
    generator_diversity: float


@dataclass(frozen=True)
class PartitionParams:
    num_clients: int
    beta: float
    mode: str
    clients_per_domain: int


@dataclass(frozen=True)
class GenerationParams:
    total_budget: int
    allocation: str
    guidance: str
    diversity_profile: str
    real_guidance_noise: float
    capable_fraction: float
    import_path: str


@dataclass(frozen=True)
class FilterParams:
    start_round: int
    keep_percent: float
    category_wise: bool


@dataclass(frozen=True)
class AttackParams:
    known_fraction: float
    eval_members: int
    eval_nonmembers: int


@dataclass(frozen=True)
class MetricsParams:
    projection_dim: int
    identity_projection: bool


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    rounds: int
    participation_rate: float
    strategy: str
    attack_every: int
    hidden_dims: tuple[int, ...]
    task: TaskParams
    partition: PartitionParams
    generation: GenerationParams
    algorithm: AlgorithmConfig
    filter: FilterParams | None
    attack: AttackParams
    metrics: MetricsParams


def read_kv(path) -> dict[str, tuple[str, int]]:
    """Raw key -> (value, line number) pairs from a flat config file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_kv_text(text, str(path))


def parse_kv_text(text: str, source: str) -> dict[str, tuple[str, int]]:
    out: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}: line {lineno}: missing key")
        if key in out:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


def build_config(kv: dict[str, str] | dict[str, tuple[str, int]]) -> ExperimentConfig:
    """Typed config from raw key/value strings, schema defaults filling gaps."""
    pairs: dict[str, tuple[str, int | None]] = {}
    for key, val in kv.items():
        if isinstance(val, tuple):
            pairs[key] = (val[0], val[1])
        else:
            pairs[key] = (val, None)
    for key, (_, line) in pairs.items():
        if key not in SCHEMA:
            where = f" (line {line})" if line is not None else ""
            raise ConfigError(f"unknown config key {key!r}{where}")

    typed: dict[str, object] = {}
    for key, (cast, default) in SCHEMA.items():
        raw, line = pairs.get(key, (default, None))
        try:
            typed[key] = cast(raw)
        except ValueError as exc:
            where = f" (line {line})" if line is not None else ""
            raise ConfigError(f"config key {key!r}{where}: {exc}") from None

    try:
        algorithm = AlgorithmConfig(
            kind=typed["algorithm.kind"],
            local_iters=typed["algorithm.local_iters"],
            batch_size=typed["algorithm.batch_size"],
            lr=typed["algorithm.lr"],
            mu=typed["algorithm.mu"],
            server_momentum=typed["algorithm.server_momentum"],
            tau=typed["algorithm.tau"],
            moon_weight=typed["algorithm.moon_weight"],
            decorr_weight=typed["algorithm.decorr_weight"],
        )
    except ValueError as exc:
        raise ConfigError(f"algorithm configuration: {exc}") from None

    filt = None
    if typed["filter.enabled"]:
        filt = FilterParams(
            start_round=typed["filter.start_round"],
            keep_percent=typed["filter.keep_percent"],
            category_wise=typed["filter.category_wise"],
        )

    return ExperimentConfig(
        seed=typed["seed"],
        rounds=typed["rounds"],
        participation_rate=typed["participation_rate"],
        strategy=typed["strategy"],
        attack_every=typed["attack_every"],
        hidden_dims=typed["model.hidden_dims"],
        task=TaskParams(
            num_classes=typed["task.num_classes"],
            feature_dim=typed["task.feature_dim"],
            num_domains=typed["task.num_domains"],
            sigma_w=typed["task.sigma_w"],
            mean_scale=typed["task.mean_scale"],
            domain_scale=typed["task.domain_scale"],
            train_per_class=typed["task.train_per_class"],
            test_per_class=typed["task.test_per_class"],
            generator_gap=typed["task.generator_gap"],
            generator_diversity=typed["task.generator_diversity"],
        ),
        partition=PartitionParams(
            num_clients=typed["partition.num_clients"],
            beta=typed["partition.beta"],
            mode=typed["partition.mode"],
            clients_per_domain=typed["partition.clients_per_domain"],
        ),
        generation=GenerationParams(
            total_budget=typed["generation.total_budget"],
            allocation=typed["generation.allocation"],
            guidance=typed["generation.guidance"],
            diversity_profile=typed["generation.diversity_profile"],
            real_guidance_noise=typed["generation.real_guidance_noise"],
            capable_fraction=typed["generation.capable_fraction"],
            import_path=typed["generation.import_path"],
        ),
        algorithm=algorithm,
        filter=filt,
        attack=AttackParams(
            known_fraction=typed["attack.known_fraction"],
            eval_members=typed["attack.eval_members"],
            eval_nonmembers=typed["attack.eval_nonmembers"],
        ),
        metrics=MetricsParams(
            projection_dim=typed["metrics.projection_dim"],
            identity_projection=typed["metrics.identity_projection"],
        ),
    )


def parse_config(path) -> ExperimentConfig:
    return build_config(read_kv(path))


def _fmt(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def config_kv(cfg: ExperimentConfig) -> dict[str, str]:
    """The config as canonical key/value strings, every schema key present."""
    filt = cfg.filter
    return {
        "seed": _fmt(cfg.seed),
        "rounds": _fmt(cfg.rounds),
        "participation_rate": _fmt(cfg.participation_rate),
        "strategy": cfg.strategy,
        "attack_every": _fmt(cfg.attack_every),
        "model.hidden_dims": _fmt(cfg.hidden_dims),
        "task.num_classes": _fmt(cfg.task.num_classes),
        "task.feature_dim": _fmt(cfg.task.feature_dim),
        "task.num_domains": _fmt(cfg.task.num_domains),
        "task.sigma_w": _fmt(cfg.task.sigma_w),
        "task.mean_scale": _fmt(cfg.task.mean_scale),
        "task.domain_scale": _fmt(cfg.task.domain_scale),
        "task.train_per_class": _fmt(cfg.task.train_per_class),
        "task.test_per_class": _fmt(cfg.task.test_per_class),
        "task.generator_gap": _fmt(cfg.task.generator_gap),
        "task.generator_diversity": _fmt(cfg.task.generator_diversity),
        "partition.num_clients": _fmt(cfg.partition.num_clients),
        "partition.beta": _fmt(cfg.partition.beta),
        "partition.mode": cfg.partition.mode,
        "partition.clients_per_domain": _fmt(cfg.partition.clients_per_domain),
        "generation.total_budget": _fmt(cfg.generation.total_budget),
        "generation.allocation": cfg.generation.allocation,
        "generation.guidance": cfg.generation.guidance,
        "generation.diversity_profile": cfg.generation.diversity_profile,
        "generation.real_guidance_noise": _fmt(cfg.generation.real_guidance_noise),
        "generation.capable_fraction": _fmt(cfg.generation.capable_fraction),
        "generation.import_path": cfg.generation.import_path,
        "algorithm.kind": cfg.algorithm.kind,
        "algorithm.local_iters": _fmt(cfg.algorithm.local_iters),
        "algorithm.batch_size": _fmt(cfg.algorithm.batch_size),
        "algorithm.lr": _fmt(cfg.algorithm.lr),
        "algorithm.mu": _fmt(cfg.algorithm.mu),
        "algorithm.server_momentum": _fmt(cfg.algorithm.server_momentum),
        "algorithm.tau": _fmt(cfg.algorithm.tau),
        "algorithm.moon_weight": _fmt(cfg.algorithm.moon_weight),
        "algorithm.decorr_weight": _fmt(cfg.algorithm.decorr_weight),
        "filter.enabled": _fmt(filt is not None),
        "filter.start_round": _fmt(filt.start_round if filt else int(SCHEMA["filter.start_round"][1])),
        "filter.keep_percent": _fmt(filt.keep_percent if filt else float(SCHEMA["filter.keep_percent"][1])),
        "filter.category_wise": _fmt(filt.category_wise if filt else False),
        "attack.known_fraction": _fmt(cfg.attack.known_fraction),
        "attack.eval_members": _fmt(cfg.attack.eval_members),
        "attack.eval_nonmembers": _fmt(cfg.attack.eval_nonmembers),
        "metrics.projection_dim": _fmt(cfg.metrics.projection_dim),
        "metrics.identity_projection": _fmt(cfg.metrics.identity_projection),
    }


def serialize_config(cfg: ExperimentConfig) -> str:
    kv = config_kv(cfg)
    lines = [f"{key} = {kv[key]}" for key in SCHEMA]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SweepSpec:
    """A sweep file names a base config, one axis key, its values, and how
    many seeds (repeats) to run per value. Run r uses seed base_seed + r."""

    base_path: Path
    axis: str
    values: tuple[str, ...]
    repeats: int


def parse_sweep(path) -> SweepSpec:
    kv = read_kv(path)
    allowed = {"base", "axis", "values", "repeats"}
    for key, (_, line) in kv.items():
        if key not in allowed:
            raise ConfigError(f"{path}: line {line}: unknown sweep key {key!r}")
    for required in ("base", "axis", "values"):
        if required not in kv:
            raise ConfigError(f"{path}: missing sweep key {required!r}")
    axis = kv["axis"][0]
    if axis not in SCHEMA:
        raise ConfigError(f"{path}: sweep axis {axis!r} is not a config key")
    values = tuple(v.strip() for v in kv["values"][0].split(",") if v.strip())
    if not values:
        raise ConfigError(f"{path}: sweep values are empty")
    repeats_raw = kv.get("repeats", ("1", None))[0]
    try:
        repeats = _int(lo=1)(repeats_raw)
    except ValueError as exc:
        raise ConfigError(f"{path}: sweep key 'repeats': {exc}") from None
    base = Path(kv["base"][0])
    if not base.is_absolute():
        base = Path(path).parent / base
    return SweepSpec(base_path=base, axis=axis, values=values, repeats=repeats)


def sweep_runs(spec: SweepSpec) -> list[tuple[str, int, ExperimentConfig]]:
    """(axis value, seed, config) per run, values outermost, repeats inner."""
    base_kv = read_kv(spec.base_path)
    plain = {k: v[0] for k, v in base_kv.items()}
    base_seed = int(plain.get("seed", SCHEMA["seed"][1]))
    runs = []
    for value in spec.values:
        for r in range(spec.repeats):
            kv = dict(plain)
            kv[spec.axis] = value
            if spec.axis != "seed":
                kv["seed"] = str(base_seed + r)
            cfg = build_config(kv)
            runs.append((value, cfg.seed, cfg))
    return runs
