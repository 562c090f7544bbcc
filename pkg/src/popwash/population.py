"""Barrier-synchronous population training loop.

N models alternate a local SGD step with a coordination step.  All
randomness (init, data order, jitter, shuffle plans) comes from keyed
substreams, so a run is a pure function of its config: the same RunConfig
produces bitwise-identical parameters for any worker-thread count, and a
checkpointed run resumes exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import evaluation
from .coordination import (CommLedger, StrategyConfig, apply_shuffle,
                           expected_shuffle_scalars_per_step, papa_all_step, papa_ema_step,
                           sample_shuffle_plan)
from .errors import NumericAbort, ValidationError
from .evaluation import MetricsRecord
from .nn import (Dataset, NetSpec, init_params, load_dataset, loss_and_grad,
                 make_heterogeneous_stream, make_synthetic)
from .optim import OptState, cosine_lr, sgd_step
from .params import PopulationView
from .rng import derive_seed


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"
    seed: int = 0
    classes: int = 4
    dim: int = 20
    n_per_class: int = 1000
    spread: float = 1.0
    n_test_per_class: int = 250
    val_fraction: float = 0.02
    path: str | None = None


@dataclass(frozen=True)
class OptConfig:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_max: float = 0.1
    lr_min: float = 1e-4


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run; all seeds are explicit."""

    net: NetSpec
    data: DataConfig = DataConfig()
    strategy: StrategyConfig = StrategyConfig()
    opt: OptConfig = OptConfig()
    n_models: int = 4
    epochs: int = 10
    batch_size: int = 64
    init_seed: int = 0
    shuffle_seed: int = 0
    hetero: bool = False
    same_init: bool | None = None
    window_start_epoch: float | None = None
    window_end_epoch: float | None = None
    telemetry_every: int = 10
    workers: int = 1

    def validated(self) -> "RunConfig":
        if self.n_models < 1:
            raise ValidationError(f"n_models must be >= 1, got {self.n_models}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.telemetry_every < 1:
            raise ValidationError("telemetry.every must be >= 1")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        self.strategy.normalized()
        if self.strategy.window is not None and self.window_start_epoch is not None:
            raise ValidationError("give the window either in steps or in epochs, not both")
        return self

    @property
    def shares_init(self) -> bool:
        """wash variants start from one shared init unless overridden."""
        if self.same_init is not None:
            return self.same_init
        return self.strategy.kind in ("wash", "wash_opt")


@dataclass
class PopulationState:
    """Mutable training state: parameters plus optimizer state per model."""

    pop: PopulationView
    opt_states: list[OptState]


@dataclass
class RunResult:
    config: RunConfig
    state: PopulationState
    metrics: list[MetricsRecord]
    ledger: CommLedger
    eval_summary: "evaluation.EvalSummary"
    dataset: Dataset
    steps_per_epoch: int
    total_steps: int


def build_dataset(data: DataConfig) -> Dataset:
    if data.kind == "synthetic":
        return make_synthetic(seed=data.seed, classes=data.classes, dim=data.dim,
                              n_per_class=data.n_per_class, spread=data.spread,
                              n_test_per_class=data.n_test_per_class,
                              val_fraction=data.val_fraction)
    if data.kind == "file":
        if not data.path:
            raise ValidationError("data.kind=file requires data.path")
        return load_dataset(data.path)
    raise ValidationError(f"unknown data.kind {data.kind!r}")


def steps_per_epoch_for(dataset: Dataset, batch_size: int) -> int:
    return math.ceil(dataset.n_train / batch_size)


def resolve_window(cfg: RunConfig, steps_per_epoch: int, total_steps: int) -> tuple[int, int]:
    """Active [start, end) step window; epoch bounds convert via steps-per-epoch."""
    if cfg.strategy.window is not None:
        return cfg.strategy.window
    start = 0 if cfg.window_start_epoch is None else int(round(cfg.window_start_epoch * steps_per_epoch))
    end = total_steps if cfg.window_end_epoch is None else int(round(cfg.window_end_epoch * steps_per_epoch))
    if start < 0 or end < start:
        raise ValidationError(f"bad window ({start}, {end}) after epoch conversion")
    return start, end


def init_population(cfg: RunConfig) -> PopulationState:
    models = []
    for n in range(cfg.n_models):
        seed = cfg.init_seed if cfg.shares_init else derive_seed(cfg.init_seed, "model", n)
        models.append(init_params(cfg.net, seed))
    pop = PopulationView(models)
    opt_states = [OptState.for_params(m, mu=cfg.opt.momentum, weight_decay=cfg.opt.weight_decay,
                                      lr_max=cfg.opt.lr_max, lr_min=cfg.opt.lr_min)
                  for m in pop.models]
    return PopulationState(pop=pop, opt_states=opt_states)


@dataclass
class _LoopState:
    population: PopulationState
    ledger: CommLedger
    metrics: list[MetricsRecord]
    next_step: int = 0


def train_population(cfg: RunConfig, checkpoint_path=None, checkpoint_every: int | None = None) -> RunResult:
    """Run Alg-style population training to completion."""
    cfg = cfg.validated()
    state = _LoopState(population=init_population(cfg),
                       ledger=CommLedger(n_models=cfg.n_models), metrics=[])
    return _run_loop(cfg, state, checkpoint_path, checkpoint_every)


def _run_loop(cfg: RunConfig, state: _LoopState, checkpoint_path=None,
              checkpoint_every: int | None = None) -> RunResult:
    dataset = build_dataset(cfg.data)
    strategy = cfg.strategy.normalized()
    steps_per_epoch = steps_per_epoch_for(dataset, cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    window_start, window_end = resolve_window(cfg, steps_per_epoch, total_steps)
    layout = cfg.net.layout()
    d = layout.total_size

    pop = state.population.pop
    opt_states = state.population.opt_states
    momenta = [st.momentum for st in opt_states]
    include_opt = strategy.kind == "wash_opt"
    if strategy.kind in ("wash", "wash_opt"):
        expected_per_step = expected_shuffle_scalars_per_step(layout, strategy)
    else:
        expected_per_step = 0.0

    streams = [None] * cfg.n_models

    def local_step(n: int, t: int, batch_idx: int, lr: float) -> float:
        batch = streams[n][batch_idx]
        loss, grads = loss_and_grad(pop.models[n], batch, cfg.net.activation)
        if not math.isfinite(loss):
            raise NumericAbort(f"non-finite loss {loss!r}", step=t, model=n)
        sgd_step(pop.models[n], grads, opt_states[n], lr, step=t, model=n)
        return loss

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(state.next_step, total_steps):
            lr = cosine_lr(t, total_steps, cfg.opt.lr_max, cfg.opt.lr_min)
            epoch, batch_idx = divmod(t, steps_per_epoch)
            if batch_idx == 0 or streams[0] is None:
                streams = [make_heterogeneous_stream(dataset, n, epoch, cfg.data.seed,
                                                     hetero=cfg.hetero, batch_size=cfg.batch_size)
                           for n in range(cfg.n_models)]
            if pool is not None:
                losses = list(pool.map(lambda n: local_step(n, t, batch_idx, lr),
                                       range(cfg.n_models)))
            else:
                losses = [local_step(n, t, batch_idx, lr) for n in range(cfg.n_models)]

            if window_start <= t < window_end and cfg.n_models > 1:
                if strategy.kind in ("wash", "wash_opt"):
                    plan = sample_shuffle_plan(cfg.shuffle_seed, layout, strategy,
                                               cfg.n_models, t)
                    delta = apply_shuffle(pop, momenta, plan, include_opt=include_opt)
                    state.ledger.record_shuffle(delta, expected_per_step)
                elif strategy.kind == "papa" and (t + 1) % strategy.period == 0:
                    alpha = strategy.alpha
                    if strategy.alpha_follows_lr:
                        alpha = 1.0 - (1.0 - strategy.alpha) * lr / cfg.opt.lr_max
                    papa_ema_step(pop, alpha)
                    state.ledger.record_allreduce(d)
                elif strategy.kind == "papa_all" and (t + 1) % strategy.period == 0:
                    papa_all_step(pop)
                    state.ledger.record_allreduce(d)

            if t % cfg.telemetry_every == 0 or t == total_steps - 1:
                state.metrics.append(evaluation.telemetry_hook(
                    pop, t, lr=lr, mean_loss=float(np.mean(losses)), ledger=state.ledger))

            state.next_step = t + 1
            if (checkpoint_path is not None and checkpoint_every
                    and state.next_step % checkpoint_every == 0
                    and state.next_step < total_steps):
                save_checkpoint(checkpoint_path, cfg, state)
    finally:
        if pool is not None:
            pool.shutdown()

    summary = evaluation.evaluate_population(pop, dataset, activation=cfg.net.activation)
    return RunResult(config=cfg, state=state.population, metrics=state.metrics,
                     ledger=state.ledger, eval_summary=summary, dataset=dataset,
                     steps_per_epoch=steps_per_epoch, total_steps=total_steps)


# --- config (de)serialization -------------------------------------------------

_SECTION_KEYS = {
    "net": ("dims", "activation"),
    "data": ("kind", "seed", "classes", "dim", "n_per_class", "spread",
             "n_test_per_class", "val_fraction", "path"),
    "train": ("epochs", "batch"),
    "opt": ("momentum", "weight_decay", "lr_max", "lr_min"),
    "strategy": ("kind", "p", "schedule", "alpha", "period", "window_start_epoch",
                 "window_end_epoch", "alpha_follows_lr"),
    "run": ("n_models", "init_seed", "shuffle_seed", "hetero", "same_init", "workers"),
    "telemetry": ("every",),
}


def run_config_to_dict(cfg: RunConfig) -> dict:
    return {
        "net": {"dims": list(cfg.net.layer_dims), "activation": cfg.net.activation},
        "data": {k: getattr(cfg.data, k) for k in _SECTION_KEYS["data"]},
        "train": {"epochs": cfg.epochs, "batch": cfg.batch_size},
        "opt": {k: getattr(cfg.opt, k) for k in _SECTION_KEYS["opt"]},
        "strategy": {
            "kind": cfg.strategy.kind, "p": cfg.strategy.p, "schedule": cfg.strategy.schedule,
            "alpha": cfg.strategy.alpha, "period": cfg.strategy.period,
            "window_start_epoch": cfg.window_start_epoch,
            "window_end_epoch": cfg.window_end_epoch,
            "alpha_follows_lr": cfg.strategy.alpha_follows_lr,
        },
        "run": {"n_models": cfg.n_models, "init_seed": cfg.init_seed,
                "shuffle_seed": cfg.shuffle_seed, "hetero": cfg.hetero,
                "same_init": cfg.same_init, "workers": cfg.workers},
        "telemetry": {"every": cfg.telemetry_every},
    }


def run_config_from_dict(raw: dict) -> RunConfig:
    """Parse the documented config mapping; unknown keys are rejected."""
    if not isinstance(raw, dict):
        raise ValidationError("config must be a mapping of sections")
    for section, content in raw.items():
        if section not in _SECTION_KEYS:
            raise ValidationError(f"unknown config section {section!r}")
        if not isinstance(content, dict):
            raise ValidationError(f"config section {section!r} must be a mapping")
        for key in content:
            if key not in _SECTION_KEYS[section]:
                raise ValidationError(f"unknown config key {section}.{key}")

    net_raw = raw.get("net", {})
    if "dims" not in net_raw:
        raise ValidationError("net.dims is required")
    net = NetSpec(layer_dims=tuple(int(v) for v in net_raw["dims"]),
                  activation=net_raw.get("activation", "relu"))

    data_raw = dict(raw.get("data", {}))
    data = DataConfig(**data_raw)

    opt_raw = dict(raw.get("opt", {}))
    opt = OptConfig(**opt_raw)

    strat_raw = dict(raw.get("strategy", {}))
    window_start = strat_raw.pop("window_start_epoch", None)
    window_end = strat_raw.pop("window_end_epoch", None)
    strategy = StrategyConfig(**strat_raw)

    train_raw = raw.get("train", {})
    run_raw = raw.get("run", {})
    tele_raw = raw.get("telemetry", {})
    cfg = RunConfig(net=net, data=data, strategy=strategy, opt=opt,
                    n_models=int(run_raw.get("n_models", 4)),
                    epochs=int(train_raw.get("epochs", 10)),
                    batch_size=int(train_raw.get("batch", 64)),
                    init_seed=int(run_raw.get("init_seed", 0)),
                    shuffle_seed=int(run_raw.get("shuffle_seed", 0)),
                    hetero=bool(run_raw.get("hetero", False)),
                    same_init=run_raw.get("same_init"),
                    window_start_epoch=window_start, window_end_epoch=window_end,
                    telemetry_every=int(tele_raw.get("every", 10)),
                    workers=int(run_raw.get("workers", 1)))
    return cfg.validated()


def config_hash(cfg: RunConfig) -> str:
    text = json.dumps(run_config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# --- checkpointing ------------------------------------------------------------

def save_checkpoint(path, cfg: RunConfig, state: _LoopState) -> None:
    """NPZ snapshot: config + step + parameters, momenta, ledger, metrics."""
    arrays = {
        "config_json": np.array(json.dumps(run_config_to_dict(cfg), sort_keys=True)),
        "config_hash": np.array(config_hash(cfg)),
        "next_step": np.array(state.next_step, dtype=np.int64),
        "ledger_nominal": state.ledger.nominal,
        "ledger_effective": state.ledger.effective,
        "ledger_expected": np.array(state.ledger.expected),
        "metrics_steps": np.array([m.step for m in state.metrics], dtype=np.int64),
        "metrics_values": np.array([[m.lr, m.mean_loss, m.avg_consensus_dist, m.sum_sq_dist,
                                     m.comm_scalars_cum, m.comm_scalars_effective_cum]
                                    for m in state.metrics], dtype=np.float64).reshape(-1, 6),
    }
    for n, model in enumerate(state.population.pop.models):
        for k, tensor in enumerate(model.layers):
            arrays[f"params_{n}_{k}"] = tensor
        for k, tensor in enumerate(state.population.opt_states[n].momentum.layers):
            arrays[f"momentum_{n}_{k}"] = tensor
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[RunConfig, _LoopState]:
    with np.load(path, allow_pickle=False) as data:
        cfg = run_config_from_dict(json.loads(str(data["config_json"])))
        if str(data["config_hash"]) != config_hash(cfg):
            raise ValidationError("checkpoint config hash mismatch")
        population = init_population(cfg)
        n_layers = len(population.pop.models[0].layers)
        for n in range(cfg.n_models):
            for k in range(n_layers):
                population.pop.models[n].layers[k][...] = data[f"params_{n}_{k}"]
                population.opt_states[n].momentum.layers[k][...] = data[f"momentum_{n}_{k}"]
        ledger = CommLedger(n_models=cfg.n_models,
                            nominal=np.array(data["ledger_nominal"]),
                            effective=np.array(data["ledger_effective"]),
                            expected=float(data["ledger_expected"]))
        metrics = [MetricsRecord(step=int(s), lr=float(v[0]), mean_loss=float(v[1]),
                                 avg_consensus_dist=float(v[2]), sum_sq_dist=float(v[3]),
                                 comm_scalars_cum=float(v[4]),
                                 comm_scalars_effective_cum=float(v[5]))
                   for s, v in zip(data["metrics_steps"], data["metrics_values"])]
        state = _LoopState(population=population, ledger=ledger, metrics=metrics,
                           next_step=int(data["next_step"]))
    return cfg, state


def resume(checkpoint_path, checkpoint_every: int | None = None) -> RunResult:
    """Continue a checkpointed run; reproduces the uninterrupted run bitwise."""
    cfg, state = load_checkpoint(checkpoint_path)
    return _run_loop(cfg, state, checkpoint_path, checkpoint_every)
