"""Coordination strategies applied between training steps.

Five strategies are supported:

* ``none`` - models train independently.
* ``wash`` - per step, each coordinate is independently selected with a
  depth-dependent probability and the selected coordinate's values are
  permuted across the population by a fresh uniform permutation.  One
  Bernoulli draw per coordinate (shared by all models) keeps the
  per-coordinate value multiset intact, which is what preserves the
  squared consensus distance exactly.
* ``wash_opt`` - wash that also permutes the momentum buffers at the
  selected coordinates with the same permutations (doubles traffic).
* ``papa`` - every ``period`` steps each model is pulled toward the
  consensus: theta <- alpha*theta + (1-alpha)*mean.
* ``papa_all`` - every ``period`` steps every model is replaced by the
  consensus mean.

The module also owns communication-volume accounting: a nominal counter
(every selected coordinate costs one scalar per model, fixed points
included), an effective counter that skips permutation fixed points, and
the running expectation both are compared against.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .params import LayeredParams, ParamLayout, PopulationView, consensus_mean
from .rng import substream

STRATEGY_KINDS = ("none", "wash", "wash_opt", "papa", "papa_all")
SCHEDULES = ("decreasing", "constant", "increasing")

DEFAULT_PAPA_ALPHA = 0.99
DEFAULT_PAPA_PERIOD = 10

# Selection switches from per-coordinate Bernoulli draws to a binomial
# count + distinct-index sample above this expected count (speed only;
# the two paths are distributionally, not bitwise, identical).
BLOCKWISE_THRESHOLD = 10_000


@dataclass(frozen=True)
class StrategyConfig:
    """Tagged choice of coordination strategy plus its hyperparameters.

    ``window`` is a half-open step interval [start, end) during which the
    strategy is active; ``None`` means the whole run.  ``alpha_follows_lr``
    enables the optional mode where PAPA's retention drifts toward 1 as
    the learning rate decays: alpha(t) = 1 - (1-alpha)*lr/lr_max.
    """

    kind: str = "none"
    p: float | None = None
    schedule: str = "decreasing"
    alpha: float | None = None
    period: int | None = None
    window: tuple[int, int] | None = None
    alpha_follows_lr: bool = False

    def normalized(self) -> "StrategyConfig":
        """Validate and fill strategy-specific defaults."""
        if self.kind not in STRATEGY_KINDS:
            raise ValidationError(f"unknown strategy kind {self.kind!r}")
        out = self
        if self.kind in ("wash", "wash_opt"):
            if self.p is None:
                raise ValidationError(f"{self.kind} requires a base probability p")
            if not 0.0 <= self.p <= 1.0:
                raise ValidationError(f"p must lie in [0, 1], got {self.p}")
            if self.schedule not in SCHEDULES:
                raise ValidationError(f"unknown schedule {self.schedule!r}")
        elif self.kind == "papa":
            if out.alpha is None:
                out = replace(out, alpha=DEFAULT_PAPA_ALPHA)
            if out.period is None:
                out = replace(out, period=DEFAULT_PAPA_PERIOD)
            if not 0.0 < out.alpha < 1.0:
                raise ValidationError(f"alpha must lie in (0, 1), got {out.alpha}")
            if out.period < 1:
                raise ValidationError(f"period must be >= 1, got {out.period}")
        elif self.kind == "papa_all":
            if out.period is None:
                raise ValidationError("papa_all requires an explicit period")
            if out.period < 1:
                raise ValidationError(f"period must be >= 1, got {out.period}")
        if out.window is not None:
            start, end = out.window
            if start < 0 or end < start:
                raise ValidationError(f"window must satisfy 0 <= start <= end, got {out.window}")
        return out


def layer_probability(l: int, num_layers: int, p: float, schedule: str = "decreasing") -> float:
    """Shuffle probability for depth l of an L-layer net.

    decreasing: p*(1 - l/(L-1)), so the first layer shuffles at p and the
    final layer never does; constant: p everywhere; increasing: the
    mirror image, 0 at the first layer up to p at the last.
    """
    if schedule not in SCHEDULES:
        raise ValidationError(f"unknown schedule {schedule!r}")
    if num_layers < 1 or not 0 <= l < num_layers:
        raise ValidationError(f"need 0 <= l < L, got l={l}, L={num_layers}")
    if num_layers == 1:
        if schedule != "constant":
            raise ValidationError("depth-dependent schedules need at least 2 layers")
        return p
    if schedule == "constant":
        return p
    frac = l / (num_layers - 1)
    return p * (1.0 - frac) if schedule == "decreasing" else p * frac


@dataclass
class ShufflePlan:
    """One step's sampled (coordinate, permutation) pairs.

    ``coords`` are strictly increasing global flat indices; ``perms`` has
    one permutation row per selected coordinate.  Applying the plan moves
    value theta[perm[n]] into slot n at each selected coordinate.
    """

    step: int
    n_models: int
    coords: np.ndarray
    perms: np.ndarray

    @property
    def num_selected(self) -> int:
        return len(self.coords)

    @property
    def scalars_per_model(self) -> int:
        """Nominal send count per model (one scalar per selected coordinate)."""
        return self.num_selected

    def validate(self):
        if len(self.coords) != len(self.perms):
            raise ValidationError("coords and perms must have equal length")
        if self.num_selected:
            if np.any(np.diff(self.coords) <= 0):
                raise ValidationError("plan coordinates must be strictly increasing")
            ident = np.arange(self.n_models)
            if not np.all(np.sort(self.perms, axis=1) == ident):
                raise ValidationError("every perm row must be a permutation of 0..N-1")


def sample_shuffle_plan(shuffle_seed: int, layout: ParamLayout, cfg: StrategyConfig,
                        n_models: int, step: int) -> ShufflePlan:
    """Sample the shuffle plan for one step.

    Draws come from substreams keyed (shuffle_seed, "plan", step, tensor),
    so the plan depends only on the seed and the step, never on worker
    scheduling.  Per tensor: one Bernoulli per coordinate at the depth's
    probability (binomial shortcut above BLOCKWISE_THRESHOLD expected
    hits), then one independent uniform permutation per selected
    coordinate.
    """
    cfg = cfg.normalized()
    if cfg.kind not in ("wash", "wash_opt"):
        raise ValidationError(f"shuffle plans only exist for wash strategies, not {cfg.kind!r}")
    num_depths = layout.num_depths
    coord_chunks, perm_chunks = [], []
    for k, (size, offset, depth) in enumerate(zip(layout.sizes, layout.offsets, layout.depths)):
        p_l = layer_probability(depth, num_depths, cfg.p, cfg.schedule)
        if p_l <= 0.0 or size == 0:
            continue
        rng = substream(shuffle_seed, "plan", step, k)
        if p_l * size > BLOCKWISE_THRESHOLD:
            count = int(rng.binomial(size, p_l))
            selected = np.sort(rng.choice(size, size=count, replace=False))
        else:
            selected = np.flatnonzero(rng.random(size) < p_l)
        if len(selected) == 0:
            continue
        perms = rng.permuted(np.tile(np.arange(n_models), (len(selected), 1)), axis=1)
        coord_chunks.append(offset + selected.astype(np.int64))
        perm_chunks.append(perms)
    if coord_chunks:
        coords = np.concatenate(coord_chunks)
        perms = np.concatenate(perm_chunks)
    else:
        coords = np.empty(0, dtype=np.int64)
        perms = np.empty((0, n_models), dtype=np.int64)
    return ShufflePlan(step=step, n_models=n_models, coords=coords, perms=perms)


@dataclass
class CommDelta:
    """Accounting for one coordination event, per model."""

    nominal: np.ndarray
    effective: np.ndarray


def apply_shuffle(pop: PopulationView, opt_momenta: list[LayeredParams] | None,
                  plan: ShufflePlan, include_opt: bool = False) -> CommDelta:
    """Permute parameter values across models at the plan's coordinates.

    Mutates the population in place (and the momentum buffers with the
    same permutations when ``include_opt``).  Per selected coordinate the
    multiset of values over models is preserved.  Returns the traffic
    delta: nominally one scalar per selected coordinate per model (two
    with optimizer state), effectively skipping permutation fixed points.
    """
    n = pop.n_models
    if plan.n_models != n:
        raise ValidationError(f"plan built for {plan.n_models} models, population has {n}")
    if include_opt and opt_momenta is None:
        raise ValidationError("include_opt requires momentum buffers")
    factor = 2 if include_opt else 1
    ident = np.arange(n)
    if plan.num_selected == 0:
        zero = np.zeros(n)
        return CommDelta(nominal=zero, effective=zero.copy())

    d = pop.models[0].total_size
    if plan.coords[-1] >= d:
        raise ValidationError(f"plan coordinate {plan.coords[-1]} out of range for d={d}")

    sizes = [t.size for t in pop.models[0].layers]
    boundaries = np.cumsum([0] + sizes)
    target_groups = [pop.models, opt_momenta] if include_opt else [pop.models]
    for k in range(len(sizes)):
        a, b = np.searchsorted(plan.coords, (boundaries[k], boundaries[k + 1]))
        if a == b:
            continue
        local = plan.coords[a:b] - boundaries[k]
        perm_block = plan.perms[a:b]
        col = np.arange(b - a)
        for models in target_groups:
            flats = []
            for m in models:
                t = m.layers[k]
                assert t.flags.c_contiguous
                flats.append(t.reshape(-1))
            values = np.stack([f[local] for f in flats])
            shuffled = values[perm_block.T, col]
            for f, row in zip(flats, shuffled):
                f[local] = row

    nominal = np.full(n, float(plan.num_selected * factor))
    effective = np.sum(plan.perms != ident, axis=0).astype(np.float64) * factor
    return CommDelta(nominal=nominal, effective=effective)


def papa_ema_step(pop: PopulationView, alpha: float) -> None:
    """Pull every model toward the consensus: theta <- alpha*theta + (1-alpha)*mean.

    Leaves the consensus mean unchanged and contracts the squared
    consensus distance by exactly alpha**2.
    """
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    mean = consensus_mean(pop)
    for m in pop.models:
        for t, mt in zip(m.layers, mean.layers):
            t *= alpha
            t += (1.0 - alpha) * mt


def papa_all_step(pop: PopulationView) -> None:
    """Replace every model by the consensus mean (distance drops to zero)."""
    mean = consensus_mean(pop)
    for m in pop.models:
        for t, mt in zip(m.layers, mean.layers):
            t[...] = mt


@dataclass
class CommCost:
    """Idealized per-step, per-model traffic as a fraction of d."""

    fraction: float
    ratio_vs_papa: float


def expected_comm_fraction(cfg: StrategyConfig, n_models: int | None = None,
                           papa_period: int = DEFAULT_PAPA_PERIOD) -> CommCost:
    """Nominal communication cost of a strategy.

    Per step each model ships: nothing (none); p*d scalars under a
    constant schedule, halved to p/2*d by the depth-linear schedules
    (wash); twice that (wash_opt); or its full vector every ``period``
    steps, i.e. d/period (papa and papa_all).  The ratio compares against
    a PAPA reference with period ``papa_period``.
    """
    cfg = cfg.normalized()
    if cfg.kind == "none":
        fraction = 0.0
    elif cfg.kind in ("wash", "wash_opt"):
        factor = 1.0 if cfg.schedule == "constant" else 0.5
        fraction = cfg.p * factor * (2.0 if cfg.kind == "wash_opt" else 1.0)
    else:
        fraction = 1.0 / cfg.period
    return CommCost(fraction=fraction, ratio_vs_papa=fraction * papa_period)


def expected_shuffle_scalars_per_step(layout: ParamLayout, cfg: StrategyConfig) -> float:
    """Exact expected scalars per model per in-window step for this layout."""
    cfg = cfg.normalized()
    if cfg.kind not in ("wash", "wash_opt"):
        raise ValidationError("expectation defined for wash strategies only")
    num_depths = layout.num_depths
    expected = sum(layer_probability(depth, num_depths, cfg.p, cfg.schedule) * size
                   for size, depth in zip(layout.sizes, layout.depths))
    return expected * (2.0 if cfg.kind == "wash_opt" else 1.0)


@dataclass
class CommLedger:
    """Cumulative per-model communication counters for one run.

    ``nominal`` counts every selected coordinate (fixed points included);
    ``effective`` counts only values that actually moved; ``expected``
    accumulates the analytic expectation of the nominal counter.
    """

    n_models: int
    nominal: np.ndarray = field(default=None)
    effective: np.ndarray = field(default=None)
    expected: float = 0.0

    def __post_init__(self):
        if self.nominal is None:
            self.nominal = np.zeros(self.n_models)
        if self.effective is None:
            self.effective = np.zeros(self.n_models)

    def record_shuffle(self, delta: CommDelta, expected_per_model: float):
        if np.any(delta.nominal < 0) or np.any(delta.effective < 0):
            raise ValidationError("communication deltas must be non-negative")
        self.nominal += delta.nominal
        self.effective += delta.effective
        self.expected += expected_per_model

    def record_allreduce(self, d: int):
        """papa / papa_all application: every model ships its full vector."""
        self.nominal += float(d)
        self.effective += float(d)
        self.expected += float(d)

    @property
    def nominal_mean(self) -> float:
        return float(self.nominal.mean())

    @property
    def effective_mean(self) -> float:
        return float(self.effective.mean())

    def as_dict(self) -> dict:
        return {
            "n_models": self.n_models,
            "scalars_nominal_per_model": [float(v) for v in self.nominal],
            "scalars_effective_per_model": [float(v) for v in self.effective],
            "expected_nominal_per_model": self.expected,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CommLedger":
        return cls(n_models=int(data["n_models"]),
                   nominal=np.asarray(data["scalars_nominal_per_model"], dtype=np.float64),
                   effective=np.asarray(data["scalars_effective_per_model"], dtype=np.float64),
                   expected=float(data["expected_nominal_per_model"]))


def serialize_plan(plan: ShufflePlan, layout: ParamLayout) -> str:
    """Debug text form: one record `step layer coord perm[0..N-1]` per line."""
    lines = []
    for coord, perm in zip(plan.coords, plan.perms):
        depth = layout.depth_of_coord(int(coord))
        lines.append(f"{plan.step} {depth} {int(coord)} " + " ".join(str(int(v)) for v in perm))
    return "\n".join(lines)


def parse_plan(text: str) -> ShufflePlan:
    coords, perms, step, n_models = [], [], 0, 0
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        step = int(parts[0])
        coords.append(int(parts[2]))
        perm = [int(v) for v in parts[3:]]
        n_models = len(perm)
        perms.append(perm)
    plan = ShufflePlan(step=step, n_models=n_models,
                       coords=np.asarray(coords, dtype=np.int64),
                       perms=np.asarray(perms, dtype=np.int64).reshape(len(coords), n_models))
    plan.validate()
    return plan
