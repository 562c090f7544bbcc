"""Layered parameter containers and the vector-space math built on them.

A model's parameters are an ordered list of float64 tensors.  The flat
coordinate index runs tensor-major (in listing order) then row-major (C
order) inside each tensor; this single canonical mapping is shared by the
shuffling machinery and the communication accounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError, ValidationError

WEIGHT_SUM_TOL = 1e-12


@dataclass
class LayeredParams:
    """Ordered per-layer parameter tensors for one model."""

    layers: list[np.ndarray]
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def total_size(self) -> int:
        return sum(t.size for t in self.layers)

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(t.shape for t in self.layers)

    def copy(self) -> "LayeredParams":
        return LayeredParams([t.copy() for t in self.layers])

    def flatten(self) -> np.ndarray:
        """Concatenate all tensors into one flat vector (canonical order)."""
        return np.concatenate([t.reshape(-1) for t in self.layers])

    @classmethod
    def from_flat(cls, flat: np.ndarray, shapes) -> "LayeredParams":
        layers, pos = [], 0
        for shape in shapes:
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            layers.append(np.asarray(flat[pos:pos + size], dtype=np.float64).reshape(shape).copy())
            pos += size
        if pos != len(flat):
            raise ShapeMismatchError(f"flat vector has {len(flat)} entries, shapes need {pos}")
        return cls(layers)

    @classmethod
    def zeros_like(cls, other: "LayeredParams") -> "LayeredParams":
        return cls([np.zeros_like(t) for t in other.layers])


@dataclass(frozen=True)
class ParamLayout:
    """Static description of a parameter container.

    ``depths`` assigns each tensor to a network depth index l in {0..L-1};
    several tensors (e.g. a weight matrix and its bias) may share a depth.
    The depth drives the per-layer shuffle probability, while flat
    coordinates address individual scalars.
    """

    shapes: tuple[tuple[int, ...], ...]
    depths: tuple[int, ...]

    def __post_init__(self):
        if len(self.shapes) != len(self.depths):
            raise ValidationError("layout shapes and depths must align")
        if self.depths and list(self.depths) != sorted(self.depths):
            raise ValidationError("tensor depths must be non-decreasing in listing order")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(np.prod(s, dtype=np.int64)) if s else 1 for s in self.shapes)

    @property
    def offsets(self) -> tuple[int, ...]:
        out, pos = [], 0
        for size in self.sizes:
            out.append(pos)
            pos += size
        return tuple(out)

    @property
    def total_size(self) -> int:
        return sum(self.sizes)

    @property
    def num_depths(self) -> int:
        return max(self.depths) + 1 if self.depths else 0

    def coord_to_tensor(self, coord: int) -> tuple[int, int]:
        """Map a flat coordinate to (tensor index, offset within tensor)."""
        if not 0 <= coord < self.total_size:
            raise ValidationError(f"flat coordinate {coord} out of range [0, {self.total_size})")
        offsets = self.offsets
        k = int(np.searchsorted(np.asarray(offsets), coord, side="right")) - 1
        return k, coord - offsets[k]

    def depth_of_coord(self, coord: int) -> int:
        return self.depths[self.coord_to_tensor(coord)[0]]

    def matches(self, params: LayeredParams) -> bool:
        return params.shapes == self.shapes

    @classmethod
    def of(cls, params: LayeredParams, depths=None) -> "ParamLayout":
        """Layout of an existing container; default is one depth per tensor."""
        if depths is None:
            depths = tuple(range(len(params.layers)))
        return cls(shapes=params.shapes, depths=tuple(depths))


@dataclass
class PopulationView:
    """Ordered list of N models with homogeneous shapes.

    A model's index identifies it for the whole run: coordination permutes
    parameter values between slots, never the slots themselves.
    """

    models: list[LayeredParams]

    def __post_init__(self):
        if not self.models:
            raise ValidationError("population must contain at least one model")
        ref = self.models[0].shapes
        for n, m in enumerate(self.models[1:], start=1):
            if m.shapes != ref:
                raise ShapeMismatchError(f"model {n} shapes {m.shapes} != model 0 shapes {ref}")

    @property
    def n_models(self) -> int:
        return len(self.models)

    def copy(self) -> "PopulationView":
        return PopulationView([m.copy() for m in self.models])


def _check_shapes(a: LayeredParams, b: LayeredParams):
    if a.shapes != b.shapes:
        raise ShapeMismatchError(f"shape mismatch: {a.shapes} vs {b.shapes}")


def consensus_mean(pop: PopulationView) -> LayeredParams:
    """Coordinatewise arithmetic mean of the population (the consensus)."""
    n = pop.n_models
    out = []
    for k in range(len(pop.models[0].layers)):
        acc = np.zeros_like(pop.models[0].layers[k])
        for m in pop.models:
            acc += m.layers[k]
        out.append(acc / n)
    return LayeredParams(out)


def consensus_distance(pop: PopulationView) -> tuple[float, float]:
    """Distance of the population to its consensus.

    Returns ``(sum_sq, avg_dist)`` where ``sum_sq`` is the sum over models
    of the squared euclidean distance to the consensus mean and
    ``avg_dist`` is the average (over models) of the plain distance.
    """
    mean = consensus_mean(pop)
    sum_sq = 0.0
    dist_acc = 0.0
    for m in pop.models:
        sq = 0.0
        for t, mt in zip(m.layers, mean.layers):
            diff = (t - mt).reshape(-1)
            sq += float(diff @ diff)
        sum_sq += sq
        dist_acc += math.sqrt(sq)
    return sum_sq, dist_acc / pop.n_models


def interpolate(a: LayeredParams, b: LayeredParams, lam: float) -> LayeredParams:
    """(1-lam)*a + lam*b coordinatewise.

    Values of ``lam`` outside [0, 1] are allowed but flag the result as an
    extrapolation via ``meta["extrapolated"]``.
    """
    _check_shapes(a, b)
    out = LayeredParams([(1.0 - lam) * ta + lam * tb for ta, tb in zip(a.layers, b.layers)])
    if not 0.0 <= lam <= 1.0:
        out.meta["extrapolated"] = True
    return out


def weighted_average(models: list[LayeredParams], weights) -> LayeredParams:
    """Convex combination of models; weights must sum to 1 within 1e-12."""
    if len(models) != len(weights):
        raise ValidationError(f"{len(models)} models but {len(weights)} weights")
    if not models:
        raise ValidationError("need at least one model to average")
    total = math.fsum(float(w) for w in weights)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise ValidationError(f"weights sum to {total!r}, expected 1 within {WEIGHT_SUM_TOL}")
    ref = models[0]
    for m in models[1:]:
        _check_shapes(ref, m)
    out = []
    for k in range(len(ref.layers)):
        acc = np.zeros_like(ref.layers[k])
        for m, w in zip(models, weights):
            acc += float(w) * m.layers[k]
        out.append(acc)
    return LayeredParams(out)
