"""Two points descending a three-well 2D landscape under coordination.

The landscape is a mixture of radially-decaying exponential wells (a
stripped-down Ackley shape): one deep, wide well and two shallower,
sharper ones.  Two points run noisy gradient descent, optionally coupled
by an EMA pull toward their midpoint or by per-coordinate stochastic
swapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .rng import substream

TOY_STRATEGIES = ("none", "papa", "wash")


@dataclass(frozen=True)
class Well:
    x: float
    y: float
    amplitude: float
    sharpness: float


@dataclass(frozen=True)
class Landscape:
    """f(x, y) = -sum_m amplitude_m * g(x, y, center_m, sharpness_m)."""

    wells: tuple[Well, ...]

    def value(self, x: float, y: float) -> float:
        return float(sum(-w.amplitude * g(x, y, w.x, w.y, w.sharpness) for w in self.wells))

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """Analytic gradient at each row of ``points``.

        The radial wells are non-smooth at their centers, so the gradient
        at an exact center is defined as (0, 0): the cusp's pull dominates
        the other wells there, making zero a valid subgradient and the
        center an exact fixed point of noiseless descent.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.zeros_like(pts)
        at_center = np.zeros(len(pts), dtype=bool)
        for w in self.wells:
            dx = pts[:, 0] - w.x
            dy = pts[:, 1] - w.y
            u = np.sqrt(0.5 * (dx * dx + dy * dy))
            nz = u > 0.0
            at_center |= ~nz
            coef = np.zeros_like(u)
            coef[nz] = w.amplitude * w.sharpness * np.exp(-w.sharpness * u[nz]) / (2.0 * u[nz])
            out[:, 0] += coef * dx
            out[:, 1] += coef * dy
        out[at_center] = 0.0
        return out if np.asarray(points).ndim == 2 else out[0]

    def labeled_minima(self) -> list[tuple[str, tuple[float, float]]]:
        """Well centers labeled 'global' (deepest) then 'local_a', 'local_b', ..."""
        deepest = max(range(len(self.wells)), key=lambda i: self.wells[i].amplitude)
        labels = []
        local = 0
        for i, w in enumerate(self.wells):
            if i == deepest:
                labels.append(("global", (w.x, w.y)))
            else:
                labels.append((f"local_{chr(ord('a') + local)}", (w.x, w.y)))
                local += 1
        return labels


def g(x, y, x_m, y_m, sharpness) -> float:
    """Radial well kernel exp(-sharpness * sqrt(0.5*((x-x_m)^2 + (y-y_m)^2)))."""
    return math.exp(-sharpness * math.sqrt(0.5 * ((x - x_m) ** 2 + (y - y_m) ** 2)))


DEFAULT_LANDSCAPE = Landscape(wells=(
    Well(10.0, 10.0, 10.0, 0.1),
    Well(8.0, 3.0, 5.0, 0.3),
    Well(3.0, 8.0, 5.0, 0.3),
))

DEFAULT_STARTS = ((0.0, 5.0), (5.0, 0.0))


def f(x: float, y: float, landscape: Landscape = DEFAULT_LANDSCAPE) -> float:
    return landscape.value(x, y)


def grad_f(x: float, y: float, landscape: Landscape = DEFAULT_LANDSCAPE) -> tuple[float, float]:
    gx, gy = landscape.gradient(np.array([x, y]))
    return float(gx), float(gy)


def classify_endpoint(point, landscape: Landscape = DEFAULT_LANDSCAPE,
                      radius: float = 1.0) -> str:
    """Label of the nearest minimum center within ``radius``, else 'none'."""
    px, py = float(point[0]), float(point[1])
    best_label, best_dist = "none", radius
    for label, (cx, cy) in landscape.labeled_minima():
        dist = math.hypot(px - cx, py - cy)
        if dist <= best_dist:
            best_label, best_dist = label, dist
    return best_label


@dataclass
class ToyResult:
    """Trajectories with shape (steps+1, n_points, 2) plus endpoint labels."""

    trajectories: np.ndarray
    labels: tuple[str, ...]
    strategy: str

    @property
    def endpoints(self) -> np.ndarray:
        return self.trajectories[-1]


def run_toy(strategy: str = "none", seed: int = 0, steps: int = 1000, lr: float = 0.1,
            noise_sigma: float = 0.25, shuffle_p: float = 0.01, alpha: float = 0.99,
            papa_period: int = 1, starts=DEFAULT_STARTS,
            swap_on_select: bool = False, landscape: Landscape = DEFAULT_LANDSCAPE,
            noise: np.ndarray | None = None,
            swap_mask: np.ndarray | None = None) -> ToyResult:
    """Train two points with noisy exact-gradient SGD plus coordination.

    Per step: gradient + Gaussian noise, SGD update, then the strategy's
    coordination.  'wash' selects each coordinate independently with
    probability ``shuffle_p`` and applies a uniform permutation of the
    two points there (identity or swap, so the effective swap rate is
    shuffle_p/2 unless ``swap_on_select`` forces a swap).  'papa' pulls
    both points toward their midpoint by ``alpha`` every ``papa_period``
    steps.

    ``noise`` (steps, n_points, 2) and ``swap_mask`` (steps, 2) override
    the seed-derived draws, mainly for controlled experiments.
    """
    if strategy not in TOY_STRATEGIES:
        raise ValidationError(f"unknown toy strategy {strategy!r}")
    points = np.asarray(starts, dtype=np.float64).copy()
    n_points = len(points)

    if noise is None:
        noise = np.zeros((steps, n_points, 2))
        if noise_sigma > 0:
            for n in range(n_points):
                for c in range(2):
                    noise[:, n, c] = substream(seed, "noise", n, c).normal(0.0, noise_sigma, steps)
    elif noise.shape != (steps, n_points, 2):
        raise ValidationError(f"noise must have shape {(steps, n_points, 2)}")

    if strategy == "wash":
        if swap_mask is None:
            rng = substream(seed, "shuffle")
            selected = rng.random((steps, 2)) < shuffle_p
            swap_draw = rng.random((steps, 2)) < 0.5
            swap_mask = selected if swap_on_select else selected & swap_draw
        elif swap_mask.shape != (steps, 2):
            raise ValidationError(f"swap_mask must have shape {(steps, 2)}")

    traj = np.empty((steps + 1, n_points, 2))
    traj[0] = points
    for t in range(steps):
        grads = landscape.gradient(points) + noise[t]
        points -= lr * grads
        if strategy == "papa" and (t + 1) % papa_period == 0:
            mean = points.mean(axis=0)
            points *= alpha
            points += (1.0 - alpha) * mean
        elif strategy == "wash":
            for c in range(2):
                if swap_mask[t, c]:
                    points[0, c], points[1, c] = points[1, c], points[0, c]
        traj[t + 1] = points

    labels = tuple(classify_endpoint(p, landscape) for p in points)
    return ToyResult(trajectories=traj, labels=labels, strategy=strategy)


def write_trajectory_csv(result: ToyResult, path) -> None:
    """Plot-ready trajectory dump: one row per (step, point)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,point_id,x,y\n")
        for t in range(result.trajectories.shape[0]):
            for n in range(result.trajectories.shape[1]):
                x, y = result.trajectories[t, n]
                fh.write(f"{t},{n},{x:.17g},{y:.17g}\n")
