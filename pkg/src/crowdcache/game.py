"""
The CrowdCache storage-crowdsourcing game.

N mobile edge devices (MEDs) each offer ``x_i`` GB of idle storage in
``[0, C_i]``. The content provider pays the unit price

    p(x) = P_bar - gamma * sum_j x_j

and each MED pays a quadratic cost ``Q_i x_i**2 + h_i x_i``. MED ``i``
maximizes ``U_i(x) = p(x) x_i - cost_i(x_i)``, equivalently minimizes the
local objective ``J_i = -U_i``.

All functions here are pure; vectors are float64 numpy arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import InvalidInputError


def _frozen_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must contain finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GameParams:
    """
    Economic constants of one game instance.

    Parameters
    ----------
    n_meds : int
        Number of MEDs.
    p_bar : float
        Maximum unit reward offered by the content provider.
    gamma : float
        Price sensitivity to the total offered storage. Must be positive.
    q, h : array_like
        Quadratic and linear cost coefficients, one per MED. ``q`` must be
        positive.
    cap : array_like
        Storage capacities in GB, one per MED, positive.
    """

    n_meds: int
    p_bar: float
    gamma: float
    q: np.ndarray
    h: np.ndarray
    cap: np.ndarray

    def __post_init__(self):
        n = self.n_meds
        if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
            raise InvalidInputError(f"n_meds must be a positive integer, got {n!r}")
        object.__setattr__(self, "n_meds", int(n))
        for name in ("q", "h", "cap"):
            vec = _frozen_vector(getattr(self, name), name)
            if vec.shape != (n,):
                raise InvalidInputError(f"{name} has length {vec.size}, expected n_meds={n}")
            object.__setattr__(self, name, vec)
        p_bar, gamma = float(self.p_bar), float(self.gamma)
        if not math.isfinite(p_bar) or p_bar < 0:
            raise InvalidInputError(f"p_bar must be a finite nonnegative real, got {self.p_bar!r}")
        if not math.isfinite(gamma) or gamma <= 0:
            raise InvalidInputError(
                f"gamma must be > 0 (strong monotonicity needs mu = 2 min Q + 2 gamma > 0), got {self.gamma!r}"
            )
        if np.any(self.q <= 0):
            raise InvalidInputError("all q must be > 0 (strong monotonicity needs mu > 0)")
        if np.any(self.h < 0):
            raise InvalidInputError("all h must be >= 0")
        if np.any(self.cap <= 0):
            raise InvalidInputError("all cap must be > 0")
        object.__setattr__(self, "p_bar", p_bar)
        object.__setattr__(self, "gamma", gamma)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_meds": self.n_meds,
            "p_bar": self.p_bar,
            "gamma": self.gamma,
            "q": self.q.tolist(),
            "h": self.h.tolist(),
            "cap": self.cap.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GameParams":
        expected = {"n_meds", "p_bar", "gamma", "q", "h", "cap"}
        keys = set(data)
        if keys != expected:
            missing, extra = expected - keys, keys - expected
            raise InvalidInputError(
                f"game params keys mismatch (missing {sorted(missing)}, unknown {sorted(extra)})"
            )
        return cls(**{k: data[k] for k in expected})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GameParams":
        return cls.from_dict(json.loads(text))

    def scaled(self, gamma_scale: float = 1.0, price_scale: float = 1.0, qcost_scale: float = 1.0) -> "GameParams":
        """Copy with gamma, p_bar and every Q_i multiplied by the given factors."""
        return GameParams(
            n_meds=self.n_meds,
            p_bar=self.p_bar * price_scale,
            gamma=self.gamma * gamma_scale,
            q=self.q * qcost_scale,
            h=self.h,
            cap=self.cap,
        )


@dataclass(frozen=True)
class AnalysisConstants:
    """Monotonicity and Lipschitz constants of the game mapping."""

    mu: float
    l1: float
    l2: float
    l: float
    xi: float

    def __post_init__(self):
        if not self.mu <= self.l1:
            raise InvalidInputError(f"mu={self.mu} exceeds l1={self.l1}")
        if not (self.l >= self.l1 and self.l >= self.l2):
            raise InvalidInputError("l must dominate l1 and l2")


@dataclass(frozen=True, eq=False)
class StrategyProfile:
    """
    An action vector, tagged with whether it lies in the feasible box.

    Iterates of the momentum method may leave the box, so profiles built
    with :meth:`unconstrained` carry ``feasible=False`` unless they happen
    to satisfy the bounds.
    """

    x: np.ndarray
    feasible: bool

    @classmethod
    def in_box(cls, params: GameParams, x) -> "StrategyProfile":
        vec = _as_vector(params, x)
        if np.any(vec < 0) or np.any(vec > params.cap):
            raise InvalidInputError("profile violates 0 <= x_i <= C_i")
        return cls(_frozen_vector(vec, "x"), True)

    @classmethod
    def unconstrained(cls, params: GameParams, x) -> "StrategyProfile":
        vec = _as_vector(params, x)
        feasible = bool(np.all(vec >= 0) and np.all(vec <= params.cap))
        return cls(_frozen_vector(vec, "x"), feasible)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.x, dtype=dtype)

    def __len__(self):
        return self.x.size

    def __getitem__(self, i):
        return self.x[i]


def _as_vector(params: GameParams, x) -> np.ndarray:
    vec = np.asarray(x, dtype=float)
    if vec.shape != (params.n_meds,):
        raise InvalidInputError(f"profile has shape {vec.shape}, expected ({params.n_meds},)")
    return vec


def _check_index(params: GameParams, i) -> int:
    if isinstance(i, bool) or not isinstance(i, (int, np.integer)) or not 0 <= i < params.n_meds:
        raise InvalidInputError(f"MED index {i!r} out of range [0, {params.n_meds})")
    return int(i)


def unit_price(params: GameParams, x) -> float:
    """Unit reward ``P_bar - gamma * sum(x)``; not clamped, may be negative."""
    vec = _as_vector(params, x)
    return params.p_bar - params.gamma * float(vec.sum())


def cost(params: GameParams, i: int, x_i: float) -> float:
    i = _check_index(params, i)
    return params.q[i] * x_i * x_i + params.h[i] * x_i


def utility(params: GameParams, i: int, x) -> float:
    i = _check_index(params, i)
    vec = _as_vector(params, x)
    return unit_price(params, vec) * vec[i] - cost(params, i, vec[i])


def utilities(params: GameParams, x) -> np.ndarray:
    """All MEDs' utilities at profile ``x`` at once."""
    vec = _as_vector(params, x)
    price = unit_price(params, vec)
    return price * vec - (params.q * vec * vec + params.h * vec)


def local_objective(params: GameParams, i: int, x) -> float:
    return -utility(params, i, x)


def own_gradient_kernel(params: GameParams, own, totals) -> np.ndarray:
    """
    Gradient of each J_i evaluated from MED i's view of the profile.

    ``own[i]`` is the value MED i uses for its own action and ``totals[i]``
    the sum of the whole profile as seen by MED i. Every solver goes
    through this kernel so that degenerate cases reproduce bit-for-bit.
    """
    g = params.gamma
    return 2.0 * (params.q + g) * own + g * (totals - own) + params.h - params.p_bar


def gradient(params: GameParams, i: int, x) -> float:
    """Partial derivative of J_i with respect to x_i."""
    i = _check_index(params, i)
    vec = _as_vector(params, x)
    g = params.gamma
    others = float(vec.sum()) - vec[i]
    return 2.0 * (params.q[i] + g) * vec[i] + g * others + params.h[i] - params.p_bar


def game_mapping(params: GameParams, x) -> np.ndarray:
    """Stacked own-gradients F(x)."""
    vec = _as_vector(params, x)
    return own_gradient_kernel(params, vec, np.full_like(vec, vec.sum()))


def mapping_jacobian(params: GameParams) -> np.ndarray:
    """Constant Jacobian of F: ``diag(2Q_i + gamma) + gamma * ones``."""
    n = params.n_meds
    return np.diag(2.0 * params.q + params.gamma) + params.gamma * np.ones((n, n))


def project_box(params: GameParams, v) -> StrategyProfile:
    vec = _as_vector(params, v)
    return StrategyProfile.in_box(params, np.clip(vec, 0.0, params.cap))


def analysis_constants(params: GameParams) -> AnalysisConstants:
    g = params.gamma
    mu = 2.0 * (float(params.q.min()) + g)
    l1 = 2.0 * (float(params.q.max()) + g)
    l2 = g * math.sqrt(params.n_meds - 1)
    return AnalysisConstants(mu=mu, l1=l1, l2=l2, l=math.hypot(l1, l2), xi=mu / params.n_meds)
