"""Problem data model: single-armed MDPs and N-armed bandit configurations.

States are dense integer indices 0..n_states-1.  Instance files may carry a
human-readable name, but all engine math is index based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from rbengine.errors import InputError

ROW_SUM_TOL = 1e-9


def _frozen(a, dtype=float):
    out = np.ascontiguousarray(np.asarray(a, dtype=dtype))
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RBInstance:
    """A single-armed MDP (two actions) plus the budget fraction alpha.

    ``p0``/``p1`` are row-stochastic ``(n_states, n_states)`` matrices for the
    passive and active action; ``r0``/``r1`` the matching reward vectors.
    Immutable after construction; validation is reported by :func:`validate`
    rather than enforced here so that invalid inputs can be inspected.
    """

    n_states: int
    p0: np.ndarray
    p1: np.ndarray
    r0: np.ndarray
    r1: np.ndarray
    alpha: float
    name: str = "unnamed"

    def __post_init__(self):
        object.__setattr__(self, "p0", _frozen(self.p0))
        object.__setattr__(self, "p1", _frozen(self.p1))
        object.__setattr__(self, "r0", _frozen(self.r0))
        object.__setattr__(self, "r1", _frozen(self.r1))

    @property
    def r_max(self) -> float:
        return float(max(np.abs(self.r0).max(), np.abs(self.r1).max()))

    @property
    def beta(self) -> float:
        """min(alpha, 1 - alpha), the tighter side of the budget."""
        return float(min(self.alpha, 1.0 - self.alpha))

    def transition(self, action: int) -> np.ndarray:
        return self.p1 if action else self.p0

    def rewards(self, action: int) -> np.ndarray:
        return self.r1 if action else self.r0

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "n_states": self.n_states,
            "p0": self.p0.tolist(),
            "p1": self.p1.tolist(),
            "r0": self.r0.tolist(),
            "r1": self.r1.tolist(),
            "alpha": self.alpha,
        }


def reward(instance: RBInstance, state: int, action: int) -> float:
    """r(s, a) exactly as stored."""
    if not 0 <= state < instance.n_states:
        raise IndexError(f"state {state} out of range for |S|={instance.n_states}")
    if action not in (0, 1):
        raise IndexError(f"action {action} not in {{0, 1}}")
    return float((instance.r1 if action else instance.r0)[state])


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_if_invalid(self):
        if self.violations:
            raise InputError("invalid instance: " + "; ".join(self.violations))


def validate(instance: RBInstance) -> ValidationReport:
    """Collect every violated invariant of an instance (empty tuple = valid)."""
    v = []
    n = instance.n_states
    if n < 1:
        v.append("n_states must be positive")
        return ValidationReport(tuple(v))
    for label, mat in (("p0", instance.p0), ("p1", instance.p1)):
        if mat.shape != (n, n):
            v.append(f"{label} has shape {mat.shape}, expected {(n, n)}")
            continue
        if np.any(mat < 0):
            v.append(f"{label} has negative entries")
        bad = np.abs(mat.sum(axis=1) - 1.0) > ROW_SUM_TOL
        for s in np.flatnonzero(bad):
            v.append(f"{label} row {s} not stochastic (sum={mat[s].sum():.12g})")
    for label, vec in (("r0", instance.r0), ("r1", instance.r1)):
        if vec.shape != (n,):
            v.append(f"{label} has shape {vec.shape}, expected {(n,)}")
        elif not np.all(np.isfinite(vec)):
            v.append(f"{label} has non-finite entries")
    if not (0.0 < instance.alpha < 1.0):
        v.append(f"alpha out of range (0,1): {instance.alpha}")
    return ValidationReport(tuple(v))


def _parse_initial_rule(rule: str, n_states: int):
    if rule == "uniform-random":
        return rule
    if rule.startswith("all-state-"):
        k = int(rule.removeprefix("all-state-"))
        if not 0 <= k < n_states:
            raise InputError(f"initial state {k} out of range for |S|={n_states}")
        return rule
    raise InputError(f"unknown initial-state rule {rule!r}")


@dataclass(frozen=True)
class ArmConfig:
    """Number of arms, the integer budget alpha*N, and the initial states.

    ``initial_states`` is either an explicit length-N integer vector or one of
    the named rules ``"uniform-random"`` / ``"all-state-k"``.  The budget
    integrality alpha*N ∈ Z is enforced here, not silently rounded.
    """

    n_arms: int
    budget: int
    initial_states: object = "uniform-random"

    @classmethod
    def for_instance(cls, instance: RBInstance, n_arms: int,
                     initial_states="uniform-random") -> "ArmConfig":
        if n_arms < 1:
            raise InputError("n_arms must be positive")
        target = instance.alpha * n_arms
        budget = int(round(target))
        if abs(target - budget) >= ROW_SUM_TOL:
            raise InputError(
                f"alpha*N must be an integer: alpha={instance.alpha}, N={n_arms} "
                f"gives {target}")
        if not 0 < budget < n_arms:
            raise InputError(f"budget {budget} must lie strictly between 0 and N")
        if isinstance(initial_states, str):
            _parse_initial_rule(initial_states, instance.n_states)
        else:
            initial_states = _frozen(initial_states, dtype=np.int64)
            if initial_states.shape != (n_arms,):
                raise InputError("initial_states length must equal n_arms")
            if initial_states.min() < 0 or initial_states.max() >= instance.n_states:
                raise InputError("initial_states contains out-of-range states")
        return cls(n_arms=n_arms, budget=budget, initial_states=initial_states)

    def draw_initial_states(self, n_states: int, rng: np.random.Generator) -> np.ndarray:
        """Materialize the initial state vector, consuming rng only for the
        uniform-random rule."""
        if isinstance(self.initial_states, str):
            if self.initial_states == "uniform-random":
                return rng.integers(0, n_states, size=self.n_arms)
            k = int(self.initial_states.removeprefix("all-state-"))
            return np.full(self.n_arms, k, dtype=np.int64)
        return np.array(self.initial_states, dtype=np.int64)


def instance_from_dict(d: dict, normalize_rows: bool = False) -> RBInstance:
    """Build an instance from the JSON dict format.

    ``normalize_rows`` renormalizes nearly-stochastic rows (within 1e-6);
    it exists for externally generated files with rounding error and is
    never applied implicitly.
    """
    try:
        p0 = np.asarray(d["p0"], dtype=float)
        p1 = np.asarray(d["p1"], dtype=float)
        inst = RBInstance(
            n_states=int(d["n_states"]),
            p0=p0,
            p1=p1,
            r0=np.asarray(d["r0"], dtype=float),
            r1=np.asarray(d["r1"], dtype=float),
            alpha=float(d["alpha"]),
            name=str(d.get("name", "unnamed")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed instance dict: {exc}") from exc
    if normalize_rows:
        sums0 = inst.p0.sum(axis=1, keepdims=True)
        sums1 = inst.p1.sum(axis=1, keepdims=True)
        if np.any(np.abs(sums0 - 1) > 1e-6) or np.any(np.abs(sums1 - 1) > 1e-6):
            raise InputError("rows deviate from stochastic by more than 1e-6; "
                             "refusing to renormalize")
        inst = RBInstance(inst.n_states, inst.p0 / sums0, inst.p1 / sums1,
                          inst.r0, inst.r1, inst.alpha, inst.name)
    return inst


def load_instance(path: str, normalize_rows: bool = False) -> RBInstance:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read instance {path}: {exc}") from exc
    return instance_from_dict(d, normalize_rows=normalize_rows)


def save_instance(instance: RBInstance, path: str):
    with open(path, "w") as fh:
        json.dump(instance.to_json_dict(), fh, indent=1)
        fh.write("\n")
