"""Tabular MDP and policy types, validation, generators and JSON persistence.

Arrays follow the ``(S, A, S')`` convention: ``kernel[s, a, t] = P(t | s, a)``
and ``reward[s, a] = r(s, a)``. Policies are plain ``(S, A)`` arrays whose rows
are probability vectors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from avgpg.chain import is_irreducible

ROW_TOL = 1e-12
MAX_REGEN = 200

KERNEL_FAMILIES = ("dirichlet-uniform", "permutation-deterministic", "sparse")
REWARD_FAMILIES = ("uniform-range", "sparse", "two-level", "diameter-controlled")


class MdpError(ValueError):
    """Raised for malformed MDPs, policies or generator specs."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; streams are stable across platforms."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class TabularMdp:
    kernel: np.ndarray
    reward: np.ndarray
    reward_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        kernel = np.array(self.kernel, dtype=float)
        reward = np.array(self.reward, dtype=float)
        if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[2]:
            raise MdpError(f"kernel must have shape (S, A, S), got {kernel.shape}")
        if reward.shape != kernel.shape[:2]:
            raise MdpError(f"reward shape {reward.shape} does not match kernel {kernel.shape}")
        kernel.setflags(write=False)
        reward.setflags(write=False)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "reward_range", tuple(float(x) for x in self.reward_range))

    @property
    def num_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def num_actions(self) -> int:
        return self.kernel.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.kernel.shape[0], self.kernel.shape[1]


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_mdp(mdp: TabularMdp, tol: float = ROW_TOL) -> ValidationReport:
    report = ValidationReport()
    S, A = mdp.shape
    lo, hi = mdp.reward_range
    for s in range(S):
        for a in range(A):
            row = mdp.kernel[s, a]
            if np.any(row < 0):
                t = int(np.argmin(row))
                report.violations.append(f"negative probability {row[t]:g} at (s={s},a={a},s'={t})")
            total = row.sum()
            if abs(total - 1.0) > tol:
                report.violations.append(f"row (s={s},a={a}) sums to {total:.12g}")
            r = mdp.reward[s, a]
            if not (lo <= r <= hi):
                report.violations.append(f"reward {r:g} at (s={s},a={a}) outside [{lo:g}, {hi:g}]")
    if not np.all(np.isfinite(mdp.kernel)) or not np.all(np.isfinite(mdp.reward)):
        report.violations.append("non-finite entries")
    return report


def check_policy(pi: np.ndarray, shape: tuple[int, int] | None = None, tol: float = ROW_TOL) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 2:
        raise MdpError(f"policy must be 2-D, got shape {pi.shape}")
    if shape is not None and pi.shape != tuple(shape):
        raise MdpError(f"policy shape {pi.shape} does not match MDP {tuple(shape)}")
    if np.any(pi < -tol) or np.any(np.abs(pi.sum(axis=1) - 1.0) > tol):
        raise MdpError("policy rows must be probability vectors")
    return pi


def kernel_under_policy(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """P^pi(t|s) = sum_a pi(a|s) P(t|s,a)."""
    pi = np.asarray(pi, dtype=float)
    if pi.shape != mdp.shape:
        raise MdpError(f"policy shape {pi.shape} does not match MDP {mdp.shape}")
    return np.einsum("sa,sat->st", pi, mdp.kernel)


def reward_under_policy(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != mdp.shape:
        raise MdpError(f"policy shape {pi.shape} does not match MDP {mdp.shape}")
    return np.einsum("sa,sa->s", pi, mdp.reward)


def make_policy(kind: str, S: int, A: int, actions=None, seed: int | None = None) -> np.ndarray:
    """Build a uniform, deterministic (``actions`` maps state -> action) or random policy."""
    if S < 1 or A < 1:
        raise MdpError("S and A must be positive")
    if kind == "uniform":
        return np.full((S, A), 1.0 / A)
    if kind == "deterministic":
        actions = np.asarray(actions, dtype=int)
        if actions.shape != (S,):
            raise MdpError(f"need one action per state, got {actions.shape}")
        if np.any(actions < 0) or np.any(actions >= A):
            raise MdpError(f"action index out of range [0, {A})")
        pi = np.zeros((S, A))
        pi[np.arange(S), actions] = 1.0
        return pi
    if kind == "random":
        rng = make_rng(0 if seed is None else seed)
        return rng.dirichlet(np.ones(A), size=S)
    raise MdpError(f"unknown policy kind {kind!r}")


def deterministic_policy(actions, A: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=int)
    return make_policy("deterministic", actions.shape[0], A, actions=actions)


@dataclass(frozen=True)
class GeneratorSpec:
    """Recipe for a random MDP.

    ``sparsity`` is the number of nonzeros per kernel row for the ``sparse``
    kernel family, and the number of rewarded (s, a) pairs per state for the
    ``sparse`` reward family. ``delta`` scales the action-dependent part of
    ``diameter-controlled`` rewards.
    """

    S: int
    A: int
    kernel_family: str = "dirichlet-uniform"
    reward_family: str = "uniform-range"
    seed: int = 0
    sparsity: int = 2
    delta: float = 1.0
    reward_range: tuple[float, float] = (-1.0, 1.0)

    def validate(self) -> None:
        if self.S < 1 or self.A < 1:
            raise MdpError("S and A must be positive")
        if self.kernel_family not in KERNEL_FAMILIES:
            raise MdpError(f"unknown kernel family {self.kernel_family!r}")
        if self.reward_family not in REWARD_FAMILIES:
            raise MdpError(f"unknown reward family {self.reward_family!r}")
        if self.kernel_family == "sparse" and not 1 <= self.sparsity <= self.S:
            raise MdpError(f"sparsity must be in [1, S], got {self.sparsity}")
        lo, hi = self.reward_range
        if not lo < hi:
            raise MdpError("empty reward range")


def _dirichlet_kernel(rng, S, A):
    return rng.dirichlet(np.ones(S), size=(S, A))


def _permutation_kernel(rng, S, A):
    kernel = np.zeros((S, A, S))
    for a in range(A):
        perm = rng.permutation(S)
        kernel[np.arange(S), a, perm] = 1.0
    return kernel


def _sparse_kernel(rng, S, A, k):
    kernel = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            cols = rng.choice(S, size=k, replace=False)
            kernel[s, a, cols] = rng.dirichlet(np.ones(k))
    return kernel


def _reward(rng, spec: GeneratorSpec) -> np.ndarray:
    S, A = spec.S, spec.A
    lo, hi = spec.reward_range
    fam = spec.reward_family
    if fam == "uniform-range":
        return rng.uniform(lo, hi, size=(S, A))
    if fam == "sparse":
        reward = np.zeros((S, A)) if lo <= 0.0 <= hi else np.full((S, A), lo)
        k = min(spec.sparsity, A)
        for s in range(S):
            cols = rng.choice(A, size=k, replace=False)
            reward[s, cols] = rng.uniform(lo, hi, size=k)
        return reward
    if fam == "two-level":
        # Alternating extremes within each row: the extremal family for the reward diameter.
        pattern = np.where((np.arange(S)[:, None] + np.arange(A)[None, :]) % 2 == 0, hi, lo)
        flip = rng.integers(0, 2, size=S).astype(bool)
        pattern[flip] = lo + hi - pattern[flip]
        return pattern
    # diameter-controlled: a state-independent base level plus delta-scaled action noise,
    # so delta = 0 leaves rho policy-independent on any kernel.
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    base = rng.uniform(mid - 0.5 * half, mid + 0.5 * half)
    noise = rng.uniform(-0.5 * half, 0.5 * half, size=(S, A))
    return base + spec.delta * noise


def generate_mdp(spec: GeneratorSpec) -> TabularMdp:
    """Deterministic function of ``spec``; kernel and reward use independent streams.

    The kernel stream depends only on (S, A, kernel family, sparsity, seed), so
    varying the reward family or ``delta`` keeps the kernel bit-identical.
    """
    spec.validate()
    S, A = spec.S, spec.A
    fam_id = KERNEL_FAMILIES.index(spec.kernel_family)
    kernel_rng = np.random.Generator(np.random.Philox(key=_stream_key(spec.seed, 1 + fam_id)))
    reward_rng = np.random.Generator(np.random.Philox(key=_stream_key(spec.seed, 100)))

    for _ in range(MAX_REGEN):
        if spec.kernel_family == "dirichlet-uniform":
            kernel = _dirichlet_kernel(kernel_rng, S, A)
        elif spec.kernel_family == "permutation-deterministic":
            kernel = _permutation_kernel(kernel_rng, S, A)
        else:
            kernel = _sparse_kernel(kernel_rng, S, A, spec.sparsity)
        if spec.kernel_family == "dirichlet-uniform" or is_irreducible(kernel.mean(axis=1)):
            break
    else:
        raise MdpError(f"no ergodic {spec.kernel_family} kernel after {MAX_REGEN} draws")

    reward = np.clip(_reward(reward_rng, spec), *spec.reward_range)
    return TabularMdp(kernel, reward, spec.reward_range)


def _stream_key(seed: int, stream: int) -> int:
    # Philox keys are 128-bit: the seed fills the low word, the stream id the high word.
    return (int(stream) << 64) | (int(seed) & 0xFFFFFFFFFFFFFFFF)


def interpolate_kernel(base: np.ndarray, distinct: np.ndarray, weight: float) -> np.ndarray:
    """Convex mix ``(1-w) base + w distinct``; ``base`` is broadcast over actions if 2-D."""
    base = np.asarray(base, dtype=float)
    if base.ndim == 2:
        base = np.broadcast_to(base[:, None, :], distinct.shape)
    return (1.0 - weight) * base + weight * np.asarray(distinct, dtype=float)


# -- persistence ------------------------------------------------------------

def mdp_to_dict(mdp: TabularMdp) -> dict:
    """Flat schema: kernel in s-major / a-major / s'-minor order, reward in s-major order."""
    S, A = mdp.shape
    return {
        "schema": "avgpg.mdp/1",
        "S": S,
        "A": A,
        "reward_range": list(mdp.reward_range),
        "kernel": mdp.kernel.reshape(-1).tolist(),
        "reward": mdp.reward.reshape(-1).tolist(),
    }


def mdp_from_dict(doc: dict) -> TabularMdp:
    try:
        S, A = int(doc["S"]), int(doc["A"])
        kernel = np.asarray(doc["kernel"], dtype=float)
        reward = np.asarray(doc["reward"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise MdpError(f"bad MDP document: {exc}") from exc
    if kernel.size != S * A * S or reward.size != S * A:
        raise MdpError("kernel/reward lengths do not match S and A")
    return TabularMdp(kernel.reshape(S, A, S), reward.reshape(S, A),
                      tuple(doc.get("reward_range", (-1.0, 1.0))))


def save_mdp(mdp: TabularMdp, path) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp)))


def load_mdp(path) -> TabularMdp:
    return mdp_from_dict(json.loads(Path(path).read_text()))
