"""Exact analysis of the joint chain a strategy profile induces on (w, z, x).

Builds the dense one-step transition matrix over joint states, solves for the
stationary distribution, extracts each agent's conditional signal model, and
computes the regularity diagnostics used by the coupling bounds: the group
inverse condition number of the uncoupled reference chain, the minimal
stationary mass per (z_i, x_i), and the largest signal probability.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from .game_model import GameSpec, JointIndexer, SpecError

if TYPE_CHECKING:
    from .learning import Strategy

MASS_FLOOR = 1e-12
SOLVER_TOL = 1e-12
POWER_ITER_CAP = 10**6
MAX_JOINT_STATES = 10**6


class StationaryError(RuntimeError):
    """The chain has no reliably computable unique stationary distribution."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class VanishingMassError(RuntimeError):
    """Some (z_i, x_i) has stationary mass below MASS_FLOOR."""


@dataclass(frozen=True)
class JointTransition:
    indexer: JointIndexer
    matrix: np.ndarray

    @property
    def n_states(self) -> int:
        return self.indexer.n_states


@dataclass(frozen=True)
class StationaryDistribution:
    pi: np.ndarray
    residual: float
    method: str = "direct"


@dataclass(frozen=True)
class ConsistentModel:
    """Per agent, mu[i][z, x, s] is the long-run signal law at (z, x)."""

    mu: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class ChainDiagnostics:
    """kappa from the uncoupled reference chain; per-agent mass and signal ceilings."""

    kappa: float
    minimal_mass: tuple[float, ...]
    signal_ceiling: tuple[float, ...]


def strategy_arrays(sigma, spec: GameSpec) -> tuple[np.ndarray, ...]:
    """Validate and normalize a strategy profile against a spec.

    Accepts a Strategy or any sequence of per-agent arrays shaped
    (n_memory, n_states, n_actions). Rows must be probability vectors; sums
    within 1e-9 of 1 are renormalized exactly.
    """
    arrays = getattr(sigma, "probs", sigma)
    if len(arrays) != spec.n_agents:
        raise SpecError(f"strategy has {len(arrays)} agents, spec has {spec.n_agents}")
    out = []
    for i, (arr, ag) in enumerate(zip(arrays, spec.agents)):
        arr = np.asarray(arr, dtype=float)
        want = (ag.n_memory, ag.n_states, ag.n_actions)
        if arr.shape != want:
            raise SpecError(f"agent {i + 1} strategy shape {arr.shape}, expected {want}")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise SpecError(f"agent {i + 1} strategy has a negative or non-finite entry")
        sums = arr.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise SpecError(f"agent {i + 1} strategy rows do not sum to 1")
        out.append(arr / sums[..., None])
    return tuple(out)


def _memory_indicator(ag) -> np.ndarray:
    """E[z, s, z_next] = 1 when the memory rule maps (z, s) to z_next."""
    e = np.zeros((ag.n_memory, ag.n_signals, ag.n_memory))
    for z in range(ag.n_memory):
        for s in range(ag.n_signals):
            e[z, s, ag.memory_rule[z, s]] = 1.0
    return e


def agent_step_factors(spec: GameSpec) -> list[np.ndarray]:
    """Per agent, F[a, w, z, x, z_next, x_next]: the signal-averaged local step.

    F sums over the unobserved signal: P(s | w) times the memory indicator
    times the local kernel row (x, s) under action a.
    """
    factors = []
    for ag in spec.agents:
        e = _memory_indicator(ag)
        f = np.einsum("ws,zsZ,axsX->awzxZX", ag.signal_kernel, e, ag.local_kernels_4d)
        factors.append(f)
    return factors


def build_joint_transition(spec: GameSpec, sigma) -> JointTransition:
    """Dense transition matrix over joint states (w, z_1..z_n, x_1..x_n).

    Entry (psi, psi_next) averages, over the joint action drawn from the
    product strategy at (z, x), the environment kernel times each agent's
    signal-averaged local step. Joint states are flattened in indexer order.
    """
    indexer = spec.indexer()
    n = indexer.n_states
    if n > MAX_JOINT_STATES:
        raise SpecError(f"joint state space has {n} states, above the dense limit {MAX_JOINT_STATES}")
    probs = strategy_arrays(sigma, spec)
    factors = agent_step_factors(spec)
    n_ag = spec.n_agents

    letters = string.ascii_lowercase + string.ascii_uppercase
    if 2 + 4 * n_ag > len(letters):
        raise SpecError("too many agents for the dense joint builder")
    w, wn = letters[0], letters[1]
    z = [letters[2 + 4 * i] for i in range(n_ag)]
    x = [letters[3 + 4 * i] for i in range(n_ag)]
    zn = [letters[4 + 4 * i] for i in range(n_ag)]
    xn = [letters[5 + 4 * i] for i in range(n_ag)]
    subs = [w + wn]
    for i in range(n_ag):
        subs.append(z[i] + x[i])              # strategy weight at (z_i, x_i)
        subs.append(w + z[i] + x[i] + zn[i] + xn[i])
    out = w + "".join(z) + "".join(x) + wn + "".join(zn) + "".join(xn)
    expr = ",".join(subs) + "->" + out

    big = np.zeros(indexer.state_dims + indexer.state_dims)
    for k, a in enumerate(spec.joint_actions()):
        operands = [spec.env_kernels[k]]
        for i, ai in enumerate(a):
            operands.append(probs[i][:, :, ai])
            operands.append(factors[i][ai])
        big += np.einsum(expr, *operands, optimize=True)
    return JointTransition(indexer=indexer, matrix=big.reshape(n, n))


def _as_matrix(T) -> np.ndarray:
    return T.matrix if isinstance(T, JointTransition) else np.asarray(T, dtype=float)


def stationary_distribution(T) -> StationaryDistribution:
    """Solve pi = pi T with sum(pi) = 1 to residual SOLVER_TOL.

    Direct linear solve first (one balance equation replaced by the
    normalization); falls back to power iteration capped at POWER_ITER_CAP.
    Raises StationaryError when neither method reaches the tolerance.
    """
    mat = _as_matrix(T)
    n = mat.shape[0]
    pi = None
    try:
        a = mat.T - np.eye(n)
        a[-1, :] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        cand = np.linalg.solve(a, b)
        if np.all(np.isfinite(cand)) and cand.min() > -1e-9:
            cand = np.clip(cand, 0.0, None)
            cand = cand / cand.sum()
            if _residual(cand, mat) <= SOLVER_TOL:
                pi = cand
    except np.linalg.LinAlgError:
        pass
    if pi is not None:
        return StationaryDistribution(pi=pi, residual=_residual(pi, mat), method="direct")

    cand = np.full(n, 1.0 / n)
    best = np.inf
    for _ in range(POWER_ITER_CAP):
        nxt = cand @ mat
        nxt = nxt / nxt.sum()
        best = float(np.max(np.abs(nxt - cand)))
        cand = nxt
        if best <= SOLVER_TOL:
            break
    res = _residual(cand, mat)
    if res > SOLVER_TOL:
        raise StationaryError(
            "stationary solve failed: the chain may not have a unique stationary "
            f"distribution (best residual {res:.3e})",
            residual=res,
        )
    return StationaryDistribution(pi=cand, residual=res, method="power")


def _residual(pi: np.ndarray, mat: np.ndarray) -> float:
    return float(np.max(np.abs(pi @ mat - pi)))


def _state_tensor(pi: np.ndarray, indexer: JointIndexer) -> np.ndarray:
    return pi.reshape(indexer.state_dims)


def _agent_marginal(pi_tensor: np.ndarray, n_agents: int, i: int) -> np.ndarray:
    """Marginal over (w, z_i, x_i), axes ordered (w, z_i, x_i)."""
    keep = {0, 1 + i, 1 + n_agents + i}
    axes = tuple(ax for ax in range(1 + 2 * n_agents) if ax not in keep)
    return pi_tensor.sum(axis=axes)


def model_from_stationary(spec: GameSpec, pi: np.ndarray) -> ConsistentModel:
    """Conditional signal law per (z_i, x_i) under a given stationary vector."""
    indexer = spec.indexer()
    tensor = _state_tensor(pi, indexer)
    mus = []
    for i, ag in enumerate(spec.agents):
        wzx = _agent_marginal(tensor, spec.n_agents, i)
        mass = wzx.sum(axis=0)
        if mass.min() < MASS_FLOOR:
            z, x = np.unravel_index(int(np.argmin(mass)), mass.shape)
            raise VanishingMassError(
                f"agent {i + 1} state (z={z + 1}, x={x + 1}) has vanishing stationary "
                f"mass {mass[z, x]:.3e}"
            )
        num = np.einsum("wzx,ws->zxs", wzx, ag.signal_kernel)
        mus.append(num / mass[:, :, None])
    return ConsistentModel(mu=tuple(mus))


def consistent_model(spec: GameSpec, sigma) -> ConsistentModel:
    """Each agent's long-run conditional signal frequencies under (spec, sigma)."""
    T = build_joint_transition(spec, sigma)
    pi = stationary_distribution(T).pi
    return model_from_stationary(spec, pi)


def meyer_condition_number(T_ref) -> float:
    """Largest absolute entry of the group inverse of (I - T).

    With A_sharp = (I - T + 1 pi^T)^{-1} - 1 pi^T, any perturbed chain
    satisfies max-norm stationary sensitivity
    ||pi - pi_bar||_inf <= kappa ||T - T_bar||_{r,inf} for kappa returned here.
    """
    mat = _as_matrix(T_ref)
    pi = stationary_distribution(mat).pi
    n = mat.shape[0]
    one_pi = np.outer(np.ones(n), pi)
    try:
        fundamental = np.linalg.inv(np.eye(n) - mat + one_pi)
    except np.linalg.LinAlgError:
        raise StationaryError("fundamental matrix is singular: the chain is not ergodic") from None
    sharp = fundamental - one_pi
    return float(np.max(np.abs(sharp)))


def uncoupled_reference(spec: GameSpec) -> GameSpec:
    """The action-independent game built from the uncoupled kernels."""
    if spec.uncoupled_env is None or any(ag.uncoupled_local is None for ag in spec.agents):
        raise SpecError("uncoupled reference kernels required for the condition number")
    env = np.broadcast_to(
        spec.uncoupled_env, (spec.n_joint_actions, spec.n_env, spec.n_env)
    ).copy()
    agents = []
    for ag in spec.agents:
        local = np.broadcast_to(
            ag.uncoupled_local, (ag.n_actions, *ag.uncoupled_local.shape)
        ).copy()
        agents.append(replace(ag, local_kernels=local))
    return GameSpec(
        n_env=spec.n_env,
        env_kernels=env,
        agents=tuple(agents),
        uncoupled_env=spec.uncoupled_env,
    )


def uniform_strategy(spec: GameSpec) -> tuple[np.ndarray, ...]:
    return tuple(
        np.full((ag.n_memory, ag.n_states, ag.n_actions), 1.0 / ag.n_actions)
        for ag in spec.agents
    )


def chain_diagnostics(spec: GameSpec, sigma) -> ChainDiagnostics:
    """Regularity constants for the bound formulas.

    kappa is computed once on the uncoupled reference chain, which is
    strategy-independent (a uniform profile is used for construction).
    minimal_mass is per agent the smallest stationary (z_i, x_i) marginal
    under the supplied strategy; signal_ceiling is the largest entry of the
    signal kernel.
    """
    ref = uncoupled_reference(spec)
    T_ref = build_joint_transition(ref, uniform_strategy(ref))
    kappa = meyer_condition_number(T_ref)

    T = build_joint_transition(spec, sigma)
    pi = stationary_distribution(T).pi
    tensor = _state_tensor(pi, T.indexer)
    masses = []
    ceilings = []
    for i, ag in enumerate(spec.agents):
        wzx = _agent_marginal(tensor, spec.n_agents, i)
        masses.append(float(wzx.sum(axis=0).min()))
        ceilings.append(float(ag.signal_kernel.max()))
    return ChainDiagnostics(
        kappa=kappa, minimal_mass=tuple(masses), signal_ceiling=tuple(ceilings)
    )
