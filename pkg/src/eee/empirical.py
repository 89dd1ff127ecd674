"""Monte Carlo simulation of the true dynamics and empirical signal models.

Simulation is exact sampling of the generative order: draw the joint action
from the product strategy, the signals from the environment state, update
memories through the memory rule, draw next local states and the next
environment state. Signal counts are conditioned on the (z, x) at which the
signal was observed, so empirical frequencies estimate the same conditional
law the exact solver computes.

Reproducibility: the generator is numpy's default_rng (PCG64). The stream is
consumed in a fixed documented order: one integer for the uniform initial
joint state, then one uniform per step; each step is resolved by inverse CDF
over the full outcome row (joint action, signals, next local states, next
environment state) in lexicographic C order.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .chain_analysis import ConsistentModel, strategy_arrays
from .game_model import GameSpec, SpecError, require_valid

RNG_ALGORITHM = (
    "numpy default_rng PCG64; one integer draw for the initial joint state, then one "
    "uniform per step resolved by inverse CDF over outcomes ordered "
    "(joint action, signals, next local states, next environment), lexicographic C order"
)
TABLE_ENTRY_LIMIT = 5 * 10**6
RECORD_HORIZON_LIMIT = 10**5


@dataclass(frozen=True)
class Trajectory:
    seed: int
    horizon: int
    burn_in: int
    rng_algorithm: str
    visits: tuple[np.ndarray, ...]         # per agent, (Z, X) ints
    signal_counts: tuple[np.ndarray, ...]  # per agent, (Z, X, S) ints
    records: list | None                   # per step (w, z, x, a, s) tuples


@dataclass(frozen=True)
class EmpiricalModel:
    """Observed signal frequencies with binomial standard errors.

    Cells with zero visits carry defined=False and zero frequency; no NaN.
    """

    freq: tuple[np.ndarray, ...]
    stderr: tuple[np.ndarray, ...]
    visits: tuple[np.ndarray, ...]
    defined: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class ComparisonReport:
    max_abs_gap: float
    max_abs_z: float
    gaps: tuple[np.ndarray, ...]
    z_scores: tuple[np.ndarray, ...]
    defined: tuple[np.ndarray, ...]
    n_defined: int


def _outcome_dims(spec: GameSpec) -> tuple[int, ...]:
    return (
        spec.n_joint_actions,
        *(ag.n_signals for ag in spec.agents),
        *(ag.n_states for ag in spec.agents),
        spec.n_env,
    )


def _outcome_block(spec: GameSpec, probs, w_sel, z_sel, x_sel) -> np.ndarray:
    """Joint outcome probabilities for the selected state slices.

    Returns an array over (w, z_1..z_n, x_1..x_n, k, s_1..s_n, X_1..X_n,
    w_next) where k runs over joint actions; selections are index arrays or
    slices applied per component.
    """
    n = spec.n_agents
    letters = string.ascii_lowercase + string.ascii_uppercase
    if 2 + 4 * n > len(letters):
        raise SpecError("too many agents for the outcome builder")
    w, wn = letters[0], letters[1]
    z = [letters[2 + 4 * i] for i in range(n)]
    x = [letters[3 + 4 * i] for i in range(n)]
    s = [letters[4 + 4 * i] for i in range(n)]
    xn = [letters[5 + 4 * i] for i in range(n)]
    subs = [w + wn]
    for i in range(n):
        subs.append(z[i] + x[i])
        subs.append(w + s[i])
        subs.append(x[i] + s[i] + xn[i])
    out = w + "".join(z) + "".join(x) + "".join(s) + "".join(xn) + wn
    expr = ",".join(subs) + "->" + out

    terms = []
    for k, a in enumerate(spec.joint_actions()):
        operands = [spec.env_kernels[k][w_sel]]
        for i, (ai, ag) in enumerate(zip(a, spec.agents)):
            operands.append(probs[i][z_sel[i]][:, x_sel[i], ai])
            operands.append(ag.signal_kernel[w_sel])
            operands.append(ag.local_kernels_4d[ai][x_sel[i]])
        terms.append(np.einsum(expr, *operands, optimize=True))
    return np.stack(terms, axis=1 + 2 * n)


def _full_outcome_table(spec: GameSpec, probs) -> np.ndarray:
    n = spec.n_agents
    w_sel = slice(None)
    z_sel = [slice(None)] * n
    x_sel = [slice(None)] * n
    block = _outcome_block(spec, probs, w_sel, z_sel, x_sel)
    indexer = spec.indexer()
    n_out = int(np.prod(_outcome_dims(spec)))
    return block.reshape(indexer.n_states, n_out)


def _single_outcome_row(spec: GameSpec, probs, psi: tuple[int, ...]) -> np.ndarray:
    n = spec.n_agents
    w, zs, xs = psi[0], psi[1 : 1 + n], psi[1 + n :]
    block = _outcome_block(
        spec,
        probs,
        np.array([w]),
        [np.array([zi]) for zi in zs],
        [np.array([xi]) for xi in xs],
    )
    return block.ravel()


def _state_components(spec: GameSpec):
    """Per flat state: w, z_i, x_i lookup arrays."""
    indexer = spec.indexer()
    grids = np.indices(indexer.state_dims).reshape(len(indexer.state_dims), -1)
    n = spec.n_agents
    return indexer, grids[0], [grids[1 + i] for i in range(n)], [grids[1 + n + i] for i in range(n)]


def _outcome_components(spec: GameSpec):
    """Per flat outcome: joint action index, a_i, s_i, next x_i, next w."""
    dims = _outcome_dims(spec)
    grids = np.indices(dims).reshape(len(dims), -1)
    n = spec.n_agents
    k = grids[0]
    s = [grids[1 + i] for i in range(n)]
    x_next = [grids[1 + n + i] for i in range(n)]
    w_next = grids[1 + 2 * n]
    a_dims = tuple(ag.n_actions for ag in spec.agents)
    a = np.array(np.unravel_index(k, a_dims))
    return k, [a[i] for i in range(n)], s, x_next, w_next


def simulate(
    spec: GameSpec, sigma, horizon: int, seed: int, burn_in: int = 1000
) -> Trajectory:
    """Sample the joint chain for `horizon` steps; count signals after burn_in.

    Deterministic given (spec, sigma, horizon, seed, burn_in). The initial
    joint state is uniform. Per-step records are retained only for horizons
    up to RECORD_HORIZON_LIMIT.
    """
    require_valid(spec)
    if burn_in < 0 or horizon < burn_in:
        raise SpecError(f"need horizon >= burn_in >= 0, got horizon={horizon}, burn_in={burn_in}")
    probs = strategy_arrays(sigma, spec)
    indexer, comp_w, comp_z, comp_x = _state_components(spec)
    n_states = indexer.n_states
    _, out_a, out_s, out_xn, out_wn = _outcome_components(spec)
    n_out = int(np.prod(_outcome_dims(spec)))
    strides = indexer.state_strides

    n = spec.n_agents
    # next flat state per (state, outcome): environment and local parts are
    # state-independent; the memory part goes through the memory rule
    def next_row(psi_flat: int) -> np.ndarray:
        base = out_wn * strides[0]
        for i in range(n):
            z_next = spec.agents[i].memory_rule[comp_z[i][psi_flat], out_s[i]]
            base = base + z_next * strides[1 + i] + out_xn[i] * strides[1 + n + i]
        return base

    rng = np.random.default_rng(seed)
    state = int(rng.integers(n_states))
    u = rng.random(horizon)
    psi_hist = np.empty(horizon, dtype=np.int64)
    out_hist = np.empty(horizon, dtype=np.int64)

    use_table = n_states * n_out <= TABLE_ENTRY_LIMIT
    if use_table:
        table = _full_outcome_table(spec, probs)
        cum = np.cumsum(table, axis=1)
        nxt = np.empty((n_states, n_out), dtype=np.int64)
        for psi in range(n_states):
            nxt[psi] = next_row(psi)
        for t in range(horizon):
            psi_hist[t] = state
            o = int(np.searchsorted(cum[state], u[t], side="right"))
            if o >= n_out:
                o = n_out - 1
            out_hist[t] = o
            state = int(nxt[state, o])
    else:
        cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for t in range(horizon):
            psi_hist[t] = state
            entry = cache.get(state)
            if entry is None:
                row = np.cumsum(_single_outcome_row(spec, probs, indexer.unflatten_state(state)))
                entry = (row, next_row(state))
                cache[state] = entry
            o = int(np.searchsorted(entry[0], u[t], side="right"))
            if o >= n_out:
                o = n_out - 1
            out_hist[t] = o
            state = int(entry[1][o])

    visits = []
    counts = []
    window_psi = psi_hist[burn_in:]
    window_out = out_hist[burn_in:]
    for i, ag in enumerate(spec.agents):
        z_arr = comp_z[i][window_psi]
        x_arr = comp_x[i][window_psi]
        s_arr = out_s[i][window_out]
        flat = (z_arr * ag.n_states + x_arr) * ag.n_signals + s_arr
        c = np.bincount(flat, minlength=ag.n_memory * ag.n_states * ag.n_signals)
        c = c.reshape(ag.n_memory, ag.n_states, ag.n_signals)
        counts.append(c)
        visits.append(c.sum(axis=-1))

    records = None
    if horizon <= RECORD_HORIZON_LIMIT:
        records = [
            (
                int(comp_w[p]),
                tuple(int(comp_z[i][p]) for i in range(n)),
                tuple(int(comp_x[i][p]) for i in range(n)),
                tuple(int(out_a[i][o]) for i in range(n)),
                tuple(int(out_s[i][o]) for i in range(n)),
            )
            for p, o in zip(psi_hist, out_hist)
        ]

    return Trajectory(
        seed=seed,
        horizon=horizon,
        burn_in=burn_in,
        rng_algorithm=RNG_ALGORITHM,
        visits=tuple(visits),
        signal_counts=tuple(counts),
        records=records,
    )


def empirical_model(traj: Trajectory) -> EmpiricalModel:
    """Frequencies counts/visits with binomial standard errors; no NaN."""
    freqs, errs, defined = [], [], []
    for v, c in zip(traj.visits, traj.signal_counts):
        ok = v > 0
        safe = np.where(ok, v, 1)
        f = c / safe[..., None]
        f[~ok] = 0.0
        se = np.sqrt(np.clip(f * (1.0 - f), 0.0, None) / safe[..., None])
        se[~ok] = 0.0
        freqs.append(f)
        errs.append(se)
        defined.append(ok)
    return EmpiricalModel(
        freq=tuple(freqs), stderr=tuple(errs), visits=tuple(traj.visits), defined=tuple(defined)
    )


def compare_models(empirical: EmpiricalModel, exact) -> ComparisonReport:
    """Gap and z-score of observed frequencies against an exact model.

    z uses the exact model's binomial standard error sqrt(mu (1 - mu) / n).
    Where that error is zero, the z-score is 0 for a zero gap and infinite
    otherwise. Undefined cells (zero visits) are excluded from the maxima.
    """
    mus = tuple(getattr(exact, "mu", exact))
    if len(mus) != len(empirical.freq) or any(
        m.shape != f.shape for m, f in zip(mus, empirical.freq)
    ):
        raise SpecError("empirical and exact models have mismatched dimensions")
    gaps, zs = [], []
    max_gap = 0.0
    max_z = 0.0
    n_defined = 0
    for f, v, ok, m in zip(empirical.freq, empirical.visits, empirical.defined, mus):
        gap = np.abs(f - m)
        se = np.sqrt(np.clip(m * (1.0 - m), 0.0, None) / np.where(v > 0, v, 1)[..., None])
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, gap / se, np.where(gap > 0, np.inf, 0.0))
        gap = np.where(ok[..., None], gap, np.nan)
        z = np.where(ok[..., None], z, np.nan)
        gaps.append(gap)
        zs.append(z)
        if ok.any():
            max_gap = max(max_gap, float(np.nanmax(gap)))
            max_z = max(max_z, float(np.nanmax(z)))
        n_defined += int(ok.sum()) * f.shape[-1]
    return ComparisonReport(
        max_abs_gap=max_gap,
        max_abs_z=max_z,
        gaps=tuple(gaps),
        z_scores=tuple(zs),
        defined=tuple(empirical.defined),
        n_defined=n_defined,
    )
