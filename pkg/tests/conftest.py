"""Shared fixtures: the bundled example game and random valid games."""

import numpy as np
import pytest

from eee.game_model import AgentSpec, GameSpec, build_example1


def row_stochastic(rng, shape):
    """Strictly positive rows, so every chain built from them is ergodic."""
    raw = rng.uniform(0.1, 1.0, size=shape)
    return raw / raw.sum(axis=-1, keepdims=True)


def _recurrent_memory_rule(rng, n_memory, n_signals):
    """Random memory rule whose first signal column cycles through all states.

    Signals have full support everywhere, so the forced cycle keeps every
    memory state reachable and the extracted model free of vanishing mass.
    """
    rule = rng.integers(0, n_memory, size=(n_memory, n_signals))
    rule[:, 0] = (np.arange(n_memory) + 1) % n_memory
    return rule


def random_game(seed, n_agents=2, max_dim=3, coupling=0.2, discount_range=(0.2, 0.8)):
    """A valid game with supplied uncoupled references and dims in [2, max_dim].

    Coupled kernels are convex blends of the uncoupled reference with an
    independent random kernel, so the coupling value stays moderate and all
    entries stay strictly positive.
    """
    rng = np.random.default_rng(seed)
    n_env = int(rng.integers(2, max_dim + 1))
    env_u = row_stochastic(rng, (n_env, n_env))

    agents = []
    for _ in range(n_agents):
        n_states = int(rng.integers(2, max_dim + 1))
        n_actions = int(rng.integers(2, max_dim + 1))
        n_signals = int(rng.integers(2, max_dim + 1))
        n_memory = int(rng.integers(1, max_dim + 1))
        local_u = row_stochastic(rng, (n_states * n_signals, n_states))
        local = np.stack(
            [
                (1.0 - coupling) * local_u
                + coupling * row_stochastic(rng, (n_states * n_signals, n_states))
                for _ in range(n_actions)
            ]
        )
        agents.append(
            AgentSpec(
                n_states=n_states,
                n_actions=n_actions,
                n_signals=n_signals,
                n_memory=n_memory,
                signal_kernel=row_stochastic(rng, (n_env, n_signals)),
                local_kernels=local,
                memory_rule=_recurrent_memory_rule(rng, n_memory, n_signals),
                reward=rng.uniform(-1.0, 1.0, size=(n_states, n_actions, n_signals)),
                discount=float(rng.uniform(*discount_range)),
                uncoupled_local=local_u,
            )
        )

    n_joint = int(np.prod([ag.n_actions for ag in agents]))
    env = np.stack(
        [
            (1.0 - coupling) * env_u + coupling * row_stochastic(rng, (n_env, n_env))
            for _ in range(n_joint)
        ]
    )
    return GameSpec(n_env=n_env, env_kernels=env, agents=tuple(agents), uncoupled_env=env_u)


def random_strategy(rng, spec, deterministic=False):
    out = []
    for ag in spec.agents:
        shape = (ag.n_memory, ag.n_states, ag.n_actions)
        if deterministic:
            probs = np.zeros(shape)
            picks = rng.integers(0, ag.n_actions, size=shape[:2])
            for z in range(ag.n_memory):
                for x in range(ag.n_states):
                    probs[z, x, picks[z, x]] = 1.0
        else:
            probs = row_stochastic(rng, shape)
        out.append(probs)
    return out


def sigma_star(spec):
    """The known equilibrium of the bundled example: agent 1 plays action 2,
    agent 2 plays action 1, in every (z, x)."""
    probs = [np.zeros((ag.n_memory, ag.n_states, ag.n_actions)) for ag in spec.agents]
    probs[0][:, :, 1] = 1.0
    probs[1][:, :, 0] = 1.0
    return probs


@pytest.fixture(scope="session")
def ex1_family():
    return build_example1()


@pytest.fixture(scope="session")
def ex1_spec(ex1_family):
    return ex1_family.at()  # blend weight 0.9


@pytest.fixture(scope="session")
def ex1_greedy_run(ex1_spec):
    from eee.learning import PolicyRule, q_value_iteration

    return q_value_iteration(ex1_spec, PolicyRule("greedy"), tol=1e-9)
