"""Independent reference rules used to cross-check the tensor environments."""

from dataclasses import replace

import numpy as np
import torch

EPS = 1e-9


def expected_legal(inst, history):
    """Legal next actions after ``history`` (env indexing), derived from the problem rules alone.

    Returns a boolean list of length n_actions. Trajectories that are finished
    may only take the pad action (depot for cvrp, item M for kp).
    """
    kind = inst.kind
    m = inst.size
    if kind == "tsp":
        return [a not in history for a in range(m)]
    if kind == "kp":
        used = set(a for a in history if a != m)
        room = inst.capacity - sum(inst.weights[a] for a in used)
        items = [a not in used and inst.weights[a] <= room + EPS for a in range(m)]
        return items + [not any(items)]
    # cvrp: implicit depot start
    visited = set(a for a in history if a != 0)
    here = history[-1] if history else 0
    load = 0.0
    for a in history:
        load = 0.0 if a == 0 else load + inst.demands[a - 1]
    room = inst.capacity - load
    if len(visited) == m and here == 0:
        return [True] + [False] * m
    cust = [c not in visited and inst.demands[c - 1] <= room + EPS for c in range(1, m + 1)]
    depot = not (here == 0 and any(cust))
    return [depot] + cust


def single(state, n):
    """Trajectory ``n`` of a (1, N) rollout state as its own (1, 1) state."""
    sl = slice(n, n + 1)
    return replace(
        state,
        current=state.current[:, sl],
        first=state.first[:, sl],
        visited=state.visited[:, sl],
        capacity=state.capacity[:, sl],
        done=state.done[:, sl],
        logprob=state.logprob[:, sl],
        actions=[a[:, sl] for a in state.actions],
    )


def stack_states(states):
    """Concatenate (1, 1) states along the trajectory dimension."""
    cat = lambda name: torch.cat([getattr(s, name) for s in states], dim=1)  # noqa: E731
    T = states[0].t
    return replace(
        states[0],
        current=cat("current"),
        first=cat("first"),
        visited=cat("visited"),
        capacity=cat("capacity"),
        done=cat("done"),
        logprob=cat("logprob"),
        actions=[torch.cat([s.actions[t] for s in states], dim=1) for t in range(T)],
    )


def random_legal_rollout(env, inst, rng, start):
    """Uniformly random legal actions until done; returns the action list."""
    state = env.reset(torch.tensor([start]))
    while not state.all_done:
        legal = env.legal_mask(state)[0, 0].numpy()
        a = int(rng.choice(np.flatnonzero(legal)))
        state = env.step(state, torch.tensor([[a]]))
    return state.action_tensor()[0, 0].tolist()
