"""Batched rollout environments.

A rollout advances ``N`` trajectories for each of ``B`` instances at once.
State tensors are shaped ``(B, N, ...)``; action indices follow the layout of
:class:`Problem`:

* tsp:  actions ``0..M-1`` are nodes.
* cvrp: action ``0`` is the depot, ``1..M`` are customers.
* kp:   actions ``0..M-1`` are items, action ``M`` is the zero-weight,
  zero-value pad item.

Finished trajectories keep taking the pad action (depot stay / pad item) with
probability 1 until the whole batch is done, so every trajectory in a batch
has the same length.

Returns are always recomputed from the full action sequence in float64, so
they do not depend on the dtype the policy runs in.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from pomo.errors import ContractViolation
from pomo.instances import CvrpInstance, KpInstance, ProblemInstance, TspInstance

EPS = 1e-9


@dataclass
class Problem:
    """``B`` same-size instances of one kind, stored as float64 tensors."""

    kind: str
    locs: Tensor  # (B, n_nodes, 2); kp: (weight, value) per item
    demands: Tensor | None = None  # cvrp only: (B, M+1), depot demand 0
    capacity: Tensor | None = None  # kp: (B,), cvrp: vehicle capacity (B,)

    @property
    def batch_size(self) -> int:
        return self.locs.shape[0]

    @property
    def size(self) -> int:
        """Customer / node / item count ``M``."""
        n = self.locs.shape[1]
        return n - 1 if self.kind == "cvrp" else n

    @property
    def n_actions(self) -> int:
        return self.size + 1 if self.kind in ("cvrp", "kp") else self.size

    @property
    def start_candidates(self) -> Tensor:
        """Every legal first action: all nodes (tsp), customers (cvrp), items (kp)."""
        if self.kind == "cvrp":
            return torch.arange(1, self.size + 1)
        return torch.arange(self.size)

    def index(self, idx) -> "Problem":
        return Problem(
            self.kind,
            self.locs[idx],
            None if self.demands is None else self.demands[idx],
            None if self.capacity is None else self.capacity[idx],
        )

    def repeat(self, times: int) -> "Problem":
        """Tile the batch ``times`` times along dim 0 (block-major)."""
        return Problem(
            self.kind,
            self.locs.repeat(times, 1, 1),
            None if self.demands is None else self.demands.repeat(times, 1),
            None if self.capacity is None else self.capacity.repeat(times),
        )


def problem_from_instances(instances: Sequence[ProblemInstance]) -> Problem:
    if not instances:
        raise ValueError("need at least one instance")
    kind = instances[0].kind
    if any(inst.kind != kind for inst in instances):
        raise ValueError("cannot batch instances of different kinds")
    if len({inst.size for inst in instances}) != 1:
        raise ValueError("cannot batch instances of different sizes")
    if kind == "tsp":
        locs = np.stack([inst.coords for inst in instances])
        return Problem(kind, torch.from_numpy(locs))
    if kind == "cvrp":
        locs = np.stack([inst.locations for inst in instances])
        dem = np.stack([np.concatenate([[0.0], inst.demands]) for inst in instances])
        cap = np.array([inst.capacity for inst in instances])
        return Problem(kind, torch.from_numpy(locs), torch.from_numpy(dem), torch.from_numpy(cap))
    items = np.stack([inst.items for inst in instances])
    cap = np.array([inst.capacity for inst in instances])
    return Problem(kind, torch.from_numpy(items), capacity=torch.from_numpy(cap))


def problem_to_instances(problem: Problem) -> list:
    locs = problem.locs.detach().cpu().numpy()
    if problem.kind == "tsp":
        return [TspInstance(x) for x in locs]
    if problem.kind == "cvrp":
        dem = problem.demands.cpu().numpy()
        cap = problem.capacity.cpu().numpy()
        return [CvrpInstance(x[0], x[1:], d[1:], capacity=c) for x, d, c in zip(locs, dem, cap)]
    cap = problem.capacity.cpu().numpy()
    return [KpInstance(x, c) for x, c in zip(locs, cap)]


@dataclass
class RolloutBatch:
    """State of ``N`` parallel trajectories on each of ``B`` instances."""

    current: Tensor  # (B, N) last action; cvrp starts at the depot (0)
    first: Tensor  # (B, N) first action, -1 before any step
    visited: Tensor  # (B, N, A) bool; depot / pad columns stay False
    capacity: Tensor  # (B, N) float64 remaining capacity (cvrp, kp)
    done: Tensor  # (B, N) bool
    logprob: Tensor  # (B, N) sum of log-probabilities of decoder-chosen actions
    actions: list = field(default_factory=list)  # t tensors of shape (B, N)

    @property
    def t(self) -> int:
        return len(self.actions)

    @property
    def all_done(self) -> bool:
        return bool(self.done.all())

    def action_tensor(self) -> Tensor:
        if not self.actions:
            return self.current.new_zeros(self.current.shape + (0,))
        return torch.stack(self.actions, dim=-1)

    def add_logprob(self, step_logprob: Tensor, was_done: Tensor) -> "RolloutBatch":
        """Accumulate; trajectories already finished before the step stay frozen."""
        inc = torch.where(was_done, torch.zeros_like(step_logprob), step_logprob)
        return replace(self, logprob=self.logprob + inc)


class Env:
    """Transition rules for one :class:`Problem` batch.

    Use :func:`make_env` to get the subclass for a problem kind.
    """

    kind = ""

    def __init__(self, problem: Problem):
        if problem.kind != self.kind:
            raise ValueError(f"{type(self).__name__} cannot run a {problem.kind} problem")
        self.problem = problem
        self.M = problem.size
        self.A = problem.n_actions
        self.B = problem.batch_size

    # -- state construction ------------------------------------------------

    def _full_capacity(self) -> Tensor:
        if self.problem.capacity is None:
            return torch.zeros(self.B, dtype=torch.float64)
        return self.problem.capacity.to(torch.float64)

    def initial(self, n: int, logprob_dtype=torch.float32) -> RolloutBatch:
        """State before any action. START-token decoding begins here."""
        long = dict(dtype=torch.long)
        return RolloutBatch(
            current=torch.full((self.B, n), self._start_position(), **long),
            first=torch.full((self.B, n), -1, **long),
            visited=torch.zeros(self.B, n, self.A, dtype=torch.bool),
            capacity=self._full_capacity()[:, None].expand(self.B, n).clone(),
            done=torch.zeros(self.B, n, dtype=torch.bool),
            logprob=torch.zeros(self.B, n, dtype=logprob_dtype),
        )

    def _start_position(self) -> int:
        return 0

    def reset(self, start_nodes, logprob_dtype=torch.float32) -> RolloutBatch:
        """Apply ``start_nodes`` as the first action of each trajectory.

        ``start_nodes`` is either ``(N,)`` (shared by all instances) or ``(B, N)``.
        """
        starts = torch.as_tensor(start_nodes, dtype=torch.long)
        if starts.ndim == 1:
            starts = starts[None, :].expand(self.B, -1)
        if starts.ndim != 2 or starts.shape[0] != self.B:
            raise ContractViolation(f"start_nodes must be (N,) or (B, N); got {tuple(starts.shape)}")
        n = starts.shape[1]
        if n == 0:
            raise ContractViolation("need at least one start node")
        if bool(((starts < 0) | (starts >= self.A)).any()):
            raise ContractViolation(f"start node out of range 0..{self.A - 1}")
        srt = starts.sort(dim=1).values
        if n > 1 and bool((srt[:, 1:] == srt[:, :-1]).any()):
            raise ContractViolation("duplicate start nodes")
        state = self.initial(n, logprob_dtype)
        return self.step(state, starts)

    # -- rules ---------------------------------------------------------------

    def legal_mask(self, state: RolloutBatch) -> Tensor:
        raise NotImplementedError

    def _advance(self, state: RolloutBatch, actions: Tensor) -> RolloutBatch:
        raise NotImplementedError

    def step(self, state: RolloutBatch, actions: Tensor) -> RolloutBatch:
        actions = torch.as_tensor(actions, dtype=torch.long)
        if actions.shape != state.current.shape:
            raise ContractViolation(
                f"expected actions of shape {tuple(state.current.shape)}, got {tuple(actions.shape)}"
            )
        if bool(((actions < 0) | (actions >= self.A)).any()):
            raise ContractViolation(f"action out of range 0..{self.A - 1}")
        legal = self.legal_mask(state)
        ok = legal.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
        if not bool(ok.all()):
            b, i = (~ok).nonzero()[0].tolist()
            raise ContractViolation(
                f"illegal action {int(actions[b, i])} for instance {b}, trajectory {i} at step {state.t + 1}"
            )
        new = self._advance(state, actions)
        new.actions = state.actions + [actions]
        return new

    def _mark(self, visited: Tensor, actions: Tensor, clear: int | None) -> Tensor:
        out = visited.scatter(-1, actions.unsqueeze(-1), True)
        if clear is not None:
            out[..., clear] = False
        return out

    # -- scoring ---------------------------------------------------------------

    def score(self, actions: Tensor) -> Tensor:
        """float64 return of each action sequence ``(B, N, T) -> (B, N)``."""
        raise NotImplementedError

    def returns(self, state: RolloutBatch) -> Tensor:
        return self.score(state.action_tensor())


def _path_length(locs: Tensor, path: Tensor) -> Tensor:
    """Length of open paths. ``locs`` (B, n, 2), ``path`` (B, N, T) -> (B, N)."""
    B, N, T = path.shape
    idx = path.reshape(B, N * T, 1).expand(-1, -1, 2)
    pts = locs.gather(1, idx).reshape(B, N, T, 2)
    return (pts[:, :, 1:] - pts[:, :, :-1]).norm(dim=-1).sum(-1)


class TspEnv(Env):
    kind = "tsp"

    def legal_mask(self, state):
        return ~state.visited

    def _advance(self, state, actions):
        visited = self._mark(state.visited, actions, None)
        first = actions if state.t == 0 else state.first
        done = visited.all(-1)
        return replace(state, current=actions, first=first, visited=visited, done=done)

    def score(self, actions):
        closed = torch.cat([actions, actions[..., :1]], dim=-1)
        return -_path_length(self.problem.locs.to(torch.float64), closed)


class CvrpEnv(Env):
    kind = "cvrp"

    def legal_mask(self, state):
        demand = self.problem.demands[:, None, 1:]  # (B, 1, M)
        fits = demand <= state.capacity.unsqueeze(-1) + EPS
        customers = ~state.visited[..., 1:] & fits
        at_depot = state.current == 0
        depot = ~(at_depot & customers.any(-1))
        customers = customers & ~state.done.unsqueeze(-1)
        depot = depot | state.done
        return torch.cat([depot.unsqueeze(-1), customers], dim=-1)

    def _advance(self, state, actions):
        demand = self.problem.demands.gather(1, actions)
        full = self._full_capacity()[:, None].expand_as(state.capacity)
        at_depot = actions == 0
        capacity = torch.where(at_depot, full, state.capacity - demand)
        visited = self._mark(state.visited, actions, clear=0)
        first = actions if state.t == 0 else state.first
        done = visited[..., 1:].all(-1) & at_depot
        return replace(state, current=actions, first=first, visited=visited, capacity=capacity, done=done)

    def score(self, actions):
        B, N, _ = actions.shape
        depot = actions.new_zeros(B, N, 1)
        path = torch.cat([depot, actions, depot], dim=-1)
        return -_path_length(self.problem.locs.to(torch.float64), path)


class KpEnv(Env):
    kind = "kp"

    def _start_position(self) -> int:
        return self.M  # "last action" placeholder: the pad item

    def _items_legal(self, visited, capacity):
        weight = self.problem.locs[:, None, :, 0]  # (B, 1, M)
        return ~visited[..., : self.M] & (weight <= capacity.unsqueeze(-1) + EPS)

    def legal_mask(self, state):
        items = self._items_legal(state.visited, state.capacity)
        pad = ~items.any(-1)
        return torch.cat([items, pad.unsqueeze(-1)], dim=-1)

    def _advance(self, state, actions):
        is_item = actions < self.M
        weights = torch.cat([self.problem.locs[..., 0], self.problem.locs.new_zeros(self.B, 1)], dim=1)
        w = weights.gather(1, actions)
        capacity = state.capacity - torch.where(is_item, w, torch.zeros_like(w))
        visited = self._mark(state.visited, actions, clear=self.M)
        first = actions if state.t == 0 else state.first
        done = ~self._items_legal(visited, capacity).any(-1)
        return replace(state, current=actions, first=first, visited=visited, capacity=capacity, done=done)

    def score(self, actions):
        B, N, T = actions.shape
        values = torch.cat([self.problem.locs[..., 1], self.problem.locs.new_zeros(B, 1)], dim=1)
        picked = values.to(torch.float64).gather(1, actions.reshape(B, N * T)).reshape(B, N, T)
        return picked.sum(-1)


ENVS = {"tsp": TspEnv, "cvrp": CvrpEnv, "kp": KpEnv}


def make_env(problem: Problem) -> Env:
    return ENVS[problem.kind](problem)


# --------------------------------------------------------------------------
# standalone float64 scoring and validation (independent of the tensor env)

def tsp_return(instance: TspInstance, actions) -> float:
    perm = [int(a) for a in actions]
    m = instance.size
    if sorted(perm) != list(range(m)):
        raise ContractViolation(f"TSP tour must be a permutation of 0..{m - 1}")
    pts = instance.coords[perm]
    closed = np.vstack([pts, pts[:1]])
    return -float(np.sqrt(((closed[1:] - closed[:-1]) ** 2).sum(axis=1)).sum())


def cvrp_violations(instance: CvrpInstance, actions) -> list:
    """Every problem with a CVRP route, as human-readable strings (empty when feasible).

    ``actions`` uses env indexing (0 = depot). Leading/trailing depot visits are implicit.
    """
    route = [int(a) for a in actions]
    m = instance.size
    problems = []
    bad = [a for a in route if a < 0 or a > m]
    if bad:
        return [f"node index out of range: {bad[0]}"]
    served = [a for a in route if a != 0]
    missing = sorted(set(range(1, m + 1)) - set(served))
    if missing:
        problems.append(f"customers never visited: {missing}")
    seen = set()
    for a in served:
        if a in seen:
            problems.append(f"customer {a} visited more than once")
        seen.add(a)
    load, segment, seg_start = 0.0, 0, 0
    for pos, a in enumerate(route + [0]):
        if a == 0:
            if load > instance.capacity + EPS:
                problems.append(
                    f"segment {segment} (actions {seg_start}..{pos - 1}) carries {load:.6g} > capacity {instance.capacity:g}"
                )
            load, segment, seg_start = 0.0, segment + 1, pos + 1
        else:
            load += instance.demands[a - 1]
    return problems


def cvrp_return(instance: CvrpInstance, actions) -> float:
    problems = cvrp_violations(instance, actions)
    if problems:
        raise ContractViolation("infeasible CVRP route: " + "; ".join(problems))
    locs = instance.locations
    path = [0] + [int(a) for a in actions] + [0]
    pts = locs[path]
    return -float(np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(axis=1)).sum())


def kp_return(instance: KpInstance, actions) -> float:
    m = instance.size
    chosen = [int(a) for a in actions if int(a) != m]
    if any(a < 0 or a > m for a in chosen):
        raise ContractViolation("item index out of range")
    if len(set(chosen)) != len(chosen):
        raise ContractViolation("an item was selected more than once")
    weight = float(instance.weights[chosen].sum()) if chosen else 0.0
    if weight > instance.capacity + EPS:
        raise ContractViolation(f"selected weight {weight:.6g} exceeds capacity {instance.capacity:g}")
    return float(instance.values[chosen].sum()) if chosen else 0.0


def score_instance(instance: ProblemInstance, actions) -> float:
    """Dispatch to the float64 scorer for ``instance.kind``."""
    return {"tsp": tsp_return, "cvrp": cvrp_return, "kp": kp_return}[instance.kind](instance, actions)


# --------------------------------------------------------------------------
# trajectory dump: "instance_id; start_node; a_1,...,a_T; return"

def format_trajectory(instance_id: int, actions: Sequence[int], ret: float) -> str:
    acts = [int(a) for a in actions]
    return f"{instance_id}; {acts[0]}; {','.join(map(str, acts))}; {ret!r}"


def parse_trajectory(line: str) -> tuple:
    parts = [p.strip() for p in line.split(";")]
    if len(parts) != 4:
        raise ValueError(f"expected 4 ';'-separated fields, got {len(parts)}")
    acts = [int(a) for a in parts[2].split(",")] if parts[2] else []
    if acts and acts[0] != int(parts[1]):
        raise ValueError("start node does not match the first action")
    return int(parts[0]), acts, float(parts[3])
