"""Inference strategies: single greedy, multi-greedy, x8 augmentation, sampling.

All strategies score candidates in float64 on the original instance and keep
the best one; ties go to the earliest candidate. Candidate order for the
augmented mode is augmentation-major (all starts of variant 0, then variant 1,
...), so the identity variant always comes first.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from pomo.env import Problem, make_env, problem_from_instances
from pomo.errors import UnsupportedProblemError
from pomo.instances import CvrpInstance, TspInstance
from pomo.model import AttentionPolicy, rollout, start_token_rollout

# (x, y) -> f(x, y); index 0 is the identity
AUGMENTATIONS = (
    lambda x, y: (x, y),
    lambda x, y: (y, x),
    lambda x, y: (x, 1 - y),
    lambda x, y: (y, 1 - x),
    lambda x, y: (1 - x, y),
    lambda x, y: (1 - y, x),
    lambda x, y: (1 - x, 1 - y),
    lambda x, y: (1 - y, 1 - x),
)

MODES = ("single", "multi", "aug8", "sample")


@dataclass
class InferenceResult:
    best_actions: list
    best_return: float
    candidate_returns: np.ndarray
    mode: str
    seconds: float = 0.0
    start_node: int | None = None

    @property
    def n_candidates(self) -> int:
        return len(self.candidate_returns)


@dataclass
class BatchInference:
    """Best candidates for ``B`` instances at once."""

    best_returns: np.ndarray  # (B,)
    best_actions: list  # B lists
    n_candidates: int
    mode: str
    candidate_returns: np.ndarray = field(default=None)  # (B, n_candidates)


# --------------------------------------------------------------------------
# augmentation

def _map_points(pts: np.ndarray, f) -> np.ndarray:
    x, y = f(pts[..., 0], pts[..., 1])
    return np.stack([x, y], axis=-1)


def _require_routing(kind: str) -> None:
    if kind == "kp":
        raise UnsupportedProblemError("instance augmentation is defined for routing problems only")


def augment8(instance):
    """The 8 unit-square symmetries of a TSP or CVRP instance (depot included)."""
    _require_routing(instance.kind)
    out = []
    for f in AUGMENTATIONS:
        if instance.kind == "tsp":
            out.append(TspInstance(_map_points(instance.coords, f)))
        else:
            out.append(
                CvrpInstance(
                    _map_points(instance.depot, f),
                    _map_points(instance.customers, f),
                    instance.demands.copy(),
                    capacity=instance.capacity,
                    demand_scale=instance.demand_scale,
                )
            )
    out[0] = instance
    return out


def augment_problem(problem: Problem, index: int) -> Problem:
    """Apply augmentation ``index`` to every instance of a batch."""
    _require_routing(problem.kind)
    if index == 0:
        return problem
    x, y = AUGMENTATIONS[index](problem.locs[..., 0], problem.locs[..., 1])
    return Problem(problem.kind, torch.stack([x, y], dim=-1), problem.demands, problem.capacity)


def augment_free(instance, rotation_deg: float = 0.0, translation=(0.0, 0.0), scale: float = 1.0):
    """Rotate, then scale, about (0.5, 0.5), then translate. Results may leave the unit square."""
    _require_routing(instance.kind)
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    th = math.radians(rotation_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    center = np.array([0.5, 0.5])
    shift = np.asarray(translation, dtype=np.float64)

    def f(pts):
        return ((pts - center) @ rot.T) * scale + center + shift

    if instance.kind == "tsp":
        return TspInstance(f(instance.coords))
    return CvrpInstance(
        f(instance.depot[None, :])[0],
        f(instance.customers),
        instance.demands.copy(),
        capacity=instance.capacity,
        demand_scale=instance.demand_scale,
    )


EXTENDED_AUGMENTATION = tuple(
    (rot, scale) for rot in range(0, 360, 15) for scale in (0.95, 1.05)
)


# --------------------------------------------------------------------------
# batched strategies

def _pick(returns: Tensor, actions: Tensor, mode: str) -> BatchInference:
    """``returns`` (B, C), ``actions`` (B, C, T): keep the first best candidate per row."""
    ret = returns.detach().cpu().numpy()
    best = ret.argmax(axis=1)  # first maximum
    acts = actions.cpu().numpy()
    best_actions = [acts[b, best[b]].tolist() for b in range(len(best))]
    return BatchInference(ret[np.arange(len(best)), best], best_actions, ret.shape[1], mode, ret)


def _pad_action(problem: Problem) -> int:
    return problem.size if problem.kind == "kp" else 0


def _pad_cat(actions: list, pad_action: int) -> Tensor:
    """Concatenate (B, C_i, T_i) action tensors along C, padding T with the pad action."""
    T = max(a.shape[-1] for a in actions)
    out = []
    for a in actions:
        if a.shape[-1] < T:
            a = torch.cat([a, a.new_full((*a.shape[:-1], T - a.shape[-1]), pad_action)], dim=-1)
        out.append(a)
    return torch.cat(out, dim=1)


@torch.no_grad()
def batch_single(policy: AttentionPolicy, problem: Problem, generator: torch.Generator) -> tuple:
    """One greedy rollout per instance from a uniformly drawn start; returns (result, starts)."""
    cand = problem.start_candidates
    if policy.is_start_token:
        out = start_token_rollout(policy, problem, mode="greedy")
        return _pick(out.returns, out.actions, "single"), out.actions[:, 0, 0].tolist()
    idx = torch.randint(len(cand), (problem.batch_size,), generator=generator)
    starts = cand[idx].unsqueeze(1)
    out = rollout(policy, problem, starts, mode="greedy")
    return _pick(out.returns, out.actions, "single"), starts[:, 0].tolist()


@torch.no_grad()
def batch_multi_greedy(policy: AttentionPolicy, problem: Problem) -> BatchInference:
    out = rollout(policy, problem, problem.start_candidates, mode="greedy")
    return _pick(out.returns, out.actions, "multi")


@torch.no_grad()
def batch_augmented(policy: AttentionPolicy, problem: Problem) -> BatchInference:
    """Multi-greedy (POMO) or single greedy (START token) on all 8 variants."""
    _require_routing(problem.kind)
    acts = []
    for k in range(len(AUGMENTATIONS)):
        variant = augment_problem(problem, k)
        if policy.is_start_token:
            out = start_token_rollout(policy, variant, mode="greedy")
        else:
            out = rollout(policy, variant, variant.start_candidates, mode="greedy")
        # coordinates change, node indices do not, so rescoring on the original is exact
        acts.append(out.actions)
    actions = _pad_cat(acts, _pad_action(problem))
    returns = make_env(problem).score(actions)
    return _pick(returns, actions, "aug8")


@torch.no_grad()
def batch_sampling(
    policy: AttentionPolicy, problem: Problem, k: int, generator: torch.Generator, mode: str = "sample"
) -> BatchInference:
    """Best of ``k`` sampled rollouts.

    START-token policies sample the first action too. POMO policies cycle
    through start nodes in order (start ``j % n_starts`` for sample ``j``).
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if policy.is_start_token:
        out = start_token_rollout(policy, problem, mode=mode, generator=generator, n=k)
        return _pick(out.returns, out.actions, f"sample:{k}")
    cand = problem.start_candidates
    rets, acts = [], []
    for lo in range(0, k, len(cand)):
        n = min(len(cand), k - lo)
        out = rollout(policy, problem, cand[:n], mode=mode, generator=generator)
        rets.append(out.returns)
        acts.append(out.actions)
    actions = _pad_cat(acts, _pad_action(problem))
    return _pick(torch.cat(rets, dim=1), actions, f"sample:{k}")


# --------------------------------------------------------------------------
# single-instance API

def _as_result(batch: BatchInference, t0: float, start=None) -> InferenceResult:
    return InferenceResult(
        best_actions=batch.best_actions[0],
        best_return=float(batch.best_returns[0]),
        candidate_returns=batch.candidate_returns[0],
        mode=batch.mode,
        seconds=time.perf_counter() - t0,
        start_node=start,
    )


def _generator(rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    if isinstance(rng, np.random.Generator):
        return torch.Generator().manual_seed(int(rng.integers(2**62)))
    return torch.Generator().manual_seed(int(rng))


def infer_single(policy: AttentionPolicy, instance, rng) -> InferenceResult:
    t0 = time.perf_counter()
    batch, starts = batch_single(policy, problem_from_instances([instance]), _generator(rng))
    return _as_result(batch, t0, starts[0])


def infer_multi_greedy(policy: AttentionPolicy, instance) -> InferenceResult:
    t0 = time.perf_counter()
    return _as_result(batch_multi_greedy(policy, problem_from_instances([instance])), t0)


def infer_augmented(policy: AttentionPolicy, instance) -> InferenceResult:
    _require_routing(instance.kind)
    t0 = time.perf_counter()
    return _as_result(batch_augmented(policy, problem_from_instances([instance])), t0)


def infer_sampling(policy: AttentionPolicy, instance, k: int, rng, mode: str = "sample") -> InferenceResult:
    t0 = time.perf_counter()
    batch = batch_sampling(policy, problem_from_instances([instance]), k, _generator(rng), mode=mode)
    return _as_result(batch, t0)
