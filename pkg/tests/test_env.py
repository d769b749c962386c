import itertools
import math

import numpy as np
import pytest
import torch
from helpers import expected_legal, random_legal_rollout

from pomo.env import (
    cvrp_return,
    cvrp_violations,
    format_trajectory,
    kp_return,
    make_env,
    parse_trajectory,
    problem_from_instances,
    problem_to_instances,
    score_instance,
    tsp_return,
)
from pomo.errors import ContractViolation
from pomo.instances import CvrpInstance, KpInstance, TspInstance, generate_cvrp, generate_kp, generate_tsp, instance_rng
from pomo.oracle import brute_force_tsp, kp_exact


def env_for(*instances):
    return make_env(problem_from_instances(list(instances)))


# -- reset -------------------------------------------------------------------

def test_reset_tsp20_all_starts():
    env = env_for(generate_tsp(20, instance_rng(0, 0)))
    state = env.reset(torch.arange(20))
    assert state.current.shape == (1, 20)
    assert torch.equal(state.visited.sum(-1), torch.ones(1, 20, dtype=torch.long))
    assert torch.equal(state.first[0], torch.arange(20))


def test_reset_cvrp_capacity():
    inst = CvrpInstance([0, 0], [[0.1, 0.1], [0.2, 0.2]], [0.1, 0.3])
    state = env_for(inst).reset(torch.tensor([1, 2]))
    assert state.capacity[0].tolist() == pytest.approx([0.9, 0.7])


def test_reset_kp_capacity():
    inst = KpInstance([[0.4, 0.5], [0.3, 0.3]], 12.5)
    state = env_for(inst).reset(torch.tensor([0]))
    assert float(state.capacity[0, 0]) == pytest.approx(12.1)


@pytest.mark.parametrize("starts", [[0, 0], [0, 20], [-1], []])
def test_reset_rejects_bad_starts(starts):
    env = env_for(generate_tsp(20, instance_rng(0, 0)))
    with pytest.raises(ContractViolation):
        env.reset(torch.tensor(starts, dtype=torch.long))


def test_reset_cvrp_rejects_depot_start():
    env = env_for(generate_cvrp(5, instance_rng(0, 0)))
    with pytest.raises(ContractViolation):
        env.reset(torch.tensor([0]))


def test_per_instance_starts():
    env = env_for(generate_tsp(5, instance_rng(0, 0)), generate_tsp(5, instance_rng(0, 1)))
    state = env.reset(torch.tensor([[0, 1], [3, 4]]))
    assert state.first.tolist() == [[0, 1], [3, 4]]


# -- masks -------------------------------------------------------------------

def test_tsp_mask_counts():
    env = env_for(generate_tsp(8, instance_rng(1, 0)))
    state = env.reset(torch.arange(8))
    rng = np.random.default_rng(0)
    for t in range(1, 8):
        legal = env.legal_mask(state)
        assert torch.equal(legal.sum(-1), torch.full((1, 8), 8 - t))
        choice = torch.tensor([[int(rng.choice(np.flatnonzero(row))) for row in legal[0].numpy()]])
        state = env.step(state, choice)
    assert state.all_done


def test_cvrp_only_depot_when_nothing_fits():
    inst = CvrpInstance([0.5, 0.5], [[0.1, 0.1], [0.2, 0.2], [0.3, 0.3]], [0.95, 0.1, 0.2])
    env = env_for(inst)
    state = env.reset(torch.tensor([1]))  # remaining 0.05
    assert env.legal_mask(state)[0, 0].tolist() == [True, False, False, False]
    state = env.step(state, torch.tensor([[0]]))
    assert float(state.capacity[0, 0]) == 1.0
    # right after a depot visit with servable customers the depot is illegal
    assert env.legal_mask(state)[0, 0].tolist() == [False, False, True, True]


def test_kp_mask_example():
    inst = KpInstance([[0.7, 0.1], [0.2, 0.3], [0.5, 0.4]], 1.0)
    env = env_for(inst)
    state = env.reset(torch.tensor([0]))  # remaining 0.3
    assert env.legal_mask(state)[0, 0].tolist() == [False, True, False, False]
    state = env.step(state, torch.tensor([[1]]))
    assert state.all_done
    assert env.legal_mask(state)[0, 0].tolist() == [False, False, False, True]


def test_illegal_step_names_the_culprit():
    env = env_for(generate_tsp(5, instance_rng(0, 0)))
    state = env.reset(torch.tensor([0, 1]))
    with pytest.raises(ContractViolation, match="trajectory 1"):
        env.step(state, torch.tensor([[2, 1]]))
    with pytest.raises(ContractViolation):
        env.step(state, torch.tensor([[7, 2]]))


@pytest.mark.parametrize("kind", ["tsp", "cvrp", "kp"])
def test_mask_matches_reference_rules_on_random_walks(kind):
    rng = np.random.default_rng(4)
    gen = {"tsp": generate_tsp, "cvrp": generate_cvrp, "kp": lambda m, r: generate_kp(m, r, capacity=2.0)}[kind]
    for i in range(20):
        inst = gen(7, instance_rng(99, i))
        env = env_for(inst)
        start = 1 if kind == "cvrp" else 0
        state = env.reset(torch.tensor([start]))
        while not state.all_done:
            hist = state.action_tensor()[0, 0].tolist()
            legal = env.legal_mask(state)[0, 0].tolist()
            assert legal == expected_legal(inst, hist)
            state = env.step(state, torch.tensor([[int(rng.choice(np.flatnonzero(legal)))]]))


# -- step and padding ----------------------------------------------------------

def test_cvrp_padding_after_done():
    inst = CvrpInstance([0, 0], [[0, 1], [1, 0]], [0.5, 0.5])
    env = env_for(inst)
    # trajectory 0 finishes in one trip; trajectory 1 needs the same number of steps
    state = env.reset(torch.tensor([1, 2]))
    for acts in ([[2, 1]], [[0, 0]]):
        state = env.step(state, torch.tensor(acts))
    assert state.all_done
    assert env.legal_mask(state)[0].tolist() == [[True, False, False], [True, False, False]]
    before = env.returns(state).clone()
    state = state.add_logprob(torch.full((1, 2), -3.0), state.done)
    state = env.step(state, torch.tensor([[0, 0]]))
    assert torch.equal(state.logprob, torch.zeros(1, 2))
    assert torch.equal(env.returns(state), before)


def test_kp_pad_item_adds_no_value():
    inst = KpInstance([[0.3, 0.5], [0.4, 0.2]], 1.0)
    assert kp_return(inst, [0, 1]) == pytest.approx(0.7)
    assert kp_return(inst, [0, 1, 2, 2, 2]) == kp_return(inst, [0, 1])
    env = env_for(inst)
    acts = torch.tensor([[[0, 1], [0, 1]]])
    padded = torch.tensor([[[0, 1, 2, 2], [0, 1, 2, 2]]])
    assert torch.equal(env.score(acts), env.score(padded))


def test_equal_length_batches():
    inst = generate_cvrp(10, instance_rng(3, 0))
    env = env_for(inst)
    state = env.reset(torch.arange(1, 11))
    gen = torch.Generator().manual_seed(0)
    while not state.all_done:
        legal = env.legal_mask(state).double()
        a = torch.multinomial(legal[0], 1, generator=gen).T
        state = env.step(state, a)
    acts = state.action_tensor()
    assert acts.shape[:2] == (1, 10)
    for row in acts[0].tolist():
        assert cvrp_violations(inst, row) == []


# -- returns -------------------------------------------------------------------

def test_tsp_square():
    inst = TspInstance([[0, 0], [1, 0], [1, 1], [0, 1]])
    assert tsp_return(inst, [0, 1, 2, 3]) == pytest.approx(-4.0)
    env = env_for(inst)
    assert float(env.score(torch.tensor([[[0, 1, 2, 3]]]))) == pytest.approx(-4.0)


def test_tsp_return_rejects_non_permutation():
    inst = TspInstance([[0, 0], [1, 0], [1, 1]])
    with pytest.raises(ContractViolation):
        tsp_return(inst, [0, 1, 1])


def test_tsp_rotation_symmetry(rng):
    inst = generate_tsp(12, instance_rng(1, 1))
    perm = list(rng.permutation(12))
    r0 = tsp_return(inst, perm)
    for k in range(12):
        assert tsp_return(inst, perm[k:] + perm[:k]) == pytest.approx(r0, abs=1e-12)
        assert tsp_return(inst, (perm[k:] + perm[:k])[::-1]) == pytest.approx(r0, abs=1e-12)


def test_tsp7_optimum_matches_brute_force():
    for i in range(5):
        inst = generate_tsp(7, instance_rng(21, i))
        best = max(tsp_return(inst, (0,) + p) for p in itertools.permutations(range(1, 7)))
        res = brute_force_tsp(inst)
        assert tsp_return(inst, res.certificate) == pytest.approx(best, abs=1e-12)


def test_cvrp_out_and_back():
    inst = CvrpInstance([0, 0], [[0.5, 0.5]], [0.2])
    assert cvrp_return(inst, [1]) == pytest.approx(-math.sqrt(2))
    assert cvrp_return(inst, [1, 0]) == pytest.approx(-math.sqrt(2))


def test_cvrp_extra_depot_visit_never_helps(rng):
    for i in range(20):
        inst = generate_cvrp(6, instance_rng(30, i), demand_scale=60)  # one trip fits all
        route = list(rng.permutation(np.arange(1, 7)))
        k = int(rng.integers(1, 6))
        split = route[:k] + [0] + route[k:]
        assert cvrp_return(inst, split) <= cvrp_return(inst, route) + 1e-12


def test_cvrp_violation_names_segment():
    inst = CvrpInstance([0, 0], [[0, 1], [1, 0], [1, 1]], [0.5, 0.4, 0.3])
    probs = cvrp_violations(inst, [1, 2, 3])
    assert any("segment 0" in p for p in probs)
    with pytest.raises(ContractViolation, match="segment 0"):
        cvrp_return(inst, [1, 2, 3])
    assert cvrp_violations(inst, [1, 2, 0, 3]) == []
    assert cvrp_violations(inst, [1, 2]) != []  # customer 3 missing
    assert cvrp_violations(inst, [1, 1, 0, 2, 3]) != []


def _walk_checker(inst, actions):
    # independent validator: walk the route with explicit load bookkeeping
    load, seen = 0.0, set()
    for a in actions:
        if a == 0:
            load = 0.0
            continue
        if a in seen:
            return False
        seen.add(a)
        load += inst.demands[a - 1]
        if load > inst.capacity + 1e-9:
            return False
    return seen == set(range(1, inst.size + 1))


def test_cvrp8_feasibility_matches_independent_checker(rng):
    for i in range(300):
        inst = generate_cvrp(8, instance_rng(8, i), demand_scale=30)
        acts = list(rng.permutation(np.arange(1, 9)))
        for _ in range(int(rng.integers(0, 4))):
            acts.insert(int(rng.integers(0, len(acts) + 1)), 0)
        if rng.random() < 0.2:
            acts[int(rng.integers(len(acts)))] = int(rng.integers(1, 9))
        assert (cvrp_violations(inst, acts) == []) == _walk_checker(inst, acts)


def test_kp_overweight_rejected():
    inst = KpInstance([[0.6, 0.5], [0.6, 0.2]], 1.0)
    with pytest.raises(ContractViolation):
        kp_return(inst, [0, 1])
    with pytest.raises(ContractViolation):
        kp_return(inst, [0, 0])


def test_kp12_optimal_value_matches_oracle():
    for i in range(20):
        inst = generate_kp(12, instance_rng(12, i), capacity=3.0)
        res = kp_exact(inst)
        assert kp_return(inst, res.certificate) == pytest.approx(res.score, abs=1e-12)


def test_random_rollouts_score_like_standalone(rng):
    for kind, gen in (("tsp", generate_tsp), ("cvrp", generate_cvrp), ("kp", lambda m, r: generate_kp(m, r, capacity=2.0))):
        for i in range(10):
            inst = gen(9, instance_rng(77, i))
            env = env_for(inst)
            start = 1 if kind == "cvrp" else 0
            acts = random_legal_rollout(env, inst, rng, start)
            env_ret = float(env.score(torch.tensor([[acts]])))
            assert env_ret == pytest.approx(score_instance(inst, acts), abs=1e-9)


def test_problem_round_trip():
    insts = [generate_cvrp(6, instance_rng(2, i)) for i in range(3)]
    back = problem_to_instances(problem_from_instances(insts))
    for a, b in zip(insts, back):
        assert np.array_equal(a.locations, b.locations) and np.array_equal(a.demands, b.demands)


def test_trajectory_dump_round_trip():
    line = format_trajectory(7, [3, 1, 0, 2], -2.5)
    assert line == "7; 3; 3,1,0,2; -2.5"
    assert parse_trajectory(line) == (7, [3, 1, 0, 2], -2.5)
    with pytest.raises(ValueError):
        parse_trajectory("1; 2; 3,4")
    with pytest.raises(ValueError):
        parse_trajectory("1; 2; 3,4; 0.5")
