"""Policy-gradient training.

``train_epoch_pomo`` samples one trajectory per start node for every instance
and uses the mean return over those trajectories as a shared baseline.
``train_epoch_am_baseline`` is the single-trajectory START-token recipe whose
baseline is the greedy rollout of a frozen critic copy, refreshed
unconditionally at the end of every epoch.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from pomo.env import Problem, problem_from_instances
from pomo.errors import ConfigError, NumericError
from pomo.instances import generate
from pomo.model import (
    AttentionPolicy,
    ModelConfig,
    load_checkpoint,
    rollout,
    save_checkpoint,
    start_token_rollout,
)

log = logging.getLogger(__name__)

PRESETS = {
    "desk": {"d_h": 64, "n_layers": 3, "n_heads": 8, "d_ff": 256, "instances_per_epoch": 10_000},
    "paper": {"d_h": 128, "n_layers": 6, "n_heads": 8, "d_ff": 512, "instances_per_epoch": 100_000},
}

LOG_COLUMNS = ("epoch", "mean_return", "baseline_mean", "grad_norm", "seconds", "loss", "frac_beat_baseline", "lr")


@dataclass
class TrainConfig:
    problem: str = "tsp"
    size: int = 20
    algorithm: str = "pomo"  # or "am"
    preset: str = "desk"
    epochs: int = 1
    instances_per_epoch: int | None = None  # None: take it from the preset
    batch_size: int | None = None  # None: 64 for pomo, 256 for am
    starts_per_instance: int | None = None  # None: every legal first action
    lr: float = 1e-4
    weight_decay: float = 1e-6
    lr_decay: float = 0.1
    lr_decay_epoch: int | None = None  # am recipe only; one-time decay
    max_grad_norm: float | None = None
    seed: int = 1234
    checkpoint_every: int = 1
    model: dict = field(default_factory=dict)  # overrides on top of the preset
    problem_args: dict = field(default_factory=dict)  # e.g. {"capacity": 5.0}
    dtype: str = "float32"

    def __post_init__(self):
        if self.algorithm not in ("pomo", "am"):
            raise ConfigError(f"algorithm must be 'pomo' or 'am', got {self.algorithm!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if self.problem not in ("tsp", "cvrp", "kp"):
            raise ConfigError(f"unknown problem {self.problem!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.lr_decay_epoch is not None and self.algorithm != "am":
            raise ConfigError("lr_decay_epoch applies to the am recipe only")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(d)

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 64 if self.algorithm == "pomo" else 256

    @property
    def effective_instances_per_epoch(self) -> int:
        if self.instances_per_epoch is not None:
            return self.instances_per_epoch
        return PRESETS[self.preset]["instances_per_epoch"]

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def model_config(self) -> ModelConfig:
        base = {k: v for k, v in PRESETS[self.preset].items() if k != "instances_per_epoch"}
        base.update(self.model)
        base["kind"] = self.problem
        base["variant"] = "POMO" if self.algorithm == "pomo" else "START_TOKEN"
        return ModelConfig.from_dict(base)


@dataclass
class EpochStats:
    epoch: int
    mean_return: float
    baseline_mean: float
    grad_norm: float
    seconds: float
    loss: float
    frac_beat_baseline: float
    lr: float

    def row(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# baseline and loss

def shared_baseline(returns: Tensor) -> Tensor:
    """Mean return over the trajectories of each instance (last dim)."""
    returns = torch.as_tensor(returns)
    if returns.numel() == 0 or returns.shape[-1] == 0:
        raise ValueError("shared baseline needs at least one return")
    return returns.mean(dim=-1)


def advantages(returns: Tensor) -> Tensor:
    returns = torch.as_tensor(returns)
    return returns - shared_baseline(returns).unsqueeze(-1)


def pomo_loss(logprob_sums: Tensor, returns: Tensor) -> Tensor:
    """``-(1/(B*N)) sum (R - b_shared) * log p``; advantages carry no gradient."""
    if logprob_sums.shape != returns.shape:
        raise ValueError(f"shape mismatch {tuple(logprob_sums.shape)} vs {tuple(returns.shape)}")
    if not bool(torch.isfinite(returns).all()) or not bool(torch.isfinite(logprob_sums).all()):
        raise NumericError("non-finite returns or log-probabilities")
    adv = advantages(returns.detach()).to(logprob_sums.dtype)
    return -(adv * logprob_sums).mean()


def reinforce_loss(logprob: Tensor, returns: Tensor, baseline: Tensor) -> Tensor:
    adv = (returns - baseline).detach().to(logprob.dtype)
    return -(adv * logprob).mean()


# --------------------------------------------------------------------------
# epochs

def _epoch_rngs(seed: int, epoch: int) -> tuple:
    ss = np.random.SeedSequence([seed, 0x545241494E], spawn_key=(epoch,))  # "TRAIN"
    data_ss, sample_ss = ss.spawn(2)
    data_rng = np.random.Generator(np.random.Philox(data_ss))
    torch_seed = int(sample_ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)
    return data_rng, torch.Generator().manual_seed(torch_seed)


def random_problem(kind: str, m: int, batch: int, rng: np.random.Generator, **overrides) -> Problem:
    return problem_from_instances([generate(kind, m, rng, **overrides) for _ in range(batch)])


def make_optimizer(policy: AttentionPolicy, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(policy.parameters(), lr=config.lr, weight_decay=config.weight_decay)


def _grad_norm(policy) -> float:
    total = 0.0
    for p in policy.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(total)


def _optimizer_step(policy, optimizer, loss, config) -> float:
    optimizer.zero_grad(set_to_none=False)
    if not bool(torch.isfinite(loss)):
        raise NumericError(f"non-finite loss {float(loss.detach())}")
    loss.backward()
    norm = _grad_norm(policy)
    if config.max_grad_norm is not None:
        torch.nn.utils.clip_grad_norm_(policy.parameters(), config.max_grad_norm)
    optimizer.step()
    for name, p in policy.named_parameters():
        if not bool(torch.isfinite(p).all()):
            raise NumericError(
                f"parameter {name} became non-finite after an optimizer step "
                f"(loss={float(loss.detach()):.6g}, grad_norm={norm:.6g})"
            )
    return norm


def _batches(config: TrainConfig):
    total = config.effective_instances_per_epoch
    bs = config.effective_batch_size
    done = 0
    while done < total:
        yield min(bs, total - done)
        done += bs


def _starts(problem: Problem, config: TrainConfig) -> Tensor:
    cand = problem.start_candidates
    n = config.starts_per_instance
    if n is None:
        return cand
    if n > len(cand):
        raise ConfigError(f"starts_per_instance={n} exceeds the {len(cand)} available start nodes")
    return cand[:n]


def train_epoch_pomo(
    policy: AttentionPolicy,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    epoch: int,
    return_hook=None,
) -> EpochStats:
    """One epoch of multi-start training on freshly generated instances.

    ``return_hook`` may replace the sampled return matrix before the loss is
    formed (used by tests to force degenerate advantages).
    """
    policy.train()
    data_rng, gen = _epoch_rngs(config.seed, epoch)
    t0 = time.perf_counter()
    sum_ret = sum_base = sum_loss = sum_norm = 0.0
    n_traj = n_inst = n_batches = 0
    for bs in _batches(config):
        problem = random_problem(config.problem, config.size, bs, data_rng, **config.problem_args)
        out = rollout(policy, problem, _starts(problem, config), mode="sample", generator=gen)
        returns = out.returns if return_hook is None else return_hook(out.returns)
        loss = pomo_loss(out.logprob, returns)
        sum_norm += _optimizer_step(policy, optimizer, loss, config)
        sum_ret += float(returns.sum())
        sum_base += float(shared_baseline(returns).sum())
        sum_loss += float(loss.detach())
        n_traj += returns.numel()
        n_inst += bs
        n_batches += 1
    return EpochStats(
        epoch=epoch,
        mean_return=sum_ret / n_traj,
        baseline_mean=sum_base / n_inst,
        grad_norm=sum_norm / n_batches,
        seconds=time.perf_counter() - t0,
        loss=sum_loss / n_batches,
        frac_beat_baseline=float("nan"),
        lr=optimizer.param_groups[0]["lr"],
    )


def train_epoch_am_baseline(
    policy: AttentionPolicy,
    critic: AttentionPolicy,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    epoch: int,
) -> EpochStats:
    """One epoch of REINFORCE against the critic's greedy rollout.

    The critic is overwritten with the actor's parameters at the end of the
    epoch, whatever their relative performance.
    """
    if not (policy.is_start_token and critic.is_start_token):
        raise ConfigError("the greedy-rollout recipe needs START_TOKEN-variant actor and critic")
    if asdict(policy.config) != asdict(critic.config):
        raise ConfigError("actor and critic configurations differ")
    if config.lr_decay_epoch is not None and epoch == config.lr_decay_epoch:
        for group in optimizer.param_groups:
            group["lr"] = group["lr"] * config.lr_decay
    policy.train()
    critic.eval()
    data_rng, gen = _epoch_rngs(config.seed, epoch)
    t0 = time.perf_counter()
    sum_ret = sum_base = sum_loss = sum_norm = 0.0
    n_inst = n_batches = n_beat = 0
    for bs in _batches(config):
        problem = random_problem(config.problem, config.size, bs, data_rng, **config.problem_args)
        sample = start_token_rollout(policy, problem, mode="sample", generator=gen)
        with torch.no_grad():
            greedy = start_token_rollout(critic, problem, mode="greedy")
        loss = reinforce_loss(sample.logprob, sample.returns, greedy.returns)
        sum_norm += _optimizer_step(policy, optimizer, loss, config)
        sum_ret += float(sample.returns.sum())
        sum_base += float(greedy.returns.sum())
        sum_loss += float(loss.detach())
        n_beat += int((sample.returns > greedy.returns).sum())
        n_inst += bs
        n_batches += 1
    critic.load_state_dict(copy.deepcopy(policy.state_dict()))
    return EpochStats(
        epoch=epoch,
        mean_return=sum_ret / n_inst,
        baseline_mean=sum_base / n_inst,
        grad_norm=sum_norm / n_batches,
        seconds=time.perf_counter() - t0,
        loss=sum_loss / n_batches,
        frac_beat_baseline=n_beat / n_inst,
        lr=optimizer.param_groups[0]["lr"],
    )


# --------------------------------------------------------------------------
# driver

@dataclass
class TrainingRun:
    policy: AttentionPolicy
    optimizer: torch.optim.Optimizer
    critic: AttentionPolicy | None
    config: TrainConfig
    next_epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, config: TrainConfig) -> "TrainingRun":
        policy = AttentionPolicy(config.model_config(), seed=config.seed, dtype=config.torch_dtype)
        critic = copy.deepcopy(policy) if config.algorithm == "am" else None
        return cls(policy, make_optimizer(policy, config), critic, config)

    @classmethod
    def resume(cls, path, config: TrainConfig | None = None) -> "TrainingRun":
        policy, header, optim_state = load_checkpoint(path)
        if config is None:
            config = TrainConfig.from_dict(header["train_config"])
        elif asdict(config.model_config()) != asdict(policy.config):
            raise ConfigError("checkpoint model does not match the training config")
        optimizer = make_optimizer(policy, config)
        if optim_state is not None:
            optimizer.load_state_dict(optim_state)
        critic = None
        if config.algorithm == "am":
            critic = copy.deepcopy(policy)  # the critic is refreshed at every epoch end
        return cls(policy, optimizer, critic, config, next_epoch=header["epoch"] + 1)

    def run_epoch(self) -> EpochStats:
        if self.config.algorithm == "pomo":
            stats = train_epoch_pomo(self.policy, self.optimizer, self.config, self.next_epoch)
        else:
            stats = train_epoch_am_baseline(self.policy, self.critic, self.optimizer, self.config, self.next_epoch)
        self.history.append(stats)
        self.next_epoch += 1
        return stats

    def save(self, path) -> None:
        save_checkpoint(
            path,
            self.policy,
            epoch=self.next_epoch - 1,
            seed=self.config.seed,
            train_config=asdict(self.config),
            optimizer=self.optimizer,
        )


def train(config: TrainConfig, out_dir, resume_from=None, time_budget: float | None = None,
          callback=None) -> TrainingRun:
    """Run ``config.epochs`` epochs (or until ``time_budget`` seconds elapse).

    Writes ``train_log.csv`` and checkpoints ``epoch_XXXX.ckpt`` / ``last.ckpt``
    into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = TrainingRun.resume(resume_from, config) if resume_from else TrainingRun.create(config)
    log_path = out / "train_log.csv"
    new_log = not log_path.exists() or resume_from is None
    start = time.perf_counter()
    with open(log_path, "w" if new_log else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new_log:
            writer.writeheader()
        while run.next_epoch < config.epochs:
            stats = run.run_epoch()
            writer.writerow(stats.row())
            fh.flush()
            log.info(
                "epoch %d  mean_return %.4f  grad_norm %.4g  %.1fs",
                stats.epoch, stats.mean_return, stats.grad_norm, stats.seconds,
            )
            if callback is not None:
                callback(run, stats)
            last = run.next_epoch >= config.epochs
            over_budget = time_budget is not None and time.perf_counter() - start > time_budget
            if last or over_budget or (run.next_epoch % max(1, config.checkpoint_every) == 0):
                run.save(out / f"epoch_{stats.epoch:04d}.ckpt")
                run.save(out / "last.ckpt")
            if over_budget:
                log.info("time budget of %.0fs reached after epoch %d", time_budget, stats.epoch)
                break
    return run
