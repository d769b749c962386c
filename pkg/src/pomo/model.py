"""Attention encoder/decoder policy with multi-start (and START-token) decoding.

The encoder is a stack of multi-head self-attention layers without positional
encoding, so node embeddings are permutation-equivariant. The decoder attends
once over the node embeddings (multi-head glimpse), then a single-head pointer
produces clipped logits ``C * tanh(.)`` that are masked and soft-maxed.

Two variants share all weights except the START token:

* ``POMO``: the first action of every trajectory is given (one trajectory per
  start node); decoding begins at step 2 with context
  ``[h_bar, h_last, h_first]``.
* ``START_TOKEN``: the decoder also picks the first action, from context
  ``[h_bar, v_last, v_first]`` where the two vectors are trainable.

CVRP and KP append the remaining capacity to the context.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor, nn

from pomo.env import Env, Problem, RolloutBatch, make_env
from pomo.errors import ConfigError, ContractViolation, NumericError

VARIANTS = ("POMO", "START_TOKEN")


@dataclass
class ModelConfig:
    kind: str = "tsp"
    d_h: int = 128
    n_layers: int = 6
    n_heads: int = 8
    d_ff: int = 512
    logit_clip: float = 10.0
    variant: str = "POMO"

    def __post_init__(self):
        if self.kind not in ("tsp", "cvrp", "kp"):
            raise ConfigError(f"unknown problem kind {self.kind!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d_h % self.n_heads:
            raise ConfigError(f"d_h={self.d_h} is not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self) -> int:
        return self.d_h // self.n_heads

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config key {unknown[0]!r}")
        return cls(**d)


class NodeEmbeddings(NamedTuple):
    h: Tensor  # (B, n_nodes, d_h)
    h_bar: Tensor  # (B, d_h)


class DecoderCache(NamedTuple):
    emb: NodeEmbeddings
    glimpse_k: Tensor  # (B, H, n_nodes, d_k)
    glimpse_v: Tensor  # (B, H, n_nodes, d_k)
    logit_k: Tensor  # (B, n_nodes, d_h)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_h: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_k = d_h // n_heads
        self.W_q = nn.Linear(d_h, d_h, bias=False)
        self.W_k = nn.Linear(d_h, d_h, bias=False)
        self.W_v = nn.Linear(d_h, d_h, bias=False)
        self.W_o = nn.Linear(d_h, d_h)

    def _heads(self, x: Tensor) -> Tensor:
        B, n, _ = x.shape
        return x.view(B, n, self.n_heads, self.d_k).transpose(1, 2)

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = self._heads(self.W_q(x)), self._heads(self.W_k(x)), self._heads(self.W_v(x))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_k), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.W_o(out)


class InstanceNorm(nn.Module):
    """Feature-wise normalization over the node dimension of one instance."""

    def __init__(self, d_h: int):
        super().__init__()
        self.norm = nn.InstanceNorm1d(d_h, affine=True, track_running_stats=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class EncoderLayer(nn.Module):
    def __init__(self, d_h: int, n_heads: int, d_ff: int):
        super().__init__()
        self.mha = MultiHeadAttention(d_h, n_heads)
        self.norm1 = InstanceNorm(d_h)
        self.ff = nn.Sequential(nn.Linear(d_h, d_ff), nn.ReLU(), nn.Linear(d_ff, d_h))
        self.norm2 = InstanceNorm(d_h)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.mha(x))
        return self.norm2(x + self.ff(x))


class AttentionPolicy(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.config = config
        d = config.d_h
        if config.kind == "cvrp":
            self.embed_depot = nn.Linear(2, d)
            self.embed = nn.Linear(3, d)
        else:
            self.embed = nn.Linear(2, d)
        self.layers = nn.ModuleList(
            EncoderLayer(d, config.n_heads, config.d_ff) for _ in range(config.n_layers)
        )
        self.n_context_extra = 0 if config.kind == "tsp" else 1
        self.project_nodes = nn.Linear(d, 3 * d, bias=False)
        self.project_context = nn.Linear(3 * d + self.n_context_extra, d, bias=False)
        self.project_out = nn.Linear(d, d, bias=False)
        if config.variant == "START_TOKEN":
            self.v_last = nn.Parameter(torch.empty(d))
            self.v_first = nn.Parameter(torch.empty(d))
        self.reset_parameters(seed)
        self.to(dtype)

    @property
    def dtype(self):
        return self.project_out.weight.dtype

    @property
    def is_start_token(self) -> bool:
        return self.config.variant == "START_TOKEN"

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if ".norm." in name:
                    continue
                if name.endswith("bias"):
                    # fan-in of the owning linear layer
                    owner = self.get_submodule(name.rsplit(".", 1)[0])
                    fan_in = owner.weight.shape[1]
                else:
                    fan_in = p.shape[-1]
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)

    # -- encoder -----------------------------------------------------------

    def _features(self, problem: Problem) -> Tensor:
        locs = problem.locs.to(self.dtype)
        if problem.kind == "cvrp":
            dem = problem.demands[:, 1:, None].to(self.dtype)
            depot = self.embed_depot(locs[:, :1])
            cust = self.embed(torch.cat([locs[:, 1:], dem], dim=-1))
            return torch.cat([depot, cust], dim=1)
        return self.embed(locs)

    def encode(self, problem: Problem) -> NodeEmbeddings:
        if problem.kind != self.config.kind:
            raise ConfigError(f"model was built for {self.config.kind}, got a {problem.kind} problem")
        if not bool(torch.isfinite(problem.locs).all()):
            raise NumericError("non-finite instance features")
        h = self._features(problem)
        for layer in self.layers:
            h = layer(h)
        return NodeEmbeddings(h, h.mean(dim=1))

    def precompute(self, emb: NodeEmbeddings) -> DecoderCache:
        B, n, d = emb.h.shape
        H, dk = self.config.n_heads, self.config.d_k
        gk, gv, lk = self.project_nodes(emb.h).chunk(3, dim=-1)

        def heads(x):
            return x.view(B, n, H, dk).transpose(1, 2)

        return DecoderCache(emb, heads(gk), heads(gv), lk)

    # -- decoder -----------------------------------------------------------

    def context(self, cache: DecoderCache, state: RolloutBatch, env: Env) -> Tensor:
        """Per-trajectory context ``[h_bar, h_last, h_first (, capacity)]``, shape (B, N, ctx)."""
        h = cache.emb.h
        B, N = state.current.shape
        d = self.config.d_h
        h_bar = cache.emb.h_bar[:, None, :].expand(B, N, d)
        if state.t == 0:
            if not self.is_start_token:
                raise ConfigError("the first action of a POMO-variant policy is given, not decoded")
            last = self.v_last.expand(B, N, d)
            first = self.v_first.expand(B, N, d)
        else:
            n_nodes = h.shape[1]
            cur = state.current.clamp(max=n_nodes - 1)
            fst = state.first.clamp(max=n_nodes - 1)
            last = h.gather(1, cur.reshape(B, N, 1).expand(B, N, d))
            first = h.gather(1, fst.reshape(B, N, 1).expand(B, N, d))
        parts = [h_bar, last, first]
        if self.n_context_extra:
            parts.append(state.capacity.to(self.dtype).unsqueeze(-1))
        return torch.cat(parts, dim=-1)

    def masked_log_probs(self, cache: DecoderCache, state: RolloutBatch, env: Env) -> Tensor:
        legal = env.legal_mask(state)  # (B, N, A)
        if not bool(legal.any(-1).all()):
            raise ContractViolation("a trajectory has no legal action")
        B, N, _ = legal.shape
        H, dk, d = self.config.n_heads, self.config.d_k, self.config.d_h
        n_nodes = cache.logit_k.shape[1]

        node_legal = legal[..., :n_nodes]
        # rows whose only option is the KP pad item attend over everything
        glimpse_mask = node_legal | ~node_legal.any(-1, keepdim=True)

        q = self.project_context(self.context(cache, state, env))
        q = q.view(B, N, H, dk).transpose(1, 2)  # (B, H, N, dk)
        compat = q @ cache.glimpse_k.transpose(-1, -2) / math.sqrt(dk)
        compat = compat.masked_fill(~glimpse_mask[:, None], float("-inf"))
        glimpse = (torch.softmax(compat, dim=-1) @ cache.glimpse_v).transpose(1, 2).reshape(B, N, d)
        glimpse = self.project_out(glimpse)

        logits = glimpse @ cache.logit_k.transpose(-1, -2) / math.sqrt(d)
        logits = self.config.logit_clip * torch.tanh(logits)
        if legal.shape[-1] > n_nodes:  # kp pad item
            logits = torch.cat([logits, logits.new_zeros(B, N, 1)], dim=-1)
        logits = logits.masked_fill(~legal, float("-inf"))
        if bool(torch.isnan(logits).any()):
            raise NumericError("decoder produced NaN logits; parameters or inputs are not finite")
        return torch.log_softmax(logits, dim=-1)

    def decode_step(self, cache: DecoderCache, state: RolloutBatch, env: Env) -> Tensor:
        """Action probabilities ``(B, N, A)``; illegal actions get exactly 0."""
        return self.masked_log_probs(cache, state, env).exp()


# --------------------------------------------------------------------------
# rollouts

class RolloutResult(NamedTuple):
    actions: Tensor  # (B, N, T)
    logprob: Tensor  # (B, N)
    returns: Tensor  # (B, N) float64
    step_probs: Tensor | None = None  # (B, N, T) probability of each recorded action


def _select(log_probs: Tensor, mode: str, generator) -> Tensor:
    if mode == "greedy":
        return log_probs.argmax(dim=-1)  # first maximum wins
    if mode == "sample":
        B, N, A = log_probs.shape
        probs = log_probs.detach().exp().reshape(B * N, A).to(torch.float64)
        return torch.multinomial(probs, 1, generator=generator).view(B, N)
    raise ValueError(f"mode must be 'greedy' or 'sample', got {mode!r}")


def _run(policy, env, cache, state, mode, generator, record):
    probs_seen = []
    if record:
        ones = state.logprob.new_ones(state.current.shape)
        probs_seen = [ones] * state.t
    while not state.all_done:
        log_probs = policy.masked_log_probs(cache, state, env)
        actions = _select(log_probs, mode, generator)
        step_lp = log_probs.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
        was_done = state.done
        state = state.add_logprob(step_lp, was_done)
        if record:
            probs_seen.append(torch.where(was_done, torch.ones_like(step_lp), step_lp.exp()))
        state = env.step(state, actions)
    step_probs = torch.stack(probs_seen, dim=-1) if record else None
    return RolloutResult(state.action_tensor(), state.logprob, env.returns(state), step_probs)


def rollout(
    policy: AttentionPolicy,
    problem: Problem,
    start_nodes=None,
    mode: str = "sample",
    generator: torch.Generator | None = None,
    record: bool = False,
) -> RolloutResult:
    """Multi-start rollout: trajectory ``i`` begins at ``start_nodes[i]``.

    ``start_nodes`` defaults to every legal first action. ``logprob`` sums the
    log-probabilities of decoder-chosen actions only (steps 2..T); padding
    steps contribute exactly 0.
    """
    env = make_env(problem)
    cache = policy.precompute(policy.encode(problem))
    if start_nodes is None:
        start_nodes = problem.start_candidates
    state = env.reset(start_nodes, logprob_dtype=policy.dtype)
    return _run(policy, env, cache, state, mode, generator, record)


def start_token_rollout(
    policy: AttentionPolicy,
    problem: Problem,
    mode: str = "sample",
    generator: torch.Generator | None = None,
    n: int = 1,
    record: bool = False,
) -> RolloutResult:
    """Single-trajectory decoding where the decoder also picks the first action."""
    if not policy.is_start_token:
        raise ConfigError("start_token_rollout needs a START_TOKEN-variant policy")
    env = make_env(problem)
    cache = policy.precompute(policy.encode(problem))
    state = env.initial(n, logprob_dtype=policy.dtype)
    return _run(policy, env, cache, state, mode, generator, record)


def evaluate_actions(policy: AttentionPolicy, problem: Problem, actions: Tensor) -> Tensor:
    """Teacher-forced log-probability (B, N) of given action sequences (B, N, T).

    For POMO-variant policies ``actions[..., 0]`` is the given start and
    contributes nothing; START-token policies score the first action too.
    Sequences may be padded past completion with the pad action.
    """
    actions = torch.as_tensor(actions, dtype=torch.long)
    env = make_env(problem)
    cache = policy.precompute(policy.encode(problem))
    B, N, T = actions.shape
    if policy.is_start_token:
        state, lo = env.initial(N, logprob_dtype=policy.dtype), 0
    else:
        state, lo = env.reset(actions[..., 0], logprob_dtype=policy.dtype), 1
    for t in range(lo, T):
        if state.all_done:
            break
        log_probs = policy.masked_log_probs(cache, state, env)
        step_lp = log_probs.gather(-1, actions[..., t : t + 1]).squeeze(-1)
        was_done = state.done
        state = state.add_logprob(step_lp, was_done)
        state = env.step(state, actions[..., t])
    if not state.all_done:
        raise ContractViolation("action sequences end before every trajectory is complete")
    return state.logprob


def backward(params, loss: Tensor) -> list:
    """Gradients of a scalar ``loss`` w.r.t. each tensor in ``params`` (zeros where unused)."""
    params = list(params)
    if loss.numel() != 1:
        raise ValueError("loss must be a scalar")
    if not bool(torch.isfinite(loss)):
        raise NumericError(f"non-finite loss {float(loss.detach())}")
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for g in out:
        if not bool(torch.isfinite(g).all()):
            raise NumericError("non-finite gradient")
    return out


# --------------------------------------------------------------------------
# checkpoints
#
# b"POMOCK1", u32 header length, UTF-8 JSON header, then the tensors listed in
# header["tensors"] as raw little-endian arrays, in order.

CHECKPOINT_MAGIC = b"POMOCK1"
CHECKPOINT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def _tensor_entries(named: list) -> tuple:
    meta, blobs = [], []
    for name, t in named:
        t = t.detach().cpu().contiguous()
        code = _DTYPES[t.dtype]
        meta.append({"name": name, "shape": list(t.shape), "dtype": code})
        blobs.append(t.numpy().astype(code, copy=False).tobytes())
    return meta, blobs


def save_checkpoint(
    path,
    policy: AttentionPolicy,
    *,
    epoch: int,
    seed: int,
    train_config: dict | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> None:
    named = list(policy.state_dict().items())
    optim_header = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        optim_header = {"param_groups": sd["param_groups"], "state": {}}
        for idx, st in sd["state"].items():
            optim_header["state"][str(idx)] = {"step": float(st["step"])}
            named.append((f"optim.{idx}.exp_avg", st["exp_avg"]))
            named.append((f"optim.{idx}.exp_avg_sq", st["exp_avg_sq"]))
    meta, blobs = _tensor_entries(named)
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(policy.config),
        "kind": policy.config.kind,
        "variant": policy.config.variant,
        "epoch": int(epoch),
        "seed": int(seed),
        "train_config": train_config,
        "optimizer": optim_header,
        "extra": extra or {},
        "tensors": meta,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(raw)) + raw + b"".join(blobs))


def read_checkpoint(path) -> tuple:
    """Parse a checkpoint into ``(header, {name: tensor})``."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC) or len(data) < len(CHECKPOINT_MAGIC) + 4:
        raise ConfigError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        header = json.loads(data[pos : pos + hlen])
    except ValueError as exc:
        raise ConfigError(f"corrupt checkpoint header: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {header.get('version')}")
    pos += hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(data):
            raise ConfigError(f"checkpoint truncated inside tensor {entry['name']}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
        pos += nbytes
    if pos != len(data):
        raise ConfigError("trailing bytes after the last checkpoint tensor")
    return header, tensors


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple:
    """Rebuild the policy; returns ``(policy, header, optimizer_state_dict_or_None)``."""
    header, tensors = read_checkpoint(path)
    config = ModelConfig.from_dict(header["model_config"])
    if expected_config is not None and asdict(expected_config) != asdict(config):
        diff = [k for k, v in asdict(expected_config).items() if asdict(config)[k] != v]
        raise ConfigError(f"checkpoint config mismatch on {diff}")
    dtype = tensors[header["tensors"][0]["name"]].dtype
    policy = AttentionPolicy(config, dtype=dtype)
    model_keys = set(policy.state_dict())
    state = {k: v for k, v in tensors.items() if k in model_keys}
    missing = model_keys - set(state)
    if missing:
        raise ConfigError(f"checkpoint lacks parameters {sorted(missing)}")
    policy.load_state_dict(state)
    optim_state = None
    if header.get("optimizer"):
        oh = header["optimizer"]
        optim_state = {"param_groups": oh["param_groups"], "state": {}}
        for idx, st in sorted(oh["state"].items(), key=lambda kv: int(kv[0])):
            optim_state["state"][int(idx)] = {
                "step": torch.tensor(st["step"]),
                "exp_avg": tensors[f"optim.{idx}.exp_avg"],
                "exp_avg_sq": tensors[f"optim.{idx}.exp_avg_sq"],
            }
    return policy, header, optim_state
