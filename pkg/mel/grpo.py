from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .config import ClipConfig, DecodingConfig
from .errors import ContractError
from .policy import DTYPE, Policy, PolicyParams, PolicySnapshot, log_prob_grad, sample, sequence_log_prob
from .rng import stream
from .taskenv import Query, Trajectory, Verifier, verify

EPS_STD = 1e-6


@dataclass(frozen=True)
class RolloutGroup:
    query_id: str
    prompt_tokens: tuple[int, ...]
    trajectories: tuple[Trajectory, ...]
    rewards: tuple[int, ...]
    extraction_failures: int = 0

    def __post_init__(self) -> None:
        if len(self.trajectories) != len(self.rewards):
            raise ContractError("a group needs one reward per trajectory")

    @property
    def size(self) -> int:
        return len(self.rewards)

    @property
    def positives(self) -> list[int]:
        return [i for i, reward in enumerate(self.rewards) if reward == 1]

    @property
    def negatives(self) -> list[int]:
        return [i for i, reward in enumerate(self.rewards) if reward != 1]

    @property
    def degenerate(self) -> bool:
        return len(set(self.rewards)) <= 1


@dataclass(frozen=True)
class AdvantageSet:
    values: tuple[float, ...]
    degenerate: bool

    def broadcast(self, index: int, length: int) -> torch.Tensor:
        return torch.full((length,), self.values[index], dtype=DTYPE)


@dataclass(frozen=True)
class SurrogateResult:
    value: float
    weights: torch.Tensor
    clipped: int


@dataclass(frozen=True)
class GrpoGradient:
    gradient: torch.Tensor
    objective: float
    clipped_tokens: int
    total_tokens: int
    kl: float
    degenerate_groups: int

    @property
    def clipped_fraction(self) -> float:
        return self.clipped_tokens / self.total_tokens if self.total_tokens else 0.0


def rollout_group(
    params: PolicyParams,
    snapshot: PolicySnapshot | None,
    query: Query,
    group_size: int,
    config: DecodingConfig,
    *,
    step: int = 0,
    verifier: Verifier | None = None,
) -> RolloutGroup:
    """Sample ``group_size`` responses from the snapshot, each on its own derived stream.

    Without a snapshot one is taken from ``params``; the live weights are never sampled.
    """
    if group_size < 2:
        raise ContractError("group size must be >= 2")
    if snapshot is None:
        snapshot = params.snapshot()
    elif snapshot.vocab != params.vocab or snapshot.spec != params.spec:
        raise ContractError("snapshot was not taken from these params")
    trajectories: list[Trajectory] = []
    rewards: list[int] = []
    failures = 0
    for index in range(group_size):
        gen = stream(config.seed, "rollout", step, query.id, index)
        trajectory = sample(
            snapshot, query.prompt_tokens, config, generator=gen, trajectory_id=f"{query.id}:{step}:{index}"
        )
        result = verify(trajectory, query.ground_truth, verifier)
        trajectories.append(trajectory)
        rewards.append(result.reward)
        failures += int(result.extraction_failed)
    return RolloutGroup(
        query_id=query.id,
        prompt_tokens=query.prompt_tokens,
        trajectories=tuple(trajectories),
        rewards=tuple(rewards),
        extraction_failures=failures,
    )


def normalize_advantages(rewards: Sequence[int]) -> AdvantageSet:
    if len(rewards) < 2:
        raise ContractError("advantage normalization needs at least two rewards")
    values = torch.tensor([float(r) for r in rewards], dtype=DTYPE)
    if len(set(rewards)) == 1:
        return AdvantageSet(values=(0.0,) * len(rewards), degenerate=True)
    std = values.std(unbiased=False)
    normalized = (values - values.mean()) / (std + EPS_STD)
    return AdvantageSet(values=tuple(normalized.tolist()), degenerate=False)


def importance_ratios(
    params: Policy, snapshot: PolicySnapshot, prompt: Sequence[int], trajectory: Trajectory
) -> torch.Tensor:
    current = sequence_log_prob(params, prompt, trajectory.tokens)
    old = sequence_log_prob(snapshot, prompt, trajectory.tokens)
    return torch.exp(current - old)


def clipped_surrogate(ratios: torch.Tensor, advantages: torch.Tensor, epsilon: float) -> SurrogateResult:
    """Token-mean PPO-style surrogate of one trajectory.

    The gradient weight of a token is ``A * rho`` while the unclipped branch is the
    minimum and 0 once the clipped branch wins.
    """
    ratios = torch.as_tensor(ratios, dtype=DTYPE)
    advantages = torch.as_tensor(advantages, dtype=DTYPE)
    if ratios.shape != advantages.shape:
        raise ContractError("ratios and advantages must have equal lengths")
    if ratios.numel() == 0:
        raise ContractError("surrogate needs at least one token")
    unclipped = ratios * advantages
    clipped = torch.clamp(ratios, 1.0 - epsilon, 1.0 + epsilon) * advantages
    clip_active = clipped < unclipped
    contribution = torch.where(clip_active, clipped, unclipped)
    weights = torch.where(clip_active, torch.zeros_like(unclipped), unclipped)
    return SurrogateResult(
        value=float(contribution.mean()),
        weights=weights,
        clipped=int(clip_active.sum()),
    )


def grpo_gradient(
    params: PolicyParams,
    snapshot: PolicySnapshot,
    groups: Sequence[RolloutGroup],
    config: ClipConfig,
) -> GrpoGradient:
    """Ascent direction of the group- and token-averaged clipped surrogate.

    Groups are reduced sequentially in the order given. With ``kl_coef > 0`` the k3
    estimate of KL to the snapshot is subtracted per token.
    """
    if not groups:
        raise ContractError("grpo_gradient needs at least one group")
    gradient = torch.zeros_like(params.weights)
    objective = 0.0
    kl_total = 0.0
    clipped_tokens = 0
    total_tokens = 0
    degenerate = 0
    for group in groups:
        advantages = normalize_advantages(group.rewards)
        degenerate += int(advantages.degenerate)
        total_tokens += sum(len(t) for t in group.trajectories)
        if advantages.degenerate and config.kl_coef == 0:
            continue
        group_scale = 1.0 / (len(groups) * group.size)
        for index, trajectory in enumerate(group.trajectories):
            if not trajectory.tokens:
                continue
            ratios = importance_ratios(params, snapshot, group.prompt_tokens, trajectory)
            result = clipped_surrogate(ratios, advantages.broadcast(index, len(trajectory)), config.epsilon)
            coefficients = result.weights
            value = result.value
            if config.kl_coef:
                inverse = 1.0 / ratios
                penalty = inverse - 1.0 + torch.log(ratios)
                value -= config.kl_coef * float(penalty.mean())
                kl_total += float(penalty.sum())
                coefficients = coefficients + config.kl_coef * (inverse - 1.0)
            clipped_tokens += result.clipped
            objective += group_scale * value
            if bool(coefficients.any()):
                coefficients = coefficients * (group_scale / len(trajectory))
                gradient += log_prob_grad(params, group.prompt_tokens, trajectory.tokens, coefficients)
    return GrpoGradient(
        gradient=gradient,
        objective=objective,
        clipped_tokens=clipped_tokens,
        total_tokens=total_tokens,
        kl=kl_total / total_tokens if total_tokens else 0.0,
        degenerate_groups=degenerate,
    )
