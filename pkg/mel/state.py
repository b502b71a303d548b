from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

from .config import FeatureSpec
from .metaexp import MetaExperiencePool
from .policy import PolicyParams, PolicySnapshot
from .vocab import Vocabulary


@dataclass
class TrainState:
    """Everything a run needs to continue from ``step``.

    Randomness is counter-based on ``(seed, step, ...)`` so no generator state is kept.
    """

    step: int
    seed: int
    params: PolicyParams
    snapshot: PolicySnapshot | None = None
    pool: MetaExperiencePool = field(default_factory=MetaExperiencePool)
    totals: dict[str, float] = field(default_factory=dict)

    @classmethod
    def fresh(cls, vocab: Vocabulary, spec: FeatureSpec, seed: int) -> "TrainState":
        return cls(step=0, seed=seed, params=PolicyParams.zeros(vocab, spec))

    def bump(self, key: str, amount: float) -> None:
        self.totals[key] = self.totals.get(key, 0) + amount


@dataclass(frozen=True)
class EventRecord:
    step: int
    mean_reward: float
    degenerate_fraction: float
    extraction_failures: int
    clipped_fraction: float
    kl: float
    pairs: int
    step_candidates: int
    step_validated: int
    candidates: int
    validated: int
    rejected: int
    retention_ratio: float
    analyst_failures: int
    mel_batch: int
    mel_skipped: bool
    nll_loss: float | None
    meta_return: float | None
    grpo_objective: float
    grpo_grad_norm: float
    mel_grad_norm: float
    joint_grad_norm: float
    wall_clock: float | None = None

    def to_record(self, *, include_wall_clock: bool = True) -> dict[str, Any]:
        record = asdict(self)
        if not include_wall_clock:
            record.pop("wall_clock")
        return record

    @staticmethod
    def from_record(data: dict[str, Any]) -> "EventRecord":
        known = set(EventRecord.__dataclass_fields__)
        return EventRecord(**{key: value for key, value in data.items() if key in known})


EVENT_COLUMNS = tuple(EventRecord.__dataclass_fields__)
