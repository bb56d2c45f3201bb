"""Arm selection over the surrogate pool: UCB, epsilon-greedy, random,
and the fixed baselines, plus EMA reward bookkeeping.

All functions are pure: update_rewards returns a fresh state, and every
strategy is a deterministic function of (state, strategy, k, rng state).
Arm index = handle position in the search space.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import ValidationError


class StrategyKind(str, Enum):
    UCB = "ucb"
    EPSILON_GREEDY = "epsilon_greedy"
    RANDOM = "random"
    FIXED_ALL = "fixed_all"
    FIXED_SET = "fixed_set"


@dataclass(frozen=True)
class SelectionStrategy:
    kind: StrategyKind
    epsilon: float | None = None
    fixed_ids: tuple | None = None

    def __post_init__(self) -> None:
        kind = StrategyKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is StrategyKind.EPSILON_GREEDY:
            if self.epsilon is None or not (0.0 <= self.epsilon <= 1.0):
                raise ValidationError("epsilon_greedy requires epsilon in [0,1]")
        elif self.epsilon is not None:
            raise ValidationError(f"epsilon is not a parameter of {kind.value}")
        if kind is StrategyKind.FIXED_SET:
            if not self.fixed_ids:
                raise ValidationError("fixed_set requires fixed_ids")
            ids = tuple(self.fixed_ids)
            if len(set(ids)) != len(ids):
                raise ValidationError("fixed_ids must be distinct")
            object.__setattr__(self, "fixed_ids", ids)
        elif self.fixed_ids is not None:
            raise ValidationError(f"fixed_ids is not a parameter of {kind.value}")

    @staticmethod
    def ucb() -> "SelectionStrategy":
        return SelectionStrategy(kind=StrategyKind.UCB)

    @staticmethod
    def epsilon_greedy(epsilon: float = 0.5) -> "SelectionStrategy":
        return SelectionStrategy(kind=StrategyKind.EPSILON_GREEDY, epsilon=epsilon)

    @staticmethod
    def random() -> "SelectionStrategy":
        return SelectionStrategy(kind=StrategyKind.RANDOM)

    @staticmethod
    def fixed_all() -> "SelectionStrategy":
        return SelectionStrategy(kind=StrategyKind.FIXED_ALL)

    @staticmethod
    def fixed_set(ids) -> "SelectionStrategy":
        return SelectionStrategy(kind=StrategyKind.FIXED_SET, fixed_ids=tuple(ids))

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        if self.epsilon is not None:
            out["epsilon"] = self.epsilon
        if self.fixed_ids is not None:
            out["fixed_ids"] = list(self.fixed_ids)
        return out

    @staticmethod
    def from_dict(d: dict) -> "SelectionStrategy":
        return SelectionStrategy(
            kind=StrategyKind(d["kind"]),
            epsilon=d.get("epsilon"),
            fixed_ids=tuple(d["fixed_ids"]) if d.get("fixed_ids") else None,
        )


@dataclass(frozen=True)
class BanditState:
    rewards: np.ndarray
    counts: np.ndarray
    total: int
    reward_momentum: float = 0.1

    def __post_init__(self) -> None:
        rewards = np.asarray(self.rewards, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "counts", counts)
        if rewards.ndim != 1 or counts.shape != rewards.shape:
            raise ValidationError("rewards and counts must be 1-d arrays of equal length")
        if rewards.shape[0] < 1:
            raise ValidationError("state needs at least one arm")
        if not np.isfinite(rewards).all():
            raise ValidationError("rewards must be finite")
        if (counts < 0).any():
            raise ValidationError("counts must be nonnegative")
        if int(counts.sum()) != self.total:
            raise ValidationError("total must equal the sum of counts")
        if not (0.0 < self.reward_momentum <= 1.0):
            raise ValidationError("reward_momentum must be in (0, 1]")

    @property
    def n_arms(self) -> int:
        return int(self.rewards.shape[0])

    @staticmethod
    def init(n_arms: int, reward_momentum: float = 0.1) -> "BanditState":
        if n_arms < 1:
            raise ValidationError("n_arms must be >= 1")
        return BanditState(
            rewards=np.zeros(n_arms, dtype=np.float64),
            counts=np.zeros(n_arms, dtype=np.int64),
            total=0,
            reward_momentum=reward_momentum,
        )

    def to_dict(self) -> dict:
        return {
            "rewards": self.rewards.tolist(),
            "counts": self.counts.tolist(),
            "total": self.total,
            "reward_momentum": self.reward_momentum,
        }

    @staticmethod
    def from_dict(d: dict) -> "BanditState":
        return BanditState(
            rewards=np.asarray(d["rewards"], dtype=np.float64),
            counts=np.asarray(d["counts"], dtype=np.int64),
            total=int(d["total"]),
            reward_momentum=float(d["reward_momentum"]),
        )


def ucb_scores(state: BanditState) -> np.ndarray:
    """score_i = R_i + sqrt(2 ln n / n_i); unplayed arms (and the n = 0
    cold start) score +inf so every arm gets tried before exploitation."""
    scores = np.full(state.n_arms, np.inf, dtype=np.float64)
    if state.total > 0:
        played = state.counts > 0
        bonus = np.sqrt(2.0 * np.log(float(state.total)) / state.counts[played])
        scores[played] = state.rewards[played] + bonus
    return scores


def _top_k(scores: np.ndarray, k: int) -> list[int]:
    # descending score, ties by lowest arm index
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return [int(i) for i in order[:k]]


def select(
    state: BanditState,
    strategy: SelectionStrategy,
    k: int,
    rng: np.random.Generator | None = None,
    arm_ids=None,
) -> list[int]:
    """Pick k distinct arm indices. arm_ids (the search-space id order) is
    only needed to resolve FIXED_SET."""
    n = state.n_arms
    if not (1 <= k <= n):
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    kind = strategy.kind
    if kind is StrategyKind.UCB:
        return _top_k(ucb_scores(state), k)
    if kind is StrategyKind.FIXED_ALL:
        if k != n:
            raise ValidationError("fixed_all requires k = N")
        return list(range(n))
    if kind is StrategyKind.FIXED_SET:
        if arm_ids is None:
            raise ValidationError("fixed_set selection needs arm_ids to resolve ids")
        lookup = {aid: i for i, aid in enumerate(arm_ids)}
        missing = [aid for aid in strategy.fixed_ids if aid not in lookup]
        if missing:
            raise ValidationError(f"fixed_set ids not in search space: {missing}")
        if len(strategy.fixed_ids) != k:
            raise ValidationError("fixed_set requires k = len(fixed_ids)")
        return [lookup[aid] for aid in strategy.fixed_ids]
    if rng is None:
        raise ValidationError(f"{kind.value} selection needs an rng")
    if kind is StrategyKind.RANDOM:
        return [int(i) for i in rng.choice(n, size=k, replace=False)]
    # epsilon-greedy: per-slot coin flip; explore draws uniformly from the
    # remaining arms, exploit takes the best remaining reward (ties by index)
    remaining = list(range(n))
    chosen: list[int] = []
    for _ in range(k):
        if rng.random() < strategy.epsilon:
            pick = remaining[int(rng.integers(len(remaining)))]
        else:
            pick = max(remaining, key=lambda i: (state.rewards[i], -i))
        chosen.append(pick)
        remaining.remove(pick)
    return chosen


def update_rewards(state: BanditState, chosen, losses) -> BanditState:
    """EMA per chosen arm: R_i <- (1-m) R_i + m L_i; T_i and n advance."""
    chosen = [int(i) for i in chosen]
    losses = [float(v) for v in losses]
    if len(chosen) != len(losses):
        raise ValidationError("chosen and losses must have equal length")
    if len(set(chosen)) != len(chosen):
        raise ValidationError("chosen indices must be distinct")
    if any(i < 0 or i >= state.n_arms for i in chosen):
        raise ValidationError("arm index out of range")
    if not all(np.isfinite(losses)):
        raise ValidationError("losses must be finite")
    m = state.reward_momentum
    rewards = state.rewards.copy()
    counts = state.counts.copy()
    for i, value in zip(chosen, losses):
        rewards[i] = (1.0 - m) * rewards[i] + m * value
        counts[i] += 1
    return BanditState(
        rewards=rewards,
        counts=counts,
        total=state.total + len(chosen),
        reward_momentum=m,
    )
