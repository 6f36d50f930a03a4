"""Offline trajectory datasets and their line-delimited JSON format.

A dataset holds ``N`` episodes of exactly ``H`` steps as dense arrays; the
record view (:class:`Transition`) exists for I/O and inspection. Step
indices are 1-based everywhere in the public API.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from udskernel.exceptions import DatasetError, InputError


class DatasetParseError(DatasetError):
    """A dataset file line could not be parsed."""


@dataclass(frozen=True)
class Transition:
    episode: int
    h: int
    s: tuple
    a: int
    r: Optional[float]
    s_next: tuple

    def to_record(self) -> dict:
        return {
            "episode": self.episode,
            "h": self.h,
            "s": list(self.s),
            "a": self.a,
            "r": self.r,
            "s_next": list(self.s_next),
        }


@dataclass(frozen=True, eq=False)
class Dataset:
    """Episodes stored as arrays.

    Attributes
    ----------
    states, next_states : ndarray of shape (N, H, state_dim)
    actions : int ndarray of shape (N, H)
    rewards : ndarray of shape (N, H), or None for an unlabeled dataset
    """

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=float))
        object.__setattr__(self, "next_states", np.asarray(self.next_states, dtype=float))
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.int64))
        if self.rewards is not None:
            object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=float))
        self.validate()

    @property
    def labeled(self) -> bool:
        return self.rewards is not None

    @property
    def n_episodes(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    def __len__(self) -> int:
        return self.n_episodes * self.horizon

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset) or self.labeled != other.labeled:
            return False
        same = (
            np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.next_states, other.next_states)
        )
        if self.labeled:
            same = same and np.array_equal(self.rewards, other.rewards)
        return same

    def validate(self, action_count: Optional[int] = None) -> None:
        S, A, S2 = self.states, self.actions, self.next_states
        if S.ndim != 3 or S2.shape != S.shape or A.shape != S.shape[:2]:
            raise DatasetError(
                f"inconsistent shapes: states {S.shape}, actions {A.shape}, next_states {S2.shape}"
            )
        if S.shape[1] < 1:
            raise DatasetError("episodes must contain at least one step")
        if self.rewards is not None:
            if self.rewards.shape != A.shape:
                raise DatasetError(f"rewards shape {self.rewards.shape} does not match actions {A.shape}")
            bad = np.argwhere(~np.isfinite(self.rewards))
            if len(bad):
                ep, h = bad[0]
                raise DatasetError(f"missing or non-finite reward at episode {ep}, h={h + 1}")
        bad = np.argwhere(A < 0) if action_count is None else np.argwhere((A < 0) | (A >= action_count))
        if len(bad):
            ep, h = bad[0]
            raise DatasetError(f"invalid action {A[ep, h]} at episode {ep}, h={h + 1}")
        if S.shape[1] > 1:
            mismatch = ~np.all(np.isclose(S2[:, :-1], S[:, 1:], rtol=0, atol=1e-12), axis=2)
            bad = np.argwhere(mismatch)
            if len(bad):
                ep, h = bad[0]
                raise DatasetError(
                    f"episode {ep}: s_next at h={h + 1} does not match s at h={h + 2}"
                )

    # -- views -----------------------------------------------------------

    def step(self, h: int):
        """``(states, actions, rewards, next_states)`` at 1-based step ``h``."""
        if not 1 <= h <= self.horizon:
            raise InputError(f"h must lie in [1, {self.horizon}], got {h}")
        i = h - 1
        r = None if self.rewards is None else self.rewards[:, i]
        return self.states[:, i], self.actions[:, i], r, self.next_states[:, i]

    def transitions(self) -> Iterator[Transition]:
        for ep in range(self.n_episodes):
            for i in range(self.horizon):
                yield Transition(
                    episode=ep,
                    h=i + 1,
                    s=tuple(float(x) for x in self.states[ep, i]),
                    a=int(self.actions[ep, i]),
                    r=None if self.rewards is None else float(self.rewards[ep, i]),
                    s_next=tuple(float(x) for x in self.next_states[ep, i]),
                )

    def select(self, episodes) -> "Dataset":
        idx = np.asarray(episodes, dtype=np.int64)
        return Dataset(
            self.states[idx],
            self.actions[idx],
            self.next_states[idx],
            None if self.rewards is None else self.rewards[idx],
        )

    def with_rewards(self, rewards) -> "Dataset":
        return Dataset(self.states, self.actions, self.next_states, rewards)

    def without_rewards(self) -> "Dataset":
        return Dataset(self.states, self.actions, self.next_states, None)


def concat(*datasets: Dataset) -> Dataset:
    """Stack episodes of several datasets in order; all must share labeling."""
    if not datasets:
        raise InputError("nothing to concatenate")
    labeled = {d.labeled for d in datasets}
    if len(labeled) != 1:
        raise InputError("cannot mix labeled and unlabeled datasets")
    return Dataset(
        np.concatenate([d.states for d in datasets]),
        np.concatenate([d.actions for d in datasets]),
        np.concatenate([d.next_states for d in datasets]),
        np.concatenate([d.rewards for d in datasets]) if labeled.pop() else None,
    )


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in dataset.transitions():
            fh.write(json.dumps(t.to_record()) + "\n")


_FIELDS = ("episode", "h", "s", "a", "r", "s_next")


def _parse_line(line: str, lineno: int) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict) or set(rec) != set(_FIELDS):
        raise DatasetParseError(f"line {lineno}: expected fields {list(_FIELDS)}")
    for key in ("episode", "h", "a"):
        if not isinstance(rec[key], int) or isinstance(rec[key], bool):
            raise DatasetParseError(f"line {lineno}: field {key!r} must be an integer")
    for key in ("s", "s_next"):
        v = rec[key]
        if not isinstance(v, list) or not v or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in v
        ):
            raise DatasetParseError(f"line {lineno}: field {key!r} must be a non-empty list of numbers")
    if rec["r"] is not None and (not isinstance(rec["r"], (int, float)) or isinstance(rec["r"], bool)):
        raise DatasetParseError(f"line {lineno}: field 'r' must be a number or null")
    return rec


def read_dataset(path, action_count: Optional[int] = None) -> Dataset:
    """Parse a dataset file and validate every structural invariant."""
    records = []
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                records.append(_parse_line(line, lineno))
    if not records:
        raise DatasetError(f"{path}: no records")

    episodes: dict = {}
    for rec in records:
        ep, h = rec["episode"], rec["h"]
        if ep < 0:
            raise DatasetError(f"episode {ep}, h={h}: negative episode index")
        if h < 1:
            raise DatasetError(f"episode {ep}, h={h}: step index must be >= 1")
        episodes.setdefault(ep, []).append(rec)

    ids = list(episodes)
    if ids != list(range(len(ids))):
        raise DatasetError(f"episodes must be numbered 0..N-1 in order, got {ids[:5]}...")
    H = len(episodes[0])
    state_dim = len(records[0]["s"])
    has_r = records[0]["r"] is not None
    for ep, recs in episodes.items():
        if [r["h"] for r in recs] != list(range(1, H + 1)):
            raise DatasetError(f"episode {ep}: expected steps h=1..{H} in order")
        for r in recs:
            if len(r["s"]) != state_dim or len(r["s_next"]) != state_dim:
                raise DatasetError(f"episode {ep}, h={r['h']}: state dimension differs from {state_dim}")
            if (r["r"] is not None) != has_r:
                raise DatasetError(
                    f"episode {ep}, h={r['h']}: reward presence differs from the rest of the file"
                )

    N = len(ids)
    S = np.array([[r["s"] for r in episodes[ep]] for ep in range(N)], dtype=float)
    S2 = np.array([[r["s_next"] for r in episodes[ep]] for ep in range(N)], dtype=float)
    A = np.array([[r["a"] for r in episodes[ep]] for ep in range(N)], dtype=np.int64)
    R = np.array([[r["r"] for r in episodes[ep]] for ep in range(N)], dtype=float) if has_r else None
    data = Dataset(S, A, S2, R)
    data.validate(action_count)
    return data
