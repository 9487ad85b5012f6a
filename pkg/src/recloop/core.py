"""Shared domain types: recommendation/rating matrices, propensity logs,
interaction histories and seeded random streams.

An :class:`InteractionHistory` is append-only. :func:`record_step` is the
single way to grow it and returns a new object, so a history can be replayed
and shared freely.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "RecommendationMatrix",
    "RatingMatrix",
    "LatentParams",
    "PropensityLog",
    "StepRecord",
    "InteractionHistory",
    "SeededRng",
    "rng_stream",
    "record_step",
    "consumed_pairs",
    "dumps_history",
    "loads_history",
    "save_history",
    "load_history",
    "history_from_arrays",
    "HistoryError",
]


class HistoryError(ValueError):
    """Raised when a step would break an :class:`InteractionHistory` invariant."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


def _stream_key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


@dataclass(frozen=True)
class SeededRng:
    """A (seed, stream) pair naming an independent PCG64 stream.

    Streams are derived with :class:`numpy.random.SeedSequence` spawn keys, so
    ``SeededRng(7, ("rep", 3)).generator()`` is the same on every run.
    """

    seed: int
    stream: tuple = ()

    def child(self, *names) -> "SeededRng":
        return SeededRng(self.seed, self.stream + tuple(names))

    def generator(self) -> np.random.Generator:
        key = tuple(_stream_key(n) for n in self.stream)
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))


def rng_stream(seed: int, *names) -> np.random.Generator:
    """Shorthand for ``SeededRng(seed, names).generator()``."""
    return SeededRng(seed, tuple(names)).generator()


# ---------------------------------------------------------------------------
# matrices and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RecommendationMatrix:
    """Binary U x I matrix ``A_t``; entry (u, i) is 1 iff item i was shown to u."""

    entries: np.ndarray
    timestep: int

    def __post_init__(self):
        a = np.asarray(self.entries)
        if a.ndim != 2:
            raise ValueError("recommendation matrix must be 2-D")
        if not np.isin(a, (0, 1)).all():
            raise ValueError("recommendation entries must be 0 or 1")
        if int(self.timestep) < 1:
            raise ValueError("timestep must be a positive integer")
        object.__setattr__(self, "entries", _frozen(a.astype(np.int8, copy=True)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    @classmethod
    def from_pairs(cls, shape, users, items, timestep) -> "RecommendationMatrix":
        a = np.zeros(shape, dtype=np.int8)
        a[np.asarray(users, dtype=int), np.asarray(items, dtype=int)] = 1
        return cls(a, timestep)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        u, i = np.nonzero(self.entries)
        return u, i


@dataclass(frozen=True)
class RatingMatrix:
    """Real U x I matrix ``R_t``; zero means "not observed"."""

    entries: np.ndarray
    timestep: int

    def __post_init__(self):
        r = np.asarray(self.entries, dtype=float)
        if r.ndim != 2:
            raise ValueError("rating matrix must be 2-D")
        if not np.isfinite(r).all():
            raise ValueError("ratings must be finite")
        object.__setattr__(self, "entries", _frozen(r.copy()))

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


@dataclass(frozen=True)
class LatentParams:
    """User vectors (U x K), item vectors (I x K) and the rating noise variance."""

    user_vectors: np.ndarray
    item_vectors: np.ndarray
    noise_variance: float = 1.0

    def __post_init__(self):
        uv = np.atleast_2d(np.asarray(self.user_vectors, dtype=float))
        iv = np.atleast_2d(np.asarray(self.item_vectors, dtype=float))
        if uv.shape[1] != iv.shape[1] or uv.shape[1] < 1:
            raise ValueError("user and item vectors need the same latent dimension K >= 1")
        if not (np.isfinite(uv).all() and np.isfinite(iv).all()):
            raise ValueError("latent vectors must be finite")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")
        object.__setattr__(self, "user_vectors", _frozen(uv.copy()))
        object.__setattr__(self, "item_vectors", _frozen(iv.copy()))

    @property
    def n_users(self) -> int:
        return self.user_vectors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_vectors.shape[0]

    @property
    def n_factors(self) -> int:
        return self.user_vectors.shape[1]

    def predict_all(self) -> np.ndarray:
        return self.user_vectors @ self.item_vectors.T

    def checksum(self) -> int:
        return zlib.crc32(self.user_vectors.tobytes() + self.item_vectors.tobytes())


@dataclass(frozen=True)
class PropensityLog:
    """Propensities ``P(A_{s,ui}=1 | params_{s-1})`` of the pairs recommended at a step.

    ``table`` optionally holds the full U x I probability table of the step
    (needed by the general CAFL weights to find zero-propensity pairs).
    """

    timestep: int
    users: np.ndarray
    items: np.ndarray
    propensities: np.ndarray
    table: Optional[np.ndarray] = None

    def __post_init__(self):
        u = np.asarray(self.users, dtype=np.int64).ravel()
        i = np.asarray(self.items, dtype=np.int64).ravel()
        p = np.asarray(self.propensities, dtype=float).ravel()
        if not (len(u) == len(i) == len(p)):
            raise ValueError("users, items and propensities must have equal length")
        if ((p < 0) | (p > 1 + 1e-12) | ~np.isfinite(p)).any():
            raise ValueError("propensities must lie in [0, 1]")
        object.__setattr__(self, "users", _frozen(u))
        object.__setattr__(self, "items", _frozen(i))
        object.__setattr__(self, "propensities", _frozen(p))
        if self.table is not None:
            tab = np.asarray(self.table, dtype=float)
            object.__setattr__(self, "table", _frozen(tab.copy()))

    @property
    def records(self) -> list[tuple[int, int, int, float]]:
        return [
            (self.timestep, int(u), int(i), float(p))
            for u, i, p in zip(self.users, self.items, self.propensities)
        ]


@dataclass(frozen=True)
class StepRecord:
    """One step of a trajectory in triplet form."""

    timestep: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    propensities: np.ndarray
    table: Optional[np.ndarray] = None
    params: Optional[LatentParams] = None

    def __len__(self) -> int:
        return len(self.users)


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

LAYOUTS = ("per_user", "global")


@dataclass(frozen=True)
class InteractionHistory:
    """Trajectory ``{(A_s, R_s, propensities_s, params_s)}`` for s = 1..t.

    Parameters
    ----------
    n_users, n_items : int
        Matrix dimensions U and I.
    n_per_step : int
        N, the number of items each user receives per step (``layout="per_user"``)
        or the total number of pairs recommended per step (``layout="global"``).
    no_repeat : bool
        Forbid a (u, i) pair from being recommended at two steps.
    layout : {"per_user", "global"}
    """

    n_users: int
    n_items: int
    n_per_step: int = 1
    no_repeat: bool = True
    layout: str = "per_user"
    steps: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1:
            raise ValueError("n_users and n_items must be positive")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        if self.n_per_step < 1:
            raise ValueError("n_per_step must be positive")

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_users, self.n_items)

    @property
    def n_pairs(self) -> int:
        return self.n_users * self.n_items

    @cached_property
    def counts(self) -> np.ndarray:
        """U x I number of times each pair has been recommended."""
        c = np.zeros(self.shape, dtype=np.int64)
        for st in self.steps:
            np.add.at(c, (st.users, st.items), 1)
        c.setflags(write=False)
        return c

    @property
    def consumed(self) -> np.ndarray:
        return self.counts > 0

    @cached_property
    def observations(self) -> dict[str, np.ndarray]:
        """All observed (s, u, i, r, p) as concatenated arrays in step order."""
        if not self.steps:
            e = np.zeros(0, dtype=np.int64)
            return {"s": e, "u": e, "i": e, "r": np.zeros(0), "p": np.zeros(0)}
        return {
            "s": np.concatenate([np.full(len(st), st.timestep, dtype=np.int64) for st in self.steps]),
            "u": np.concatenate([st.users for st in self.steps]),
            "i": np.concatenate([st.items for st in self.steps]),
            "r": np.concatenate([st.ratings for st in self.steps]),
            "p": np.concatenate([st.propensities for st in self.steps]),
        }

    @property
    def n_observations(self) -> int:
        return sum(len(st) for st in self.steps)

    def rec_matrix(self, s: int) -> RecommendationMatrix:
        st = self.steps[s - 1]
        return RecommendationMatrix.from_pairs(self.shape, st.users, st.items, s)

    def rating_matrix(self, s: int) -> RatingMatrix:
        st = self.steps[s - 1]
        r = np.zeros(self.shape)
        r[st.users, st.items] = st.ratings
        return RatingMatrix(r, s)

    def latest_params(self) -> Optional[LatentParams]:
        for st in reversed(self.steps):
            if st.params is not None:
                return st.params
        return None

    def truncate(self, t: int) -> "InteractionHistory":
        """History restricted to the first ``t`` steps."""
        return InteractionHistory(
            self.n_users, self.n_items, self.n_per_step, self.no_repeat, self.layout, self.steps[:t]
        )

    def item_sets(self, t: Optional[int] = None) -> list[set]:
        """Cumulative set of recommended items per user up to step ``t``."""
        sets: list[set] = [set() for _ in range(self.n_users)]
        for st in self.steps[: self.horizon if t is None else t]:
            for u, i in zip(st.users.tolist(), st.items.tolist()):
                sets[u].add(i)
        return sets


def record_step(
    history: InteractionHistory,
    rec: RecommendationMatrix,
    ratings: RatingMatrix,
    props: PropensityLog,
    params: Optional[LatentParams] = None,
) -> InteractionHistory:
    """Append one (A, R, propensities, params) step and return the new history.

    Raises
    ------
    HistoryError
        On dimension mismatch, timestep gap, a rating without a recommendation,
        a missing or zero propensity, a wrong per-step count, or a repeat
        recommendation in no-repeat mode.
    """
    t = history.horizon + 1
    if rec.shape != history.shape or ratings.shape != history.shape:
        raise HistoryError(f"dimension mismatch: expected {history.shape}")
    if rec.timestep != t or ratings.timestep != t or props.timestep != t:
        raise HistoryError(f"timestep gap: expected step {t}")
    a = rec.entries.astype(bool)
    r = ratings.entries
    if (r[~a] != 0).any():
        raise HistoryError("rating without recommendation")
    if (r[a] == 0).any():
        raise HistoryError("recommended pair has no rating (0 is reserved for 'not observed')")

    if history.layout == "per_user":
        if (a.sum(axis=1) != history.n_per_step).any():
            raise HistoryError(f"each user must receive exactly N={history.n_per_step} items")
    elif a.sum() != history.n_per_step:
        raise HistoryError(f"exactly N={history.n_per_step} pairs must be recommended")

    if history.no_repeat and (a & history.consumed).any():
        raise HistoryError("repeat recommendation in no-repeat mode")

    users, items = np.nonzero(a)
    logged = {(int(u), int(i)): float(p) for u, i, p in zip(props.users, props.items, props.propensities)}
    if len(logged) != len(props.users) or set(logged) != set(zip(users.tolist(), items.tolist())):
        raise HistoryError("every recommended pair needs exactly one logged propensity")
    p = np.array([logged[(int(u), int(i))] for u, i in zip(users, items)])
    if (p <= 0).any():
        raise HistoryError("logged propensity is zero for a realized recommendation")
    if props.table is not None and props.table.shape != history.shape:
        raise HistoryError("propensity table has the wrong shape")
    if params is not None and (params.n_users, params.n_items) != history.shape:
        raise HistoryError("params dimensions do not match the history")

    step = StepRecord(
        timestep=t,
        users=_frozen(users.astype(np.int64)),
        items=_frozen(items.astype(np.int64)),
        ratings=_frozen(r[users, items].copy()),
        propensities=_frozen(p),
        table=props.table,
        params=params,
    )
    return InteractionHistory(
        history.n_users,
        history.n_items,
        history.n_per_step,
        history.no_repeat,
        history.layout,
        history.steps + (step,),
    )


def consumed_pairs(history: InteractionHistory) -> set[tuple[int, int, int]]:
    """Set of ``(u, i, s)`` with ``A_{s,ui} = 1``."""
    return {
        (int(u), int(i), st.timestep)
        for st in history.steps
        for u, i in zip(st.users, st.items)
    }


# ---------------------------------------------------------------------------
# snapshot files
# ---------------------------------------------------------------------------

SNAPSHOT_COLUMNS = ("s", "u", "i", "A", "R", "p")


def dumps_history(history: InteractionHistory, seed: Optional[int] = None) -> str:
    """Serialize to the line-delimited snapshot format.

    Line 1 is ``# `` followed by a JSON header (U, I, N, mode, layout, horizon,
    seed). Line 2 is the tab-separated column header ``s u i A R p``. Every
    following line is one recommended pair. Floats use ``repr`` so parsing
    and re-serializing is lossless. Propensity tables and fitted params are
    not stored.
    """
    header = {
        "U": history.n_users,
        "I": history.n_items,
        "N": history.n_per_step,
        "mode": "no_repeat" if history.no_repeat else "repeat",
        "layout": history.layout,
        "horizon": history.horizon,
        "seed": seed,
    }
    lines = ["# " + json.dumps(header, sort_keys=True), "\t".join(SNAPSHOT_COLUMNS)]
    for st in history.steps:
        for u, i, r, p in zip(st.users, st.items, st.ratings, st.propensities):
            lines.append(f"{st.timestep}\t{u}\t{i}\t1\t{float(r)!r}\t{float(p)!r}")
    return "\n".join(lines) + "\n"


def _parse_rows(lines: Iterable[str]):
    for line in lines:
        if not line.strip():
            continue
        s, u, i, a, r, p = line.rstrip("\n").split("\t")
        yield int(s), int(u), int(i), int(a), float(r), float(p)


def loads_history(text: str) -> tuple[InteractionHistory, Optional[int]]:
    """Inverse of :func:`dumps_history`; returns ``(history, seed)``."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError("snapshot is missing its header line")
    header = json.loads(lines[0][2:])
    if tuple(lines[1].split("\t")) != SNAPSHOT_COLUMNS:
        raise ValueError(f"snapshot columns must be {SNAPSHOT_COLUMNS}")
    h = InteractionHistory(
        header["U"],
        header["I"],
        header["N"],
        header["mode"] == "no_repeat",
        header.get("layout", "per_user"),
    )
    by_step: dict[int, list] = {s: [] for s in range(1, header["horizon"] + 1)}
    for row in _parse_rows(lines[2:]):
        by_step[row[0]].append(row)
    for s in range(1, header["horizon"] + 1):
        rows = by_step[s]
        us = [r[1] for r in rows]
        its = [r[2] for r in rows]
        rec = RecommendationMatrix.from_pairs(h.shape, us, its, s)
        rat = np.zeros(h.shape)
        rat[us, its] = [r[4] for r in rows]
        h = record_step(h, rec, RatingMatrix(rat, s), PropensityLog(s, us, its, [r[5] for r in rows]))
    return h, header.get("seed")


def save_history(history: InteractionHistory, path, seed: Optional[int] = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_history(history, seed))


def load_history(path) -> tuple[InteractionHistory, Optional[int]]:
    with open(path, encoding="utf-8") as fh:
        return loads_history(fh.read())


def history_from_arrays(
    shape: Sequence[int],
    steps: Sequence[tuple],
    *,
    n_per_step: int = 1,
    no_repeat: bool = True,
    layout: str = "per_user",
) -> InteractionHistory:
    """Build a history from ``[(users, items, ratings, propensities), ...]`` per step.

    Convenience for tests and scripts; goes through :func:`record_step`.
    """
    h = InteractionHistory(shape[0], shape[1], n_per_step, no_repeat, layout)
    for s, (us, its, rs, ps) in enumerate(steps, start=1):
        rec = RecommendationMatrix.from_pairs(h.shape, us, its, s)
        rat = np.zeros(h.shape)
        rat[np.asarray(us, dtype=int), np.asarray(its, dtype=int)] = rs
        h = record_step(h, rec, RatingMatrix(rat, s), PropensityLog(s, us, its, ps))
    return h
