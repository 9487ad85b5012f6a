"""Per-observation training weights for multi-step recommendation data.

Every scheme returns a :class:`WeightAssignment` aligned with
``history.observations`` (one weight per recommended pair, in step order), so
any trainer that accepts sample weights can consume it:

* ``naive``        -- weight 1, i.e. pooled maximum likelihood.
* ``ipw``          -- ``1 / p_s``, valid when every pair keeps positive propensity.
* ``cafl_special`` -- the closed form for the no-repeat, one-new-item regime:
  ``c_s / p_s`` plus the ``c`` mass of every later step at which the pair could
  no longer be recommended.
* ``cafl_general`` -- the same correction driven by full propensity tables; a
  pair that is blocked at step ``s`` borrows the average of its log-likelihood
  over the steps where it was recommendable and observed.

Terms with ``A = 0`` are parameter-free (their rating is fixed to 0) and are
dropped from every scheme.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import InteractionHistory

__all__ = [
    "SCHEMES",
    "PositivityError",
    "WeightAssignment",
    "compute_c",
    "naive_weights",
    "ipw_weights",
    "cafl_special_weights",
    "cafl_general_weights",
    "popularity_weights",
    "weights_for",
    "default_catalogue_size",
    "dumps_weights",
]

logger = logging.getLogger(__name__)

SCHEMES = ("naive", "ipw", "cafl_general", "cafl_special", "popularity")


class PositivityError(ValueError):
    pass


@dataclass(frozen=True)
class WeightAssignment:
    """Weights on the observed log-likelihood terms ``(s, u, i)``."""

    steps: np.ndarray
    users: np.ndarray
    items: np.ndarray
    weights: np.ndarray
    scheme: str

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not (len(self.steps) == len(self.users) == len(self.items) == len(w)):
            raise ValueError("weight arrays must have equal length")
        if not np.isfinite(w).all() or (w < 0).any():
            raise ValueError("weights must be finite and non-negative")
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.weights)

    def as_dict(self) -> dict[tuple[int, int, int], float]:
        return {
            (int(s), int(u), int(i)): float(w)
            for s, u, i, w in zip(self.steps, self.users, self.items, self.weights)
        }

    def objective(self, loglik: np.ndarray) -> float:
        """Weighted sum of per-observation log-likelihood terms."""
        return float(np.dot(self.weights, loglik))


def _assignment(history: InteractionHistory, w: np.ndarray, scheme: str) -> WeightAssignment:
    obs = history.observations
    return WeightAssignment(obs["s"], obs["u"], obs["i"], w, scheme)


def compute_c(t: int, n_pairs: int) -> np.ndarray:
    """Step constants ``c_s = n(n - t) / ((n - s)(n - s + 1))`` for s = 1..t.

    They telescope to ``sum(c) == t``.

    >>> compute_c(2, 10).tolist() == [8 / 9, 10 / 9]
    True
    """
    t = int(t)
    n = int(n_pairs)
    if t < 1:
        raise ValueError("horizon must be >= 1")
    if t >= n:
        raise ValueError(f"horizon exhausts catalogue: t={t} >= {n}")
    s = np.arange(1, t + 1, dtype=float)
    return n * (n - t) / ((n - s) * (n - s + 1))


def default_catalogue_size(history: InteractionHistory) -> int:
    """Number of candidates a single no-repeat stream draws from.

    One pair per step across all users uses the whole U*I grid; one item per
    user per step makes each user an independent stream over I items.
    """
    if history.layout == "global" and history.n_per_step == 1:
        return history.n_pairs
    return history.n_items


def naive_weights(history: InteractionHistory) -> WeightAssignment:
    return _assignment(history, np.ones(history.n_observations), "naive")


def ipw_weights(history: InteractionHistory) -> WeightAssignment:
    """Inverse propensity weights ``1 / P(A_{s,ui} = 1 | params_{s-1})``."""
    p = history.observations["p"]
    if (p <= 0).any() or not np.isfinite(p).all():
        raise PositivityError("positivity violated, use CAFL")
    return _assignment(history, 1.0 / p, "ipw")


def _resolve_c(t, n_pairs, c):
    if c is None:
        return compute_c(t, n_pairs)
    if isinstance(c, str):
        if c != "uniform":
            raise ValueError("c must be None, 'uniform' or an array")
        return np.ones(t)
    c = np.asarray(c, dtype=float)
    if c.shape != (t,):
        raise ValueError(f"c must have length {t}")
    if abs(c.sum() - t) > 1e-9 * max(1, t):
        raise ValueError("c must sum to the horizon")
    return c


def cafl_special_weights(
    history: InteractionHistory,
    n_pairs: Optional[int] = None,
    c=None,
) -> WeightAssignment:
    """CAFL weights for the no-repeat regime.

    An observation made at step ``s`` with propensity ``p`` and evaluated at
    horizon ``t`` gets ``c_s / p + sum_{r > s} c_r``. With the default ``c``
    this is ``n/(n-s) * ((t - s) + (n - t)/(n - s + 1) / p)``.

    Parameters
    ----------
    n_pairs : int, optional
        Catalogue size ``n`` used by :func:`compute_c`; defaults to
        :func:`default_catalogue_size`.
    c : array-like or "uniform", optional
        Override of the step constants (must sum to ``t``).
    """
    if not history.no_repeat:
        raise ValueError("cafl_special_weights requires a no-repeat history")
    t = history.horizon
    if t == 0:
        return _assignment(history, np.zeros(0), "cafl_special")
    n = default_catalogue_size(history) if n_pairs is None else int(n_pairs)
    cs = _resolve_c(t, n, c)
    obs = history.observations
    p = obs["p"]
    if (p <= 0).any():
        raise PositivityError("missing or zero propensity")
    # later[s-1] = sum_{r > s} c_r
    later = np.concatenate([np.cumsum(cs[::-1])[::-1][1:], [0.0]])
    s = obs["s"] - 1
    return _assignment(history, cs[s] / p + later[s], "cafl_special")


def cafl_general_weights(
    history: InteractionHistory,
    n_pairs: Optional[int] = None,
    c=None,
    exclude: Optional[np.ndarray] = None,
) -> WeightAssignment:
    """CAFL weights from full propensity tables.

    For each step ``s`` and pair (u, i):

    * if ``P(A_{s,ui}=1) > 0`` the observed term contributes ``c_s / p`` when
      the pair was recommended at ``s``;
    * otherwise the step borrows ``c_s`` times the average log-likelihood over
      the steps ``r`` at which the pair was recommendable and recommended,
      i.e. each of those observations gains ``c_s / n_ui``.

    Blocked steps of a pair that has not (yet) been observed by the horizon
    contribute nothing; they are logged at debug level.

    Parameters
    ----------
    exclude : bool array (U, I), optional
        Pairs left out of the objective entirely (for example a held-out test
        set that is never recommendable).

    Raises
    ------
    PositivityError
        If a pair outside ``exclude`` has zero propensity at every step, or a
        step lacks its propensity table.
    """
    t = history.horizon
    if t == 0:
        return _assignment(history, np.zeros(0), "cafl_general")
    if any(st.table is None for st in history.steps):
        raise PositivityError("general CAFL needs the full propensity table of every step")
    n = default_catalogue_size(history) if n_pairs is None else int(n_pairs)
    cs = _resolve_c(t, n, c)

    tables = np.stack([st.table for st in history.steps])  # (t, U, I)
    positive = tables > 0
    keep = np.ones(history.shape, dtype=bool) if exclude is None else ~np.asarray(exclude, dtype=bool)
    never = ~positive.any(axis=0) & keep
    if never.any():
        u, i = np.argwhere(never)[0]
        raise PositivityError(f"assumption 3 violated: pair ({u}, {i}) is never recommendable")

    obs = history.observations
    s_idx = obs["s"] - 1
    u, i = obs["u"], obs["i"]
    w = cs[s_idx] / obs["p"]

    # n_ui: number of recommendable-and-recommended steps of each pair
    usable = positive[s_idx, u, i]
    n_ui = np.zeros(history.shape)
    np.add.at(n_ui, (u[usable], i[usable]), 1.0)
    # borrowed c mass: sum of c_s over steps where the pair was blocked
    blocked_mass = np.tensordot(cs, (~positive).astype(float), axes=1) * keep
    orphan = (blocked_mass > 0) & (n_ui == 0)
    if orphan.any():
        logger.debug("%d blocked pair-steps have no positive-propensity observation", int(orphan.sum()))
    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(n_ui > 0, blocked_mass / n_ui, 0.0)
    w = w + np.where(usable, share[u, i], 0.0)
    return _assignment(history, w, "cafl_general")


def popularity_weights(history: InteractionHistory) -> WeightAssignment:
    """Weights inversely proportional to each item's observation count, mean 1."""
    obs = history.observations
    if len(obs["i"]) == 0:
        return _assignment(history, np.zeros(0), "popularity")
    counts = np.bincount(obs["i"], minlength=history.n_items).astype(float)
    w = 1.0 / counts[obs["i"]]
    return _assignment(history, w * len(w) / w.sum(), "popularity")


def weights_for(scheme: str, history: InteractionHistory, **kwargs) -> WeightAssignment:
    """Dispatch on a config name (``cafl`` is an alias of ``cafl_special``)."""
    name = "cafl_special" if scheme == "cafl" else scheme
    fn = {
        "naive": naive_weights,
        "ipw": ipw_weights,
        "cafl_special": cafl_special_weights,
        "cafl_general": cafl_general_weights,
        "popularity": popularity_weights,
    }.get(name)
    if fn is None:
        raise ValueError(f"unknown estimator {scheme!r}")
    return fn(history, **kwargs)


def dumps_weights(wa: WeightAssignment) -> str:
    """Line-delimited ``s u i weight scheme`` audit dump (tab separated)."""
    lines = ["s\tu\ti\tweight\tscheme"]
    for s, u, i, w in zip(wa.steps, wa.users, wa.items, wa.weights):
        lines.append(f"{int(s)}\t{int(u)}\t{int(i)}\t{float(w)!r}\t{wa.scheme}")
    return "\n".join(lines) + "\n"
