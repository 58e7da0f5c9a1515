"""Subjects, censoring intervals, and observed-history lookups.

A study records, for each participant, a possibly censored follow-up time,
baseline covariates, and the values of a monotone binary covariate measured
at a handful of questionnaire times.  The change time of the covariate is
never observed directly; the questionnaire sequence only brackets it inside
a half-open interval ``(w_left, w_right]``.  Everything downstream (naive
imputation, calibration-model fitting, partial-likelihood estimation) works
from the representations defined here.

All objects are immutable after construction and safe to share between
worker processes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class InvalidSubjectError(ValueError):
    """Raised when a subject's measurement sequence violates an invariant."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CensoringInterval:
    """Half-open interval ``(left, right]`` known to contain the change time.

    ``right`` is ``math.inf`` when no positive measurement was ever observed
    (right-censored change time).
    """

    left: float
    right: float

    def __post_init__(self):
        if not 0.0 <= self.left < self.right:
            raise InvalidSubjectError(
                f"interval must satisfy 0 <= left < right, got ({self.left}, {self.right}]"
            )

    @property
    def is_right_censored(self) -> bool:
        return math.isinf(self.right)


@dataclass(frozen=True)
class History:
    """Observed covariate history of a subject evaluated at time ``t``.

    ``w_bar`` is the last measurement time at or before ``t`` (0 when the
    subject has not been measured yet) and ``x_at_wbar`` the binary status
    recorded there (False at ``w_bar == 0``).  ``q`` carries the calibration
    covariates and ``z`` the main-model covariates of the subject.
    """

    t: float
    w_bar: float
    x_at_wbar: bool
    q: np.ndarray
    z: np.ndarray | None = None


@dataclass(frozen=True)
class Subject:
    """One study participant.

    Parameters
    ----------
    id : hashable
        Opaque identifier, echoed into outputs.
    obs_time : float
        Observed follow-up time (event or censoring, whichever came first).
    event : bool
        True when ``obs_time`` is an event, False when censored.
    z : array-like
        Main-model covariates.
    q : array-like
        Calibration-model covariates (may be empty).
    quest_times : array-like
        Strictly increasing measurement times of the binary covariate.
    quest_status : array-like of bool
        Status at each measurement time; must be monotone nondecreasing
        (the covariate never reverts from 1 to 0).
    """

    id: object
    obs_time: float
    event: bool
    z: np.ndarray
    q: np.ndarray
    quest_times: np.ndarray
    quest_status: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", _readonly(np.atleast_1d(self.z)))
        object.__setattr__(self, "q", _readonly(np.atleast_1d(self.q)))
        wt = np.asarray(self.quest_times, dtype=float).reshape(-1)
        xs = np.asarray(self.quest_status, dtype=bool).reshape(-1)
        if wt.size != xs.size:
            raise InvalidSubjectError(
                f"subject {self.id!r}: {wt.size} measurement times but {xs.size} statuses"
            )
        if wt.size and (wt < 0).any():
            raise InvalidSubjectError(f"subject {self.id!r}: negative measurement time")
        if wt.size > 1 and not (np.diff(wt) > 0).all():
            raise InvalidSubjectError(
                f"subject {self.id!r}: measurement times not strictly increasing"
            )
        if xs.size > 1 and (np.diff(xs.astype(int)) < 0).any():
            raise InvalidSubjectError(
                f"subject {self.id!r}: status sequence reverts from 1 to 0"
            )
        if not self.obs_time >= 0:
            raise InvalidSubjectError(f"subject {self.id!r}: negative follow-up time")
        wt = _readonly(wt)
        object.__setattr__(self, "quest_times", wt)
        xs.setflags(write=False)
        object.__setattr__(self, "quest_status", xs)

    @property
    def n_measurements(self) -> int:
        return int(self.quest_times.size)


def build_interval(quest_times: Sequence[float], quest_status: Sequence[bool]) -> CensoringInterval:
    """Censoring interval ``(w_left, w_right]`` for the change time.

    ``w_left`` is the last time the covariate was measured as 0 (0 when there
    is no such time), ``w_right`` the first time it was measured as 1
    (infinity when it never was).  Measurements outside ``[w_left, w_right]``
    carry no information about the change time.
    """
    wt = np.asarray(quest_times, dtype=float).reshape(-1)
    xs = np.asarray(quest_status, dtype=bool).reshape(-1)
    if wt.size != xs.size:
        raise InvalidSubjectError("measurement times and statuses differ in length")
    if xs.size > 1 and (np.diff(xs.astype(int)) < 0).any():
        raise InvalidSubjectError("status sequence reverts from 1 to 0")
    if wt.size == 0:
        return CensoringInterval(0.0, math.inf)
    neg = wt[~xs]
    pos = wt[xs]
    left = 0.0 if neg.size == 0 else float(neg[-1])
    right = math.inf if pos.size == 0 else float(pos[0])
    return CensoringInterval(left, right)


def history_at(subject: Subject, t: float) -> History:
    """Observed history of ``subject`` at time ``t``.

    A measurement taken exactly at ``t`` is part of the history at ``t``,
    matching last-value-carried-forward semantics.
    """
    if t < 0:
        raise ValueError(f"evaluation time must be nonnegative, got {t}")
    wt = subject.quest_times
    j = int(np.searchsorted(wt, t, side="right")) - 1
    if j < 0:
        return History(t=float(t), w_bar=0.0, x_at_wbar=False, q=subject.q, z=subject.z)
    return History(
        t=float(t),
        w_bar=float(wt[j]),
        x_at_wbar=bool(subject.quest_status[j]),
        q=subject.q,
        z=subject.z,
    )


def midpoint_impute(subject: Subject) -> float | None:
    """Midpoint of the censoring interval, or None when right-censored.

    Right-censored change times have no finite interval to bisect; those
    subjects are treated as never exposed within follow-up, which is exactly
    the last-value-carried-forward behaviour.
    """
    interval = build_interval(subject.quest_times, subject.quest_status)
    if interval.is_right_censored:
        return None
    return 0.5 * (interval.left + interval.right)


class Dataset:
    """Immutable collection of subjects with cached design matrices.

    Parameters
    ----------
    subjects : iterable of Subject
    terminal : bool
        When True the main event is terminal and measurements after the
        follow-up time are impossible; such subjects are rejected at
        ingestion.  When False (e.g. the exposure keeps being measured after
        a non-terminal event) they are kept.
    true_change_times : array-like, optional
        Generator-side truth, kept only for simulation oracle checks.
    """

    def __init__(self, subjects: Iterable[Subject], terminal: bool = True,
                 true_change_times: Sequence[float] | None = None):
        subs = tuple(subjects)
        if terminal:
            for s in subs:
                if s.n_measurements and s.quest_times[-1] > s.obs_time:
                    raise InvalidSubjectError(
                        f"subject {s.id!r}: measurement at {s.quest_times[-1]} "
                        f"after follow-up time {s.obs_time} in a terminal-event study"
                    )
        self.subjects = subs
        self.terminal = bool(terminal)
        self.obs_times = _readonly(np.array([s.obs_time for s in subs]))
        self.events = np.array([s.event for s in subs], dtype=bool)
        self.events.setflags(write=False)
        self.z = _readonly(np.array([s.z for s in subs])) if subs else np.zeros((0, 0))
        self.q = _readonly(np.array([s.q for s in subs])) if subs else np.zeros((0, 0))
        self.intervals = tuple(
            build_interval(s.quest_times, s.quest_status) for s in subs
        )
        if true_change_times is not None:
            self.true_change_times = _readonly(np.asarray(true_change_times))
            if self.true_change_times.size != len(subs):
                raise ValueError("true_change_times length does not match subjects")
        else:
            self.true_change_times = None

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def n_events(self) -> int:
        return int(self.events.sum())

    def interval_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Left and right interval endpoints as arrays (right may be inf)."""
        left = np.array([iv.left for iv in self.intervals])
        right = np.array([iv.right for iv in self.intervals])
        return left, right

    def subset(self, mask: np.ndarray) -> "Dataset":
        """Dataset restricted to subjects where ``mask`` is True."""
        mask = np.asarray(mask, dtype=bool)
        subs = [s for s, m in zip(self.subjects, mask) if m]
        tv = None
        if self.true_change_times is not None:
            tv = self.true_change_times[mask]
        return Dataset(subs, terminal=self.terminal, true_change_times=tv)


@dataclass(frozen=True)
class ColumnRoles:
    """Column-role declaration for the one-row-per-subject CSV layout.

    ``questionnaires`` lists (time column, status column) pairs in order;
    blank cells mean the subject has fewer measurements than the declared
    maximum.
    """

    id: str
    time: str
    event: str
    z: tuple[str, ...]
    q: tuple[str, ...] = ()
    questionnaires: tuple[tuple[str, str], ...] = ()
    terminal: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnRoles":
        try:
            return cls(
                id=d["id"],
                time=d["time"],
                event=d["event"],
                z=tuple(d.get("z", ())),
                q=tuple(d.get("q", ())),
                questionnaires=tuple((w, x) for w, x in d.get("questionnaires", ())),
                terminal=bool(d.get("terminal", True)),
            )
        except KeyError as exc:
            raise ValueError(f"study config is missing required key {exc.args[0]!r}") from None


def dataset_from_csv(path: str, roles: ColumnRoles) -> Dataset:
    """Read subjects from a CSV file with one row per subject."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [roles.id, roles.time, roles.event, *roles.z, *roles.q]
        for w, x in roles.questionnaires:
            needed += [w, x]
        missing = [c for c in needed if c not in header]
        if missing:
            raise ValueError(f"input file lacks declared columns: {', '.join(missing)}")
        subjects = []
        for rownum, row in enumerate(reader, start=2):
            try:
                times, status = [], []
                for wcol, xcol in roles.questionnaires:
                    wraw = (row[wcol] or "").strip()
                    xraw = (row[xcol] or "").strip()
                    if wraw == "" and xraw == "":
                        continue
                    if wraw == "" or xraw == "":
                        raise InvalidSubjectError(
                            f"half-filled questionnaire pair ({wcol}, {xcol})"
                        )
                    times.append(float(wraw))
                    status.append(_parse_flag(xraw))
                subjects.append(Subject(
                    id=row[roles.id],
                    obs_time=float(row[roles.time]),
                    event=_parse_flag(row[roles.event]),
                    z=[float(row[c]) for c in roles.z],
                    q=[float(row[c]) for c in roles.q],
                    quest_times=times,
                    quest_status=status,
                ))
            except (ValueError, InvalidSubjectError, TypeError) as exc:
                raise ValueError(f"row {rownum}: {exc}") from exc
    return Dataset(subjects, terminal=roles.terminal)


def _parse_flag(raw: str) -> bool:
    v = str(raw).strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no"):
        return False
    raise ValueError(f"cannot parse {raw!r} as a 0/1 flag")
