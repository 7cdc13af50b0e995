"""Observed-data panel with monotone missing outcomes.

Outcomes are stored as float arrays where absent entries hold NaN, and the
observation matrix ``R`` is the authoritative record of presence. The two are
checked against each other on construction, so a NaN can never stand in for a
real value and any arithmetic that touches a missing entry propagates NaN
instead of silently producing a number.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "DatasetError",
    "MonotoneViolation",
    "LongTermDataset",
    "GroundTruth",
    "validate_monotone",
    "observed_subset",
    "load_csv",
    "write_csv",
    "csv_header",
]


class DatasetError(ValueError):
    """Raised when a panel breaks one of its structural invariants."""


@dataclass(frozen=True)
class MonotoneViolation:
    """First place where a row of ``R`` increases.

    ``t`` and ``t_prime`` are 1-based stage indices with ``R[unit, t] == 0``
    and ``R[unit, t_prime] == 1``.
    """

    unit: int
    t: int
    t_prime: int


def validate_monotone(R) -> MonotoneViolation | None:
    """Return ``None`` if every row of ``R`` is non-increasing, else the first violation."""
    R = np.asarray(R)
    if R.size == 0:
        return None
    if R.ndim != 2:
        raise DatasetError(f"R must be 2-D, got shape {R.shape}")
    rises = np.diff(R.astype(np.int8), axis=1) > 0
    bad_rows = np.flatnonzero(rises.any(axis=1))
    if bad_rows.size == 0:
        return None
    i = int(bad_rows[0])
    t_prime = int(np.flatnonzero(rises[i])[0]) + 2
    t = int(np.flatnonzero(R[i, : t_prime - 1] == 0)[0]) + 1
    return MonotoneViolation(unit=i, t=t, t_prime=t_prime)


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LongTermDataset:
    """Covariates, treatment, staged outcomes and their observation indicators.

    Parameters
    ----------
    X : (n, p) array
        Fully observed baseline covariates.
    A : (n,) array of {0, 1}
        Treatment indicator.
    S : (n, T - 1) array
        Short-term outcomes; NaN exactly where ``R[:, t] == 0``.
    Y : (n,) array
        Long-term outcome; NaN exactly where ``R[:, -1] == 0``.
    R : (n, T) array of {0, 1}
        Observation indicators, last column belongs to ``Y``.
    """

    X: NDArray[np.float64]
    A: NDArray[np.int64]
    S: NDArray[np.float64]
    Y: NDArray[np.float64]
    R: NDArray[np.int64]

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        A = np.asarray(self.A)
        S = np.asarray(self.S, dtype=float)
        Y = np.asarray(self.Y, dtype=float).ravel()
        R = np.asarray(self.R)
        n = X.shape[0]
        if S.ndim == 1:
            S = S[:, None]
        if A.shape != (n,) or Y.shape != (n,) or S.shape[0] != n or R.ndim != 2 or R.shape[0] != n:
            raise DatasetError(
                f"shape mismatch: X{X.shape} A{A.shape} S{S.shape} Y{Y.shape} R{R.shape}"
            )
        if R.shape[1] != S.shape[1] + 1:
            raise DatasetError(f"R has {R.shape[1]} stages but S has {S.shape[1]} short-term columns")
        if R.shape[1] < 2:
            raise DatasetError("need at least two outcome stages (T >= 2)")
        if not np.all(np.isin(A, (0, 1))):
            raise DatasetError("A must be binary")
        if not np.all(np.isin(R, (0, 1))):
            raise DatasetError("R must be binary")
        if not np.all(np.isfinite(X)):
            raise DatasetError("X must be finite and fully observed")
        v = validate_monotone(R)
        if v is not None:
            raise DatasetError(
                f"monotone-missing violation at unit {v.unit}: R[t={v.t}]=0 but R[t'={v.t_prime}]=1"
            )
        panel = np.column_stack([S, Y])
        present = ~np.isnan(panel)
        if np.any(np.isinf(panel)):
            raise DatasetError("outcomes must be finite where present")
        mismatch = present != (R == 1)
        if mismatch.any():
            i, t = (int(k) for k in np.argwhere(mismatch)[0])
            raise DatasetError(
                f"presence mismatch at unit {i}, stage {t + 1}: R={int(R[i, t])} but value is "
                f"{'present' if present[i, t] else 'absent'}"
            )
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "A", _frozen(A.astype(np.int64)))
        object.__setattr__(self, "S", _frozen(S))
        object.__setattr__(self, "Y", _frozen(Y))
        object.__setattr__(self, "R", _frozen(R.astype(np.int64)))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def T(self) -> int:
        return self.R.shape[1]

    @property
    def t0(self) -> int:
        return self.T - 1

    @property
    def outcomes(self) -> NDArray[np.float64]:
        """(n, T) matrix ``[S_1, ..., S_t0, Y]``."""
        return np.column_stack([self.S, self.Y])

    def outcome(self, t: int) -> NDArray[np.float64]:
        """Stage-``t`` outcome column (1-based; ``t == T`` is ``Y``)."""
        _check_stage(t, self.T)
        return self.Y if t == self.T else self.S[:, t - 1]

    def history(self, t: int) -> NDArray[np.float64]:
        """Outcomes preceding stage ``t`` as an (n, t - 1) matrix."""
        _check_stage(t, self.T)
        return self.S[:, : t - 1]

    def with_missing(self, R) -> "LongTermDataset":
        """Mask outcomes according to a new ``R`` (values must currently be present)."""
        R = np.asarray(R, dtype=np.int64)
        panel = self.outcomes
        if np.isnan(panel[R == 1]).any():
            raise DatasetError("cannot reveal an outcome that is already missing")
        panel = np.where(R == 1, panel, np.nan)
        return LongTermDataset(X=self.X, A=self.A, S=panel[:, :-1], Y=panel[:, -1], R=R)

    def take(self, idx) -> "LongTermDataset":
        idx = np.asarray(idx)
        return LongTermDataset(X=self.X[idx], A=self.A[idx], S=self.S[idx], Y=self.Y[idx], R=self.R[idx])

    def equals(self, other: "LongTermDataset") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f), equal_nan=True)
            for f in ("X", "A", "S", "Y", "R")
        )


@dataclass(frozen=True)
class GroundTruth:
    """Potential outcomes and true effects for a synthetic panel.

    ``S_pot`` has shape (n, T - 1, 2) and ``Y_pot`` shape (n, 2); the last axis
    indexes the treatment arm. ``tau_x`` holds E[Y(1) - Y(0) | X = x_i].
    """

    S_pot: NDArray[np.float64]
    Y_pot: NDArray[np.float64]
    tau_x: NDArray[np.float64]
    tau: float = field(init=False)

    def __post_init__(self) -> None:
        for name in ("S_pot", "Y_pot", "tau_x"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "tau", float(np.mean(self.Y_pot[:, 1] - self.Y_pot[:, 0])))

    @property
    def ite(self) -> NDArray[np.float64]:
        """Realized per-unit differences Y(1) - Y(0)."""
        return self.Y_pot[:, 1] - self.Y_pot[:, 0]

    def factual(self, A) -> tuple[NDArray, NDArray]:
        """Observed (S, Y) implied by consistency for treatment vector ``A``."""
        A = np.asarray(A, dtype=int)
        rows = np.arange(len(A))
        return self.S_pot[rows, :, A], self.Y_pot[rows, A]


def _check_stage(t: int, T: int) -> None:
    if not 1 <= t <= T:
        raise DatasetError(f"stage {t} out of range 1..{T}")


def observed_subset(ds: LongTermDataset, t: int) -> NDArray[np.int64]:
    """Indices of units whose stage-``t`` outcome is observed."""
    _check_stage(t, ds.T)
    return np.flatnonzero(ds.R[:, t - 1] == 1)


def csv_header(p: int, T: int) -> list[str]:
    return (
        [f"x{j}" for j in range(1, p + 1)]
        + ["a"]
        + [f"s{t}" for t in range(1, T)]
        + ["y"]
        + [f"r{t}" for t in range(1, T + 1)]
    )


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_csv(ds: LongTermDataset, path) -> None:
    """Write ``ds`` in the wide one-row-per-unit layout (empty cell = missing)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(ds.p, ds.T))
        for i in range(ds.n):
            w.writerow(
                [repr(float(v)) for v in ds.X[i]]
                + [str(int(ds.A[i]))]
                + [_fmt(v) for v in ds.S[i]]
                + [_fmt(ds.Y[i])]
                + [str(int(r)) for r in ds.R[i]]
            )


def _default_schema(header: Sequence[str]) -> dict[str, list[str]]:
    xs = sorted((h for h in header if h.startswith("x") and h[1:].isdigit()), key=lambda h: int(h[1:]))
    ss = sorted((h for h in header if h.startswith("s") and h[1:].isdigit()), key=lambda h: int(h[1:]))
    rs = sorted((h for h in header if h.startswith("r") and h[1:].isdigit()), key=lambda h: int(h[1:]))
    return {"X": xs, "A": ["a"], "S": ss, "Y": ["y"], "R": rs}


def load_csv(path, schema: dict[str, Sequence[str]] | None = None) -> LongTermDataset:
    """Read a wide CSV panel.

    ``schema`` maps each of ``X``, ``A``, ``S``, ``Y``, ``R`` to column names;
    when omitted the ``x1..xp, a, s1.., y, r1..`` convention is used.
    Parse problems are reported with the 1-based file line and column name.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file, header row is mandatory") from None
        schema = {k: list(v) for k, v in (schema or _default_schema(header)).items()}
        for key in ("X", "A", "S", "Y", "R"):
            if key not in schema:
                raise DatasetError(f"schema is missing the {key!r} entry")
        pos = {h: j for j, h in enumerate(header)}
        missing_cols = [c for cols in schema.values() for c in cols if c not in pos]
        if missing_cols:
            raise DatasetError(f"{path}: header lacks columns {missing_cols}")
        if len(schema["R"]) != len(schema["S"]) + 1 or len(schema["A"]) != 1 or len(schema["Y"]) != 1:
            raise DatasetError(
                f"{path}: shape mismatch between schema groups "
                f"(S={len(schema['S'])}, R={len(schema['R'])})"
            )

        rows: dict[str, list[list[float]]] = {k: [] for k in schema}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for key, cols in schema.items():
                vals = []
                for c in cols:
                    cell = row[pos[c]].strip()
                    if cell == "":
                        if key not in ("S", "Y"):
                            raise DatasetError(f"{path}:{lineno}: column {c!r} may not be empty")
                        vals.append(np.nan)
                        continue
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise DatasetError(f"{path}:{lineno}: column {c!r}: cannot parse {cell!r}") from None
                rows[key].append(vals)

    n = len(rows["A"])

    def block(key: str, width: int) -> NDArray:
        return np.asarray(rows[key], dtype=float).reshape(n, width)

    A = block("A", 1)[:, 0]
    R = block("R", len(schema["R"]))
    if not np.all(np.isin(A, (0, 1))) or not np.all(np.isin(R, (0, 1))):
        raise DatasetError(f"{path}: treatment and observation columns must be 0/1")
    return LongTermDataset(
        X=block("X", len(schema["X"])),
        A=A.astype(np.int64),
        S=block("S", len(schema["S"])),
        Y=block("Y", 1)[:, 0],
        R=R.astype(np.int64),
    )
