"""Panel ingestion: subject records, monotone dropout indicators, CSV I/O.

Data arrive in long format, one row per (subject, occasion).  A subject
observed at occasions ``1..T_i`` contributes ``T_i`` responses and a dropout
indicator vector of length ``min(T, T_i + 1)`` whose only non-zero entry (for
non-completers) sits at position ``T_i + 1``.

Dropout covariates are needed one occasion past the last observed response.
They are taken from an explicit "dropout row" (occasion ``T_i + 1`` with an
empty response) when the CSV carries one, and otherwise extrapolated: columns
declared time-linear in the schema are advanced by their slope, all other
columns must be constant within the subject and are carried forward.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from scipy import sparse

__all__ = [
    "DataError",
    "SubjectRecord",
    "PanelDataset",
    "PanelArrays",
    "RiskGroups",
    "Schema",
    "build_dropout_indicators",
    "transform_response",
    "load_csv",
    "write_csv",
    "ingest_summary",
]


class DataError(ValueError):
    """Raised for malformed or unsupported panel data."""


def transform_response(mmse):
    """Map an MMSE score in [0, 30] to ``log(1 + (30 - mmse))``.

    Accepts a scalar or an array of integer scores.
    """
    arr = np.asarray(mmse, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DataError("MMSE scores must be finite")
    if np.any((arr < 0) | (arr > 30)):
        raise DataError("MMSE score out of range [0, 30]")
    if np.any(arr != np.round(arr)):
        raise DataError("MMSE scores must be integers")
    out = np.log1p(30.0 - arr)
    return float(out) if out.ndim == 0 else out


def build_dropout_indicators(T_i: int, T: int) -> np.ndarray:
    """Dropout indicator vector for a subject with ``T_i`` observed occasions.

    >>> build_dropout_indicators(1, 5)
    array([0, 1])
    """
    T_i, T = int(T_i), int(T)
    if T < 1 or T_i < 1 or T_i > T:
        raise DataError(f"need 1 <= T_i <= T, got T_i={T_i}, T={T}")
    r = np.zeros(min(T, T_i + 1), dtype=int)
    if T_i < T:
        r[T_i] = 1
    return r


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    """One subject's responses, designs and dropout indicators.

    ``X`` has one row per observed occasion; ``V`` and ``r`` have
    ``min(T, T_i + 1)`` rows.  ``status`` is descriptive only (e.g. "dropout"
    or "death"); every exit is modelled as the same absorbing event.
    """

    id: str
    y: np.ndarray
    X: np.ndarray
    V: np.ndarray
    r: np.ndarray
    T_i: int
    completer: bool
    status: str | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        V = np.asarray(self.V, dtype=float)
        r = np.asarray(self.r, dtype=int).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(len(y), -1)
        if V.ndim == 1:
            V = V.reshape(len(r), -1)
        for name, val in (("y", y), ("X", X), ("V", V), ("r", r)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        T_i = int(self.T_i)
        if T_i < 1 or len(y) != T_i or X.shape[0] != T_i:
            raise DataError(f"subject {self.id}: y/X rows must equal T_i={T_i}")
        if V.shape[0] != len(r):
            raise DataError(f"subject {self.id}: V rows must equal len(r)")
        expected_len = T_i if self.completer else T_i + 1
        if len(r) != expected_len:
            raise DataError(f"subject {self.id}: r has length {len(r)}, expected {expected_len}")
        if np.any(r[:T_i] != 0) or (not self.completer and r[T_i] != 1):
            raise DataError(f"subject {self.id}: r is not a monotone dropout pattern")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X)) and np.all(np.isfinite(V))):
            raise DataError(f"subject {self.id}: non-finite values")


@dataclass(frozen=True, eq=False)
class PanelArrays:
    """Zero-padded n x T views of a dataset used by the vectorised likelihood.

    ``obs`` masks observed responses, ``risk`` masks dropout-indicator
    entries.  The sufficient statistics ``sx``, ``sy``, ``sxx``, ``sxy`` are
    sums over observed occasions.
    """

    Y: np.ndarray      # (n, T)
    X: np.ndarray      # (n, T, p)
    obs: np.ndarray    # (n, T) float 0/1
    V: np.ndarray      # (n, T, q)
    R: np.ndarray      # (n, T)
    risk: np.ndarray   # (n, T) float 0/1
    Ti: np.ndarray     # (n,)
    sx: np.ndarray     # (n, p)
    sy: np.ndarray     # (n,)
    sxx: np.ndarray    # (p, p)
    sxy: np.ndarray    # (p,)


@dataclass(frozen=True, eq=False)
class RiskGroups:
    """At-risk occasions collapsed to distinct ``(v, r)`` rows.

    ``counts[k, i]`` is the number of at-risk occasions of subject ``i`` whose
    dropout covariates and indicator equal ``V[k], r[k]``; any sum over
    at-risk occasions of a function of ``(v, r)`` weighted per subject can be
    evaluated on the ``G`` distinct rows and mapped back with ``counts``.
    """

    V: np.ndarray              # (G, q)
    r: np.ndarray              # (G,)
    counts: sparse.csr_matrix  # (G, n)
    counts_T: sparse.csr_matrix  # (n, G)


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Ordered collection of subjects sharing ``T``, ``p`` and ``q``."""

    subjects: tuple[SubjectRecord, ...]
    T: int
    x_names: tuple[str, ...]
    v_names: tuple[str, ...]
    time_linear: dict[str, float] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "x_names", tuple(self.x_names))
        object.__setattr__(self, "v_names", tuple(self.v_names))
        if not self.subjects:
            raise DataError("dataset has no subjects")
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise DataError("subject ids must be unique")
        p, q = len(self.x_names), len(self.v_names)
        for s in self.subjects:
            if s.X.shape[1] != p or s.V.shape[1] != q:
                raise DataError(f"subject {s.id}: design width mismatch")
            if s.T_i > self.T or s.completer != (s.T_i == self.T):
                raise DataError(f"subject {s.id}: inconsistent with T={self.T}")

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return len(self.x_names)

    @property
    def q(self) -> int:
        return len(self.v_names)

    @property
    def n_completers(self) -> int:
        return sum(s.completer for s in self.subjects)

    @cached_property
    def arrays(self) -> PanelArrays:
        n, T, p, q = self.n, self.T, self.p, self.q
        Y = np.zeros((n, T))
        X = np.zeros((n, T, p))
        obs = np.zeros((n, T))
        V = np.zeros((n, T, q))
        R = np.zeros((n, T))
        risk = np.zeros((n, T))
        Ti = np.zeros(n, dtype=int)
        for i, s in enumerate(self.subjects):
            k, m = s.T_i, len(s.r)
            Y[i, :k] = s.y
            X[i, :k] = s.X
            obs[i, :k] = 1.0
            V[i, :m] = s.V
            R[i, :m] = s.r
            risk[i, :m] = 1.0
            Ti[i] = k
        sx = np.einsum("itp,it->ip", X, obs)
        sy = (Y * obs).sum(axis=1)
        sxx = np.einsum("itp,itk,it->pk", X, X, obs)
        sxy = np.einsum("itp,it,it->p", X, Y, obs)
        out = PanelArrays(Y, X, obs, V, R, risk, Ti, sx, sy, sxx, sxy)
        for a in (Y, X, obs, V, R, risk, Ti, sx, sy, sxx, sxy):
            a.setflags(write=False)
        return out

    @cached_property
    def risk_groups(self) -> RiskGroups:
        A = self.arrays
        i, t = np.nonzero(A.risk)
        rows = np.column_stack([A.V[i, t], A.R[i, t]])
        uniq, inv = np.unique(rows, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        M = sparse.coo_matrix((np.ones(len(i)), (inv, i)), shape=(len(uniq), self.n)).tocsr()
        V = np.ascontiguousarray(uniq[:, :-1])
        r = np.ascontiguousarray(uniq[:, -1])
        for a in (V, r):
            a.setflags(write=False)
        return RiskGroups(V, r, M, M.T.tocsr())

    def subset(self, index) -> "PanelDataset":
        """Dataset restricted to the subjects at positions ``index``."""
        subs = [self.subjects[i] for i in index]
        return PanelDataset(subs, self.T, self.x_names, self.v_names,
                            dict(self.time_linear), dict(self.meta))


@dataclass(frozen=True)
class Schema:
    """Column mapping for the long CSV format (the JSON sidecar)."""

    id: str = "id"
    occasion: str = "occasion"
    y: str = "y"
    x: tuple[str, ...] = ()
    v: tuple[str, ...] = ()
    T: int | None = None
    status: str | None = None
    transform: str | None = None
    time_linear: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        known = {"id", "occasion", "y", "x", "v", "T", "status", "transform", "time_linear"}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}")
        d = dict(d)
        d["x"] = tuple(d.get("x", ()))
        d["v"] = tuple(d.get("v", ()))
        d["time_linear"] = {k: float(v) for k, v in d.get("time_linear", {}).items()}
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "Schema":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = {"id": self.id, "occasion": self.occasion, "y": self.y,
             "x": list(self.x), "v": list(self.v)}
        if self.T is not None:
            d["T"] = self.T
        if self.status is not None:
            d["status"] = self.status
        if self.transform is not None:
            d["transform"] = self.transform
        if self.time_linear:
            d["time_linear"] = dict(self.time_linear)
        return d


def _parse_float(x) -> float:
    if x is None or (isinstance(x, float) and math.isnan(x)) or not str(x).strip():
        return math.nan
    try:
        return float(x)
    except ValueError:
        return None


def _to_numeric(df: pd.DataFrame, col: str) -> pd.Series:
    # float() rounds correctly, so %.17g text reloads bit for bit
    vals = [_parse_float(x) for x in df[col]]
    if any(v is None for v in vals):
        raise DataError(f"non-numeric values in column {col!r}")
    return pd.Series(vals, index=df.index, dtype=float)


def load_csv(path, schema: Schema | dict | None = None) -> PanelDataset:
    """Read a long-format panel CSV into a :class:`PanelDataset`.

    Raises
    ------
    DataError
        On missing columns, non-numeric fields, gapped occasion sequences
        (intermittent missingness) or covariates that cannot be extended to
        the dropout occasion.
    """
    if schema is None:
        schema = Schema()
    elif isinstance(schema, dict):
        schema = Schema.from_dict(schema)
    df = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])
    return _from_frame(df, schema)


def _from_frame(df: pd.DataFrame, schema: Schema) -> PanelDataset:
    cov_cols = list(dict.fromkeys(schema.x + schema.v))
    needed = [schema.id, schema.occasion, schema.y, *cov_cols]
    if schema.status:
        needed.append(schema.status)
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise DataError(f"missing columns: {missing}")
    unknown_tl = set(schema.time_linear) - set(schema.v)
    if unknown_tl:
        raise DataError(f"time_linear columns not among dropout covariates: {sorted(unknown_tl)}")

    ids = df[schema.id].astype(str)
    occ = _to_numeric(df, schema.occasion)
    if occ.isna().any() or np.any(occ != np.round(occ)):
        raise DataError("occasion must be an integer in every row")
    occ = occ.astype(int)
    y = _to_numeric(df, schema.y)
    if schema.transform == "mmse":
        y = y.copy()
        mask = y.notna()
        y[mask] = transform_response(y[mask].to_numpy())
    elif schema.transform not in (None, "none"):
        raise DataError(f"unknown response transform {schema.transform!r}")
    covs = {c: _to_numeric(df, c) for c in cov_cols}

    observed_occ = occ[y.notna()]
    if observed_occ.empty:
        raise DataError("no observed responses")
    T = int(schema.T) if schema.T is not None else int(observed_occ.max())

    frame = pd.DataFrame({"id": ids, "occ": occ, "y": y, **{f"c:{c}": covs[c] for c in cov_cols}})
    if schema.status:
        frame["status"] = df[schema.status].where(df[schema.status].notna(), None)

    subjects = []
    for sid, g in frame.groupby("id", sort=False):
        g = g.sort_values("occ")
        occs = g["occ"].to_numpy()
        if len(np.unique(occs)) != len(occs):
            raise DataError(f"subject {sid}: duplicated occasions")
        if occs[0] != 1 or np.any(np.diff(occs) != 1):
            raise DataError(f"subject {sid}: non-contiguous occasions")
        yv = g["y"].to_numpy(dtype=float)
        present = ~np.isnan(yv)
        T_i = int(present.sum())
        if T_i == 0:
            raise DataError(f"subject {sid}: no observed responses")
        if not np.all(present[:T_i]) or len(occs) > T_i + 1:
            raise DataError(f"subject {sid}: non-contiguous occasions (missing response before last visit)")
        if T_i > T:
            raise DataError(f"subject {sid}: {T_i} occasions exceed T={T}")
        has_dropout_row = len(occs) == T_i + 1
        if has_dropout_row and T_i == T:
            raise DataError(f"subject {sid}: dropout row past the last planned occasion")

        obs_rows = g.iloc[:T_i]
        X = np.column_stack([obs_rows[f"c:{c}"].to_numpy(dtype=float) for c in schema.x]) \
            if schema.x else np.zeros((T_i, 0))
        if np.isnan(X).any():
            raise DataError(f"subject {sid}: missing longitudinal covariates")
        Vobs = np.column_stack([obs_rows[f"c:{c}"].to_numpy(dtype=float) for c in schema.v]) \
            if schema.v else np.zeros((T_i, 0))
        if np.isnan(Vobs).any():
            raise DataError(f"subject {sid}: missing dropout covariates")
        completer = T_i == T
        if completer:
            V = Vobs
        else:
            if has_dropout_row:
                extra = np.array([g.iloc[T_i][f"c:{c}"] for c in schema.v], dtype=float)
                if np.isnan(extra).any():
                    raise DataError(f"subject {sid}: dropout row lacks dropout covariates")
            else:
                extra = np.empty(len(schema.v))
                for j, c in enumerate(schema.v):
                    col = Vobs[:, j]
                    if c in schema.time_linear:
                        extra[j] = col[-1] + schema.time_linear[c]
                    elif np.all(col == col[0]):
                        extra[j] = col[-1]
                    else:
                        raise DataError(
                            f"subject {sid}: time-varying dropout covariate {c!r} cannot be "
                            "extrapolated; add a dropout row or declare it time_linear")
            V = np.vstack([Vobs, extra[None, :]]) if schema.v else np.zeros((T_i + 1, 0))
        status = None
        if schema.status:
            vals = [s for s in g["status"].tolist() if isinstance(s, str) and s.strip()]
            status = vals[-1] if vals else None
        subjects.append(SubjectRecord(
            id=str(sid), y=yv[:T_i], X=X, V=V, r=build_dropout_indicators(T_i, T),
            T_i=T_i, completer=completer, status=status))

    return PanelDataset(subjects, T, schema.x, schema.v, dict(schema.time_linear))


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else format(float(x), ".17g")


def write_csv(dataset: PanelDataset, path, schema_path=None) -> Schema:
    """Write ``dataset`` in long format; returns the matching :class:`Schema`.

    Non-completers get an explicit dropout row carrying the dropout
    covariates at occasion ``T_i + 1`` with an empty response, so reloading
    reproduces ``V`` exactly.
    """
    cols = list(dict.fromkeys(dataset.x_names + dataset.v_names))
    has_status = any(s.status is not None for s in dataset.subjects)
    header = ["id", "occasion", "y", *cols] + (["status"] if has_status else [])
    xi = {c: j for j, c in enumerate(dataset.x_names)}
    vi = {c: j for j, c in enumerate(dataset.v_names)}
    lines = [",".join(header)]
    for s in dataset.subjects:
        for t in range(len(s.r)):
            row = [s.id, str(t + 1), _fmt(s.y[t]) if t < s.T_i else ""]
            for c in cols:
                if c in vi:
                    row.append(_fmt(s.V[t, vi[c]]))
                elif t < s.T_i:
                    row.append(_fmt(s.X[t, xi[c]]))
                else:
                    row.append("")
            if has_status:
                row.append(s.status or "")
            lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")
    schema = Schema(x=dataset.x_names, v=dataset.v_names, T=dataset.T,
                    status="status" if has_status else None,
                    time_linear=dict(dataset.time_linear))
    if schema_path is not None:
        Path(schema_path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n")
    return schema


def ingest_summary(dataset: PanelDataset) -> dict:
    """Per-occasion attrition counts in the layout of a follow-up table.

    Row ``t`` counts subjects observed at ``t`` (``total``), those also seen
    at ``t + 1`` (``complete``) and those leaving between ``t`` and ``t + 1``,
    split by status when one is recorded.
    """
    n, T = dataset.n, dataset.T
    Ti = np.array([s.T_i for s in dataset.subjects])
    statuses = [s.status or "dropout" for s in dataset.subjects]
    labels = sorted(set(st for st, s in zip(statuses, dataset.subjects) if not s.completer))

    def pct(a, b):
        return round(100.0 * a / b, 2) if b else 0.0

    rows = []
    for t in range(1, T):
        total = int((Ti >= t).sum())
        complete = int((Ti >= t + 1).sum())
        leaving = {lab: int(sum(1 for k, st in zip(Ti, statuses) if k == t and st == lab))
                   for lab in labels}
        rows.append({
            "occasion": t, "total": total, "complete": complete,
            "complete_pct": pct(complete, total),
            "leaving": {lab: {"count": c, "pct": pct(c, total)} for lab, c in leaving.items()},
        })
    n_comp = int((Ti == T).sum())
    leaving_tot = {lab: int(sum(1 for s, st in zip(dataset.subjects, statuses)
                                if not s.completer and st == lab)) for lab in labels}
    return {
        "n": n, "T": T, "p": dataset.p, "q": dataset.q,
        "completers": n_comp, "completers_pct": pct(n_comp, n),
        "occasions": rows,
        "total": {"total": n, "complete": n_comp, "complete_pct": pct(n_comp, n),
                  "leaving": {lab: {"count": c, "pct": pct(c, n)} for lab, c in leaving_tot.items()}},
    }
