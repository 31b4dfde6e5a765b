"""Synthetic panels drawn from the bi-dimensional mixture itself.

Each subject gets a cell ``(g, l)`` from ``Pi``.  Dropout events are then
drawn occasion by occasion with probability ``expit(zeta2[l] + v_t'gamma)``
for ``t = 1..T``; the first event at occasion ``t`` leaves ``T_i = t - 1``
responses, which are Gaussian with mean ``zeta1[g] + x_t'beta``.

A subject whose first event fires at ``t = 1`` would have no responses.  Such
subjects are redrawn (cell and dropout path) until they have at least one
response; the number of redraws is recorded in ``dataset.meta``.  This
conditions the generated sample on ``T_i >= 1``, so parameters should keep
the first-occasion hazard small when recovery is the goal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import PanelDataset, SubjectRecord, build_dropout_indicators, write_csv
from .model import Theta

__all__ = ["CovariateSpec", "SimSpec", "generate", "write_simulation"]

_KINDS = ("constant", "bernoulli", "time_linear", "normal")


@dataclass(frozen=True)
class CovariateSpec:
    """Generator for one design column.

    ``kind`` is one of

    * ``"constant"``: ``value`` at every occasion;
    * ``"bernoulli"``: a subject-level 0/1 draw with probability ``prob``;
    * ``"time_linear"``: ``offset + slope * (t - 1)`` (e.g. age minus 85);
    * ``"normal"``: a subject-level N(``mean``, ``sd``²) draw.
    """

    name: str
    kind: str = "constant"
    value: float = 1.0
    prob: float = 0.5
    offset: float = 0.0
    slope: float = 1.0
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown covariate kind {self.kind!r}")
        if self.kind == "bernoulli" and not 0.0 <= self.prob <= 1.0:
            raise ValueError("bernoulli prob must be in [0, 1]")
        if self.kind == "normal" and self.sd < 0:
            raise ValueError("normal sd must be non-negative")

    def draw(self, rng: np.random.Generator, n: int, T: int) -> np.ndarray:
        t = np.arange(T, dtype=float)
        if self.kind == "constant":
            return np.full((n, T), float(self.value))
        if self.kind == "time_linear":
            return np.broadcast_to(self.offset + self.slope * t, (n, T)).copy()
        if self.kind == "bernoulli":
            v = (rng.random(n) < self.prob).astype(float)
        else:
            v = rng.normal(self.mean, self.sd, n)
        return np.repeat(v[:, None], T, axis=1)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class SimSpec:
    """Everything needed to generate one synthetic panel.

    ``x_covariates`` and ``v_covariates`` list column generators for the
    longitudinal and dropout designs.  A name appearing in both lists refers
    to the same subject-level draw.
    """

    theta_true: Theta
    n: int
    T: int
    x_covariates: tuple[CovariateSpec, ...] = ()
    v_covariates: tuple[CovariateSpec, ...] = ()
    seed: int = 0
    max_redraw_rounds: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "x_covariates", tuple(self.x_covariates))
        object.__setattr__(self, "v_covariates", tuple(self.v_covariates))
        if self.n < 1 or self.T < 1:
            raise ValueError("n and T must be at least 1")
        if len(self.x_covariates) != self.theta_true.p:
            raise ValueError("one x covariate generator per beta entry required")
        if len(self.v_covariates) != self.theta_true.q:
            raise ValueError("one v covariate generator per gamma entry required")
        seen = {}
        for c in self.x_covariates + self.v_covariates:
            if c.name in seen and seen[c.name] != c:
                raise ValueError(f"covariate {c.name!r} defined twice with different generators")
            seen[c.name] = c

    def to_dict(self) -> dict:
        return {
            "theta_true": self.theta_true.to_dict(),
            "n": self.n,
            "T": self.T,
            "x_covariates": [c.to_dict() for c in self.x_covariates],
            "v_covariates": [c.to_dict() for c in self.v_covariates],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimSpec":
        return cls(theta_true=Theta.from_dict(d["theta_true"]), n=int(d["n"]), T=int(d["T"]),
                   x_covariates=tuple(CovariateSpec(**c) for c in d.get("x_covariates", [])),
                   v_covariates=tuple(CovariateSpec(**c) for c in d.get("v_covariates", [])),
                   seed=int(d.get("seed", 0)))

    @classmethod
    def from_json(cls, path) -> "SimSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _draw_batch(spec: SimSpec, rng: np.random.Generator, m: int):
    th, T = spec.theta_true, spec.T
    cols = {}
    for c in spec.x_covariates + spec.v_covariates:
        if c.name not in cols:
            cols[c.name] = c.draw(rng, m, T)
    X = np.stack([cols[c.name] for c in spec.x_covariates], axis=2) if th.p else np.zeros((m, T, 0))
    V = np.stack([cols[c.name] for c in spec.v_covariates], axis=2) if th.q else np.zeros((m, T, 0))
    cell = rng.choice(th.K1 * th.K2, size=m, p=th.Pi.ravel())
    g, l = np.divmod(cell, th.K2)
    haz = expit(th.zeta2[l][:, None] + V @ th.gamma)
    events = rng.random((m, T)) < haz
    first = np.where(events.any(axis=1), events.argmax(axis=1), T)   # 0-based event occasion
    Ti = first  # responses at occasions 1..first
    mu = th.zeta1[g][:, None] + X @ th.beta
    Y = mu + th.sigma_y * rng.standard_normal((m, T))
    return X, V, g, l, Ti, Y


def generate(spec: SimSpec) -> PanelDataset:
    """Draw a panel of ``spec.n`` subjects, each with at least one response."""
    rng = np.random.default_rng(spec.seed)
    n, T = spec.n, spec.T
    parts = []
    need = n
    redrawn = 0
    rounds = 0
    while need > 0:
        rounds += 1
        if rounds > spec.max_redraw_rounds:
            raise RuntimeError("first-occasion dropout hazard too large: cannot fill the sample")
        X, V, g, l, Ti, Y = _draw_batch(spec, rng, need)
        keep = Ti >= 1
        parts.append((X[keep], V[keep], g[keep], l[keep], Ti[keep], Y[keep]))
        kept = int(keep.sum())
        redrawn += need - kept
        need -= kept
    X, V, g, l, Ti, Y = (np.concatenate(a) for a in zip(*parts))

    subjects = []
    width = len(str(n))
    for i in range(n):
        k = int(Ti[i])
        completer = k == T
        m = T if completer else k + 1
        subjects.append(SubjectRecord(
            id=f"s{i + 1:0{width}d}", y=Y[i, :k], X=X[i, :k], V=V[i, :m],
            r=build_dropout_indicators(k, T), T_i=k, completer=completer,
            status="completer" if completer else "dropout"))
    time_linear = {c.name: c.slope for c in spec.v_covariates if c.kind == "time_linear"}
    meta = {
        "generator": "bidimix.simulate",
        "seed": spec.seed,
        "redrawn_subjects": redrawn,
        "true_cells": np.stack([g, l], axis=1).tolist(),
    }
    return PanelDataset(subjects, T, [c.name for c in spec.x_covariates],
                        [c.name for c in spec.v_covariates], time_linear, meta)


def write_simulation(spec: SimSpec, out_dir) -> PanelDataset:
    """Generate and write ``data.csv``, ``schema.json`` and ``truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate(spec)
    write_csv(ds, out / "data.csv", schema_path=out / "schema.json")
    truth = spec.to_dict()
    truth["redrawn_subjects"] = ds.meta["redrawn_subjects"]
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return ds
