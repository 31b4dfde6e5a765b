"""Grid search over the numbers of components with AIC/BIC ranking."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
import pandas as pd

from .data import PanelDataset
from .em import FitConfig, _assemble_mar, fit, margin_fit, n_free_params
from .model import Theta

__all__ = ["SelectionTable", "grid_search"]

logger = logging.getLogger(__name__)

_COLUMNS = ["K1", "K2", "loglik", "n_params", "aic", "bic", "converged", "error"]


@dataclass
class SelectionTable:
    """One row per grid cell, sorted by BIC (ties: smaller K1*K2, then K1).

    ``best_by_bic`` / ``best_by_aic`` are row positions of the minimal
    criterion among converged rows (``None`` if no row converged).
    ``fits`` maps ``(K1, K2)`` to the fitted result for successful cells.
    """

    rows: pd.DataFrame
    best_by_bic: int | None
    best_by_aic: int | None
    fits: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def best(self) -> tuple[int, int] | None:
        if self.best_by_bic is None:
            return None
        r = self.rows.iloc[self.best_by_bic]
        return int(r.K1), int(r.K2)

    def to_csv(self, path) -> None:
        self.rows.to_csv(path, index=False, float_format="%.17g")

    def to_dict(self) -> dict:
        return {"rows": self.rows.to_dict(orient="records"),
                "best_by_bic": self.best_by_bic, "best_by_aic": self.best_by_aic,
                "warnings": list(self.warnings)}


def _best(df: pd.DataFrame, col: str) -> int | None:
    ok = df[df.converged & df[col].notna()]
    if ok.empty:
        return None
    key = ok.assign(_size=ok.K1 * ok.K2).sort_values([col, "_size", "K1"], kind="stable")
    return int(key.index[0])


def grid_search(dataset: PanelDataset, K1_range: Iterable[int], K2_range: Iterable[int],
                config: FitConfig, warm_start: bool = False, threads: int | None = None) -> SelectionTable:
    """Fit every ``(K1, K2)`` combination and rank by information criteria.

    In MAR mode the likelihood separates, so each longitudinal margin is
    fitted once per ``K1`` and each dropout margin once per ``K2`` and the
    cells are assembled from those fits.  In MNAR mode every cell is an
    independent joint fit (the MAR solution of the cell is used as an extra
    start when ``config.include_mar_start`` is set).  ``warm_start`` adds the
    best smaller-grid solution, with a split component, as an extra start.
    A failing cell is recorded with its error and does not abort the grid.
    """
    K1s, K2s = sorted(set(int(k) for k in K1_range)), sorted(set(int(k) for k in K2_range))
    if not K1s or not K2s:
        raise ValueError("grid ranges must be non-empty")
    if min(K1s) < 1 or min(K2s) < 1:
        raise ValueError("component counts must be at least 1")
    cells = [(a, b) for a in K1s for b in K2s]
    threads = config.threads if threads is None else threads
    fits: dict = {}
    errors: dict = {}

    if config.mode == "MAR":
        fits = _mar_grid(dataset, config, K1s, K2s, errors)
    else:
        mar_cache = {}
        if config.include_mar_start and not config.freeze_lambda:
            mar_cache = _mar_grid(dataset, replace(config, mode="MAR"), K1s, K2s, errors)

        def run(cell):
            K1, K2 = cell
            cfg = replace(config, K1=K1, K2=K2)
            try:
                extra = None
                if warm_start:
                    extra = _warm_starts(dataset, fits, K1, K2)
                return cell, fit(dataset, cfg, mar_fit=mar_cache.get(cell), extra_starts=extra), None
            except Exception as exc:  # a failing cell must not abort the grid
                logger.warning("cell %s failed: %s", cell, exc)
                return cell, None, f"{type(exc).__name__}: {exc}"

        if warm_start or threads <= 1:
            results = [run(c) for c in cells]
        else:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(run, cells))
        for cell, res, err in results:
            if res is not None:
                fits[cell] = res
            else:
                errors[cell] = err

    rows = []
    for cell in cells:
        f = fits.get(cell)
        if f is None:
            rows.append({"K1": cell[0], "K2": cell[1], "loglik": np.nan,
                         "n_params": n_free_params(dataset.p, cell[0], dataset.q, cell[1],
                                                   config.rank_one),
                         "aic": np.nan, "bic": np.nan, "converged": False,
                         "error": errors.get(cell, "")})
        else:
            rows.append({"K1": cell[0], "K2": cell[1], "loglik": f.loglik, "n_params": f.n_params,
                         "aic": f.aic, "bic": f.bic, "converged": f.converged, "error": ""})
    df = pd.DataFrame(rows, columns=_COLUMNS)
    df = (df.assign(_size=df.K1 * df.K2, _nan=df.bic.isna())
            .sort_values(["_nan", "bic", "_size", "K1"], kind="stable")
            .drop(columns=["_size", "_nan"]).reset_index(drop=True))
    warns = _nesting_warnings(df)
    return SelectionTable(df, _best(df, "bic"), _best(df, "aic"), fits, warns)


def _mar_grid(dataset, config, K1s, K2s, errors) -> dict:
    """MAR fits for every cell built from per-margin fits."""
    longs, drops = {}, {}
    for K1 in K1s:
        try:
            longs[K1] = margin_fit(dataset, replace(config, K1=K1, K2=1), "longitudinal")
        except Exception as exc:
            logger.warning("longitudinal margin K1=%d failed: %s", K1, exc)
            for K2 in K2s:
                errors[(K1, K2)] = f"{type(exc).__name__}: {exc}"
    for K2 in K2s:
        try:
            drops[K2] = margin_fit(dataset, replace(config, K1=1, K2=K2), "dropout")
        except Exception as exc:
            logger.warning("dropout margin K2=%d failed: %s", K2, exc)
            for K1 in K1s:
                errors[(K1, K2)] = f"{type(exc).__name__}: {exc}"
    out = {}
    for K1 in K1s:
        for K2 in K2s:
            if K1 in longs and K2 in drops:
                try:
                    out[(K1, K2)] = _assemble_mar(dataset, replace(config, K1=K1, K2=K2, mode="MAR"),
                                                  longs[K1], drops[K2])
                except Exception as exc:
                    errors[(K1, K2)] = f"{type(exc).__name__}: {exc}"
    return out


def _warm_starts(dataset, fits, K1, K2) -> list[Theta]:
    """Split the largest component of a smaller fitted cell."""
    out = []
    for (a, b), f in sorted(fits.items()):
        if (a, b) == (K1 - 1, K2) or (a, b) == (K1, K2 - 1):
            th = f.theta
            if a < K1:
                g = int(np.argmax(th.row_masses))
                z = np.insert(th.zeta1, g + 1, th.zeta1[g] + 0.1 * th.sigma_y)
                P = np.insert(th.Pi, g + 1, 0.5 * th.Pi[g], axis=0)
                P[g] *= 0.5
                out.append(th.replace(zeta1=z, Pi=P).canonical()[0])
            else:
                l = int(np.argmax(th.col_masses))
                z = np.insert(th.zeta2, l + 1, th.zeta2[l] + 0.5)
                P = np.insert(th.Pi, l + 1, 0.5 * th.Pi[:, l], axis=1)
                P[:, l] *= 0.5
                out.append(th.replace(zeta2=z, Pi=P).canonical()[0])
    return out


def _nesting_warnings(df: pd.DataFrame, slack: float = 1e-4) -> list[str]:
    """Flag cells whose loglik falls below a nested smaller cell."""
    ll = {(int(r.K1), int(r.K2)): r.loglik for r in df.itertuples() if np.isfinite(r.loglik)}
    out = []
    for (a, b), v in ll.items():
        for prev in ((a - 1, b), (a, b - 1)):
            if prev in ll and v < ll[prev] - slack:
                out.append(f"loglik of {(a, b)} below nested {prev} by {ll[prev] - v:.3g}")
    return out
