"""Design-based direct estimators: Horvitz-Thompson and GREG.

GREG calibrates the design weights so that weighted tax1 totals match
the known population totals within calibration cells.  Cells are the
crossing of industry with a size-class grouping (small: wp 1-9, large:
wp 10-49 by default); the auxiliary within each cell is tax1 alone,
slope-only.  Because the cells nest inside industries, the domain GREG
total equals the calibrated-weights sum over the domain sample exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, DomainError
from .frame import SC_BANDS, Population, Sample

#: size classes pooled into calibration groups: wp 1-9 and wp 10-49
DEFAULT_GROUPS = ((1, 2, 3), (4, 5))

#: relative tolerance of the calibration identity
CALIBRATION_RTOL = 1e-8


@dataclass(frozen=True)
class AuxSpec:
    """Calibration cells: industry crossed with a size-class grouping."""

    groups: tuple = DEFAULT_GROUPS

    def __post_init__(self):
        flat = [sc for g in self.groups for sc in g]
        if sorted(flat) != sorted(SC_BANDS):
            raise ValueError(f"groups must partition {sorted(SC_BANDS)}, got {self.groups}")
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))

    def group_of(self, sc: int) -> int:
        for g, members in enumerate(self.groups):
            if sc in members:
                return g
        raise ValueError(f"size class {sc} not covered by {self.groups}")

    def group_codes(self, sc) -> np.ndarray:
        """Vectorized group index per unit."""
        lut = np.empty(max(SC_BANDS) + 1, dtype=np.int64)
        for g, members in enumerate(self.groups):
            for m in members:
                lut[m] = g
        return lut[np.asarray(sc, dtype=np.int64)]

    def group_label(self, g: int) -> str:
        los = [SC_BANDS[sc][0] for sc in self.groups[g]]
        his = [SC_BANDS[sc][1] for sc in self.groups[g]]
        return f"wp{min(los)}-{max(his)}"


@dataclass(frozen=True)
class _Cell:
    """Per-cell calibration pieces.

    x_pop is the population tax1 total, t_hat its HT estimate, denom
    the design-weighted sum of squared tax1, beta the design-weighted
    least-squares slope of y on tax1 and lam the calibration shift so
    that w = d (1 + lam tax1) reproduces x_pop.
    """

    ind: str
    group: int
    n_pop: int
    n_sam: int
    x_pop: float
    t_hat: float
    denom: float
    beta: float
    lam: float


def _cells(sample: Sample, pop: Population, aux: AuxSpec) -> dict:
    """All population cells with their calibration pieces, cached."""
    key = ("aux_cells", aux.groups)
    cacheable = pop is sample.parent
    if cacheable:
        hit = sample._cache.get(key)
        if hit is not None:
            return hit

    gp = aux.group_codes(pop.sc)
    gs = aux.group_codes(sample.sc)
    n_dom = len(pop.domains)
    n_grp = len(aux.groups)
    cp = pop.dom_codes * n_grp + gp
    # sample units map into their parent's domain coding
    cs = sample.dom_codes * n_grp + gs
    size = n_dom * n_grp
    n_pop = np.bincount(cp, minlength=size)
    x_pop = np.bincount(cp, weights=pop.tax1, minlength=size)
    n_sam = np.bincount(cs, minlength=size)
    dt = sample.d * sample.tax1
    t_hat = np.bincount(cs, weights=dt, minlength=size)
    denom = np.bincount(cs, weights=dt * sample.tax1, minlength=size)
    num = np.bincount(cs, weights=dt * sample.tto, minlength=size)

    cells = {}
    for c in np.flatnonzero(n_pop > 0):
        dom = pop.domains[c // n_grp]
        g = int(c % n_grp)
        if n_sam[c] == 0:
            cells[(dom, g)] = CalibrationError(
                f"cell ({dom}, {aux.group_label(g)}) has population units "
                f"but no sampled units; cannot calibrate"
            )
            continue
        if denom[c] <= 0.0:
            # zero tax1 throughout the sampled cell: the slope is
            # unidentified, tolerable only if there is nothing to move
            gap = x_pop[c] - t_hat[c]
            if abs(gap) <= CALIBRATION_RTOL * max(abs(x_pop[c]), 1.0):
                cells[(dom, g)] = _Cell(dom, g, int(n_pop[c]), int(n_sam[c]),
                                        float(x_pop[c]), float(t_hat[c]),
                                        0.0, 0.0, 0.0)
                continue
            cells[(dom, g)] = CalibrationError(
                f"singular calibration in cell ({dom}, {aux.group_label(g)}): "
                f"weighted tax1 sum of squares is zero"
            )
            continue
        beta = float(num[c] / denom[c])
        lam = float((x_pop[c] - t_hat[c]) / denom[c])
        cells[(dom, g)] = _Cell(dom, g, int(n_pop[c]), int(n_sam[c]),
                                float(x_pop[c]), float(t_hat[c]),
                                float(denom[c]), beta, lam)
    if cacheable:
        sample._cache[key] = cells
    return cells


def ht_total(sample: Sample, ind: str) -> float:
    """Horvitz-Thompson domain total: sum of d_i y_i over the domain sample.

    A known domain with no sampled units yields 0.0 with a warning.
    """
    rows = sample.domain_rows(ind)
    if len(rows) == 0:
        warnings.warn(f"domain {ind!r} has no sampled units; HT total is 0", stacklevel=2)
        return 0.0
    return float(np.sum(sample.d[rows] * sample.tto[rows]))


def calibrated_weights(sample: Sample, pop: Population,
                       aux: AuxSpec = AuxSpec()) -> np.ndarray:
    """Calibrated weights w_i = d_i (1 + lam_cell tax1_i), one per sampled unit.

    Within every population cell, sum(w tax1) equals the population
    tax1 total (to the calibration tolerance).  Raises if any cell
    cannot be calibrated.
    """
    cells = _cells(sample, pop, aux)
    for val in cells.values():
        if isinstance(val, CalibrationError):
            raise val
    lam = np.zeros(len(sample))
    gs = aux.group_codes(sample.sc)
    for (dom, g), cell in cells.items():
        rows = sample.domain_rows(dom)
        rows = rows[gs[rows] == g]
        lam[rows] = cell.lam
    return sample.d * (1.0 + lam * sample.tax1)


def greg_total(sample: Sample, pop: Population, aux: AuxSpec, ind: str) -> float:
    """GREG domain total: HT plus the calibration correction.

    ht + sum over the domain's cells of beta_cell (X_cell - t_hat_cell),
    with beta_cell the design-weighted least-squares slope of y on tax1
    in the cell.  Errors when a population cell of the domain has no
    sampled units or a singular calibration system.
    """
    rows = sample.domain_rows(ind)  # validates the domain
    if len(rows) == 0:
        raise DomainError(f"domain {ind!r} has no sampled units")
    cells = _cells(sample, pop, aux)
    est = float(np.sum(sample.d[rows] * sample.tto[rows]))
    for g in range(len(aux.groups)):
        val = cells.get((ind, g))
        if val is None:
            continue
        if isinstance(val, CalibrationError):
            raise val
        est += val.beta * (val.x_pop - val.t_hat)
    return est


def cell_map(sample: Sample, pop: Population, aux: AuxSpec = AuxSpec()) -> list:
    """Audit rows, one per population cell.

    Each row is a dict with the cell identity, unit counts, population
    and HT tax1 totals, the fitted slope, the calibration shift and the
    calibrated tax1 total; uncalibratable cells carry the error text.
    """
    cells = _cells(sample, pop, aux)
    out = []
    for (dom, g) in sorted(cells):
        val = cells[(dom, g)]
        row = {"ind": dom, "group": aux.group_label(g)}
        if isinstance(val, CalibrationError):
            row.update(error=str(val))
        else:
            row.update(
                n_pop=val.n_pop, n_sam=val.n_sam, tax1_pop=val.x_pop,
                tax1_ht=val.t_hat, beta=val.beta, lam=val.lam,
                tax1_calibrated=val.t_hat + val.lam * val.denom,
            )
        out.append(row)
    return out
