"""Population and sample containers with CSV interchange.

Units carry a domain code (``ind``), a size class ``sc`` in 1..5 derived
from the number of working persons ``wp``, an auxiliary ``tax1`` and the
outcome ``tto``.  Sampled units additionally carry the inclusion
probability ``pi`` and the design weight ``d = 1/pi``.  Containers are
immutable after construction; loaders validate every row and report the
offending row number.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, DomainError

#: size class -> inclusive band of working persons
SC_BANDS: dict[int, tuple[int, int]] = {
    1: (1, 1),
    2: (2, 4),
    3: (5, 9),
    4: (10, 19),
    5: (20, 49),
}

POPULATION_COLUMNS = ("id", "ind", "sc", "wp", "tax1", "tto")
SAMPLE_COLUMNS = POPULATION_COLUMNS + ("pi", "d")

#: numeric variables addressable through domain_total / Population.total
NUMERIC_VARS = ("wp", "tax1", "tto")


def size_class_for_wp(wp: int) -> int:
    """Size class whose working-persons band contains ``wp``."""
    for sc, (lo, hi) in SC_BANDS.items():
        if lo <= wp <= hi:
            return sc
    raise DataError(f"wp={wp} outside all size class bands (1..49)")


def _check_band(sc: int, wp: int) -> None:
    if sc not in SC_BANDS:
        raise DataError(f"sc={sc} is not a valid size class (1..5)")
    lo, hi = SC_BANDS[sc]
    if not (lo <= wp <= hi):
        raise DataError(f"wp={wp} inconsistent with sc={sc} (band {lo}-{hi})")


@dataclass(frozen=True)
class Unit:
    """One business unit; ``pi``/``d`` are set for sampled units only."""

    id: str
    ind: str
    sc: int
    wp: int
    tax1: float
    tto: float
    pi: float | None = None
    d: float | None = None

    def __post_init__(self):
        _check_band(self.sc, self.wp)
        if self.tax1 < 0:
            raise DataError(f"unit {self.id}: tax1={self.tax1} must be >= 0")
        if (self.pi is None) != (self.d is None):
            raise DataError(f"unit {self.id}: pi and d must be set together")
        if self.pi is not None:
            if not (0.0 < self.pi <= 1.0):
                raise DataError(f"unit {self.id}: pi={self.pi} outside (0, 1]")
            if abs(self.d * self.pi - 1.0) > 1e-12:
                raise DataError(f"unit {self.id}: d={self.d} is not 1/pi")

    @property
    def stratum(self) -> tuple[str, int]:
        return (self.ind, self.sc)


class Population:
    """Immutable array-backed population frame."""

    __slots__ = (
        "ids", "ind", "sc", "wp", "tax1", "tto",
        "domains", "dom_codes", "_dom_rows", "_stratum_rows", "_id_rows",
        "_cache",
    )

    def __init__(self, ids: Sequence[str], ind: Sequence[str], sc, wp, tax1, tto):
        ids = np.asarray(ids, dtype=object)
        ind = np.asarray(ind, dtype=object)
        sc = np.asarray(sc, dtype=np.int64)
        wp = np.asarray(wp, dtype=np.int64)
        tax1 = np.asarray(tax1, dtype=np.float64)
        tto = np.asarray(tto, dtype=np.float64)
        n = len(ids)
        for name, arr in (("ind", ind), ("sc", sc), ("wp", wp), ("tax1", tax1), ("tto", tto)):
            if len(arr) != n:
                raise DataError(f"column {name} has length {len(arr)}, expected {n}")
        if n == 0:
            raise DataError("population has no units")
        uniq, counts = np.unique(ids.astype(str), return_counts=True)
        if (counts > 1).any():
            dup = uniq[counts > 1][0]
            raise DataError(f"duplicate unit id {dup!r}")
        # vectorized band check
        lo = np.array([SC_BANDS.get(s, (1, 0))[0] for s in sc.tolist()])
        hi = np.array([SC_BANDS.get(s, (1, 0))[1] for s in sc.tolist()])
        bad = (wp < lo) | (wp > hi)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            _check_band(int(sc[i]), int(wp[i]))  # raises with the precise message
        if (tax1 < 0).any():
            i = int(np.flatnonzero(tax1 < 0)[0])
            raise DataError(f"unit {ids[i]}: tax1={tax1[i]} must be >= 0")
        if not (np.isfinite(tax1).all() and np.isfinite(tto).all()):
            raise DataError("non-finite tax1/tto value in population")

        self.ids = ids
        self.ind = ind
        self.sc = sc
        self.wp = wp
        self.tax1 = tax1
        self.tto = tto
        domains = tuple(sorted(set(ind.tolist())))
        self.domains = domains
        code_of = {d: i for i, d in enumerate(domains)}
        self.dom_codes = np.array([code_of[d] for d in ind.tolist()], dtype=np.int64)
        self._dom_rows = {d: np.flatnonzero(self.dom_codes == i) for i, d in enumerate(domains)}
        strata: dict[tuple[str, int], list[int]] = {}
        for i, key in enumerate(zip(ind.tolist(), sc.tolist())):
            strata.setdefault(key, []).append(i)
        self._stratum_rows = {k: np.array(v, dtype=np.int64) for k, v in strata.items()}
        self._id_rows = None  # built lazily
        self._cache: dict = {}

    # -- basic container protocol ------------------------------------
    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_units(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Population):
            return NotImplemented
        return (
            self.ids.tolist() == other.ids.tolist()
            and self.ind.tolist() == other.ind.tolist()
            and np.array_equal(self.sc, other.sc)
            and np.array_equal(self.wp, other.wp)
            and np.array_equal(self.tax1, other.tax1)
            and np.array_equal(self.tto, other.tto)
        )

    __hash__ = None  # type: ignore[assignment]

    def unit(self, i: int) -> Unit:
        return Unit(str(self.ids[i]), str(self.ind[i]), int(self.sc[i]),
                    int(self.wp[i]), float(self.tax1[i]), float(self.tto[i]))

    @classmethod
    def from_units(cls, units: Iterable[Unit]) -> "Population":
        units = list(units)
        return cls(
            [u.id for u in units], [u.ind for u in units],
            [u.sc for u in units], [u.wp for u in units],
            [u.tax1 for u in units], [u.tto for u in units],
        )

    def with_tto(self, tto) -> "Population":
        """Copy of the frame with a replaced outcome column.

        Shares every other column and all index structures; only the
        new tto is validated.  Intended for bootstrap populations.
        """
        tto = np.ascontiguousarray(tto, dtype=np.float64)
        if tto.shape != self.tto.shape:
            raise DataError(f"tto has length {len(tto)}, expected {len(self.tto)}")
        if not np.isfinite(tto).all():
            raise DataError("non-finite tto value")
        new = object.__new__(Population)
        new.ids = self.ids
        new.ind = self.ind
        new.sc = self.sc
        new.wp = self.wp
        new.tax1 = self.tax1
        new.tto = tto
        new.domains = self.domains
        new.dom_codes = self.dom_codes
        new._dom_rows = self._dom_rows
        new._stratum_rows = self._stratum_rows
        new._id_rows = self._id_rows
        new._cache = {}
        return new

    # -- lookups ------------------------------------------------------
    @property
    def strata(self) -> dict[tuple[str, int], int]:
        """Stratum (ind, sc) -> population count N_h."""
        return {k: len(v) for k, v in sorted(self._stratum_rows.items())}

    def stratum_rows(self, key: tuple[str, int]) -> np.ndarray:
        try:
            return self._stratum_rows[key]
        except KeyError:
            raise DomainError(f"unknown stratum {key!r}")

    def domain_rows(self, ind: str) -> np.ndarray:
        try:
            return self._dom_rows[ind]
        except KeyError:
            raise DomainError(f"unknown domain {ind!r}")

    def row_of_id(self, unit_id: str) -> int:
        if self._id_rows is None:
            self._id_rows = {str(u): i for i, u in enumerate(self.ids.tolist())}
        try:
            return self._id_rows[unit_id]
        except KeyError:
            raise DataError(f"unknown unit id {unit_id!r}")

    def column(self, var: str) -> np.ndarray:
        if var not in NUMERIC_VARS:
            raise DataError(f"unknown numeric variable {var!r}; expected one of {NUMERIC_VARS}")
        return getattr(self, var)


class Sample:
    """Units drawn from a parent population, with inclusion probabilities."""

    __slots__ = (
        "parent", "row_idx", "ids", "ind", "sc", "wp", "tax1", "tto",
        "pi", "d", "n_h", "domains", "dom_codes", "_dom_rows", "_cache",
    )

    def __init__(self, parent: Population, row_idx, pi, n_h: Mapping[tuple[str, int], int]):
        row_idx = np.asarray(row_idx, dtype=np.int64)
        pi = np.asarray(pi, dtype=np.float64)
        if len(row_idx) != len(pi):
            raise DataError("row_idx and pi length mismatch")
        if len(row_idx) == 0:
            raise DataError("sample has no units")
        if (pi <= 0).any() or (pi > 1).any():
            raise DataError("inclusion probabilities must lie in (0, 1]")
        self.parent = parent
        self.row_idx = row_idx
        self.ids = parent.ids[row_idx]
        self.ind = parent.ind[row_idx]
        self.sc = parent.sc[row_idx]
        self.wp = parent.wp[row_idx]
        self.tax1 = parent.tax1[row_idx]
        self.tto = parent.tto[row_idx]
        self.pi = pi
        self.d = 1.0 / pi
        self.n_h = dict(sorted(n_h.items()))
        # domain bookkeeping uses the parent's domain list so that domain
        # codes are comparable between sample and population
        self.domains = parent.domains
        self.dom_codes = parent.dom_codes[row_idx]
        self._dom_rows = {
            dom: np.flatnonzero(self.dom_codes == i) for i, dom in enumerate(self.domains)
        }
        self._cache = {}

    def __len__(self) -> int:
        return len(self.row_idx)

    @property
    def n_units(self) -> int:
        return len(self.row_idx)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.parent == other.parent
            and np.array_equal(self.row_idx, other.row_idx)
            and np.array_equal(self.pi, other.pi)
            and self.n_h == other.n_h
        )

    __hash__ = None  # type: ignore[assignment]

    def unit(self, i: int) -> Unit:
        return Unit(str(self.ids[i]), str(self.ind[i]), int(self.sc[i]),
                    int(self.wp[i]), float(self.tax1[i]), float(self.tto[i]),
                    pi=float(self.pi[i]), d=float(self.d[i]))

    def domain_rows(self, ind: str) -> np.ndarray:
        try:
            return self._dom_rows[ind]
        except KeyError:
            raise DomainError(f"unknown domain {ind!r}")

    def column(self, var: str) -> np.ndarray:
        if var not in NUMERIC_VARS:
            raise DataError(f"unknown numeric variable {var!r}; expected one of {NUMERIC_VARS}")
        return getattr(self, var)


# ---------------------------------------------------------------------
# CSV interchange (UTF-8, '.' decimal separator)
# ---------------------------------------------------------------------

def _parse_int(raw: str, col: str, rownum: int) -> int:
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"row {rownum}: column {col!r} has non-integer value {raw!r}")


def _parse_float(raw: str, col: str, rownum: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"row {rownum}: column {col!r} has non-numeric value {raw!r}")
    if not np.isfinite(value):
        raise DataError(f"row {rownum}: column {col!r} has non-finite value {raw!r}")
    return value


def _read_rows(path, columns, schema: Mapping[str, str] | None):
    """Yield (rownum, {canonical: raw}) for each data row."""
    schema = dict(schema or {})
    header_of = {col: schema.get(col, col) for col in columns}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        pos = {}
        for col, name in header_of.items():
            if name not in header:
                raise DataError(f"{path}: missing column {name!r}")
            pos[col] = header.index(name)
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(header):
                raise DataError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
            yield rownum, {col: row[pos[col]] for col in columns}


def load_population(path, schema: Mapping[str, str] | None = None) -> Population:
    """Load a population frame from CSV.

    Parameters
    ----------
    path : str or os.PathLike
        CSV file with columns id, ind, sc, wp, tax1, tto (or the names
        mapped through ``schema``).
    schema : mapping, optional
        Maps canonical column names to the file's header names.

    Raises
    ------
    DataError
        On missing columns, non-numeric fields, duplicate ids or a
        wp/size-class band violation; messages carry the row number.
    """
    ids, ind, sc, wp, tax1, tto = [], [], [], [], [], []
    seen: dict[str, int] = {}
    for rownum, row in _read_rows(path, POPULATION_COLUMNS, schema):
        uid = row["id"]
        if uid in seen:
            raise DataError(f"row {rownum}: duplicate unit id {uid!r} (first at row {seen[uid]})")
        seen[uid] = rownum
        sc_i = _parse_int(row["sc"], "sc", rownum)
        wp_i = _parse_int(row["wp"], "wp", rownum)
        try:
            _check_band(sc_i, wp_i)
        except DataError as exc:
            raise DataError(f"row {rownum}: {exc}") from None
        ids.append(uid)
        ind.append(row["ind"])
        sc.append(sc_i)
        wp.append(wp_i)
        tax1.append(_parse_float(row["tax1"], "tax1", rownum))
        tto.append(_parse_float(row["tto"], "tto", rownum))
    return Population(ids, ind, sc, wp, tax1, tto)


def save_population(pop: Population, path) -> None:
    from ._util import atomic_write_text
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(POPULATION_COLUMNS)
    for i in range(len(pop)):
        writer.writerow([
            pop.ids[i], pop.ind[i], int(pop.sc[i]), int(pop.wp[i]),
            repr(float(pop.tax1[i])), repr(float(pop.tto[i])),
        ])
    atomic_write_text(path, buf.getvalue())


def load_sample(path, parent: Population, schema: Mapping[str, str] | None = None) -> Sample:
    """Load a sample from CSV; every row must exist in ``parent`` by id."""
    rows, pis = [], []
    seen: dict[str, int] = {}
    for rownum, row in _read_rows(path, SAMPLE_COLUMNS, schema):
        uid = row["id"]
        if uid in seen:
            raise DataError(f"row {rownum}: duplicate unit id {uid!r} (first at row {seen[uid]})")
        seen[uid] = rownum
        pi = _parse_float(row["pi"], "pi", rownum)
        d = _parse_float(row["d"], "d", rownum)
        if not (0.0 < pi <= 1.0):
            raise DataError(f"row {rownum}: pi={pi} outside (0, 1]")
        if abs(d * pi - 1.0) > 1e-12:
            raise DataError(f"row {rownum}: d={d} is not 1/pi")
        try:
            idx = parent.row_of_id(uid)
        except DataError:
            raise DataError(f"row {rownum}: unit id {uid!r} not in parent population")
        for col, parse, parent_val in (
            ("sc", _parse_int, int(parent.sc[idx])),
            ("wp", _parse_int, int(parent.wp[idx])),
        ):
            if parse(row[col], col, rownum) != parent_val:
                raise DataError(f"row {rownum}: column {col!r} disagrees with parent population")
        rows.append(idx)
        pis.append(pi)
    order = np.argsort(np.asarray(rows), kind="stable")
    rows_arr = np.asarray(rows, dtype=np.int64)[order]
    pis_arr = np.asarray(pis, dtype=np.float64)[order]
    n_h: dict[tuple[str, int], int] = {}
    for idx in rows_arr.tolist():
        key = (str(parent.ind[idx]), int(parent.sc[idx]))
        n_h[key] = n_h.get(key, 0) + 1
    return Sample(parent, rows_arr, pis_arr, n_h)


def save_sample(sample: Sample, path) -> None:
    from ._util import atomic_write_text
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SAMPLE_COLUMNS)
    for i in range(len(sample)):
        writer.writerow([
            sample.ids[i], sample.ind[i], int(sample.sc[i]), int(sample.wp[i]),
            repr(float(sample.tax1[i])), repr(float(sample.tto[i])),
            repr(float(sample.pi[i])), repr(float(sample.d[i])),
        ])
    atomic_write_text(path, buf.getvalue())


def domain_total(pop: Population, var: str, ind: str) -> float:
    """Exact domain total of ``var`` over the population."""
    rows = pop.domain_rows(ind)
    return float(pop.column(var)[rows].sum())
