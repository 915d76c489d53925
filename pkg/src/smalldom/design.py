"""Stratified simple random sampling without replacement.

Strata are the (ind, sc) cells of the population.  Allocations are inputs;
``build_design`` turns them into per-stratum inclusion probabilities and
``draw_sample`` draws one sample, deterministically in (seed, design,
population).
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DataError, DesignError
from .frame import Population, Sample


@dataclass(frozen=True)
class StratumDesign:
    ind: str
    sc: int
    N_h: int
    n_h: int

    @property
    def take_all(self) -> bool:
        return self.n_h == self.N_h

    @property
    def pi(self) -> float:
        return self.n_h / self.N_h


@dataclass(frozen=True)
class DesignSpec:
    """Per-stratum allocation resolved against a population."""

    strata: tuple[StratumDesign, ...]

    def __post_init__(self):
        keys = [(s.ind, s.sc) for s in self.strata]
        if len(set(keys)) != len(keys):
            raise DesignError("duplicate stratum in design")

    @property
    def total_sample_size(self) -> int:
        return sum(s.n_h for s in self.strata)

    def stratum(self, key: tuple[str, int]) -> StratumDesign:
        for s in self.strata:
            if (s.ind, s.sc) == key:
                return s
        raise DesignError(f"stratum {key!r} not in design")


def load_allocation(path) -> dict[tuple[str, int], int]:
    """Read an allocation CSV with columns ind, sc, n_h."""
    alloc: dict[tuple[str, int], int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        for col in ("ind", "sc", "n_h"):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        i_ind, i_sc, i_n = header.index("ind"), header.index("sc"), header.index("n_h")
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                key = (row[i_ind], int(row[i_sc]))
                n_h = int(row[i_n])
            except (ValueError, IndexError):
                raise DataError(f"row {rownum}: malformed allocation row")
            if key in alloc:
                raise DataError(f"row {rownum}: duplicate stratum {key!r}")
            alloc[key] = n_h
    return alloc


def save_allocation(alloc: Mapping[tuple[str, int], int], path) -> None:
    from ._util import atomic_write_text
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["ind", "sc", "n_h"])
    for (ind, sc), n_h in sorted(alloc.items()):
        writer.writerow([ind, sc, n_h])
    atomic_write_text(path, buf.getvalue())


def build_design(pop: Population, allocation: Mapping[tuple[str, int], int]) -> DesignSpec:
    """Resolve an allocation against a population.

    Every population stratum needs an entry with 0 < n_h; allocations above
    N_h are clipped to N_h with a warning, allocations for strata absent
    from the population are rejected.
    """
    strata = pop.strata
    for key in allocation:
        if key not in strata:
            raise DesignError(f"allocation names stratum {key!r} absent from population")
    resolved = []
    for key, N_h in sorted(strata.items()):
        if key not in allocation:
            raise DesignError(f"no allocation for population stratum {key!r}")
        n_h = int(allocation[key])
        if n_h <= 0:
            raise DesignError(f"allocation for stratum {key!r} must be positive, got {n_h}")
        if n_h > N_h:
            warnings.warn(
                f"allocation {n_h} for stratum {key!r} exceeds N_h={N_h}; clipped to take-all",
                stacklevel=2,
            )
            n_h = N_h
        resolved.append(StratumDesign(key[0], key[1], N_h, n_h))
    return DesignSpec(tuple(resolved))


def default_allocation(
    pop: Population,
    fractions: Mapping[int, float] | None = None,
    min_n: int = 2,
) -> dict[tuple[str, int], int]:
    """Size-class driven allocation: small units get small sampling fractions,
    the top size class is completely enumerated."""
    if fractions is None:
        fractions = {1: 0.03, 2: 0.05, 3: 0.10, 4: 0.25, 5: 1.0}
    alloc = {}
    for (ind, sc), N_h in pop.strata.items():
        f = fractions.get(sc, 1.0)
        n_h = int(round(f * N_h))
        n_h = max(n_h, min(min_n, N_h))
        alloc[(ind, sc)] = min(n_h, N_h)
    return alloc


def draw_sample(design: DesignSpec, pop: Population, seed) -> Sample:
    """Draw one stratified SRSWOR sample.

    ``seed`` is a 64-bit integer or a numpy SeedSequence; the same seed
    with the same design and population yields the same sample.
    """
    if isinstance(seed, np.random.SeedSequence):
        rng = np.random.default_rng(seed)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    chosen: list[np.ndarray] = []
    pis: list[np.ndarray] = []
    n_h: dict[tuple[str, int], int] = {}
    for s in sorted(design.strata, key=lambda s: (s.ind, s.sc)):
        rows = pop.stratum_rows((s.ind, s.sc))
        if len(rows) != s.N_h:
            raise DesignError(
                f"design N_h={s.N_h} disagrees with population stratum "
                f"{(s.ind, s.sc)!r} of size {len(rows)}"
            )
        if s.take_all:
            take = rows
        else:
            take = rows[rng.permutation(s.N_h)[: s.n_h]]
        chosen.append(take)
        pis.append(np.full(len(take), s.pi))
        n_h[(s.ind, s.sc)] = s.n_h
    rows_arr = np.concatenate(chosen)
    pis_arr = np.concatenate(pis)
    order = np.argsort(rows_arr, kind="stable")  # population order, deterministic
    return Sample(pop, rows_arr[order], pis_arr[order], n_h)
