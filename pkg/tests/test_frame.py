"""Data model: construction, banding, CSV round-trips, domain sums."""

import numpy as np
import pytest

from smalldom import (DataError, DomainError, Population, domain_total,
                      load_population, load_sample, save_population,
                      save_sample, size_class_for_wp)
from smalldom.frame import SC_BANDS


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


POP_CSV = """id,ind,sc,wp,tax1,tto
a1,I01,1,1,10.0,12.0
a2,I01,2,3,20.0,25.0
b1,I02,1,1,5.0,4.0
"""


class TestLoadPopulation:
    def test_two_domains(self, tmp_path):
        pop = load_population(_write(tmp_path / "p.csv", POP_CSV))
        assert len(pop) == 3
        assert pop.domains == ("I01", "I02")
        assert pop.strata == {("I01", 1): 1, ("I01", 2): 1, ("I02", 1): 1}

    def test_duplicate_id_rejected(self, tmp_path):
        text = POP_CSV + "a1,I02,1,1,1.0,1.0\n"
        with pytest.raises(DataError, match="a1"):
            load_population(_write(tmp_path / "p.csv", text))

    def test_band_mismatch_rejected(self, tmp_path):
        # wp 7 implies size class 3, not 2; error names the row
        text = "id,ind,sc,wp,tax1,tto\nx,I01,2,7,1.0,1.0\n"
        with pytest.raises(DataError, match="row 2"):
            load_population(_write(tmp_path / "p.csv", text))

    def test_missing_column_rejected(self, tmp_path):
        text = "id,ind,sc,wp,tax1\nx,I01,1,1,1.0\n"
        with pytest.raises(DataError, match="tto"):
            load_population(_write(tmp_path / "p.csv", text))

    def test_non_numeric_field_rejected(self, tmp_path):
        text = "id,ind,sc,wp,tax1,tto\nx,I01,1,1,abc,1.0\n"
        with pytest.raises(DataError, match="tax1"):
            load_population(_write(tmp_path / "p.csv", text))

    def test_negative_tax1_rejected(self, tmp_path):
        text = "id,ind,sc,wp,tax1,tto\nx,I01,1,1,-2.0,1.0\n"
        with pytest.raises(DataError):
            load_population(_write(tmp_path / "p.csv", text))


@pytest.mark.parametrize("wp,sc", [(1, 1), (2, 2), (4, 2), (5, 3), (9, 3),
                                   (10, 4), (19, 4), (20, 5), (49, 5)])
def test_size_class_banding(wp, sc):
    assert size_class_for_wp(wp) == sc


def test_band_edges_cover_1_to_49():
    lo = min(lo for lo, hi in SC_BANDS.values())
    hi = max(hi for lo, hi in SC_BANDS.values())
    assert (lo, hi) == (1, 49)


class TestDomainTotal:
    def test_direct_sum(self, tmp_path):
        pop = load_population(_write(tmp_path / "p.csv", POP_CSV))
        assert domain_total(pop, "tto", "I01") == pytest.approx(37.0)

    def test_unknown_domain(self, tmp_path):
        pop = load_population(_write(tmp_path / "p.csv", POP_CSV))
        with pytest.raises(DomainError):
            domain_total(pop, "tto", "I99")

    def test_partition_identity(self, small_pop):
        total = sum(domain_total(small_pop, "tto", d) for d in small_pop.domains)
        assert total == pytest.approx(float(small_pop.tto.sum()), rel=1e-9)


class TestRoundTrip:
    def test_population(self, small_pop, tmp_path):
        path = tmp_path / "pop.csv"
        save_population(small_pop, path)
        again = load_population(path)
        assert again == small_pop

    def test_sample(self, small_pop, small_sample, tmp_path):
        path = tmp_path / "sam.csv"
        save_sample(small_sample, path)
        again = load_sample(path, small_pop)
        assert again == small_sample
        np.testing.assert_array_equal(again.d, small_sample.d)


def test_with_tto_shares_structure(small_pop):
    new = small_pop.with_tto(np.zeros(len(small_pop)))
    assert new.domains == small_pop.domains
    assert new.tto.sum() == 0.0
    assert small_pop.tto.sum() != 0.0  # original untouched
    with pytest.raises(DataError):
        small_pop.with_tto(np.ones(3))
