"""End-to-end runs of the command-line pipeline."""

import numpy as np
import pytest

from smalldom.cli import run
from smalldom.diagnostics import ReductionRule, cooks_distance, ols_fit, reduce_population
from smalldom.direct import ht_total
from smalldom.frame import load_population, load_sample
from smalldom.mixed import ModelSpec


def cli(*argv):
    return run([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Directory holding a generated population and one drawn sample."""
    d = tmp_path_factory.mktemp("cli")
    assert cli("gen-pop", "--out", d / "pop.csv", "--n-units", 400,
               "--n-domains", 3, "--seed", 11) == 0
    assert cli("sample", "--pop", d / "pop.csv", "--out", d / "sample.csv",
               "--seed", 4, "--save-allocation", d / "alloc.csv") == 0
    return d


@pytest.fixture(scope="module")
def pop(workdir):
    return load_population(workdir / "pop.csv")


@pytest.fixture(scope="module")
def sample(workdir, pop):
    return load_sample(workdir / "sample.csv", pop)


class TestExitCodes:
    def test_no_subcommand_is_usage_error(self, capsys):
        assert cli() == 1
        assert "subcommand is required" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert cli("frobnicate") == 1

    @pytest.mark.parametrize("argv", [("--help",), ("gen-pop", "--help")])
    def test_help_exits_zero(self, argv, capsys):
        assert cli(*argv) == 0
        assert "usage" in capsys.readouterr().out.lower()

    def test_missing_required_flag(self, capsys):
        assert cli("gen-pop") == 1
        assert "--out" in capsys.readouterr().err

    def test_bad_flag_value(self, tmp_path):
        assert cli("gen-pop", "--out", tmp_path / "p.csv", "--n-units", "abc") == 1

    def test_bad_grid_range(self, workdir, tmp_path):
        assert cli("sweep", "--pop", workdir / "pop.csv",
                   "--out", tmp_path / "s.csv", "--grid", "1:2") == 1

    def test_rejected_generator_config(self, tmp_path, capsys):
        assert cli("gen-pop", "--out", tmp_path / "p.csv",
                   "--contamination", "1.0") == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_input_file_is_data_error(self, tmp_path):
        assert cli("sample", "--pop", tmp_path / "nope.csv",
                   "--out", tmp_path / "s.csv") == 2

    def test_corrupt_population_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("id,ind,sc,wp\n1,A,1,2\n")
        assert cli("sample", "--pop", bad, "--out", tmp_path / "s.csv") == 2


class TestGenPop:
    def test_output_shape_and_message(self, workdir, pop):
        lines = (workdir / "pop.csv").read_text().strip().split("\n")
        assert lines[0] == "id,ind,sc,wp,tax1,tto"
        assert len(lines) == 401
        assert len(pop) == 400 and pop.domains == ("I01", "I02", "I03")

    def test_same_seed_identical_bytes(self, workdir, tmp_path):
        assert cli("gen-pop", "--out", tmp_path / "again.csv", "--n-units", 400,
                   "--n-domains", 3, "--seed", 11) == 0
        assert (tmp_path / "again.csv").read_bytes() == \
            (workdir / "pop.csv").read_bytes()

    def test_numeric_cells_round_trip(self, workdir):
        lines = (workdir / "pop.csv").read_text().strip().split("\n")
        for row in lines[1:6]:
            for cell in row.split(",")[4:]:
                assert repr(float(cell)) == cell


class TestSample:
    def test_sample_loads_against_parent(self, sample, pop):
        assert len(sample) < len(pop)
        assert set(sample.ind) == set(pop.domains)
        assert np.all(sample.pi > 0) and np.all(sample.pi <= 1)

    def test_allocation_file_reproduces_sample(self, workdir, tmp_path):
        alloc = (workdir / "alloc.csv").read_text().strip().split("\n")
        assert alloc[0] == "ind,sc,n_h"
        assert cli("sample", "--pop", workdir / "pop.csv",
                   "--out", tmp_path / "s.csv", "--seed", 4,
                   "--allocation", workdir / "alloc.csv") == 0
        assert (tmp_path / "s.csv").read_bytes() == \
            (workdir / "sample.csv").read_bytes()


class TestEstimate:
    @pytest.mark.parametrize("method", [
        "ht", "greg", "eblup", "peblup", "msyn", "reblup",
        "mq", "mqw", "mqcd", "mqcdw", "mqwr",
    ])
    def test_every_method_writes_totals(self, workdir, tmp_path, method):
        out = tmp_path / f"{method}.csv"
        assert cli("estimate", "--pop", workdir / "pop.csv",
                   "--sample", workdir / "sample.csv",
                   "--method", method, "--out", out) == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "estimator,domain,estimate"
        assert len(lines) == 4
        for row in lines[1:]:
            label, dom, val = row.split(",")
            assert label == method and dom.startswith("I")
            assert np.isfinite(float(val))
            assert repr(float(val)) == val

    def test_ht_matches_library(self, workdir, tmp_path, pop, sample):
        out = tmp_path / "ht.csv"
        assert cli("estimate", "--pop", workdir / "pop.csv",
                   "--sample", workdir / "sample.csv",
                   "--method", "ht", "--out", out) == 0
        for row in out.read_text().strip().split("\n")[1:]:
            _, dom, val = row.split(",")
            assert float(val) == ht_total(sample, dom)

    def test_greg_writes_cell_map(self, workdir, tmp_path, capsys):
        out = tmp_path / "greg.csv"
        assert cli("estimate", "--pop", workdir / "pop.csv",
                   "--sample", workdir / "sample.csv",
                   "--method", "greg", "--out", out) == 0
        cells = tmp_path / "greg.cells.csv"
        assert cells.exists()
        header = cells.read_text().split("\n", 1)[0]
        assert header.startswith("ind,group,n_pop,n_sam,")
        assert "and" in capsys.readouterr().out

    def test_domain_restriction(self, workdir, tmp_path):
        out = tmp_path / "one.csv"
        assert cli("estimate", "--pop", workdir / "pop.csv",
                   "--sample", workdir / "sample.csv", "--method", "ht",
                   "--domain", "I02", "--out", out) == 0
        lines = out.read_text().strip().split("\n")
        assert len(lines) == 2 and lines[1].split(",")[1] == "I02"

    def test_unknown_domain_leaves_existing_output_alone(self, workdir, tmp_path,
                                                         capsys):
        out = tmp_path / "keep.csv"
        out.write_text("precious\n")
        assert cli("estimate", "--pop", workdir / "pop.csv",
                   "--sample", workdir / "sample.csv", "--method", "ht",
                   "--domain", "ZZZ", "--out", out) == 1
        assert "unknown domain" in capsys.readouterr().err
        assert out.read_text() == "precious\n"

    def test_mqwr_accepts_grid_and_tuning(self, workdir, tmp_path):
        assert cli("estimate", "--pop", workdir / "pop.csv",
                   "--sample", workdir / "sample.csv", "--method", "mqwr",
                   "--b-phi", "2.0", "--grid", "0.1:0.9:0.2",
                   "--out", tmp_path / "wr.csv") == 0

    def test_nonpositive_tuning_is_usage_error(self, workdir, tmp_path):
        assert cli("estimate", "--pop", workdir / "pop.csv",
                   "--sample", workdir / "sample.csv", "--method", "mqwr",
                   "--b-phi", "0", "--out", tmp_path / "wr.csv") == 1


class TestConfigFile:
    def test_config_supplies_defaults(self, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("# comment\n\nn-units = 400\nseed = 9\nn-domains = 3\n")
        out = tmp_path / "p.csv"
        assert cli("gen-pop", "--config", cfg, "--out", out) == 0
        assert len(out.read_text().strip().split("\n")) == 401

    def test_explicit_flag_beats_config(self, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("n-units = 400\nn-domains = 3\nseed = 9\n")
        out = tmp_path / "p.csv"
        assert cli("gen-pop", "--config", cfg, "--out", out,
                   "--n-units", 450) == 0
        assert len(out.read_text().strip().split("\n")) == 451

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("n-unitz = 5\n")
        assert cli("gen-pop", "--config", cfg, "--out", tmp_path / "p.csv") == 1
        assert "unknown configuration key" in capsys.readouterr().err

    def test_malformed_line_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("n-units 150\n")
        assert cli("gen-pop", "--config", cfg, "--out", tmp_path / "p.csv") == 1
        assert "expected key = value" in capsys.readouterr().err

    def test_choice_violation_rejected(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "est.cfg"
        cfg.write_text("model = bogus\n")
        assert cli("estimate", "--config", cfg, "--pop", workdir / "pop.csv",
                   "--sample", workdir / "sample.csv", "--method", "ht",
                   "--out", tmp_path / "e.csv") == 1
        assert "bogus" in capsys.readouterr().err

    def test_boolean_key(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "sim.cfg"
        cfg.write_text("interpolate = yes\nthreads = 1\n")
        assert cli("simulate", "--config", cfg, "--pop", workdir / "pop.csv",
                   "--out", tmp_path / "r.csv", "-K", 1, "--estimators", "ht") == 0
        cfg.write_text("interpolate = maybe\n")
        assert cli("simulate", "--config", cfg, "--pop", workdir / "pop.csv",
                   "--out", tmp_path / "r.csv", "-K", 1, "--estimators", "ht") == 1
        assert "boolean" in capsys.readouterr().err


class TestDiagnose:
    def test_population_table_matches_library(self, workdir, tmp_path, pop):
        out = tmp_path / "diag.csv"
        qq = tmp_path / "qq.csv"
        assert cli("diagnose", "--pop", workdir / "pop.csv", "--out", out,
                   "--qq-out", qq) == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "id,fitted,residual,leverage,cooks_d"
        assert len(lines) == len(pop) + 1
        fit = ols_fit(pop, ModelSpec())
        d = cooks_distance(fit)
        cells = lines[1].split(",")
        assert float(cells[1]) == fit.fitted[0]
        assert float(cells[4]) == d[0]
        qlines = qq.read_text().strip().split("\n")
        assert qlines[0] == "theoretical,residual"
        assert len(qlines) == len(pop) + 1

    def test_sample_variant(self, workdir, tmp_path, sample):
        out = tmp_path / "diag_s.csv"
        assert cli("diagnose", "--pop", workdir / "pop.csv",
                   "--sample", workdir / "sample.csv", "--out", out,
                   "--model", "reduced") == 0
        assert len(out.read_text().strip().split("\n")) == len(sample) + 1


class TestReducePop:
    def test_top_k_matches_library(self, tmp_path):
        # flatter domains so no stratum is left empty by the removals
        src = tmp_path / "flat.csv"
        assert cli("gen-pop", "--out", src, "--n-units", 400, "--n-domains", 3,
                   "--domain-size-ratio", 4, "--seed", 11) == 0
        out = tmp_path / "red.csv"
        removed_out = tmp_path / "removed.csv"
        assert cli("reduce-pop", "--pop", src, "--out", out,
                   "--top-k", 2, "--removed-out", removed_out) == 0
        pop = load_population(src)
        reduced = load_population(out)
        assert len(reduced) == len(pop) - 2
        _, removed = reduce_population(pop, ModelSpec(), ReductionRule(top_k=2))
        assert removed_out.read_text().strip().split("\n") == ["id"] + removed

    def test_rules_are_mutually_exclusive(self, workdir, tmp_path):
        assert cli("reduce-pop", "--pop", workdir / "pop.csv",
                   "--out", tmp_path / "r.csv", "--top-k", 1,
                   "--cooks-threshold", "0.5") == 1
        assert cli("reduce-pop", "--pop", workdir / "pop.csv",
                   "--out", tmp_path / "r.csv") == 1


class TestSimulate:
    def test_report_written(self, workdir, tmp_path, capsys):
        out = tmp_path / "sim.csv"
        assert cli("simulate", "--pop", workdir / "pop.csv", "--out", out,
                   "-K", 2, "--seed", 3, "--estimators", "ht,greg",
                   "--threads", 1) == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "estimator,domain,truth,rb_pct,rrmse_pct,failures"
        assert len(lines) == 1 + 2 * (3 + 3)
        assert "K=2" in capsys.readouterr().out

    def test_thread_count_does_not_change_bytes(self, workdir, tmp_path):
        one = tmp_path / "t1.csv"
        two = tmp_path / "t2.csv"
        base = ("simulate", "--pop", workdir / "pop.csv", "-K", 2, "--seed", 3,
                "--estimators", "ht,greg,mq")
        assert cli(*base, "--out", one, "--threads", 1) == 0
        assert cli(*base, "--out", two, "--threads", 2) == 0
        assert one.read_bytes() == two.read_bytes()

    def test_bad_estimator_token_is_usage_error(self, workdir, tmp_path, capsys):
        assert cli("simulate", "--pop", workdir / "pop.csv",
                   "--out", tmp_path / "r.csv", "-K", 1,
                   "--estimators", "ht,foo") == 1
        assert "unknown estimator" in capsys.readouterr().err

    def test_duplicate_estimators_rejected(self, workdir, tmp_path):
        assert cli("simulate", "--pop", workdir / "pop.csv",
                   "--out", tmp_path / "r.csv", "-K", 1,
                   "--estimators", "ht,ht") == 1


class TestSweep:
    def test_range_grid(self, workdir, tmp_path):
        out = tmp_path / "sweep.csv"
        assert cli("sweep", "--pop", workdir / "pop.csv", "--out", out,
                   "-K", 2, "--seed", 3, "--grid", "1.0:2.0:0.5",
                   "--threads", 1) == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0].startswith("b_phi,") and lines[0].endswith(",mean")
        assert len(lines) == 1 + 3 + 2
        assert [r.split(",")[0] for r in lines[1:4]] == ["1.0", "1.5", "2.0"]


class TestBootstrap:
    def test_mse_table(self, workdir, tmp_path, capsys):
        out = tmp_path / "mse.csv"
        assert cli("bootstrap-mse", "--pop", workdir / "pop.csv",
                   "--sample", workdir / "sample.csv", "--out", out,
                   "-B", 2, "-L", 2, "--estimator", "mq", "--seed", 4,
                   "--threads", 1) == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "estimator,domain,estimate,mse,rmse,rel_rmse_pct"
        assert len(lines) == 4
        assert "B=2" in capsys.readouterr().out

    def test_domain_pool_runs(self, workdir, tmp_path):
        assert cli("bootstrap-mse", "--pop", workdir / "pop.csv",
                   "--sample", workdir / "sample.csv",
                   "--out", tmp_path / "m.csv", "-B", 1, "-L", 2,
                   "--estimator", "mqwr:1", "--pool", "domain") == 0

    def test_bad_estimator_is_usage_error(self, workdir, tmp_path):
        assert cli("bootstrap-mse", "--pop", workdir / "pop.csv",
                   "--sample", workdir / "sample.csv",
                   "--out", tmp_path / "m.csv", "--estimator", "nope") == 1
