from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from mixedboot.cli import main
from mixedboot.core import build_design, read_table
from mixedboot.formula import parse_formula
from mixedboot.inference import confint
from mixedboot.lineup import encode_position, make_lineup, residual_frame, reveal
from mixedboot.reml import fit_reml
from mixedboot.results import read_result

FORMULA = "mathAge11 ~ mathAge8 + gender + class + (1 | school)"


@pytest.fixture(scope="module")
def jsp_csv(tmp_path_factory):
    """Synthetic data shaped like the two-level school example."""
    rng = np.random.default_rng(2024)
    rows = []
    for s in range(18):
        u = rng.normal(0, 1.5)
        for _ in range(rng.integers(5, 10)):
            age8 = rng.normal(25, 6)
            cls = rng.choice(["manual", "nonmanual"])
            rows.append({
                "school": s + 1,
                "mathAge8": round(age8, 3),
                "gender": rng.choice(["F", "M"]),
                "class": cls,
                "mathAge11": round(14 + 0.6 * age8 + 0.7 * (cls == "nonmanual") + u + rng.normal(0, 4), 3),
            })
    path = tmp_path_factory.mktemp("data") / "jsp.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestFit:
    def test_prints_and_writes(self, capsys, jsp_csv, tmp_path):
        code, out, _ = run(capsys, "fit", "--data", jsp_csv, "--formula", FORMULA, "--out", tmp_path)
        assert code == 0
        assert "classnonmanual" in out
        rec = json.loads((tmp_path / "fit.json").read_text())
        assert list(rec["fixed_effects"]) == ["(Intercept)", "mathAge8", "genderM", "classnonmanual"]

    def test_missing_file_is_io_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "fit", "--data", tmp_path / "nope.csv", "--formula", FORMULA)
        assert code == 2 and "I/O error" in err

    @pytest.mark.parametrize("formula", ["y ~ x", "mathAge11 ~ zz + (1|school)", "a ~ b + (1|g) + (1|h)"])
    def test_bad_model_is_exit_1(self, capsys, jsp_csv, formula):
        code, _, err = run(capsys, "fit", "--data", jsp_csv, "--formula", formula)
        assert code == 1 and err.startswith("mixedboot: error")

    def test_usage_error_is_exit_1(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["bootstrap", "--type", "nonsense"])
        assert info.value.code == 1


class TestBootstrap:
    def test_outputs(self, capsys, jsp_csv, tmp_path):
        code, out, _ = run(capsys, "bootstrap", "--data", jsp_csv, "--formula", FORMULA, "--type", "residual",
                           "--B", 40, "--statistic", "fixef", "--seed", 7, "--out", tmp_path)
        assert code == 0
        rec = json.loads((tmp_path / "stats.json").read_text())
        assert len(rec["stats"]) == 4 and rec["B"] == 40
        assert (tmp_path / "replicates.csv").read_text().count("\n") == 41
        assert json.loads((tmp_path / "logs.json").read_text()) == []
        assert "Bootstrap type: residual" in out
        assert "There were 0 messages, 0 warnings, and 0 errors." in out

    def test_worker_invariance(self, capsys, jsp_csv, tmp_path):
        outs = []
        for workers in (1, 4):
            out = tmp_path / f"w{workers}"
            code, _, _ = run(capsys, "bootstrap", "--data", jsp_csv, "--formula", FORMULA, "--type", "parametric",
                             "--B", 30, "--statistic", "all", "--seed", 42, "--workers", workers, "--out", out)
            assert code == 0
            outs.append(out)
        for name in ("replicates.csv", "stats.json", "logs.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_workers_env_default(self, capsys, jsp_csv, tmp_path, monkeypatch):
        monkeypatch.setenv("MIXEDBOOT_WORKERS", "2")
        code, _, _ = run(capsys, "bootstrap", "--data", jsp_csv, "--formula", FORMULA, "--type", "wild",
                         "--hccme", "hc2", "--aux-dist", "f1", "--B", 6, "--seed", 1, "--out", tmp_path)
        assert code == 0

    @pytest.mark.parametrize(
        "extra",
        [
            ["--type", "reb", "--reb-variant", "2", "--statistic", "fixef"],
            ["--type", "case"],
            ["--type", "case", "--resample", "false,false"],
            ["--type", "parametric", "--hccme", "hc2"],
            ["--type", "wild", "--hccme", "hc2"],
            ["--type", "parametric", "--workers", "0"],
            [],
        ],
    )
    def test_invalid_combinations(self, capsys, jsp_csv, tmp_path, extra):
        code, _, err = run(capsys, "bootstrap", "--data", jsp_csv, "--formula", FORMULA, "--B", 5,
                           "--out", tmp_path, *extra)
        assert code == 1 and err

    def test_case_and_reb2(self, capsys, jsp_csv, tmp_path):
        code, _, _ = run(capsys, "bootstrap", "--data", jsp_csv, "--formula", FORMULA, "--type", "case",
                         "--resample", "false,true", "--B", 5, "--seed", 3, "--out", tmp_path / "c")
        assert code == 0
        code, _, _ = run(capsys, "bootstrap", "--data", jsp_csv, "--formula", FORMULA, "--type", "reb",
                         "--reb-variant", 2, "--statistic", "all", "--B", 25, "--seed", 3, "--out", tmp_path / "r")
        assert code == 0


@pytest.fixture(scope="module")
def run_dir(jsp_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("boot")
    assert main(["bootstrap", "--data", str(jsp_csv), "--formula", FORMULA, "--type", "parametric",
                 "--B", "60", "--seed", "5", "--out", str(out)]) == 0
    return out


class TestCi:
    def test_default_types(self, capsys, run_dir, tmp_path):
        code, _, _ = run(capsys, "ci", "--results", run_dir, "--out", tmp_path)
        assert code == 0
        frame = pd.read_csv(tmp_path / "intervals.csv")
        assert len(frame) == 12
        assert list(frame["type"].unique()) == ["norm", "basic", "perc"]

    def test_filter_and_level(self, capsys, run_dir, tmp_path):
        code, _, _ = run(capsys, "ci", "--results", run_dir, "--ci-types", "perc", "--level", 0.9, "--out", tmp_path)
        assert code == 0
        recs = json.loads((tmp_path / "intervals.json").read_text())
        assert len(recs) == 4
        assert {r["level"] for r in recs} == {0.9} and {r["type"] for r in recs} == {"perc"}

    def test_round_trip_is_bit_identical(self, capsys, run_dir, jsp_csv, tmp_path):
        from mixedboot.inference import fixef
        from mixedboot.resamplers import BootstrapConfig, bootstrap

        model = fit_reml(build_design(read_table(jsp_csv), parse_formula(FORMULA)))
        direct = bootstrap(model, fixef, BootstrapConfig("parametric", 60, master_seed=5))
        np.testing.assert_array_equal(read_result(run_dir).replicates, direct.replicates)
        run(capsys, "ci", "--results", run_dir, "--out", tmp_path)
        assert (tmp_path / "intervals.json").read_text() == confint(direct).to_json()
        assert (tmp_path / "intervals.csv").read_text() == confint(direct).to_csv()

    def test_inline_run(self, capsys, jsp_csv, tmp_path):
        code, _, _ = run(capsys, "ci", "--data", jsp_csv, "--formula", FORMULA, "--type", "parametric",
                         "--B", 25, "--seed", 1, "--out", tmp_path)
        assert code == 0
        assert (tmp_path / "stats.json").exists() and (tmp_path / "intervals.csv").exists()

    def test_insufficient_replicates_exit_1(self, capsys, jsp_csv, tmp_path):
        code, _, err = run(capsys, "ci", "--data", jsp_csv, "--formula", FORMULA, "--type", "parametric",
                           "--B", 5, "--seed", 1, "--out", tmp_path)
        assert code == 1 and "at least 20" in err

    def test_missing_results_dir(self, capsys, tmp_path):
        code, _, _ = run(capsys, "ci", "--results", tmp_path / "absent")
        assert code == 2


@pytest.fixture(scope="module")
def jsp_model(jsp_csv):
    return fit_reml(build_design(read_table(jsp_csv), parse_formula(FORMULA)))


@pytest.fixture(scope="module")
def bundle(jsp_model):
    return make_lineup(jsp_model, 20, seed=9)


class TestLineup:
    def test_panels(self, bundle):
        assert sorted(bundle.table[".sample"].unique()) == list(range(1, 21))
        sizes = bundle.table.groupby(".sample").size()
        assert (sizes == len(bundle.table) // 20).all()

    def test_exactly_one_true_panel(self, bundle, jsp_model):
        truth = residual_frame(jsp_model)
        matches = []
        for k, panel in bundle.table.groupby(".sample"):
            if np.allclose(panel[".resid"].to_numpy(), truth[".resid"].to_numpy(), rtol=0, atol=1e-12):
                matches.append(k)
        assert matches == [bundle.answer]

    def test_decoys_are_refit_residuals(self, bundle):
        scale = bundle.table["y"].abs().max()
        for k, panel in bundle.table.groupby(".sample"):
            # conditional residuals of a REML refit with intercepts sum to zero
            assert abs(panel[".resid"].sum()) < 1e-8 * scale * len(panel)
            if k != bundle.answer:
                np.testing.assert_allclose(panel[".fitted"] + panel[".resid"], panel["y"], atol=1e-10)

    def test_deterministic(self, bundle, jsp_model):
        again = make_lineup(jsp_model, 20, seed=9)
        pd.testing.assert_frame_equal(again.table, bundle.table)
        assert again.key == bundle.key

    @pytest.mark.parametrize("pos,seed", [(1, 0), (20, 9), (7, 2**63)])
    def test_token_round_trip(self, pos, seed):
        assert reveal(encode_position(pos, seed), seed) == pos

    def test_too_few_panels(self, jsp_model):
        with pytest.raises(ValueError):
            make_lineup(jsp_model, 1)

    def test_command(self, capsys, jsp_csv, tmp_path):
        code, out, _ = run(capsys, "lineup", "--data", jsp_csv, "--formula", FORMULA, "--panels", 5,
                           "--seed", 4, "--out", tmp_path)
        assert code == 0
        answer = json.loads((tmp_path / "answer.json").read_text())
        assert answer["token"] in out
        table = pd.read_csv(tmp_path / "lineup.csv")
        assert sorted(table[".sample"].unique()) == [1, 2, 3, 4, 5]
        code, out, _ = run(capsys, "lineup", "--reveal", answer["token"], "--seed", 4)
        assert code == 0 and out.strip().endswith(str(answer["position"]))
