import numpy as np
import pandas as pd
import pytest

from mrpkit.cells import CellTable, CovariateSchema, build_cell_table
from mrpkit.cli import main
from mrpkit.design import EstimateSummary, poststratified_mean
from mrpkit.diagnostics import analytic_bias
from mrpkit.errors import DataError
from mrpkit.io import (
    infer_schema,
    read_cell_table,
    read_frame,
    read_key_values,
    read_margins,
    read_microdata,
    read_population_spec,
    write_cell_tables,
    write_estimates,
    write_frame,
)

LEVELS = {"age": ["18-34", "35-54", "55+"], "edu": ["lo", "hi"]}


@pytest.fixture
def files(tmp_path):
    rng = np.random.default_rng(0)

    def micro(n, outcome=True, weight=None, p_age=(1 / 3, 1 / 3, 1 / 3)):
        age = rng.choice(LEVELS["age"], n, p=p_age)
        edu = rng.choice(LEVELS["edu"], n)
        df = pd.DataFrame({"age": age, "edu": edu})
        if outcome:
            df["outcome"] = (pd.Series(age).map({"18-34": 1.0, "35-54": 2.0, "55+": 4.0}) + (edu == "hi") + rng.normal(size=n)).to_numpy()
        if weight is not None:
            df["weight"] = weight
        return df

    paths = {}
    paths["sample"] = tmp_path / "sample.csv"
    micro(300, p_age=(0.5, 0.3, 0.2)).to_csv(paths["sample"], index=False)
    paths["population"] = tmp_path / "population.csv"
    micro(3000, outcome=False).to_csv(paths["population"], index=False)
    paths["reference"] = tmp_path / "reference.csv"
    micro(200, outcome=False, weight=15.0).to_csv(paths["reference"], index=False)
    paths["margins"] = tmp_path / "margins.csv"
    pd.DataFrame({"variable": ["age"] * 3 + ["edu"] * 2, "level": LEVELS["age"] + LEVELS["edu"],
                  "total": [1000, 1000, 1000, 1500, 1500]}).to_csv(paths["margins"], index=False)
    paths["spec"] = tmp_path / "spec.csv"
    pd.DataFrame({"cell": ["a", "b", "c"], "N": [20000, 30000, 50000], "psi": [0.1, 0.3, 0.5],
                  "meanR": [1, 2, 4], "meanM": [0.5, 2.5, 3], "sd": [1, 1, 2]}).to_csv(paths["spec"], index=False)
    paths["config"] = tmp_path / "sim.txt"
    paths["config"].write_text("# tiny study\nN = 3000\nn_nonprob = 150\nn_ref = 150\njackknife_groups = 5\n"
                               "iterations = 300\nwarmup = 150\nL = 5\n")
    return paths


def test_infer_schema_sorts_numeric_labels():
    df = pd.DataFrame({"g": ["10", "9", "2", "x"], "outcome": ["1", "2", "3", "4"]})
    schema = infer_schema([df])
    assert schema.levels("g") == ("2", "9", "10", "x")
    with pytest.raises(DataError):
        infer_schema([pd.DataFrame({"g": ["a", ""]})])


def test_microdata_and_estimates_round_trip(files, tmp_path):
    sample = read_microdata(files["sample"])
    assert sample.schema.names == ["age", "edu"] and len(sample) == 300
    df = read_frame(files["sample"])
    np.testing.assert_array_equal(sample.outcome, df.outcome.astype(float))
    ests = [EstimateSummary.normal("overall", "PS", 1 / 3, 0.1 + 1e-17), EstimateSummary.absent("g", "PS", "empty")]
    path = write_estimates(ests, tmp_path / "e.csv")
    back = pd.read_csv(path, float_precision="round_trip")
    assert back.estimate[0] == 1 / 3 and back.se[0] == 0.1 + 1e-17
    assert path.read_text().splitlines()[2].endswith("NA,NA,NA,NA")


def test_cell_table_round_trip(files, tmp_path):
    sample = read_microdata(files["sample"])
    table = build_cell_table(sample)
    path = write_cell_tables([table, table], tmp_path / "cells.csv")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    assert list(df.columns[:3]) == ["replicate", "age", "edu"] and set(df.replicate) == {"1", "2"}
    one = df[df.replicate == "1"].drop(columns="replicate")
    write_frame(one, tmp_path / "one.csv")
    back = read_cell_table(tmp_path / "one.csv", sample.schema, role="sample")
    np.testing.assert_array_equal(back.cells, table.cells)
    np.testing.assert_array_equal(back.means, table.means)
    np.testing.assert_array_equal(back.variances, table.variances)


def test_margin_and_key_value_parsing(files, tmp_path):
    schema = read_microdata(files["sample"]).schema
    m = read_margins(files["margins"], schema)
    assert m["age"]["55+"] == 1000.0 and m["edu"]["hi"] == 1500.0
    bad = tmp_path / "bad.csv"
    bad.write_text("variable,level,total\nage,99+,5\n")
    with pytest.raises(DataError, match="99"):
        read_margins(bad, schema)
    kv = tmp_path / "kv.txt"
    kv.write_text("a = 1  # note\n\n b=two words\n")
    assert read_key_values(kv) == {"a": "1", "b": "two words"}
    kv.write_text("novalue\n")
    with pytest.raises(DataError):
        read_key_values(kv)
    spec = read_population_spec(files["spec"])
    assert spec.N.tolist() == [20000, 30000, 50000] and spec.schema.levels("cell") == ("a", "b", "c")


def _run(args, out):
    return main([*args, "--out-dir", str(out)])


def test_estimate_ps_matches_library(files, tmp_path):
    code = _run(["estimate", "--method", "PS", "--sample", str(files["sample"]),
                 "--population", str(files["population"]), "--groups", "age"], tmp_path)
    assert code == 0
    got = pd.read_csv(tmp_path / "estimates.csv", float_precision="round_trip")
    assert got.columns.tolist() == ["method", "group", "estimate", "se", "ci_low", "ci_high"]
    assert got.group.tolist() == ["overall", "age:18-34", "age:35-54", "age:55+"]
    sample = read_microdata(files["sample"])
    pop = build_cell_table(read_microdata(files["population"], sample.schema), role="population")
    ref = poststratified_mean(build_cell_table(sample), pop, "age")
    np.testing.assert_array_equal(got.estimate.to_numpy(), [r.estimate for r in ref])
    prov = (tmp_path / "provenance.txt").read_text()
    assert "arg.seed = 0" in prov and "sha256=" in prov and "version.numpy" in prov


@pytest.mark.parametrize("method", ["UnW", "IPW", "GREG", "Raking", "DR"])
def test_estimate_closed_form_methods(files, tmp_path, method):
    code = _run(["estimate", "--method", method, "--sample", str(files["sample"]), "--population", str(files["population"]),
                 "--reference", str(files["reference"]), "--jackknife-groups", "5"], tmp_path)
    assert code == 0
    est = pd.read_csv(tmp_path / "estimates.csv", float_precision="round_trip")
    assert est.method[0] == method and np.isfinite(est.se[0])


def test_estimate_with_margin_file(files, tmp_path):
    assert _run(["estimate", "--method", "Raking", "--sample", str(files["sample"]), "--margins", str(files["margins"]),
                 "--jackknife-groups", "5"], tmp_path) == 0


def test_estimate_mrp_variant(files, tmp_path):
    code = _run(["estimate", "--variant", "P", "--sample", str(files["sample"]), "--population", str(files["population"]),
                 "--outcome-model", "age + edu", "--iterations", "400", "--warmup", "200", "--dump-draws"], tmp_path)
    assert code == 0
    assert pd.read_csv(tmp_path / "estimates.csv", float_precision="round_trip").method[0] == "MRP-P"
    draws = pd.read_csv(tmp_path / "draws.csv", float_precision="round_trip")
    assert draws.columns.tolist() == ["chain", "iteration", "parameter", "value"]
    assert "mrp.max_rhat" in (tmp_path / "provenance.txt").read_text()


def test_exit_codes(files, tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert _run(["estimate", "--method", "UnW", "--sample", str(missing)], tmp_path) == 2
    assert str(missing) in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main([]) == 1
    assert _run(["estimate", "--sample", str(files["sample"])], tmp_path) == 1
    assert _run(["estimate", "--method", "PS", "--sample", str(files["sample"])], tmp_path) == 2
    # disjoint sample and reference cells separate perfectly
    sep = tmp_path / "sep.csv"
    pd.DataFrame({"age": ["18-34"] * 20, "edu": ["lo"] * 20, "weight": 5.0}).to_csv(sep, index=False)
    only = tmp_path / "only.csv"
    pd.DataFrame({"age": ["55+"] * 20, "edu": ["hi"] * 20, "outcome": np.arange(20.0)}).to_csv(only, index=False)
    assert _run(["estimate", "--method", "IPW", "--sample", str(only), "--reference", str(sep)], tmp_path) == 3


def test_synthpop_and_diagnose(files, tmp_path):
    assert _run(["synthpop", "--reference", str(files["reference"]), "--N", "3000", "--L", "4", "--seed", "2"], tmp_path) == 0
    cells = pd.read_csv(tmp_path / "synthetic_cells.csv", float_precision="round_trip")
    assert cells.groupby("replicate")["count"].sum().tolist() == [3000] * 4
    assert _run(["diagnose", "--spec", str(files["spec"]), "--sigma-theta", "1"], tmp_path) == 0
    diag = pd.read_csv(tmp_path / "diagnostics.csv", float_precision="round_trip").set_index("quantity")
    rec = analytic_bias(read_population_spec(files["spec"]), 1.0)
    assert diag.loc["A", "value"] == rec.A and diag.loc["B", "value"] == rec.B
    assert diag.loc["bias_ps_stochastic", "kind"] == "approximate"


def test_simulate_subcommand(files, tmp_path):
    code = _run(["simulate", "--config", str(files["config"]), "--methods", "UnW,PS,MRP-P", "--reps", "2", "--seed", "4"], tmp_path)
    assert code == 0
    report = pd.read_csv(tmp_path / "report.csv", float_precision="round_trip")
    assert set(report.method) == {"UnW", "PS", "MRP-P"} and (report.replications + report.excluded == 2).all()
    reps = pd.read_csv(tmp_path / "replications.csv", float_precision="round_trip")
    assert "seconds" not in reps.columns and len(reps) == 2 * 3 * 7
    assert _run(["simulate", "--methods", "Bogus"], tmp_path) == 1


def test_outputs_are_byte_identical_across_runs(files, tmp_path):
    runs = {
        "estimates.csv": ["estimate", "--method", "IPW", "--sample", str(files["sample"]),
                          "--reference", str(files["reference"]), "--jackknife-groups", "5", "--seed", "3"],
        "synthetic_cells.csv": ["synthpop", "--reference", str(files["reference"]), "--N", "3000", "--L", "3", "--seed", "1"],
    }
    for name, args in runs.items():
        a, b = tmp_path / "a", tmp_path / "b"
        assert _run(args, a) == 0 and _run(args, b) == 0
        assert (a / name).read_bytes() == (b / name).read_bytes()
