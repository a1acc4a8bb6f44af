import csv
import json
import re

import numpy as np
import pytest

from hypgerm.cli import EXIT_OK, EXIT_OPERATIONAL, EXIT_VALIDATION, main
from hypgerm.io import dumps_json, format_float

FLOAT_TOKEN = re.compile(r"(?<![\w.\"])-?\d+\.\d+(?:e[+-]?\d+)?|-?\d+e[+-]?\d+")


def _significant_digits(token):
    mantissa = token.lstrip("-").split("e")[0].replace(".", "").lstrip("0")
    return len(mantissa)


def _read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def germ_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("germ") / "germ.json"
    assert main(["germ-solve", "--refine", "1", "--qd-seed", "7", "--amp", "0.1", "--out", str(path)]) == EXIT_OK
    return path


@pytest.fixture(scope="module")
def fuchsian_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("germ") / "fuchsian.json"
    assert main(["germ-solve", "--refine", "1", "--amp", "0", "--out", str(path)]) == EXIT_OK
    return path


def test_phase_example_reaches_fixed_point(tmp_path):
    out = tmp_path / "phase.csv"
    assert main(["phase", "--x0", "0", "--y0", "0", "--tmax", "20", "--out", str(out)]) == EXIT_OK
    rows = _read_csv(out)
    assert rows[0] == ["t", "x", "y"]
    assert float(rows[-1][1]) == pytest.approx(np.sqrt(2.0 / 3.0), abs=1e-3)
    assert float(rows[-1][0]) == pytest.approx(20.0)


def test_germ_solve_example_at_refinement_two(tmp_path):
    out = tmp_path / "germ2.json"
    code = main(["germ-solve", "--mesh", "bolza", "--refine", "2", "--qd-seed", "7", "--amp", "0.1",
                 "--out", str(out)])
    assert code == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["residuals"]["gauss"] <= 1e-6


def test_spectrum_example_on_fuchsian_file(fuchsian_file, tmp_path):
    out = tmp_path / "spec.csv"
    assert main(["spectrum", "--op", "jacobi", "--germ", str(fuchsian_file), "--out", str(out)]) == EXIT_OK
    rows = _read_csv(out)
    assert rows[0] == ["operator", "eig_index", "eigenvalue", "refinement", "h_max"]
    assert float(rows[1][2]) == pytest.approx(1.0 / 3.0, rel=0.05)


def test_validate_fresh_germ_passes(germ_file, capsys):
    assert main(["validate", str(germ_file)]) == EXIT_OK
    captured = capsys.readouterr()
    assert captured.err.count("PASS") == 3
    assert json.loads(captured.out)["pass"] is True


def test_validate_doubled_m_fails_gauss(germ_file, tmp_path, capsys):
    doc = json.loads(germ_file.read_text())
    doc["m"] = (2 * np.asarray(doc["m"])).tolist()
    bad = tmp_path / "doubled.json"
    bad.write_text(dumps_json(doc))
    assert main(["validate", str(bad)]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    gauss_line = next(line for line in err.splitlines() if line.startswith("gauss"))
    assert gauss_line.endswith("FAIL")


def test_validate_missing_key_names_it(germ_file, tmp_path, capsys):
    doc = json.loads(germ_file.read_text())
    del doc["m"]
    bad = tmp_path / "missing.json"
    bad.write_text(json.dumps(doc))
    assert main(["validate", str(bad)]) == EXIT_OPERATIONAL
    err = capsys.readouterr().err
    assert "schema error" in err and "'m'" in err


def test_validate_cut_off_file_is_an_operational_error(germ_file, tmp_path, capsys):
    text = germ_file.read_text()
    bad = tmp_path / "cut.json"
    bad.write_text(text[: len(text) // 2])
    assert main(["validate", str(bad)]) == EXIT_OPERATIONAL
    assert "not valid JSON" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "absent.json")]) == EXIT_OPERATIONAL


def test_json_floats_use_seventeen_digits(germ_file):
    text = germ_file.read_text()
    tokens = FLOAT_TOKEN.findall(text)
    assert len(tokens) > 100
    assert all(_significant_digits(t) == 17 for t in tokens if float(t) != 0.0)
    assert all(float(t) == float(format_float(float(t))) for t in tokens[:50])
    compact = re.sub(r"\s+", "", dumps_json({"a": 0.1, "b": 1, "c": float("nan"), "z": 1 + 2j}))
    assert compact == '{"a":0.10000000000000001,"b":1,"c":null,"z":[1.0000000000000000,2.0000000000000000]}'


def test_csv_floats_use_seventeen_digits(tmp_path):
    out = tmp_path / "phase.csv"
    main(["phase", "--x0", "0.1", "--y0", "0.1", "--tmax", "0.01", "--out", str(out)])
    body = [cell for row in _read_csv(out)[1:] for cell in row]
    assert all(_significant_digits(c) == 17 for c in body if float(c) != 0.0)


def test_runs_are_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"sym{k}.json"
        main(["symplectic", "--refine", "0", "--seed", "3", "--samples", "3", "--out", str(out)])
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"x0": 0.5, "y0": 0.2, "tmax": 0.5, "dt": 0.01}))
    out = tmp_path / "a.csv"
    assert main(["phase", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    rows = _read_csv(out)
    assert float(rows[1][1]) == 0.5 and float(rows[-1][0]) == pytest.approx(0.5)
    assert main(["phase", "--config", str(cfg), "--x0", "0", "--out", str(out)]) == EXIT_OK
    assert float(_read_csv(out)[1][1]) == 0.0


@pytest.mark.parametrize("content", ['{"colour": 1}', '{"tmax": "long"}', "[1, 2]", "{"])
def test_malformed_config_is_rejected(tmp_path, content, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(content)
    assert main(["phase", "--config", str(cfg)]) == EXIT_OPERATIONAL
    assert "error" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert main(["bogus"]) == EXIT_OPERATIONAL
    assert main(["phase", "--dt", "-1"]) == EXIT_OPERATIONAL
    assert main(["phase", "--format", "csv", "--x0", "1", "--y0", "0"]) == EXIT_OPERATIONAL
    assert main(["germ-solve", "--format", "csv", "--refine", "0"]) == EXIT_OPERATIONAL


def test_validation_failure_still_writes_artifact(germ_file, tmp_path):
    out = tmp_path / "curv.json"
    code = main(["curvature", "--germ", str(germ_file), "--tol", "1e-12", "--out", str(out)])
    assert code == EXIT_VALIDATION
    assert json.loads(out.read_text())["curvature_norm"] > 1e-12


def test_flow_and_holonomy_and_report_commands(germ_file, tmp_path):
    out = tmp_path / "flow.csv"
    assert main(["flow", "--germ", str(germ_file), "--tmax", "1", "--dt", "0.01", "--out", str(out)]) == EXIT_OK
    rows = _read_csv(out)
    assert rows[0][:4] == ["t", "x", "y", "nu_norm"] and len(rows) == 102
    hol = tmp_path / "hol.json"
    assert main(["holonomy", "--germ", str(germ_file), "--out", str(hol)]) == EXIT_OK
    assert len(json.loads(hol.read_text())["generators"]) == 4
    rep = tmp_path / "rep.json"
    assert main(["report", "--germ", str(germ_file), "--out", str(rep)]) == EXIT_OK
    doc = json.loads(rep.read_text())
    assert doc["accepted"] and doc["jacobi_smallest"] > 0
