import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

import adapt_cli
from adapt_cli import UsageError, main, parse_values
from adapt_generators import load_chain
from adapt_plot import line_plot_svg

SVG = "{http://www.w3.org/2000/svg}"


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_parse_values():
    assert parse_values("1..4") == [1.0, 2.0, 3.0, 4.0]
    assert parse_values("0.5,0.25") == [0.5, 0.25]
    assert parse_values(None) is None
    with pytest.raises(UsageError):
        parse_values("4..1")
    with pytest.raises(UsageError):
        parse_values("a,b")


def test_simulate_base(tmp_path):
    code = run(tmp_path, "simulate", "--chain", "irreducible:n=4", "--x0", "1..4", "--horizon", "200", "--seed", "7")
    assert code == 0
    rows = read_rows(tmp_path / "trajectory.csv")
    assert list(rows[0]) == ["t", "agent", "origin", "value"]
    assert len(rows) == 201 * 4
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["agreement_time"] is not None
    terminal = {float(r["value"]) for r in rows if r["t"] == "200"}
    assert len(terminal) == 1
    config = json.loads((tmp_path / "run.json").read_text())
    assert config["seed"] == 7 and config["x0"] == [1.0, 2.0, 3.0, 4.0]

    svg = ET.parse(tmp_path / "trajectory.svg").getroot()
    assert svg.tag == f"{SVG}svg"
    assert svg.get("width") == "900" and svg.get("height") == "540"
    assert len(svg.findall(f".//{SVG}polyline")) == 4


def test_simulate_is_byte_identical(tmp_path):
    argv = ["simulate", "--dynamics", "fj", "--chain", "irreducible:n=3", "--horizon", "100", "--seed", "3"]
    assert run(tmp_path / "a", *argv) == 0
    assert run(tmp_path / "b", *argv) == 0
    for name in ("trajectory.csv", "summary.json", "trajectory.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_fj_ends_in_prejudices(tmp_path):
    code = run(tmp_path, "simulate", "--dynamics", "fj", "--chain", "irreducible:n=5", "--x0", "1..5",
               "--u", "21..25", "--gamma", "0.5", "--horizon", "300", "--no-svg")
    assert code == 0
    assert not (tmp_path / "trajectory.svg").exists()
    rows = read_rows(tmp_path / "trajectory.csv")
    terminal = [float(r["value"]) for r in rows if r["t"] == "300"]
    assert all(21.0 <= v <= 25.0 for v in terminal)


def test_simulate_rank_one(tmp_path):
    code = run(tmp_path, "simulate", "--dynamics", "rank-one", "--chain", "irreducible:n=3", "--gamma", "0.5",
               "--q", "0.2,0.3,0.5", "--horizon", "100")
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert all(origin >= 3 for origin in summary["terminal_origins"])


def test_simulate_block_chain_ends_on_two_values(tmp_path):
    code = run(tmp_path, "simulate", "--chain", "block:n=10", "--x0", "1..10", "--horizon", "1000", "--seed", "7",
               "--no-svg")
    assert code == 0
    rows = read_rows(tmp_path / "trajectory.csv")
    terminal = [float(r["value"]) for r in rows if r["t"] == "1000"]
    assert len(set(terminal)) == 2
    assert len(set(terminal[:5])) == 1 and len(set(terminal[5:])) == 1
    assert json.loads((tmp_path / "summary.json").read_text())["agreement_time"] is None


def test_config_errors_exit_2(tmp_path):
    assert run(tmp_path, "simulate", "--chain", "spiral:n=3") == 2
    assert run(tmp_path, "simulate", "--chain", "irreducible:n=3", "--x0", "1..4") == 2
    assert run(tmp_path, "simulate", "--dynamics", "fj", "--chain", "irreducible:n=2", "--x0", "1,2",
               "--u", "2,3") == 2
    assert run(tmp_path, "simulate", "--chain", "irreducible:n=3", "--seed", "-1") == 2
    with pytest.raises(SystemExit) as exc:
        run(tmp_path, "verify", "no-such-check")
    assert exc.value.code == 2


def test_mean_compare_refuses_few_trials(tmp_path):
    assert run(tmp_path, "mean-compare", "--trials", "1") == 2


def test_mean_compare_identity_is_exact(tmp_path):
    code = run(tmp_path, "mean-compare", "--chain", "identity:n=3", "--horizon", "20", "--trials", "100")
    assert code == 0
    rows = read_rows(tmp_path / "mean.csv")
    assert list(rows[0]) == ["t", "agent", "empirical_mean", "oracle"]
    assert len(rows) == 21 * 3
    for row in rows:
        assert float(row["empirical_mean"]) == float(row["oracle"]) == int(row["agent"]) + 1
    svg = ET.parse(tmp_path / "mean.svg").getroot()
    assert len(svg.findall(f".//{SVG}polyline")) == 3
    assert len(svg.findall(f".//{SVG}rect[@data-agent]")) == 21 * 3


def test_mean_compare_ergodic_chain(tmp_path):
    code = run(tmp_path, "mean-compare", "--chain", "irreducible:n=4", "--x0", "1..4", "--horizon", "40",
               "--trials", "400")
    assert code == 0
    rows = read_rows(tmp_path / "mean.csv")
    gap = max(abs(float(r["empirical_mean"]) - float(r["oracle"])) for r in rows)
    # values in [1, 4]: standard error at most 1.5 / sqrt(400)
    assert gap < 6 * 1.5 / np.sqrt(400)


def test_verify_fj_limit_by_hand(tmp_path):
    assert run(tmp_path, "verify", "fj-limit", "--n", "2", "--gamma", "0.5", "--q-uniform") == 0
    verdict = json.loads((tmp_path / "verdict.json").read_text())
    assert verdict["passed"] is True
    details = verdict["checks"][0]["details"]
    assert np.allclose(details["V"], [[0.75, 0.25], [0.25, 0.75]])


def test_verify_fj_limit_random_instances(tmp_path):
    assert run(tmp_path, "verify", "fj-limit", "--n", "5", "--cases", "50", "--seed", "7") == 0


def test_verify_rank_one_limit(tmp_path):
    assert run(tmp_path, "verify", "rank-one-limit", "--n", "4", "--cases", "20", "--q", "0.1,0.2,0.3,0.4") == 0


def test_verify_correlation_lemma(tmp_path):
    assert run(tmp_path, "verify", "correlation-lemma", "--n", "3", "--delta", "2", "--cases", "30",
               "--seed", "7") == 0
    details = json.loads((tmp_path / "verdict.json").read_text())["checks"][0]["details"]
    assert details["failures"] == []
    assert details["max_base_case_gap"] <= 1e-14


def test_verify_ergodicity(tmp_path):
    assert run(tmp_path, "verify", "ergodicity", "--chain", "identity") == 0
    verdict = json.loads((tmp_path / "verdict.json").read_text())
    assert verdict["checks"][0]["details"]["diagnostic"]["verdict"] == "not-rank-one"
    assert run(tmp_path, "verify", "ergodicity", "--chain", "identity", "--expect", "ergodic") == 1
    assert run(tmp_path, "verify", "ergodicity", "--chain", "static:p=0.9,q=0.8") == 0


def test_verify_agreement_distribution(tmp_path):
    code = run(tmp_path, "verify", "agreement-dist", "--chain", "static:p=0.9,q=0.8", "--trials", "2000",
               "--sigmas", "4", "--csv")
    assert code == 0
    rows = read_rows(tmp_path / "agreement.csv")
    assert list(rows[0]) == ["i", "j", "estimate", "std_err", "oracle"]
    assert float(rows[0]["oracle"]) == pytest.approx(2 / 3)


def test_verify_time_reversed_block_chain(tmp_path):
    code = run(tmp_path, "verify", "time-reversed", "--chain", "block:n=4", "--horizon", "100", "--t-probe", "40",
               "--trials", "400")
    assert code == 0
    details = json.loads((tmp_path / "verdict.json").read_text())["checks"][0]["details"]
    assert details["mode"].startswith("non-ergodic")


def test_verify_time_reversed_ergodic_chain(tmp_path):
    code = run(tmp_path, "verify", "time-reversed", "--chain", "static:p=0.9,q=0.8", "--horizon", "200",
               "--t-probe", "0", "--trials", "2000", "--sigmas", "4")
    assert code == 0
    details = json.loads((tmp_path / "verdict.json").read_text())["checks"][0]["details"]
    assert details["mode"].startswith("ergodic")
    assert details["diagnostic"]["verdict"] == "rank-one-within-tol"


def test_verify_time_reversed_short_horizon_is_not_called_non_ergodic(tmp_path):
    # ten steps from t = 90 still leave a column spread of 0.7^10
    code = run(tmp_path, "verify", "time-reversed", "--chain", "static:p=0.9,q=0.8", "--horizon", "100",
               "--t-probe", "90", "--trials", "400")
    assert code == 1
    details = json.loads((tmp_path / "verdict.json").read_text())["checks"][0]["details"]
    assert details["mode"].startswith("horizon-exhausted")
    assert details["diagnostic"]["verdict"] == "horizon-exhausted"


def test_verify_monte_carlo_honours_explicit_time(tmp_path):
    assert run(tmp_path, "verify", "fj-limit", "--n", "2", "--gamma", "0.5", "--q-uniform", "--monte-carlo",
               "--t-probe", "0") == 2
    assert run(tmp_path, "verify", "rank-one-limit", "--n", "2", "--cases", "2", "--monte-carlo",
               "--chain", "uniform:n=2", "--t-probe", "0") == 2
    code = run(tmp_path, "verify", "fj-limit", "--n", "2", "--gamma", "0.5", "--q-uniform", "--monte-carlo",
               "--t-probe", "30", "--trials", "2000", "--sigmas", "4")
    assert code == 0
    details = json.loads((tmp_path / "verdict.json").read_text())["checks"][0]["details"]
    assert details["monte_carlo"]["details"]["t_probe"] == 30


def test_unexpected_errors_exit_1(tmp_path, monkeypatch, capsys):
    def broken(self):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(adapt_cli.AdaptationLab, "run", broken)
    assert run(tmp_path, "simulate", "--chain", "irreducible:n=3") == 1
    assert "disk on fire" in capsys.readouterr().err


def test_aps(tmp_path):
    assert run(tmp_path, "aps", "--chain", "static:p=0.9,q=0.8", "--horizon", "200") == 0
    rows = read_rows(tmp_path / "aps.csv")
    assert list(rows[0]) == ["t", "agent", "psi"]
    assert float(rows[0]["psi"]) == pytest.approx(2 / 3)
    diagnostic = json.loads((tmp_path / "diagnostic.json").read_text())
    assert diagnostic["verdict"] == "rank-one-within-tol"


def test_aps_on_non_ergodic_chain_fails(tmp_path):
    assert run(tmp_path, "aps", "--chain", "identity:n=2", "--horizon", "50") == 1


def test_chain_gen(tmp_path):
    assert run(tmp_path, "chain-gen", "--chain", "block:n=4", "--horizon", "12", "--seed", "5", "--materialize") == 0
    chain = load_chain(tmp_path / "chain.json")
    assert chain.n == 4 and chain.horizon == 12
    assert run(tmp_path, "chain-gen", "--chain", "irreducible:n=3", "--horizon", "12") == 0
    document = json.loads((tmp_path / "chain.json").read_text())
    assert document["provenance"]["descriptor"] == "irreducible:n=3"


def test_line_plot_rejects_mismatched_series():
    with pytest.raises(ValueError):
        line_plot_svg([0, 1, 2], np.zeros((2, 3)), "bad")
    flat = ET.fromstring(line_plot_svg([0, 1], np.ones((2, 2)), "flat").split("\n", 1)[1])
    assert len(flat.findall(f"{SVG}g/{SVG}polyline")) == 2
