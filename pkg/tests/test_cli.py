import json

import pytest

from graphrbm.cli import (EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_OK, ConfigError, main,
                          parse_config_text, resolve)
from graphrbm.graph import build_paper_graph, graph_to_dict


def _run(tmp_path, name, *args):
    out = tmp_path / name
    return main([*args, "--out", str(out)]), out


def _kv(path):
    return dict(line.split("=", 1) for line in path.read_text().splitlines() if "=" in line)


def test_config_parsing():
    cfg = parse_config_text("N = 12  # comment\n\nseed=4\nwrite_states = yes\n")
    assert cfg == {"N": 12, "seed": 4, "write_states": True}
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("Nn = 3")
    with pytest.raises(ConfigError):
        parse_config_text("N = three")
    with pytest.raises(ConfigError):
        resolve("rbm", None, {"delta": 0.1, "epsilon": 1e-4}, {})


def test_resolution_order(tmp_path):
    cfg = resolve("control", "paper_overlap_3", {"N": 8}, {"seed": 5})
    assert cfg["N"] == 8 and cfg["zeta"] == 300 and cfg["seed"] == 5
    assert cfg["decomposition"] == "paper_overlap_3"


def test_bad_configs_exit_2(tmp_path, capsys):
    assert _run(tmp_path, "a", "solve", "--set", "N=0")[0] == EXIT_CONFIG
    assert _run(tmp_path, "b", "solve", "--set", "typo=1")[0] == EXIT_CONFIG
    (tmp_path / "c.cfg").write_text("delta = 0.1\nepsilon = 0.001\n")
    assert _run(tmp_path, "c", "rbm", "--config", str(tmp_path / "c.cfg"))[0] == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_dangling_edge_graph_file(tmp_path, capsys):
    doc = graph_to_dict(build_paper_graph())
    doc["vertices"].append({"id": 12, "boundary": False})
    doc["edges"].append({"id": 11, "tail": 3, "head": 12, "length": 1.0})
    (tmp_path / "g.json").write_text(json.dumps(doc))
    code, _ = _run(tmp_path, "g", "solve", "--set", f"graph={tmp_path / 'g.json'}",
                   "--set", "case=constant", "--set", "N=3")
    assert code == EXIT_CONFIG
    assert "dangling edge 11" in capsys.readouterr().err


def test_solve_artifacts(tmp_path):
    code, out = _run(tmp_path, "s", "solve", "--set", "N=9", "--set", "zeta=21")
    assert code == EXIT_OK
    rep = _kv(out / "report.txt")
    assert float(rep["err_full"]) > 0 and float(rep["kirchhoff.v2"]) == 0
    resolved = (out / "config.resolved.txt").read_text()
    assert "N = 9" in resolved and "# resolved dt = 0.05" in resolved
    assert (out / "probes.csv").read_text().startswith("t,edge,x,value\n")


def test_rbm_reproducible(tmp_path):
    args = ["rbm", "--preset", "paper_overlap_3", "--seed", "3", "--set", "N=5",
            "--set", "zeta=21", "--set", "delta=0.1", "--set", "realizations=4"]
    (c1, o1), (c2, o2) = _run(tmp_path, "r1", *args), _run(tmp_path, "r2", *args, "--jobs", "2")
    assert c1 == c2 == EXIT_OK
    for name in ("probes_mean.csv", "realization_errors.csv", "variance.csv"):
        assert (o1 / name).read_bytes() == (o2 / name).read_bytes()
    r1, r2 = _kv(o1 / "report.txt"), _kv(o2 / "report.txt")
    assert r1["err_rbm.error_of_mean"] == r2["err_rbm.error_of_mean"]
    assert "bound.rhs" in r1 and "stability.max_ie_growth" in r1


def test_rbm_degenerate_note(tmp_path):
    code, out = _run(tmp_path, "d", "rbm", "--set", "decomposition=single", "--set", "N=4",
                     "--set", "zeta=11", "--set", "realizations=2", "--set", "delta=0.1")
    assert code == EXIT_OK
    rep = _kv(out / "report.txt")
    assert rep["note"] == "degenerate law; equals full solve"
    assert rep["err_rbm.error_of_mean"] == rep["err_rbm.mean_of_errors"]


def test_rbm_delta_alignment_is_echoed(tmp_path):
    code, out = _run(tmp_path, "al", "rbm", "--set", "N=4", "--set", "zeta=11",
                     "--set", "delta=0.03", "--set", "realizations=2")
    assert code == EXIT_OK
    text = (out / "config.resolved.txt").read_text()
    assert "# resolved dt_aligned = 0.03" in text and "# resolved zeta_aligned" in text


def test_sweep_delta_column(tmp_path):
    code, out = _run(tmp_path, "sw", "sweep", "--set", "N_list=1,2,3", "--set", "realizations=3")
    assert code == EXIT_OK
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "h,delta,err_rbm,err_full,time_rbm_s,time_full_s,speedup,realizations,seed"
    deltas = [f"{float(l.split(',')[1]):.2e}" for l in lines[1:]]
    assert deltas == ["7.81e-03", "4.57e-04", "6.10e-05"]
    assert "order" in _kv(out / "summary.txt")


def test_control_exit_codes(tmp_path):
    base = ["control", "--set", "N=4", "--set", "zeta=21", "--set", "realizations=2"]
    code, out = _run(tmp_path, "c0", *base, "--set", "max_iter=0")
    assert code == EXIT_NONCONVERGED
    assert _kv(out / "report.txt")["status"] == "nonconverged"
    code, out = _run(tmp_path, "c1", *base)
    assert code == EXIT_OK
    for name in ("control_log.csv", "state_probes.csv", "control_probes.csv",
                 "state_probes_rbm.csv", "control_probes_rbm.csv", "realizations.csv"):
        assert (out / name).exists()
    assert _kv(out / "report.txt")["rbm.all_converged"] == "True"


def test_report_collects(tmp_path, capsys):
    _run(tmp_path, "runs/s", "solve", "--set", "N=4", "--set", "zeta=11")
    capsys.readouterr()
    assert main(["report", "--out", str(tmp_path / "runs")]) == EXIT_OK
    text = capsys.readouterr().out
    assert "s.err_full=" in text and "PASS" not in text     # bands only apply at N=300, zeta=201
