import json

import pytest

from rlf_lab.cli import load_config, main, ConfigError

FAST = "[experiment]\nlattice_size = 41\ndt = 1e-2\ngrid_size = 301\npair_count = 500\n"


def write(tmp_path, text, name="c.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_run_default_rotation(tmp_path):
    cfg = write(tmp_path, "[field]\nkind = rotation\n[perturbation]\nepsilon = 1e-4\n")
    out = tmp_path / "out"
    assert main(["run", cfg, "--out", str(out), "--svg"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["main_estimate_holds"] is True
    svg = (out / "g_series.svg").read_text()
    assert 'viewBox="0 0 800 500"' in svg
    assert (out / "report.csv").read_text().startswith("k,t,g,")


def test_run_zero_epsilon(tmp_path):
    cfg = write(tmp_path, "[field]\nkind = shear\n[perturbation]\nepsilon = 0\n")
    assert main(["run", cfg, "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["exact_equality"] is True


def test_run_p_one_rejected(tmp_path, capsys):
    cfg = write(tmp_path, "[field]\nkind = rotation\n\n[experiment]\np = 1\n")
    assert main(["run", cfg]) == 1
    err = capsys.readouterr().err
    assert "unsupported exponent" in err and "c.ini:5" in err


def test_run_failure_exit_code(tmp_path, monkeypatch):
    import rlf_lab.cli as cli

    class Fake:
        exact_equality = False
        main_estimate_holds = False
        delta = lhs_sup = rhs_bound = 1.0
        gronwall_terms = {"t": [0.0]}
        g_series = [0.0]

        def to_json(self):
            return "{}"

        def to_csv(self):
            return ""

    monkeypatch.setattr(cli, "verify_main_estimate", lambda *a, **k: Fake())
    cfg = write(tmp_path, "[field]\nkind = rotation\n[perturbation]\nepsilon = 1e-4\n")
    assert main(["run", cfg, "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("text,needle", [
    ("[field]\nkind = rotation\n[experiment]\ndtt = 1\n", "c.ini:4: unknown key 'dtt'"),
    ("[field]\nkind = rotation\n[experiment]\nR_prime = 3\n", "derived"),
    ("[field]\nkind = rotation\n[bogus]\nx = 1\n", "c.ini:3: unknown section"),
    ("[field]\nkind = rotation\nkind = shear\n", "c.ini"),
    ("[experiment]\nlattice_size = many\n", "c.ini:2: bad value"),
])
def test_strict_config(tmp_path, text, needle):
    with pytest.raises(ConfigError, match=needle):
        load_config(write(tmp_path, text))


def test_missing_config_exit_one(tmp_path):
    assert main(["run", str(tmp_path / "nope.ini")]) == 1


def test_sweep_drops_zero(tmp_path, capsys):
    cfg = write(tmp_path, "[field]\nkind = rotation\n[sweep]\neps_list = 1e-3, 1e-4, 0\n" + FAST)
    assert main(["sweep", cfg, "--out", str(tmp_path), "--svg"]) == 0
    assert "epsilon=0 dropped" in capsys.readouterr().err
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0] == "epsilon,delta,lhs_sup,inv_log_delta,ratio,main_estimate_holds,small_delta_ok"
    assert len(rows) == 3
    assert (tmp_path / "sweep_ratio.svg").exists()


def test_sweep_four_points(tmp_path):
    cfg = write(tmp_path, "[field]\nkind = rotation\n[sweep]\neps_list = 1e-2, 1e-3, 1e-4, 1e-5\n" + FAST)
    main(["sweep", cfg, "--out", str(tmp_path)])
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 5


def test_sweep_empty_list(tmp_path):
    cfg = write(tmp_path, "[field]\nkind = rotation\n[sweep]\neps_list =\n")
    assert main(["sweep", cfg]) == 1


def test_lemmas_constant_batch(tmp_path):
    cfg = write(tmp_path, "[lemmas]\nfamily = constant\nbatch_size = 3\n")
    assert main(["check-lemmas", cfg, "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "lemma_reports.json").read_text())
    mx = data["reports"][0]
    assert mx["lemma_id"] == "maximal-lp"
    assert mx["values"] == [mx["values"][0]] * 3
    assert mx["values"][0] == pytest.approx(1 / 1.5, rel=0.02)


def test_lemmas_trig_batch(tmp_path):
    cfg = write(tmp_path, "[lemmas]\nfamily = trig\nbatch_size = 50\n")
    assert main(["check-lemmas", cfg, "--out", str(tmp_path), "--seed", "4"]) == 0
    data = json.loads((tmp_path / "lemma_reports.json").read_text())
    assert data["stable"] and all(r["empirical_constant"] < 4 for r in data["reports"])


def test_lemmas_degenerate_radius(tmp_path, capsys):
    cfg = write(tmp_path, "[lemmas]\nlambda = 0.01\nspacing = 0.02\n")
    assert main(["check-lemmas", cfg]) == 1
    assert "degenerate radius" in capsys.readouterr().err


def test_seed_changes_trig_run(tmp_path):
    cfg = write(tmp_path, "[field]\nkind = rotation\n[perturbation]\nmode = seeded-random-trig\n"
                "epsilon = 1e-4\nseed = 1\n" + FAST)
    for tag, seed in (("a", "1"), ("b", "2")):
        assert main(["run", cfg, "--out", str(tmp_path / tag), "--seed", seed]) == 0
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    b = json.loads((tmp_path / "b" / "report.json").read_text())
    assert a["perturbation"]["seed"] == 1 and b["perturbation"]["seed"] == 2
    assert a["delta"] != b["delta"]


def test_usage_error():
    assert main(["explode"]) == 1
