import csv
import io

import numpy as np
import pytest

from twophase_ura import cli
from twophase_ura import experiments as ex
from twophase_ura.amp import AmpConfig, NumericalFailure
from twophase_ura.rng import stream
from twophase_ura.system_model import SystemConfig

SMALL = """
kind = amp-mse-sweep   # comment
seed = 5
trials = 3
system.K = 40
system.L = 2
system.sigma2 = 0.01
amp.T_max = 100
sweep.param = system.M
sweep.values = 20, 40
"""


def test_parse_config():
    spec = ex.parse_config(SMALL)
    assert spec.kind == "amp-mse-sweep" and spec.seed == 5 and spec.trials == 3
    assert spec.system.K == 40 and spec.amp.T_max == 100
    assert spec.sweep_param == "system.M" and spec.sweep_values == (20.0, 40.0)
    pts = spec.points()
    assert [p.system.M for _, p in pts] == [20, 40]
    assert ex.parse_config(SMALL, seed=9).seed == 9


@pytest.mark.parametrize(
    "text",
    [
        "seed = 1\nsystem.K = 2\nsystem.M = 2\nsystem.L = 1",  # no kind
        "kind = nope\nsystem.K = 2\nsystem.M = 2\nsystem.L = 1",
        "kind = compare\nsystem.K = 2\nsystem.M = 2\nsystem.L = 1\nfoo.x = 1",
        "kind = compare\nsystem.K = 2\nsystem.M = 2\nsystem.L = 1\nsystem.Q = 1",
        "kind = compare\nsystem.K = 2\nsystem.M = 2\nsystem.L = 1\nsweep.param = system.nope",
        "kind = compare\nsystem.K = 2\nsystem.M = 2\nsystem.L = 1\ntrials = 0",
        "kind = compare\nsystem.K = 2\nsystem.M = 2\nsystem.L = 1\nsweep.param = system.M\nsweep.values = 2.5",
        "kind = compare\nsystem.K = 2\nsystem.M = 2\nsystem.L = 1\namp.em_enabled = maybe",
        "kind = compare\nnot a pair",
        "kind = compare\nsystem.K = 2\nsystem.M = 2\nsystem.L = 1\nsystem.sigma2 = -1",
    ],
)
def test_parse_config_errors(text):
    with pytest.raises(ex.ConfigError):
        ex.parse_config(text)


def test_empty_sweep_gives_header_only():
    spec = ex.parse_config(SMALL.replace("sweep.values = 20, 40", "sweep.values ="))
    out = ex.run(spec)
    assert out.csv == ",".join(ex.TRIAL_HEADER) + "\n"
    assert out.failures == 0


def test_row_counts_and_header():
    out = ex.run(ex.parse_config(SMALL))
    rows = ex.read_csv(out.csv)
    assert out.csv.splitlines()[0] == "sweep_param,sweep_value,trial,pe,mse,iters,converged,sigma2_hat,wall_ms"
    assert len(rows) == 8
    assert [r["trial"] for r in rows[-2:]] == ["mean", "mean"]
    for r in rows[:6]:
        assert 0 <= float(r["pe"]) <= 1 and float(r["mse"]) >= 0
        assert int(r["iters"]) <= 100


def test_threads_do_not_change_output():
    spec = ex.parse_config(SMALL)
    assert ex.run(spec, threads=1).csv == ex.run(spec, threads=4).csv


def test_same_seed_same_bytes_and_seed_matters():
    spec = ex.parse_config(SMALL)
    assert ex.run(spec).csv == ex.run(spec).csv
    assert ex.run(ex.parse_config(SMALL, seed=6)).csv != ex.run(spec).csv


def test_timing_column():
    rows = ex.read_csv(ex.run(ex.parse_config(SMALL + "timing = on\n")).csv)
    assert all(float(r["wall_ms"]) > 0 for r in rows)


def test_csv_round_trip():
    text = ex.run(ex.parse_config(SMALL)).csv
    rows = list(csv.reader(io.StringIO(text)))
    again = []
    for row in rows[1:]:
        vals = []
        for cell in row:
            try:
                vals.append(float(cell))
            except ValueError:
                vals.append(cell)
        again.append(vals)
    rebuilt = ex._csv(rows[0], again)
    assert rebuilt == text


def test_fmt():
    assert ex.fmt(0.1) == "0.10000000000000001"
    assert ex.fmt(3) == "3" and ex.fmt(3.0) == "3"
    assert ex.fmt(True) == "1" and ex.fmt(float("nan")) == "nan" and ex.fmt(None) == ""


def test_e2e_near_noiseless():
    sys_cfg = SystemConfig(K=50, M=50, L=2, sigma2=1e-4)
    res = ex.run_e2e_trial(sys_cfg, AmpConfig(), stream(0, 0, 0, "e2e"))
    assert res.pe == 0.0
    assert res.user_errors.shape == (50,)
    again = ex.run_e2e_trial(sys_cfg, AmpConfig(), stream(0, 0, 0, "e2e"))
    assert (again.pe, again.mse, again.iterations) == (res.pe, res.mse, res.iterations)


def test_e2e_without_sub_blocks():
    sys_cfg = SystemConfig(K=5, M=5, L=2, B=16, L0=16)
    assert ex.run_e2e_trial(sys_cfg, AmpConfig(), stream(0)).pe == 0.0


def test_two_group_trial():
    sys_cfg = SystemConfig(K=60, M=50, L=2, sigma2=1e-3)
    res = ex.run_two_group_trial(sys_cfg, AmpConfig(), stream(1, "groups"))
    assert res.user_errors.shape == (60,)
    assert res.pe == pytest.approx(res.user_errors.mean())


def test_failed_trials_are_recorded(monkeypatch):
    def boom(*a, **k):
        raise NumericalFailure(3, "x_hat")

    monkeypatch.setattr(ex, "run_decoder", boom)
    out = ex.run(ex.parse_config(SMALL))
    assert out.failures == 6
    rows = ex.read_csv(out.csv)
    assert rows[0]["pe"] == "nan" and rows[0]["converged"] == "0"


COMPARE = """
kind = compare
seed = 2
trials = 20
system.K = 200
system.L = 2
system.sigma2 = 1.0
replica.mc_samples = 20000
replica.points = 200
sweep.param = system.M
sweep.values = 30, 60
"""


def test_compare_single_extremum_matches():
    rows = ex.read_csv(ex.run(ex.parse_config(COMPARE)).csv)
    assert list(rows[0]) == list(ex.COMPARE_HEADER)
    for r in rows:
        assert r["phi_bayes_d"] == r["phi_amp_d"]
        diff = abs(float(r["mse_emp"]) - float(r["mse_amp"]))
        assert diff < 3 * float(r["se_mse"]) + 0.02 * float(r["mse_amp"])


def test_compare_bistable_point_amp_above_bayes():
    # alpha = 0.15, sigma2 = 0.1, L = 2: two maxima exist here, but the
    # low-MSE one only becomes global near alpha = 0.19
    text = (
        "kind = compare\nseed = 0\ntrials = 1\nsystem.K = 100\nsystem.M = 15\nsystem.L = 2\n"
        "system.sigma2 = 0.1\nreplica.mc_samples = 50000\n"
    )
    row = ex.read_csv(ex.run(ex.parse_config(text)).csv)[0]
    assert float(row["mse_amp"]) > float(row["mse_bayes"])


def test_predicted_pe_decreases_through_transition():
    text = (
        "kind = phase-diagram\nseed = 0\nsystem.K = 100\nsystem.M = 10\nsystem.L = 2\nsystem.sigma2 = 0.1\n"
        "replica.mc_samples = 20000\nreplica.points = 200\n"
        "sweep.param = replica.alpha\nsweep.values = 0.1, 0.15, 0.2, 0.25, 0.3\n"
    )
    rows = ex.read_csv(ex.run(ex.parse_config(text)).csv)
    pe = [float(r["pe_pred"]) for r in rows]
    assert all(a >= b for a, b in zip(pe, pe[1:]))
    assert pe[0] > 0.5 and pe[-1] < pe[0] / 2


def test_replica_curve_output():
    text = (
        "kind = replica-curve\nseed = 0\nsystem.K = 100\nsystem.M = 15\nsystem.L = 2\nsystem.sigma2 = 0.1\n"
        "replica.mc_samples = 20000\nreplica.points = 100\n"
    )
    rows = ex.read_csv(ex.run(ex.parse_config(text)).csv)
    assert list(rows[0]) == list(ex.CURVE_HEADER)
    kinds = [r["extremum"] for r in rows if r["extremum"]]
    assert kinds.count("local_max") == 2


def test_find_transitions():
    assert ex.find_transitions([1, 2, 3, 4, 5], [1, 2, 2, 1, 1]) == (2, 4)
    assert ex.find_transitions([1, 2, 3], [1, 1, 1]) == (None, None)
    assert ex.find_transitions([1, 2, 3], [2, 2, 2]) == (1, None)


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "a.cfg"
    cfg.write_text(SMALL)
    out = tmp_path / "out.csv"
    assert cli.main(["amp-mse-sweep", "--config", str(cfg), "--out", str(out), "--threads", "2"]) == 0
    assert out.read_text().startswith("sweep_param,")
    assert out.read_bytes().count(b"\r") == 0
    assert cli.main(["amp-mse-sweep", "--config", str(tmp_path / "missing.cfg")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("kind = amp-mse-sweep\nsystem.K = x\n")
    assert cli.main(["amp-mse-sweep", "--config", str(bad)]) == 1
    assert cli.main(["no-such-kind"]) == 1
    assert cli.main(["amp-mse-sweep", "--config", str(cfg), "--threads", "0"]) == 1

    def boom(*a, **k):
        raise NumericalFailure(1, "x_hat")

    monkeypatch.setattr(ex, "run_decoder", boom)
    assert cli.main(["amp-mse-sweep", "--config", str(cfg), "--out", str(out)]) == 2


def test_cli_stdout_and_seed_override(tmp_path, capsys):
    cfg = tmp_path / "a.cfg"
    cfg.write_text(SMALL)
    assert cli.main(["amp-mse-sweep", "--config", str(cfg), "--seed", "5"]) == 0
    first = capsys.readouterr().out
    assert cli.main(["amp-mse-sweep", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out == first
    assert cli.main(["amp-mse-sweep", "--config", str(cfg), "--seed", "6"]) == 0
    assert capsys.readouterr().out != first


def test_sweep_over_amp_and_bool_fields():
    spec = ex.parse_config(SMALL.replace("sweep.param = system.M", "system.M = 30\nsweep.param = amp.damping")
                           .replace("20, 40", "0.5, 1"))
    assert [p.amp.damping for _, p in spec.points()] == [0.5, 1.0]
    spec = ex.parse_config(SMALL + "amp.em_enabled = false\n")
    assert spec.amp.em_enabled is False
    assert np.isclose(spec.replica_config().alpha, 20 / 40)
