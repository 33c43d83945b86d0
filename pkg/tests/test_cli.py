from __future__ import annotations

import json

import pytest

from app import main as cli
from app.api.artifacts import read_ledger, read_loss_trace, read_metrics, run_id_for
from app.api.schemas import load_config, parse_config_text
from app.core import config
from app.core.errors import ConfigError

BASE_CONFIG = """\
# small heterogeneous ADSP run
seed = 1
task.kind = quadratic
task.dim = 4
task.examples = 64
task.condition = 4
cluster.speeds = 1, 2
cluster.overhead = 1
policy.kind = adsp
policy.fixed_rate = 2
hyper.local_lr_init = 0.05
hyper.local_lr_decay = 1.0
hyper.batch_size = 8
stop.max_time = 240
"""


@pytest.fixture
def config_file(tmp_path):
    def write(text: str = BASE_CONFIG, name: str = "lab.conf"):
        path = tmp_path / name
        path.write_text(text)
        return path

    return write


def _run_dir(out):
    (run_dir,) = [p for p in out.iterdir() if p.is_dir()]
    return run_dir


def test_run_writes_artifacts(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(["run", "--config", str(config_file()), "--out", str(out)])
    assert code == cli.EXIT_OK
    assert capsys.readouterr().out.startswith("adsp: converged=")

    run_dir = _run_dir(out)
    assert run_dir.name.startswith("adsp-")
    assert run_dir.name.endswith("-s1")
    metrics = read_metrics(run_dir / "metrics.json")
    times, losses = read_loss_trace(run_dir / "loss.csv")
    assert times == metrics.times
    assert losses == metrics.losses
    ledgers = read_ledger(run_dir / "ledger.csv")
    assert [led.worker for led in ledgers] == [0, 1]
    assert all(led.blocked_s == 0.0 for led in ledgers)


def test_same_seed_reproduces_artifacts_byte_for_byte(config_file, tmp_path):
    path = config_file()
    for name in ("a", "b"):
        assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / name)]) == cli.EXIT_OK
    first, second = _run_dir(tmp_path / "a"), _run_dir(tmp_path / "b")
    assert first.name == second.name
    for artifact in ("loss.csv", "ledger.csv", "metrics.json"):
        assert (first / artifact).read_bytes() == (second / artifact).read_bytes()


def test_seed_override_changes_run_id(config_file, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(config_file()), "--out", str(out), "--seed", "9"]) == 0
    assert _run_dir(out).name.endswith("-s9")


def test_missing_speeds_is_a_config_error(config_file, tmp_path, capsys):
    text = BASE_CONFIG.replace("cluster.speeds = 1, 2\n", "")
    code = cli.main(["run", "--config", str(config_file(text)), "--out", str(tmp_path / "out")])
    assert code == cli.EXIT_CONFIG
    assert "cluster.speeds" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_unknown_key_is_a_config_error(config_file, tmp_path):
    text = BASE_CONFIG + "policy.timeout = 3\n"
    assert cli.main(["run", "--config", str(config_file(text))]) == cli.EXIT_CONFIG


def test_parse_config_text():
    tree = parse_config_text("a.b = 1, 2.5\na.c = none\n# note\nd = true\ne = adsp")
    assert tree == {"a": {"b": [1, 2.5], "c": None}, "d": True, "e": "adsp"}
    with pytest.raises(ConfigError):
        parse_config_text("a = 1\na = 2")
    with pytest.raises(ConfigError):
        parse_config_text("just words")


def test_config_hash_tracks_content(config_file, tmp_path):
    base = load_config(config_file())
    assert base.config_hash() == load_config(config_file(name="copy.conf")).config_hash()
    assert base.config_hash() != load_config(config_file(), seed=2).config_hash()


def test_compare_writes_one_run_per_policy(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(
        ["compare", "--config", str(config_file()), "--out", str(out), "--policies", "bsp,tap,adsp"]
    )
    assert code == cli.EXIT_OK
    table = capsys.readouterr().out.splitlines()
    assert table[0].startswith("policy,run_id")
    assert [row.split(",")[0] for row in table[1:]] == ["bsp", "tap", "adsp"]
    assert len([p for p in out.iterdir() if p.is_dir()]) == 3
    assert list(out.glob("compare-*.csv"))


def test_sweep_marks_infeasible_points(config_file, tmp_path):
    out = tmp_path / "out"
    code = cli.main(
        [
            "sweep",
            "--config",
            str(config_file()),
            "--out",
            str(out),
            "--param",
            "extra_delay",
            "--values",
            "0,100",
        ]
    )
    assert code == cli.EXIT_OK
    (table,) = out.glob("sweep-extra_delay-*.csv")
    rows = table.read_text().splitlines()
    assert rows[0] == "param,value,convergence_time,final_loss,waiting_fraction"
    assert rows[2] == "extra_delay,100.0,infeasible,,"
    assert not rows[1].endswith("infeasible,,")


def test_verify_fails_on_misspecified_staleness_law(config_file, tmp_path, capsys):
    text = BASE_CONFIG + (
        "verify.staleness_p = 0.99\n"
        "verify.staleness_commits = 1000\n"
        "verify.throughput_clusters = 1\n"
        "verify.throughput_time = 600\n"
        "verify.regret_steps = 500\n"
        "verify.regret_seeds = 1\n"
        "verify.momentum_time = 240\n"
        "verify.plus_tau_max = 2\n"
        "verify.plus_time = 240\n"
    )
    out = tmp_path / "out"
    code = cli.main(["verify", "--config", str(config_file(text)), "--out", str(out)])
    assert code == cli.EXIT_VERIFY
    assert "staleness_geometric" in capsys.readouterr().err

    (report_path,) = out.glob("verify-*.json")
    report = json.loads(report_path.read_text())
    names = {check["name"]: check["passed"] for check in report["checks"]}
    assert names["staleness_geometric"] is False
    assert names["adsp_no_blocking"] is True
    assert names["slack1_ssp_equals_bsp"] is True
    assert "adsp_plus_near_optimal" in names
    (balance,) = [c for c in report["checks"] if c["name"] == "commit_balance"]
    assert int(balance["note"].split()[0]) >= 100


def test_run_ids_separate_realtime_from_simulated_runs():
    assert run_id_for("adsp", "abc", 1) == "adsp-abc-s1"
    assert run_id_for("adsp", "abc", 1, "realtime") == "adsp-abc-s1-rt"


@pytest.mark.slow
def test_realtime_run_lands_near_the_simulated_loss(config_file, tmp_path, monkeypatch):
    monkeypatch.setattr(config, "realtime_time_scale", 0.005)
    path = config_file(BASE_CONFIG.replace("stop.max_time = 240", "stop.max_time = 1200"))
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(path), "--out", str(out)]) == cli.EXIT_OK
    assert cli.main(["run", "--config", str(path), "--out", str(out), "--realtime"]) == cli.EXIT_OK

    runs = {p.name: read_metrics(p / "metrics.json") for p in out.iterdir() if p.is_dir()}
    (simulated,) = [m for name, m in runs.items() if not name.endswith("-rt")]
    (realtime,) = [m for name, m in runs.items() if name.endswith("-rt")]
    assert realtime.mode == "realtime"
    assert abs(realtime.final_loss - simulated.final_loss) <= 0.1 * simulated.final_loss
