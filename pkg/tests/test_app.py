import textwrap
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import app
from utils.artifacts import read_jsonl
from utils.experiment_config import ExperimentConfig
from utils.idx_format import serialize_idx
from utils.model import load_checkpoint

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
SEEDS = (0, 1, 2)

TINY = """
run.name = tiny
run.seed = 3

data.kind = two_moons
data.n_points = 120
data.n_test = 40
data.noise = 0.03
data.labeled_fraction = 0.1

model.hidden = 8

teacher.epochs = 2

train.epochs = 2
train.batch_size = 32

attack.steps = 2

schedule.variant = curious
schedule.eps_base = 0.1
schedule.t = 1
schedule.gamma = 1.25

rho.double_at = 2

eval.steps = 2
eval.epoch_steps = 2
eval.epoch_points = 20
eval.diag_points = 10
eval.diag_grid = 3

sweep.betas = 0.2, 0.6
sweep.rhos = 0.05

plot.resolution = 10
plot.traces = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(textwrap.dedent(TINY))
    return path


def test_parser_rejects_unknown_command():
    with pytest.raises(SystemExit):
        app.build_parser().parse_args(["fly", "--config", "x.cfg"])


def test_schedule_command(tmp_path):
    config = tmp_path / "curious.cfg"
    config.write_text(
        "train.epochs = 100\nschedule.variant = curious\nschedule.eps_base = 0.03137254901960784\n"
        "schedule.t = 70\nschedule.gamma = 1.25\nrho.double_at = 75\n"
    )
    out = tmp_path / "out"

    assert app.main(["schedule", "--config", str(config), "--out", str(out)]) == 0

    table = pd.read_csv(out / "schedule.csv")
    assert len(table) == 100
    assert table.loc[table.epoch == 70, "eps_max"].item() == pytest.approx(10 / 255, abs=1e-12)
    assert table.loc[table.epoch == 71, "eps_max"].item() == pytest.approx(8 / 255, abs=1e-12)
    assert table.loc[table.epoch == 74, "rho"].item() == 0.05
    assert table.loc[table.epoch == 75, "rho"].item() == 0.1
    assert (out / "schedule.svg").read_text().lstrip().startswith("<?xml")


def test_invalid_config_exits_2(tmp_path, capsys):
    config = tmp_path / "bad.cfg"
    config.write_text("run.seed = 1\nrun.colour = red\n")

    assert app.run("train", str(config), str(tmp_path / "out")) == 2
    assert "line 2" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_missing_checkpoint_exits_1(tiny_config, tmp_path, capsys):
    assert app.run("eval", str(tiny_config), str(tmp_path / "empty")) == 1
    assert "Stage 'checkpoint'" in capsys.readouterr().err


def test_data_stage_failure(tmp_path, capsys):
    config = tmp_path / "few.cfg"
    config.write_text("data.n_points = 20\ndata.labeled_fraction = 0.01\n")
    assert app.run("train", str(config), str(tmp_path / "out")) == 1
    assert "Stage 'data'" in capsys.readouterr().err


def test_artifact_write_failure_names_the_stage(tmp_path, monkeypatch, capsys):
    def disk_full(*args, **kwargs):
        raise OSError("No space left on device")

    monkeypatch.setattr(app, "write_csv", disk_full)
    config = tmp_path / "const.cfg"
    config.write_text("schedule.variant = const\n")

    assert app.run("schedule", str(config), str(tmp_path / "out")) == 1
    err = capsys.readouterr().err
    assert "Stage 'artifacts'" in err
    assert "No space left" in err


def test_plot_failure_names_the_stage(tmp_path, monkeypatch, capsys):
    def broken_plot(*args, **kwargs):
        raise ValueError("no finite values to draw")

    monkeypatch.setattr(app, "plot_schedule", broken_plot)
    config = tmp_path / "const.cfg"
    config.write_text("schedule.variant = const\n")

    assert app.run("schedule", str(config), str(tmp_path / "out")) == 1
    assert "Stage 'plot'" in capsys.readouterr().err
    assert (tmp_path / "out" / "schedule.csv").exists()


def test_unwrapped_failures_still_exit_1(tmp_path, monkeypatch, capsys):
    def unreadable(cfg, out):
        raise OSError("permission denied")

    monkeypatch.setitem(app.HANDLERS, "schedule", unreadable)
    config = tmp_path / "const.cfg"
    config.write_text("schedule.variant = const\n")

    assert app.run("schedule", str(config), str(tmp_path / "out")) == 1
    assert "Stage 'schedule'" in capsys.readouterr().err


def test_seed_override_changes_the_split(tiny_config):
    cfg = ExperimentConfig.load(tiny_config)
    first = app.prepare_data(cfg)
    second = app.prepare_data(cfg.copy_with("run", seed=4))
    assert first["labeled"].inputs.tobytes() != second["labeled"].inputs.tobytes()
    assert first["manifest"]["split"]["labeled"] == 12


def test_idx_data_holds_out_a_test_split(tmp_path, rng):
    (tmp_path / "img.idx").write_bytes(serialize_idx(rng.integers(0, 256, size=(40, 3, 3)) / 255.0, dtype="u8"))
    (tmp_path / "lab.idx").write_bytes(serialize_idx(rng.integers(0, 2, size=40), dtype="u8", normalize=False))
    cfg = ExperimentConfig.parse(
        f"data.kind = idx\ndata.idx_images = {tmp_path / 'img.idx'}\ndata.idx_labels = {tmp_path / 'lab.idx'}\n"
        "data.n_test = 10\ndata.labeled_fraction = 0.5\n"
    )
    data = app.prepare_data(cfg)

    assert data["test"].size == 10
    assert data["labeled"].size + data["unlabeled"].size == 30
    assert data["test"].domain_bounds == (0.0, 1.0)
    assert data["labeled"].image_shape == (3, 3)


def test_train_is_reproducible(tiny_config, tmp_path):
    for name in ("a", "b"):
        assert app.run("train", str(tiny_config), str(tmp_path / name)) == 0

    for artifact in ("metrics.csv", "metrics_detail.csv", "model.ckpt", "eval_report.csv", "eval_report.jsonl", "config.cfg"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes(), artifact

    metrics = pd.read_csv(tmp_path / "a" / "metrics.csv")
    assert metrics.columns.tolist()[:3] == ["epoch", "eps_max", "rho"]
    assert metrics["eps_max"].tolist() == pytest.approx([0.125, 0.1])
    assert metrics["rho"].tolist() == pytest.approx([0.05, 0.1])
    assert (tmp_path / "a" / "boundary.svg").exists()
    assert load_checkpoint(tmp_path / "a" / "model.ckpt").layer_sizes == [2, 8, 2]
    assert ExperimentConfig.load(tmp_path / "a" / "config.cfg") == ExperimentConfig.load(tiny_config)


def test_eval_and_diagnose_reuse_the_checkpoint(tiny_config, tmp_path):
    out = tmp_path / "run"
    assert app.run("train", str(tiny_config), str(out)) == 0
    (out / "eval_report.csv").unlink()

    assert app.run("eval", str(tiny_config), str(out)) == 0
    assert app.run("diagnose", str(tiny_config), str(out)) == 0

    report = pd.read_csv(out / "eval_report.csv")
    assert report["metric"].iloc[0] == "natural_acc"
    assert set(pd.read_csv(out / "diagnostics.csv").columns) == {"point", "monotone", "alpha_hat", "eff_eps", "loss_ratio"}
    assert all(record["record"] == "curve" for record in read_jsonl(out / "diagnostics.jsonl"))


def test_gradcheck_command(tiny_config, tmp_path, monkeypatch):
    real = app.run_gradcheck
    monkeypatch.setattr(app, "run_gradcheck", lambda seed: real(num_models=2, seed=seed, points=5))
    assert app.run("gradcheck", str(tiny_config), str(tmp_path)) == 0
    assert pd.read_csv(tmp_path / "gradcheck.csv")["passed"].all()


def test_gradcheck_failure_exits_1(tiny_config, tmp_path, monkeypatch, capsys):
    table = pd.DataFrame({"case": ["primitive_exp"], "max_rel_error": [0.5], "passed": [False]})
    monkeypatch.setattr(app, "run_gradcheck", lambda seed: table)
    assert app.run("gradcheck", str(tiny_config), str(tmp_path)) == 1
    assert "primitive_exp" in capsys.readouterr().err


@pytest.mark.slow
def test_sweep_writes_one_report_per_value(tiny_config, tmp_path):
    assert app.run("sweep", str(tiny_config), str(tmp_path)) == 0

    reports = sorted(p.name for p in tmp_path.glob("eval_report_*.csv"))
    assert reports == ["eval_report_beta_0.2.csv", "eval_report_beta_0.6.csv", "eval_report_rho_0.05.csv"]
    assert pd.read_csv(tmp_path / "sweep_beta.csv").columns.tolist() == ["beta", "natural_acc", "robust_acc"]
    assert (tmp_path / "sweep_rho.svg").exists()


@pytest.mark.slow
def test_margin_interpolation_trains_a_usable_model(tmp_path):
    config = tmp_path / "moons.cfg"
    config.write_text(
        "data.n_points = 400\ndata.n_test = 200\ndata.labeled_fraction = 0.1\nmodel.hidden = 32, 32\n"
        "teacher.epochs = 15\ntrain.epochs = 12\nschedule.t = 8\nrho.double_at = 9\n"
        "eval.epoch_points = 50\neval.epoch_steps = 5\neval.diag_points = 50\n"
    )
    out = tmp_path / "out"
    assert app.run("train", str(config), str(out)) == 0

    metrics = pd.read_csv(out / "metrics.csv")
    report = pd.read_csv(out / "eval_report.csv").set_index("metric")
    assert (metrics["mean_alpha_hat"] < 1.0).any()
    assert (metrics["mean_eff_eps"] <= metrics["eps_max"] + 1e-9).all()
    assert report.loc["natural_acc", "value"] > 0.7



# ======================================================================
# TWO-MOONS END TO END (shipped configs, PGD-20 at eps 0.1)
# ======================================================================

@pytest.fixture(scope="module")
def two_moons_reports():
    reports = {}
    for name in ("ssat_mbi", "rst", "natural"):
        base = ExperimentConfig.load(CONFIG_DIR / f"{name}.cfg")
        for seed in SEEDS:
            cfg = base.copy_with("run", seed=seed)
            reports[name, seed] = app.train_pipeline(cfg, app.prepare_data(cfg))["report"]
    return reports


def _pgd20(reports, name):
    return [reports[name, seed].robust_acc(20, 0.1) for seed in SEEDS]


@pytest.mark.slow
def test_ssat_mbi_holds_seventy_percent_under_pgd20(two_moons_reports):
    robust = _pgd20(two_moons_reports, "ssat_mbi")
    assert min(robust) >= 0.70, robust


@pytest.mark.slow
def test_ssat_mbi_beats_natural_control_under_pgd20(two_moons_reports):
    ssat = _pgd20(two_moons_reports, "ssat_mbi")
    natural = _pgd20(two_moons_reports, "natural")
    assert np.mean(ssat) > np.mean(natural), (ssat, natural)


@pytest.mark.slow
@pytest.mark.xfail(
    strict=False,
    reason="the arcs sit at least 0.2 apart in l-infinity, so a natural boundary between them "
    "keeps most points outside the 0.1 ball",
)
def test_natural_control_collapses_under_pgd20(two_moons_reports):
    natural = _pgd20(two_moons_reports, "natural")
    assert max(natural) < 0.20, natural


@pytest.mark.slow
def test_ssat_mbi_keeps_pace_with_rst(two_moons_reports):
    def mean_natural(name):
        return np.mean([two_moons_reports[name, seed].natural_acc for seed in SEEDS])

    assert mean_natural("ssat_mbi") >= mean_natural("rst") - 0.03
    assert np.mean(_pgd20(two_moons_reports, "ssat_mbi")) >= np.mean(_pgd20(two_moons_reports, "rst")) - 0.01


@pytest.mark.slow
def test_trained_model_margin_diagnostics(two_moons_reports):
    report = two_moons_reports["ssat_mbi", 0]

    assert report.monotone_fraction > 0.5
    assert 0.8 <= report.loss_ratio_stats["median"] <= 1.25
