import numpy as np
import pytest

from chronoformer import config as C
from chronoformer import data as D
from chronoformer.cli import bench_rows, main
from chronoformer.errors import ConfigError

TINY = ["--d-model", "8", "--heads", "2", "--window", "16", "--horizon", "4", "--steps", "5", "--warmup", "2"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def series(tmp_path):
    path = tmp_path / "s.csv"
    assert run("gen", "--n", 300, "--period", 16, "--seed", 7, "--out", path) == 0
    return path


@pytest.fixture
def trained(tmp_path, series):
    ckpt = tmp_path / "m.ckpt"
    assert run("train", "--data", series, "--out", ckpt, *TINY) == 0
    return ckpt


# -- gen / mask / pe / bench ---------------------------------------------------------


def test_gen_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert run("gen", "--kind", "sine", "--period", 64, "--sigma", 0.1, "--n", 4096, "--seed", 7, "--out", p) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(D.read_csv(a)) == 4096


def test_mask_row_eight(capsys):
    assert run("mask", "--kind", "logsparse", "--len", 9) == 0
    rows = capsys.readouterr().out.splitlines()
    last = [int(x) for x in rows[-1].split(",")]
    assert [j for j, x in enumerate(last) if x] == [0, 4, 6, 7, 8]


def test_pe_matrix(capsys):
    assert run("pe", "--d", 4, "--n", 3) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "0,1,2"
    first = [float(x) for x in lines[1].split(",")]
    np.testing.assert_allclose(first, np.sin([0, 1, 2]), rtol=0, atol=1e-15)
    assert len(lines) == 5


def test_bench_causal_column(capsys):
    assert run("bench", "--lens", "128,256,512,1024") == 0
    lines = capsys.readouterr().out.splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        row = dict(zip(header, line.split(",")))
        L = int(row["L"])
        assert int(row["causal"]) == L * (L + 1) // 2
        assert int(row["full"]) == L * L


def test_bench_rows_reject_short_length():
    with pytest.raises(ConfigError):
        bench_rows([1])


# -- config ------------------------------------------------------------------------------


def test_empty_config_is_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    assert C.resolve(C.load_config(path)) == {k: s.default for k, s in C.KEYS.items()}


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("d_model = 32\nheads = 2  # comment\n")
    values = C.resolve(C.load_config(path), {"d_model": 64, "heads": None})
    assert values["d_model"] == 64 and values["heads"] == 2


def test_misspelt_choice_suggests(tmp_path):
    with pytest.raises(ConfigError, match="rezero"):
        C.parse_config_text("norm_placement = rezro")
    with pytest.raises(ConfigError, match="'d_model'"):
        C.parse_config_text("d_modle = 3")


def test_config_format_round_trips():
    values = C.resolve(flags={"lr": 0.1 + 0.2, "head_size": 3, "stamps": True})
    assert C.resolve(C.parse_config_text(C.format_config(values))) == values


# -- train / forecast / eval ------------------------------------------------------------------


def test_train_writes_artifacts(tmp_path, trained, capsys):
    cfg = C.load_config(str(trained) + ".cfg")
    assert cfg["d_model"] == 8 and cfg["steps"] == 5
    log = (tmp_path / "m.ckpt.log.csv").read_text().splitlines()
    assert log[0] == "step,lr,loss,grad_norm,clip_scale" and len(log) == 6


def test_train_echoes_configuration(tmp_path, series, capsys):
    run("train", "--data", series, "--out", tmp_path / "x", *TINY)
    assert "d_model = 8" in capsys.readouterr().out


def test_forecast_rows(tmp_path, series, trained):
    out = tmp_path / "p.csv"
    assert run("forecast", "--checkpoint", trained, "--data", series, "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "origin,h,timestamp,v1"
    n_test = 300 - 210 - 45  # test split after a 70/15/15 cut
    n_windows = n_test - 16 - 4 + 1
    assert len(lines) - 1 == n_windows * 4
    origin, h, stamp = (int(x) for x in lines[1].split(",")[:3])
    assert h == 1 and stamp == origin + 300


def test_forecast_last(tmp_path, series, trained):
    out = tmp_path / "p.csv"
    assert run("forecast", "--checkpoint", trained, "--data", series, "--split", "last", "--out", out) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 5
    assert int(lines[1].split(",")[0]) == 299 * 300


def test_eval_perfect_predictions(tmp_path, series, capsys):
    ts = D.read_csv(series)
    pred = tmp_path / "p.csv"
    rows = ["origin,h,timestamp,v1"]
    for h in (1, 2):
        rows.append(f"{ts.timestamps[100]},{h},{ts.timestamps[100 + h]},{float(ts.values[100 + h, 0])!r}")
    pred.write_text("\n".join(rows) + "\n")
    assert run("eval", "--pred", pred, "--data", series) == 0
    metrics = dict(line.split(",") for line in capsys.readouterr().out.splitlines()[1:])
    assert float(metrics["rmse"]) == 0.0
    assert float(metrics["persistence_rmse"]) > 0


def test_eval_seasonal_baseline(tmp_path, capsys):
    ts = D.gen_synthetic("sine", 100, period=10, sigma=0)
    data = tmp_path / "s.csv"
    D.write_csv(data, ts)
    pred = tmp_path / "p.csv"
    pred.write_text(f"origin,h,timestamp,v1\n{ts.timestamps[50]},3,{ts.timestamps[53]},0.0\n")
    assert run("eval", "--pred", pred, "--data", data, "--baseline", "seasonal", "--period", 10) == 0
    metrics = dict(line.split(",") for line in capsys.readouterr().out.splitlines()[1:])
    assert float(metrics["seasonal_rmse"]) < 1e-12


def test_attn_writes_one_file_per_head(tmp_path, series, trained):
    out = tmp_path / "attn"
    assert run("attn", "--checkpoint", trained, "--data", series, "--out-dir", out) == 0
    names = sorted(p.name for p in out.iterdir())
    # 2 encoders + 1 decoder self + 1 decoder cross, 2 heads each
    assert len(names) == 8
    w = np.loadtxt(out / "attn_enc0_head0.csv", delimiter=",", skiprows=1)
    assert w.shape == (16, 16)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


# -- exit codes -------------------------------------------------------------------------------


def test_usage_errors_exit_one(tmp_path, series, capsys):
    assert run("nosuch") == 1
    assert run("train", "--data", series, "--out", tmp_path / "x", "--norm", "rezro") == 1
    assert "rezero" in capsys.readouterr().err
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("d_modle = 8\n")
    assert run("train", "--data", series, "--out", tmp_path / "x", "--config", cfg) == 1
    assert "d_model" in capsys.readouterr().err
    assert run("train", "--data", series, "--out", tmp_path / "x", "--d-model", "7", "--heads", "2") == 1


def test_data_errors_exit_two(tmp_path, trained, capsys):
    assert run("forecast", "--checkpoint", trained, "--data", tmp_path / "missing.csv") == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp,v1\n0,1.0\n300,oops\n")
    assert run("forecast", "--checkpoint", trained, "--data", bad) == 2
    assert "line 3" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_three(tmp_path, series, capsys):
    code = run("train", "--data", series, "--out", tmp_path / "x", *TINY, "--lr", "1e300", "--clip", "0")
    assert code == 3
    assert "numeric" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert run("--help") == 0


# -- reproducibility and figures ------------------------------------------------------------------


def pipeline(root, series):
    root.mkdir()
    ckpt, pred, met = root / "m.ckpt", root / "p.csv", root / "metrics.csv"
    assert run("train", "--data", series, "--out", ckpt, *TINY, "--seed", 3) == 0
    assert run("forecast", "--checkpoint", ckpt, "--data", series, "--out", pred) == 0
    assert run("eval", "--pred", pred, "--data", series, "--out", met) == 0
    return [p.read_bytes() for p in (ckpt, pred, met, root / "m.ckpt.cfg", root / "m.ckpt.log.csv")]


def test_pipeline_byte_identical(tmp_path, series):
    assert pipeline(tmp_path / "a", series) == pipeline(tmp_path / "b", series)


def test_figures_are_opt_in(tmp_path, series, trained, capsys):
    plain, drawn = tmp_path / "plain.csv", tmp_path / "drawn.csv"
    fig = tmp_path / "mask.png"
    assert run("mask", "--len", 12, "--out", plain) == 0
    assert run("mask", "--len", 12, "--out", drawn, "--figure", fig) == 0
    assert plain.read_bytes() == drawn.read_bytes()
    assert fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    for argv in (
        ("pe", "--d", 8, "--n", 16),
        ("bench", "--lens", "16,32"),
        ("forecast", "--checkpoint", trained, "--data", series, "--out", tmp_path / "p.csv"),
        ("attn", "--checkpoint", trained, "--data", series, "--out-dir", tmp_path / "a"),
    ):
        path = tmp_path / f"{argv[0]}.png"
        assert run(*argv, "--figure", path) == 0
        assert path.stat().st_size > 0


def test_tde_sweep_runs(tmp_path, series, capsys):
    assert run("tde-sweep", "--data", series, "--dims", "2,3", *TINY) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "tde_dim,input_width,test_rmse,test_mae,persistence_rmse"
    assert [line.split(",")[:2] for line in lines[1:]] == [["2", "2"], ["3", "3"]]


def test_segments_lengthen_model_input(tmp_path):
    data = tmp_path / "hourly.csv"
    assert run("gen", "--n", 500, "--period", 24, "--step-seconds", 3600, "--out", data) == 0
    ckpt = tmp_path / "m.ckpt"
    assert run("train", "--data", data, "--out", ckpt, *TINY, "--segments", "daily") == 0
    out = tmp_path / "attn"
    assert run("attn", "--checkpoint", ckpt, "--data", data, "--out-dir", out) == 0
    w = np.loadtxt(out / "attn_enc0_head0.csv", delimiter=",", skiprows=1)
    assert w.shape == (32, 32)
    assert run("forecast", "--checkpoint", ckpt, "--data", data, "--split", "last", "--out", tmp_path / "p.csv") == 0


def test_abbreviated_flags_rejected(tmp_path, series):
    assert run("train", "--data", series, "--out", tmp_path / "x", "--d-mod", "8") == 1
