import json

import pytest

from bevforecast import cli
from bevforecast.autodiff import file_sha256, load_checkpoint
from bevforecast.evalkit import EvalReport

FAST = ["--epochs", "1", "--max-pred-frames", "3", "--precondition-frames", "10"]


def run(*argv, env=None):
    return cli.main([str(a) for a in argv], env=env or {})


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("generate", "--out", root / "ds", "--scenarios", 5, "--seed", 2, "--n-others", 1) == 0
    assert run("train", "--data", root / "ds", "--out", root / "run", *FAST) == 0
    return root


def test_generate_summary(tmp_path, capsys):
    assert run("generate", "--out", tmp_path / "d", "--scenarios", 10) == 0
    out = capsys.readouterr().out
    assert "scenarios: 10" in out and "train=6" in out and "frames:" in out
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert m["scenario_count"] == 10
    assert (tmp_path / "d" / "config.resolved.txt").exists()


def test_generate_same_seed_same_checksums(tmp_path):
    for d in ("a", "b"):
        assert run("generate", "--out", tmp_path / d, "--scenarios", 3, "--seed", 9) == 0
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_generate_refuses_non_empty_without_force(tmp_path):
    assert run("generate", "--out", tmp_path / "d", "--scenarios", 2) == 0
    assert run("generate", "--out", tmp_path / "d", "--scenarios", 2) == 1
    assert run("generate", "--out", tmp_path / "d", "--scenarios", 3, "--force") == 0


def test_generate_infeasible(tmp_path, capsys):
    assert run("generate", "--out", tmp_path / "d", "--preset", "default", "--grid-side", 64) == 1
    assert "leaves the map" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    cfgfile = tmp_path / "gen.txt"
    cfgfile.write_text("# scenarios from file\nscenarios = 4\nseed = 1\nfolds = 2\n")
    resolved = cli.resolve("generate", cfgfile, {"BEVF_SCENARIOS": "6", "BEVF_FOLDS": "3"}, {"scenarios": 7, "seed": None})
    assert resolved["scenarios"] == 7 and resolved["folds"] == 3 and resolved["seed"] == 1


def test_unknown_keys_rejected(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("scenarioz = 4\n")
    assert run("generate", "--config", bad, "--out", tmp_path / "d") == 2
    assert run("generate", "--out", tmp_path / "d", env={"BEVF_NOPE": "1"}) == 2
    with pytest.raises(SystemExit):
        run("generate", "--bogus-flag", 1)


def test_snapshot_replays(tmp_path):
    assert run("generate", "--out", tmp_path / "a", "--scenarios", 2, "--seed", 5) == 0
    snap = tmp_path / "a" / "config.resolved.txt"
    text = snap.read_text().replace(str(tmp_path / "a"), str(tmp_path / "b"))
    (tmp_path / "replay.txt").write_text(text)
    assert run("generate", "--config", tmp_path / "replay.txt") == 0
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_train_outputs_and_resume(data, tmp_path):
    ck = data / "run" / "checkpoint.bevp"
    _, meta = load_checkpoint(ck)
    assert meta["epoch"] == 1
    out = tmp_path / "resumed"
    assert run("train", "--data", data / "ds", "--out", out, "--resume", ck, *FAST) == 0
    _, meta2 = load_checkpoint(out / "checkpoint.bevp")
    assert meta2["epoch"] == 2 and meta2["optimizer"]["step"] > meta["optimizer"]["step"]
    rows = (out / "loss.tsv").read_text().splitlines()
    assert rows[0].startswith("epoch") and [r.split("\t")[0] for r in rows[1:]] == ["2"]


def test_train_zero_epochs_saves_initial_weights(data, tmp_path):
    from bevforecast.forecaster import ModelConfig, build_model

    assert run("train", "--data", data / "ds", "--out", tmp_path / "z", "--epochs", 0, "--seed", 4) == 0
    params, meta = load_checkpoint(tmp_path / "z" / "checkpoint.bevp")
    ref = build_model(ModelConfig.from_dict(meta["model"]), 4)
    assert meta["epoch"] == 0
    assert all((params[k] == ref.params[k].data).all() for k in ref.params)


def test_train_missing_dataset(tmp_path):
    assert run("train", "--data", tmp_path / "none", "--out", tmp_path / "o") == 1


def test_eval_model_report(data, tmp_path):
    ck = data / "run" / "checkpoint.bevp"
    assert run("eval", "--data", data / "ds", "--checkpoint", ck, "--out", tmp_path / "e", "--top-k", 5) == 0
    rep = EvalReport.from_record((tmp_path / "e" / "report.rec").read_text())
    assert rep.ks == (1, 5)
    assert rep.fingerprint["checkpoint_sha256"] == file_sha256(ck)
    for name in ("report.txt", "histogram.tsv", "histogram.pgm", "overlay_00.ppm", "overlay_00.svg"):
        assert (tmp_path / "e" / name).exists()


def test_eval_markov_needs_no_checkpoint(data, tmp_path):
    assert run("eval", "--data", data / "ds", "--method", "markov", "--out", tmp_path / "m") == 0
    assert run("eval", "--data", data / "ds", "--out", tmp_path / "x") == 2


def test_eval_grid_mismatch(data, tmp_path, capsys):
    assert run("generate", "--out", tmp_path / "big", "--scenarios", 1, "--grid-side", 256) == 0
    ck = data / "run" / "checkpoint.bevp"
    assert run("eval", "--data", tmp_path / "big", "--split", "all", "--checkpoint", ck, "--out", tmp_path / "e") == 1
    assert "grid" in capsys.readouterr().err


def test_ablate(data, tmp_path):
    ck = data / "run" / "checkpoint.bevp"
    out = tmp_path / "a"
    assert run("ablate", "--data", data / "ds", "--checkpoint", ck, "--out", out, "--channels", "road,lane,obstacles", "--frame-rates", "1.0,0.8,0.6") == 0
    assert sorted(p.name for p in out.glob("ablation_*.rec")) == ["ablation_lane.rec", "ablation_obstacles.rec", "ablation_road.rec"]
    assert len((out / "frame_rates.tsv").read_text().splitlines()) == 4
    assert run("ablate", "--data", data / "ds", "--checkpoint", ck, "--out", out) == 2


def test_associate(data, tmp_path, capsys):
    assert run("associate", "--data", data / "ds", "--method", "markov", "--split", "all", "--out", tmp_path / "a") == 0
    table = (tmp_path / "a" / "association.tsv").read_text()
    assert table.splitlines()[-1].startswith("overall")
    assert run("associate", "--data", data / "ds", "--method", "markov", "--split", "all", "--out", tmp_path / "b") == 0
    assert (tmp_path / "b" / "association.tsv").read_text() == table


def test_associate_without_other_vehicles(tmp_path, capsys):
    assert run("generate", "--out", tmp_path / "d", "--scenarios", 2) == 0
    assert run("associate", "--data", tmp_path / "d", "--split", "all", "--method", "markov", "--out", tmp_path / "a") == 1
    assert "other vehicles" in capsys.readouterr().err
