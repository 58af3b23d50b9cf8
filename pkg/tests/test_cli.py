import json

import pytest

from adapt.checkpoint import load_checkpoint
from adapt.cli import main
from conftest import small_run_config


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(small_run_config().to_dict(include_output=False)))
    return path


@pytest.fixture(scope="module")
def full_run(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--config", str(config_file), "--out", str(out)]) == 0
    assert main(["report", "--out", str(out)]) == 0
    return out


def test_run_writes_every_artifact(full_run):
    names = set(tree(full_run))
    for name in [
        "config.json", "cohort.bin", "cohort.json", "importance.json", "lemmas.json", "eval.json",
        *[f"stage{t}.ckpt" for t in ("1", "2", "3", "3_bce")],
        *[f"stage{t}_log.csv" for t in ("1", "2", "3", "3_bce")],
        *[f"eval_stage{t}.csv" for t in ("1", "2", "3", "3_bce")],
        *[f"report/{s}.csv" for s in ("stagewise", "ablation", "low_attention", "cross_activation", "provenance")],
        *[f"report/{s}.png" for s in ("stagewise", "ablation", "low_attention", "cross_activation")],
        "report/report.json",
    ]:
        assert name in names, name


def test_artifacts_carry_hash_and_seed(full_run):
    cfg = json.loads((full_run / "config.json").read_text())
    stamp = f"config_hash={cfg['config_hash']} seed={cfg['seed']}"
    for name in ("eval.json", "importance.json", "lemmas.json", "cohort.json"):
        data = json.loads((full_run / name).read_text())
        assert data["config_hash"] == cfg["config_hash"] and data["seed"] == cfg["seed"]
    for path in full_run.rglob("*.csv"):
        assert path.read_text().startswith(f"# {stamp}"), path
    assert load_checkpoint(full_run / "stage3.ckpt").config_hash == cfg["config_hash"]


def test_report_is_complete_and_stable(full_run):
    report = json.loads((full_run / "report/report.json").read_text())
    assert report["complete"] and report["missing"] == []
    before = tree(full_run / "report")
    assert main(["report", "--out", str(full_run)]) == 0
    assert tree(full_run / "report") == before


def test_rerun_is_byte_identical(full_run, config_file, tmp_path):
    assert main(["run", "--config", str(config_file), "--out", str(tmp_path)]) == 0
    assert main(["report", "--out", str(tmp_path)]) == 0
    assert tree(tmp_path) == tree(full_run)


def test_stepwise_commands_match_run(full_run, config_file, tmp_path):
    base = ["--config", str(config_file), "--out", str(tmp_path)]
    assert main(["gen", *base]) == 0
    for stage in ("1", "2", "3"):
        assert main(["train", "--stage", stage, "--out", str(tmp_path)]) == 0
    assert main(["eval", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "stage3.ckpt").read_bytes() == (full_run / "stage3.ckpt").read_bytes()
    assert (tmp_path / "eval.json").read_bytes() == (full_run / "eval.json").read_bytes()


def test_lemmas_command(full_run, capsys):
    assert main(["lemmas", "--out", str(full_run)]) == 0
    assert "lemma1:" in capsys.readouterr().out


def test_missing_prerequisite(tmp_path, config_file, capsys):
    assert main(["run", "--stages", "2", "--config", str(config_file), "--out", str(tmp_path)]) == 3
    assert "error:" in capsys.readouterr().err
    assert main(["gen", "--config", str(config_file), "--out", str(tmp_path)]) == 0
    assert main(["train", "--stage", "2", "--out", str(tmp_path)]) == 3


def test_partial_report_flags_missing_sections(tmp_path, config_file):
    assert main(["run", "--stages", "gen,1", "--config", str(config_file), "--out", str(tmp_path)]) == 0
    assert main(["report", "--out", str(tmp_path)]) == 3
    report = json.loads((tmp_path / "report/report.json").read_text())
    assert not report["complete"] and "stagewise" in report["missing"]
    assert report["provenance"]["checkpoint_stage"] == 1


def test_hash_mismatch_is_refused(tmp_path, config_file):
    assert main(["gen", "--config", str(config_file), "--out", str(tmp_path)]) == 0
    assert main(["train", "--stage", "1", "--seed", "99", "--out", str(tmp_path)]) == 2
    assert main(["train", "--stage", "1", "--seed", "99", "--out", str(tmp_path), "--allow-mismatch"]) == 0


@pytest.mark.parametrize(
    "argv, code",
    [
        (["run", "--stages", "gen,4"], 2),
        (["train", "--stage", "1"], 3),
        (["lemmas"], 3),
    ],
)
def test_exit_codes(tmp_path, config_file, argv, code):
    assert main([*argv, "--config", str(config_file), "--out", str(tmp_path)]) == code


def test_bad_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"stage9": {}}')
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--instances", "2", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "gradcheck.json").read_text())
    assert {k: v["passed"] for k, v in summary.items()} == {"patch": 2, "wsi": 2, "attention": 2}
