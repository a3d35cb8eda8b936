import json
import subprocess
import sys

import pytest

from m2rag.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_generate_on_fresh_root_is_usage_error(capsys, engine_config, tmp_path):
    code, _, err = run(capsys, "generate", "--config", str(engine_config), "--root", str(tmp_path / "r"))
    assert code == 2
    assert "run `retrieve` first" in err


def test_pipeline_through_cli(capsys, engine_config, tmp_path, no_network):
    root = str(tmp_path / "r")
    base = ["--config", str(engine_config), "--root", root]
    for stage in ("curate", "score", "retrieve"):
        assert run(capsys, stage, *base)[0] == 0
    for s in ("separate", "single", "multi"):
        assert run(capsys, "generate", *base, "--strategy", s)[0] == 0
    code, out, _ = run(capsys, "evaluate", *base)
    assert code == 0
    header, *rows = out.strip().splitlines()
    assert header.split()[0] == "Strategy" and header.split()[-1] == "Overall"
    assert sorted(r.split()[0] for r in rows) == ["multi", "separate", "single"]
    assert all(r.split()[-2] == "100.0" for r in rows)  # recall column

    code, out, _ = run(capsys, "stats", *base)
    assert code == 0 and "Web Page" in out and "Std." in out
    code, out, _ = run(capsys, "stats", *base, "--format", "records")
    assert all(json.loads(line)["table"] in ("counts", "scores") for line in out.splitlines())

    code, out, _ = run(capsys, "retrieve", *base)
    assert code == 0 and "skipped" in out
    code, out, _ = run(capsys, "export-train", *base, "--format", "records")
    assert code == 0 and json.loads(out)["skipped"] is False
    assert no_network == []


def test_dry_run_prints_plan(capsys, engine_config, tmp_path):
    code, out, _ = run(capsys, "curate", "--config", str(engine_config), "--root", str(tmp_path / "r"), "--dry-run")
    assert code == 0 and "dry run" in out
    assert not (tmp_path / "r").exists()


def test_meta_eval_table(capsys, engine_config, tmp_path):
    code, out, _ = run(capsys, "meta-eval", "--config", str(engine_config), "--root", str(tmp_path / "r"),
                       "--repeat", "3")
    assert code == 0
    assert [l.split()[0] for l in out.strip().splitlines()] == ["Pairing", "model", "model_std", "human"]


def test_bad_config_and_flags(capsys, tmp_path):
    code, _, err = run(capsys, "stats", "--config", str(tmp_path / "missing.yaml"))
    assert code == 2 and "error" in err
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--config", "x.yaml", "--strategy", "bogus"])
    assert exc.value.code == 2


def test_repeat_beyond_columns(capsys, engine_config, tmp_path):
    code, _, err = run(capsys, "meta-eval", "--config", str(engine_config), "--root", str(tmp_path / "r"),
                       "--repeat", "9")
    assert code == 2 and "model columns" in err


def test_module_entry_point(engine_config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "m2rag", "stats", "--config", str(engine_config),
                           "--root", str(tmp_path / "r")], capture_output=True, text=True)
    assert proc.returncode == 2 and "run `curate` first" in proc.stderr
