import orjson
import pytest

from ig_crowd.logging import configure_logger
from ig_crowd.tools.cli import EXIT_CONFIG, EXIT_MISSING, build_parser, main

from conftest import tiny_run_config


@pytest.fixture(autouse=True)
def _restore_logger():
    yield
    # main() points the sink at the captured stdout of the test
    configure_logger()


def _error(capsys):
    lines = [l for l in capsys.readouterr().err.splitlines() if l.startswith("{")]
    return orjson.loads(lines[-1])


def _config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_bytes(orjson.dumps(tiny_run_config().model_dump(mode="json", by_alias=True)))
    return path


def test_parser_knows_every_command():
    parser = build_parser()
    for argv in (["gen-data"], ["pretrain"], ["grow"], ["train-classifier", "--level", "1"], ["evaluate"], ["baseline", "moe"], ["analyze"]):
        assert parser.parse_args(argv + ["--out", "x"]).out == "x"


def test_unknown_key_exits_2(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path), "--set", "growth.bogus=1"])
    assert code == EXIT_CONFIG
    err = _error(capsys)
    assert err["error"] == "ConfigError"
    assert err["key"] == "growth.bogus"


def test_nway_needs_k(tmp_path, capsys):
    assert main(["baseline", "nway", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert _error(capsys)["key"] == "--k"
    assert main(["baseline", "nway", "--k", "1", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_missing_predecessor_exits_3(tmp_path, capsys):
    code = main(["grow", "--out", str(tmp_path)])
    assert code == EXIT_MISSING
    err = _error(capsys)
    assert err["missing"] == "data"
    assert err["stage"] == "grow"
    assert err["path"].endswith("manifest.json")


def test_missing_config_file(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert _error(capsys)["key"] == "--config"


def test_gen_data_then_pretrain(tmp_path, capsys):
    cfg = _config_file(tmp_path)
    out = tmp_path / "run"
    assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    assert "data: wrote" in capsys.readouterr().out
    assert main(["pretrain", "--config", str(cfg), "--out", str(out), "--threads", "2", "--log-json"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("{")]
    assert lines and all("level" in orjson.loads(l) for l in lines)
    assert (out / "pretrain" / "regressor" / "manifest.json").exists()
    manifest = orjson.loads((out / "pretrain" / "manifest.json").read_bytes())
    assert set(manifest["dependencies"]) == {"data"}


def test_seed_flag_overrides_file(tmp_path):
    cfg = _config_file(tmp_path)
    out = tmp_path / "run"
    assert main(["gen-data", "--config", str(cfg), "--out", str(out), "--seed", "99"]) == 0
    resolved = orjson.loads((out / "resolved_config.json").read_bytes())
    assert resolved["seed"] == 99
    assert resolved["growth"]["loss"]["lambda"] == pytest.approx(1e-2)
