from __future__ import annotations

import json
import subprocess
import sys

import pytest

from vfa.cli import CliConfig, load_config, main
from vfa.errors import ConfigError

SEED = bytes(range(32)).hex()


@pytest.fixture
def run(tmp_path, capsys):
    def _run(*args, state="a"):
        argv = ["--state-dir", str(tmp_path / state), "--services-dir", str(tmp_path / "svc"), "--fast-kdf", "--json"]
        code = main(argv + list(args))
        out = capsys.readouterr().out.strip().splitlines()
        return code, json.loads(out[-1]) if out else {}

    return _run


def test_baseline_lifecycle(run, tmp_path):
    code, out = run("enroll", "--pin", "1234", "--puk", "12345678", "--seed", SEED)
    assert code == 0 and out["mode"] == "baseline"
    assert run("enroll", "--pin", "1234", "--puk", "12345678", "--seed", SEED)[0] == 23
    assert run("assert", "--pin", "1234", "--rp-id", "x.example")[0] == 32

    code, reg = run("register", "--pin", "1234", "--rp-id", "x.example")
    assert code == 0 and reg["accepted"]
    for n in (1, 2):
        code, out = run("assert", "--pin", "1234", "--rp-id", "x.example")
        assert code == 0 and out["counter"] == n
    assert run("sync", "push", "--pin", "1234")[1]["server_version"] == 1

    device_json = str(tmp_path / "a" / "device.json")
    code, out = run("device-add", "--pin", "1234", "--puk", "12345678", "--seed", SEED, "--from-device", device_json, state="b")
    assert code == 0
    code, out = run("assert", "--pin", "1234", "--rp-id", "x.example", state="b")
    assert code == 0 and out["counter"] == 3

    assert run("rotate", "--pin", "1234")[1]["path"] == "wrapped"
    # Device A is behind device B on this credential's counter: clone detection fires.
    assert run("assert", "--pin", "1234", "--rp-id", "x.example")[0] == 44

    code, out = run("delete", "--pin", "1234", "--credential-id", reg["credential_id"])
    assert code == 0
    assert run("sync", "push", "--pin", "1234")[0] == 0
    assert run("sync", "pull", "--pin", "1234", state="b")[0] == 0
    assert run("unlock", "--pin", "1234", state="b")[1]["credentials"] == 0


def test_wrong_pin_and_missing_pin(run):
    run("enroll", "--pin", "1234", "--puk", "12345678")
    assert run("unlock", "--pin", "9999")[0] == 11
    assert run("unlock")[0] == 72


def test_qes_gated_registration(run):
    run("enroll", "--pin", "1234", "--puk", "12345678")
    assert run("--rp-require-qes", "register", "--pin", "1234", "--rp-id", "q.example", "--no-qes")[0] == 42
    assert run("--rp-require-qes", "register", "--pin", "1234", "--rp-id", "q.example")[0] == 0


def test_hardened_lifecycle(run):
    code, out = run("--mode", "hardened", "enroll", "--pin", "1234", "--puk", "12345678", "--uv-pin", "271828")
    assert code == 0 and out["mode"] == "hardened"
    assert run("register", "--pin", "1234", "--uv-pin", "271828", "--rp-id", "h.example")[0] == 0
    assert run("assert", "--pin", "1234", "--uv-pin", "271828", "--rp-id", "h.example")[0] == 0
    assert run("unlock", "--pin", "1234", "--uv-pin", "000000")[0] != 0
    assert run("--mode", "baseline", "unlock", "--pin", "1234", "--uv-pin", "271828")[0] == 71


def test_attack_demo(run):
    code, out = run("attack-demo", "--variant", "baseline")
    assert code == 0 and out["succeeded"] and out["records_decrypted"] == 3
    code, out = run("attack-demo", "--variant", "hardened", "--output-guesses", "16")
    assert code == 0 and not out["succeeded"] and out["records_decrypted"] == 0


def test_bench(run):
    code, out = run("bench", "--n", "100")
    assert code == 0 and [r["name"] for r in out["rows"]] == [
        "token_sign",
        "make_credential",
        "get_assertion",
        "sync_pull",
    ]
    assert run("bench", "--n", "5")[0] != 0


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "vfa", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "attack-demo" in out.stdout


def test_toml_config_and_overrides(tmp_path):
    path = tmp_path / "vfa.toml"
    path.write_text('mode = "hardened"\nuser_id = "carol"\nkdf = "fast"\ncolour = "blue"\n')
    cfg = load_config(str(path), {"user_id": "dave", "mode": None})
    assert cfg.mode == "hardened" and cfg.user_id == "dave" and cfg.extra == {"colour": "blue"}
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.toml"), {})
    path.write_text("mode = ")
    with pytest.raises(ConfigError):
        load_config(str(path), {})
    with pytest.raises(ConfigError):
        CliConfig(mode="paranoid")


def test_bad_config_exit_code(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "none.toml"), "unlock", "--pin", "1234"]) == 70
