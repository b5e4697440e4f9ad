import json

import numpy as np
import pytest
import yaml

from nicbench import bench as B
from nicbench import codecs as C
from nicbench.cli import main
from nicbench.images import read_image


@pytest.fixture
def setup(toy_codec, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("NRB_OUTPUT_DIR", raising=False)
    monkeypatch.delenv("NRB_WORKERS", raising=False)
    C.save_params(toy_codec, tmp_path / "m.nrbc")
    doc = {"dataset": "synthetic:mixed,16,n=2,seed=3", "codecs": ["m.nrbc"],
           "attacks": [{"name": "pgd", "steps": 3}, "gaussian"], "instrument": False}
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(doc))
    return tmp_path


def err_record(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


def test_eval_then_report(setup):
    assert main(["eval", "-c", "cfg.yaml", "--output-dir", "out"]) == 0
    recs = B.read_csv(setup / "out" / "results.csv")
    assert len(recs) == 4
    before = (setup / "out" / "results.csv").read_bytes()
    assert main(["report", "--output-dir", "out"]) == 0
    assert (setup / "out" / "report.md").exists()
    assert (setup / "out" / "results.csv").read_bytes() == before


def test_report_without_results_is_runtime_error(setup, capsys):
    assert main(["report", "--output-dir", "nowhere"]) == 2
    assert err_record(capsys)["error"] == "FileNotFoundError"


def test_attack_pngs_identical_across_runs(setup):
    for out in ("a", "b"):
        assert main(["attack", "-c", "cfg.yaml", "--seed", "5", "--output-dir", out]) == 0
    pngs = sorted((setup / "a" / "adversarial").glob("*.png"))
    assert len(pngs) == 4
    for p in pngs:
        assert p.read_bytes() == (setup / "b" / "adversarial" / p.name).read_bytes()
        raw = np.load(p.with_suffix(".npy"))
        assert np.max(np.abs(read_image(p) - raw)) <= 0.5 / 255 + 1e-6
        trace = json.loads(p.with_name(p.name[:-4] + ".trace.json").read_text())
        assert trace["seed"] > 0 and trace["linf"] <= trace["epsilon"] + 1e-6


def test_attack_seed_changes_output(setup):
    main(["attack", "-c", "cfg.yaml", "--seed", "5", "--output-dir", "a"])
    main(["attack", "-c", "cfg.yaml", "--seed", "6", "--output-dir", "b"])
    name = next(p.name for p in (setup / "a" / "adversarial").glob("*gaussian*.npy"))
    assert not np.array_equal(np.load(setup / "a" / "adversarial" / name),
                              np.load(setup / "b" / "adversarial" / name))


def test_unknown_key_exit_code_and_error_line(setup, capsys):
    assert main(["eval", "-c", "cfg.yaml", "-o", "attack.epsilonn=0.1"]) == 1
    rec = err_record(capsys)
    assert rec == {"stage": "eval", "error": "ConfigError", "path": "attack.epsilonn",
                   "message": "attack.epsilonn: unknown key"}


def test_usage_errors(setup, capsys):
    assert main([]) == 1
    assert main(["eval"]) == 1
    assert err_record(capsys)["error"] == "UsageError"
    assert main(["frobnicate"]) == 1


def test_help_lists_schema(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["eval", "--help"])
    assert ei.value.code == 0
    out = capsys.readouterr().out
    for key in ("attack.epsilon", "train.lambdas", "output_dir", "samples_per_step"):
        assert key in out


def test_flag_beats_env(setup, monkeypatch):
    monkeypatch.setenv("NRB_OUTPUT_DIR", "from_env")
    assert main(["eval", "-c", "cfg.yaml"]) == 0
    assert (setup / "from_env" / "results.csv").exists()
    assert main(["eval", "-c", "cfg.yaml", "--output-dir", "from_flag"]) == 0
    assert (setup / "from_flag" / "results.csv").exists()


def test_train_tiny(setup):
    assert main(["train", "--preset", "tiny", "--output-dir", "t"]) == 0
    models = sorted(p.name for p in (setup / "t" / "models").iterdir())
    assert models == ["factorized-l0.005.loss.csv", "factorized-l0.005.nrbc",
                      "hyperprior-lite-l0.005.loss.csv", "hyperprior-lite-l0.005.nrbc"]
    v = C.load_params(setup / "t" / "models" / "factorized-l0.005.nrbc")
    assert v.spec.lmbda == 0.005


def test_transfer_stage(setup, toy_hyper):
    C.save_params(toy_hyper, setup / "h.nrbc")
    doc = yaml.safe_load((setup / "cfg.yaml").read_text())
    doc["codecs"] = ["m.nrbc", "h.nrbc"]
    (setup / "cfg.yaml").write_text(yaml.safe_dump(doc))
    assert main(["transfer", "-c", "cfg.yaml", "--output-dir", "tr"]) == 0
    rows = (setup / "tr" / "transfer.csv").read_text().splitlines()
    assert rows[0] == "source,target,mean_Delta_psnr" and len(rows) == 5
    assert (setup / "tr" / "transfer_psnr.dat").exists()


def test_selftest_passes(setup, capsys):
    assert main(["selftest", "--codec", "m.nrbc"]) == 0
    assert "selftest passed" in capsys.readouterr().out


def test_selftest_failure_exit_code(setup, monkeypatch, capsys):
    from nicbench import selftest
    monkeypatch.setitem(selftest.CHECKS, "stats", lambda codec, images: (False, "forced"))
    assert main(["selftest", "--codec", "m.nrbc"]) == 3
    assert err_record(capsys)["error"] == "SelftestFailure"
