import json
import subprocess
import sys

import numpy as np
import pytest

from harnest.cli import LOCK_NAME, main
from harnest.datapipe import default_recipe, load_dataset, synth_subjects, save_dataset

FAST = {"batch_size": 16, "stage1_iters": 3, "stage2_iters": 3, "stage3_iters": 3,
        "lr_c": 1e-3, "lr_q": 1e-3, "lr_p": 1e-3}
ARCH = {"base_filters": 2, "classifier_hidden": 8, "discriminator_hidden": 8}


@pytest.fixture
def configs(tmp_path):
    tc = tmp_path / "train.json"
    tc.write_text(json.dumps(FAST))
    mc = tmp_path / "model.json"
    mc.write_text(json.dumps(ARCH))
    return str(tc), str(mc)


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "synth.harw"
    save_dataset(synth_subjects(4, 2, 2, 16, 3, seed=0), path)
    return str(path)


def test_prepare_synthetic(tmp_path, capsys):
    recipe = default_recipe("synthetic", window_size=16, step=16,
                            options={"n_subjects": 3, "n_activities": 2, "n_channels": 2,
                                     "windows_per_subject_per_class": 4, "seed": 0})
    recipe.save(tmp_path / "r.json")
    out = tmp_path / "data" / "s.harw"
    assert main(["prepare", "--recipe", str(tmp_path / "r.json"), "--out", str(out), "--seed", "5"]) == 0
    text = capsys.readouterr().out
    assert "n=24 n_c=2 n_w=16 n_a=2 subjects=3" in text
    ds = load_dataset(out)
    assert ds.n == 24
    assert json.loads((tmp_path / "data" / "s.recipe.json").read_text())["options"]["seed"] == 5
    manifest = json.loads((tmp_path / "data" / "s.manifest.json").read_text())
    assert manifest["status"] == "completed" and manifest["command"] == "prepare"
    assert not (tmp_path / "data" / LOCK_NAME).exists()

    # corrupt the container: the re-read fails with a checksum error
    raw = bytearray(out.read_bytes())
    raw[50] ^= 0x01
    out.write_bytes(bytes(raw))
    with pytest.raises(Exception, match="checksum"):
        load_dataset(out)


def test_prepare_errors(tmp_path, capsys):
    assert main(["prepare", "--recipe", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x.harw")]) == 2
    default_recipe("pamap2").save(tmp_path / "p.json")
    code = main(["prepare", "--recipe", str(tmp_path / "p.json"), "--raw-root", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o" / "x.harw")])
    assert code == 1
    assert "error" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text('{"name": "synthetic", "window_size": 4, "step": 9}')
    assert main(["prepare", "--recipe", str(tmp_path / "bad.json"), "--out", str(tmp_path / "y.harw")]) == 2


def test_prepare_reads_env_root(tmp_path, monkeypatch, capsys):
    root = tmp_path / "raw"
    for s in range(1, 4):
        t = np.random.default_rng(s).normal(size=(450, 24))
        t[:, 23] = 1 + (np.arange(450) // 150)
        root.mkdir(exist_ok=True)
        np.savetxt(root / f"mHealth_subject{s}.log", t)
    default_recipe("mhealth", subject_filter=[1, 2, 3]).save(tmp_path / "m.json")
    monkeypatch.setenv("HARNEST_DATA_ROOT", str(root))
    assert main(["prepare", "--recipe", str(tmp_path / "m.json"), "--out", str(tmp_path / "m.harw")]) == 0
    assert "subjects=3" in capsys.readouterr().out


def test_train_missing_dataset_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.harw"
    assert main(["train", "--dataset", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_train_bad_config_exits_2(tmp_path, dataset):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lr_q": -1}))
    assert main(["train", "--dataset", dataset, "--train-config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(json.dumps({"bogus": 1}))
    assert main(["train", "--dataset", dataset, "--train-config", str(bad), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--dataset", dataset, "--variant", "nonsense", "--out", str(tmp_path / "o")])
    assert exc.value.code == 2


def _train(dataset, configs, out, *extra):
    tc, mc = configs
    return main(["train", "--dataset", dataset, "--train-config", tc, "--model-config", mc,
                 "--out", str(out), "--target-subject", "3", *extra])


def test_train_outputs_and_variants(tmp_path, dataset, configs):
    out = tmp_path / "run"
    assert _train(dataset, configs, out, "--variant", "no_adv") == 0
    ck = out / "checkpoint"
    assert {p.name for p in ck.glob("*.npz")} == {"Q.npz", "P.npz", "C.npz", "adam_Q.npz", "adam_P.npz",
                                                  "adam_C.npz"}
    header = (out / "loss_history.csv").read_text().splitlines()[0]
    assert header == "iteration,stage,rec,cls,dom,mmd,objective"
    man = json.loads((out / "run_manifest.json").read_text())
    assert man["status"] == "completed" and man["version"]
    assert _train(dataset, configs, tmp_path / "p") == 0
    assert (tmp_path / "p" / "checkpoint" / "D.npz").exists()


def test_train_deterministic_archives(tmp_path, dataset, configs):
    for name in ("a", "b"):
        assert _train(dataset, configs, tmp_path / name, "--seed", "7") == 0
    for f in ("Q.npz", "P.npz", "C.npz", "D.npz"):
        assert (tmp_path / "a" / "checkpoint" / f).read_bytes() == (tmp_path / "b" / "checkpoint" / f).read_bytes()
    assert (tmp_path / "a" / "loss_history.csv").read_bytes() == (tmp_path / "b" / "loss_history.csv").read_bytes()
    assert _train(dataset, configs, tmp_path / "c", "--seed", "8") == 0
    assert (tmp_path / "a" / "checkpoint" / "Q.npz").read_bytes() != (tmp_path / "c" / "checkpoint" / "Q.npz").read_bytes()


def test_train_stop_and_resume(tmp_path, dataset, configs, capsys):
    assert _train(dataset, configs, tmp_path / "full") == 0
    assert _train(dataset, configs, tmp_path / "part", "--stop-after", "4") == 1
    man = json.loads((tmp_path / "part" / "run_manifest.json").read_text())
    assert man["status"] == "stopped"
    ck = json.loads((tmp_path / "part" / "checkpoint" / "manifest.json").read_text())
    assert ck["global_iter"] == 4 and ck["stage"] == "stage2" and ck["iteration"] == 1
    assert _train(dataset, configs, tmp_path / "part", "--resume") == 0
    for f in ("Q.npz", "P.npz", "C.npz", "D.npz"):
        assert ((tmp_path / "full" / "checkpoint" / f).read_bytes()
                == (tmp_path / "part" / "checkpoint" / f).read_bytes())
    hist = (tmp_path / "part" / "loss_history.csv").read_text().splitlines()
    assert [int(r.split(",")[0]) for r in hist[1:]] == list(range(9))
    assert _train(dataset, configs, tmp_path / "fresh", "--resume") == 2


def test_lock_blocks_concurrent_runs(tmp_path, dataset, configs):
    out = tmp_path / "locked"
    out.mkdir()
    (out / LOCK_NAME).write_text("123")
    assert _train(dataset, configs, out) == 2


def test_eval_writes_reports(tmp_path, dataset, configs, capsys):
    tc, mc = configs
    out = tmp_path / "ev"
    assert main(["eval", "--dataset", dataset, "--train-config", tc, "--model-config", mc,
                 "--out", str(out), "--repeats", "1", "--no-plots"]) == 0
    rows = (out / "per_fold.csv").read_text().splitlines()
    assert rows[0] == "subject,repeat,variant,acc,f_weighted,f_macro" and len(rows) == 5
    assert "±" in capsys.readouterr().out
    assert not list(out.glob("box_*.png"))


def test_eval_acc_only_for_mocapaci(tmp_path, configs):
    tc, mc = configs
    path = tmp_path / "moca.harw"
    save_dataset(synth_subjects(3, 2, 2, 16, 2, seed=0), path)
    default_recipe("mocapaci").save(tmp_path / "moca.recipe.json")
    out = tmp_path / "ev"
    assert main(["eval", "--dataset", str(path), "--train-config", tc, "--model-config", mc,
                 "--out", str(out), "--repeats", "1", "--no-plots"]) == 0
    assert (out / "per_fold.csv").read_text().splitlines()[0] == "subject,repeat,variant,acc"


def test_ablate_emits_five_variants(tmp_path, dataset, configs):
    tc, mc = configs
    out = tmp_path / "ab"
    assert main(["ablate", "--dataset", dataset, "--train-config", tc, "--model-config", mc,
                 "--out", str(out), "--repeats", "1", "--no-plots", "--acc-only"]) == 0
    reports = json.loads((out / "reports.json").read_text())
    assert [r["variant"] for r in reports] == ["no_adv", "only_supervised", "no_mmd", "one_stage", "proposed"]
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["variants"]) == 5


def test_sweep_defaults_and_values(tmp_path, dataset, configs):
    tc, mc = configs
    out = tmp_path / "sw"
    assert main(["sweep", "--dataset", dataset, "--train-config", tc, "--model-config", mc,
                 "--out", str(out), "--repeats", "1", "--no-plots", "--values", "0.01", "5.0"]) == 0
    man = json.loads((out / "run_manifest.json").read_text())
    assert man["values"] == [0.01, 5.0]
    reports = json.loads((out / "reports.json").read_text())
    assert len(reports) == 2
    from harnest.cli import build_parser
    args = build_parser().parse_args(["sweep", "--dataset", "x", "--out", "y"])
    assert args.values is None  # the command falls back to the default six-value grid


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "harnest", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("prepare", "train", "eval", "ablate", "sweep"):
        assert cmd in res.stdout
