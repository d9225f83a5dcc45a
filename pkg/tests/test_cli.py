import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from ecdb.checkpoint import build_model, file_hash, load_checkpoint
from ecdb.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main
from ecdb.data import load_png
from ecdb.training import TrainConfig, lr_at

SMALL = {
    "arch": {"base_width": 8, "time_embed_dim": 16},
    "train": {"total_steps": 6, "batch_size": 4, "log_every": 2, "checkpoint_every": 3},
    "data": {"size": 16, "n_train": 12, "n_val": 2, "n_test": 3},
    "sampler": {"n_steps": 20},
}


def _write_cfg(path, overrides=None):
    cfg = json.loads(json.dumps(SMALL))
    for section, vals in (overrides or {}).items():
        cfg.setdefault(section, {}).update(vals)
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "cfg.json")
    assert main(["make-data", "--config", cfg, "--out", str(root / "data"), "-q"]) == EXIT_OK
    assert main(["train", "--phase", "pretrain", "--config", cfg, "--data", str(root / "data"),
                 "--out", str(root / "pre"), "-q"]) == EXIT_OK
    pre = root / "pre" / "checkpoints" / "step_0000006.ckpt"
    assert main(["train", "--phase", "ecdb", "--config", cfg, "--data", str(root / "data"),
                 "--pretrained", str(pre), "--lr", "1e-3", "--out", str(root / "ecdb"), "-q"]) == EXIT_OK
    return {"root": root, "cfg": cfg, "pre": pre, "ecdb": root / "ecdb" / "checkpoints" / "step_0000006.ckpt"}


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_make_data_default_split_sizes(tmp_path):
    out = tmp_path / "d"
    assert main(["make-data", "--task", "inpaint", "--out", str(out), "-q"]) == EXIT_OK
    counts = {s: len(list((out / s / "lq").glob("*.png"))) for s in ("train", "val", "test")}
    assert counts == {"train": 4000, "val": 200, "test": 100}
    assert sum(counts.values()) == 4300
    first = hashlib.sha256((out / "manifest.json").read_bytes()).hexdigest()
    out2 = tmp_path / "d2"
    assert main(["make-data", "--task", "inpaint", "--n-train", "4000", "--out", str(out2), "-q"]) == EXIT_OK
    assert hashlib.sha256((out2 / "manifest.json").read_bytes()).hexdigest() == first


def test_make_data_invalid_coverage(tmp_path):
    cfg = _write_cfg(tmp_path / "c.json", {"degradation": {"coverage": 1.5}})
    assert main(["make-data", "--config", cfg, "--out", str(tmp_path / "d"), "-q"]) == EXIT_CONFIG


def test_unknown_config_key_is_rejected(tmp_path):
    cfg = _write_cfg(tmp_path / "c.json", {"train": {"learning_rate": 1e-3}})
    assert main(["schedule-dump", "--config", cfg, "--out", str(tmp_path / "s")]) == EXIT_CONFIG
    bad = tmp_path / "b.json"
    bad.write_text(json.dumps({"optimizer": {}}))
    assert main(["schedule-dump", "--config", str(bad), "--out", str(tmp_path / "s")]) == EXIT_CONFIG


def test_task_degradation_mismatch(tmp_path):
    cfg = _write_cfg(tmp_path / "c.json", {"data": {"task": "sr"}})
    assert main(["make-data", "--config", cfg, "--out", str(tmp_path / "d"), "-q"]) == EXIT_CONFIG


def test_config_hash_is_stable_and_recorded(work):
    man = _manifest(work["root"] / "pre")
    assert man["status"] == "complete" and man["steps"] == 6
    assert man["config_hash"] == _manifest(work["root"] / "data")["config_hash"]
    assert load_checkpoint(work["pre"]).header["config_hash"] == man["config_hash"]
    shas = {c["sha256"] for c in man["checkpoints"]}
    assert file_hash(work["pre"]) in shas
    ecdb = _manifest(work["root"] / "ecdb")
    assert ecdb["config_hash"] != man["config_hash"]  # the --lr override is part of the config
    assert ecdb["inputs"]["pretrained"]["sha256"] == file_hash(work["pre"])
    rows = list(csv.reader((work["root"] / "pre" / "metrics.csv").open()))
    assert rows[0] == ["step", "loss", "lr", "seconds"] and len(rows) == 4


def test_seed_changes_hash(work, tmp_path):
    main(["schedule-dump", "--config", work["cfg"], "--out", str(tmp_path / "a"), "-q"])
    main(["schedule-dump", "--config", work["cfg"], "--out", str(tmp_path / "b"), "-q"])
    main(["schedule-dump", "--config", work["cfg"], "--seed", "3", "--out", str(tmp_path / "c"), "-q"])
    a, b, c = (_manifest(tmp_path / k)["config_hash"] for k in "abc")
    assert a == b != c


def test_ecdb_requires_pretrained(work, tmp_path):
    assert main(["train", "--phase", "ecdb", "--config", work["cfg"], "--out", str(tmp_path / "x"), "-q"]) == EXIT_CONFIG
    assert main(["train", "--phase", "ecdb", "--config", work["cfg"], "--pretrained", str(tmp_path / "none.ckpt"),
                 "--out", str(tmp_path / "x"), "-q"]) == EXIT_CONFIG
    # an ECDB checkpoint is not a valid starting point for a fresh branch
    assert main(["train", "--phase", "ecdb", "--config", work["cfg"], "--pretrained", str(work["ecdb"]),
                 "--out", str(tmp_path / "x"), "-q"]) == EXIT_CONFIG


def test_ablation_flags_reach_the_checkpoint(work, tmp_path):
    out = tmp_path / "abl"
    assert main(["train", "--phase", "ecdb", "--config", work["cfg"], "--pretrained", str(work["pre"]),
                 "--no-chm", "--no-fusion-schedule", "--steps", "2", "--out", str(out), "-q"]) == EXIT_OK
    fusion = load_checkpoint(out / "checkpoints" / "step_0000002.ckpt").fusion
    assert (fusion.chm, fusion.dfm, fusion.schedule) == (False, True, False)
    assert _manifest(out)["config"]["ablation"]["chm"] is False


def test_ecdb_training_keeps_denoiser_frozen(work):
    pre = load_checkpoint(work["pre"]).group("model")
    ecdb = load_checkpoint(work["ecdb"]).group("model")
    assert pre.keys() == ecdb.keys()
    assert all(np.array_equal(pre[k], ecdb[k]) for k in pre)


def test_nan_training_exits_nonzero_with_step(work, tmp_path, capsys):
    out = tmp_path / "nan"
    code = main(["train", "--phase", "pretrain", "--config", work["cfg"], "--lr", "inf", "--out", str(out), "-q"])
    assert code == EXIT_FAIL
    assert "step 2" in capsys.readouterr().err
    man = _manifest(out)
    assert man["status"] == "diverged" and man["failed_step"] == 2


def test_resume_reproduces_lr_state(work, tmp_path):
    out = tmp_path / "resumed"
    mid = work["root"] / "pre" / "checkpoints" / "step_0000003.ckpt"
    assert main(["train", "--phase", "pretrain", "--config", work["cfg"], "--data", str(work["root"] / "data"),
                 "--resume", str(mid), "--out", str(out), "-q"]) == EXIT_OK
    final = out / "checkpoints" / "step_0000006.ckpt"
    assert file_hash(final) == file_hash(work["pre"])
    cfg = TrainConfig(total_steps=6).for_phase("pretrain")
    assert load_checkpoint(mid).header["optimizer"]["lr"] == lr_at(3, cfg)
    assert load_checkpoint(final).header["optimizer"]["lr"] == lr_at(6, cfg)


def test_restore_is_deterministic(work, tmp_path):
    args = ["restore", "--config", work["cfg"], "--checkpoint", str(work["ecdb"]),
            "--input", str(work["root"] / "data" / "test"), "--deterministic", "-q"]
    assert main(args + ["--out", str(tmp_path / "r1")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "r2")]) == EXIT_OK
    files = sorted((tmp_path / "r1" / "restored").glob("*.png"))
    assert len(files) == 3
    for f in files:
        assert f.read_bytes() == (tmp_path / "r2" / "restored" / f.name).read_bytes()
    assert (tmp_path / "r1" / "grid.png").is_file()
    from PIL import Image

    with Image.open(files[0]) as im:
        assert im.text["config_hash"] == _manifest(tmp_path / "r1")["config_hash"]
        assert im.text["checkpoint_sha256"] == file_hash(work["ecdb"])
    assert _manifest(tmp_path / "r1")["grid_columns"] == ["input", "restored", "reference"]


def test_restore_stochastic_seeded(work, tmp_path):
    args = ["restore", "--config", work["cfg"], "--checkpoint", str(work["pre"]),
            "--input", str(work["root"] / "data" / "test" / "lq"), "--limit", "1", "-q"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    main(args + ["--seed", "9", "--out", str(tmp_path / "c")])
    a, b, c = (load_png(next((tmp_path / k / "restored").glob("*.png"))) for k in "abc")
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert _manifest(tmp_path / "a")["config"]["sampler"]["n_steps"] == 20


def test_restore_empty_input_is_noop(work, tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["restore", "--config", work["cfg"], "--checkpoint", str(work["pre"]),
                 "--input", str(empty), "--out", str(tmp_path / "o"), "-q"]) == EXIT_OK
    assert "nothing to restore" in capsys.readouterr().err
    assert not (tmp_path / "o" / "restored").exists()


def test_evaluate_writes_csv_and_aggregate(work, tmp_path):
    ref = work["root"] / "data" / "test" / "hq"
    assert main(["evaluate", "--restored", str(ref), "--reference", str(ref), "--y-channel",
                 "--out", str(tmp_path / "e"), "-q"]) == EXIT_OK
    rows = list(csv.reader((tmp_path / "e" / "metrics.csv").open()))
    assert rows[0] == ["id", "psnr", "ssim"] and len(rows) == 4
    assert all(r[1] == "inf" for r in rows[1:])
    agg = json.loads((tmp_path / "e" / "aggregate.json").read_text())
    assert agg["channel_mode"] == "y_channel" and agg["mean_psnr"] == "inf" and agg["n"] == 3

    lq = work["root"] / "data" / "test" / "lq"
    main(["evaluate", "--restored", str(lq), "--reference", str(ref), "--out", str(tmp_path / "f"), "-q"])
    agg = json.loads((tmp_path / "f" / "aggregate.json").read_text())
    assert agg["channel_mode"] == "rgb" and 0 < agg["mean_psnr"] < 100


def test_schedule_dump(tmp_path):
    assert main(["schedule-dump", "--out", str(tmp_path), "-q"]) == EXIT_OK
    sched_rows = list(csv.reader((tmp_path / "schedule.csv").open()))
    w_rows = list(csv.reader((tmp_path / "fusion_weight.csv").open()))
    assert len(sched_rows) == len(w_rows) == 102
    assert w_rows[0] == ["t", "W"]
    assert float(w_rows[1][1]) == 1.0 and float(w_rows[-1][1]) == 0.0
    assert float(w_rows[51][1]) == pytest.approx(0.0787160251, abs=1e-9)
    w = [float(r[1]) for r in w_rows[1:]]
    assert all(x > y for x, y in zip(w, w[1:]))


def test_feature_dump_at_terminal_time_is_input_independent(work, tmp_path):
    test_lq = sorted((work["root"] / "data" / "test" / "lq").glob("*.png"))
    outs = []
    for k, sample in enumerate(test_lq[:2]):
        out = tmp_path / f"f{k}"
        assert main(["feature-dump", "--config", work["cfg"], "--checkpoint", str(work["ecdb"]),
                     "--sample", str(sample), "--times", "0.0,1.0", "--out", str(out), "-q"]) == EXIT_OK
        outs.append(out)
    assert {p.name for p in outs[0].glob("*.png")} == {"dfm_t0.000.png", "dfm_t1.000.png"}
    at_T = [np.load(o / "dfm_t1.000.npy") for o in outs]
    assert np.array_equal(at_T[0], at_T[1])
    dfm = build_model(load_checkpoint(work["ecdb"])).branch.dfm
    with torch.no_grad():
        bias = dfm(torch.zeros(1, 3, 16, 16))[0].numpy()
    # same input, separately dispatched convolutions: agree to float32 rounding
    np.testing.assert_allclose(at_T[0], bias, rtol=0, atol=1e-7)
    assert main(["feature-dump", "--config", work["cfg"], "--checkpoint", str(work["pre"]),
                 "--sample", str(test_lq[0]), "--out", str(tmp_path / "g"), "-q"]) == EXIT_CONFIG


def test_verify_quick_passes(tmp_path):
    assert main(["verify", "--quick", "--out", str(tmp_path), "-q"]) == EXIT_OK
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["passed"] and rep["failed"] == []
    names = {c["name"] for c in rep["checks"]}
    assert {"schedule", "forward_marginal", "bridge_pinning", "affine_identity", "diffusion_constraint",
            "backward_coefficients", "reverse_gaussian", "gradient_check", "zero_init_identity",
            "fusion_weight"} == names
    fwd = next(c for c in rep["checks"] if c["name"] == "forward_marginal")
    assert len(fwd["z_scores"]) == 101
    rows = list(csv.reader((tmp_path / "forward_oracle.csv").open()))
    assert rows[0][0] == "t" and len(rows) == 102


def test_verify_flags_a_broken_schedule(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"process": {"lambda_sq": 0.0}}))
    assert main(["verify", "--quick", "--config", str(cfg), "--out", str(tmp_path / "v"), "-q"]) == EXIT_FAIL
    rep = json.loads((tmp_path / "v" / "report.json").read_text())
    assert not rep["passed"] and "schedule" in rep["failed"]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ecdb.cli", "schedule-dump", "--out", str(tmp_path), "-q"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and (tmp_path / "schedule.csv").is_file()
    res = subprocess.run([sys.executable, "-m", "ecdb.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
