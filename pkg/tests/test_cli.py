import json

import numpy as np
import pytest

from selfens import augment, checkpoint, cli, data, trainer
from selfens.config import ConfigError, RunConfig, build_domains

SYNTH = {"kind": "glyphs", "n_train": 64, "n_test": 32, "seed": 2,
         "shift": {"rotation_deg": 25.0, "intensity_invert": True, "noise_sigma": 0.1}}


def write_config(path, **sections):
    doc = {
        "data": {"synthetic": SYNTH},
        "model": {"architecture": "mlp", "width_multiplier": 0.25},
        "augment": {"preset": "tf"},
        "train": {"epochs": 2, "batch_size": 32},
    }
    doc.update(sections)
    path.write_text(json.dumps(doc))
    return path


def run(argv, capsys):
    code = cli.main(["-q"] + [str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "cfg.json")
    assert cli.main(["-q", "train", "--config", str(cfg), "--out", str(root / "out")]) == 0
    return root


def test_train_writes_artifacts(trained):
    out = trained / "out"
    for name in ("metrics.csv", "final.ckpt", "early_stop.ckpt", "resolved-config.json"):
        assert (out / name).exists(), name
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,ce_loss") and len(rows) == 3
    resolved = json.loads((out / "resolved-config.json").read_text())
    assert resolved["train"]["lr"] == 0.001 and resolved["train"]["weights"]["threshold"] == 0.968
    assert resolved["model"]["bn_momentum"] == 0.01
    assert resolved["augment"]["source"]["translate_range"] == 2


def test_train_is_reproducible_and_resolved_config_replays(trained, tmp_path, capsys):
    code, _, _ = run(["train", "--config", trained / "cfg.json", "--out", tmp_path / "again"], capsys)
    assert code == 0
    ref = (trained / "out" / "metrics.csv").read_bytes()
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == ref
    code, _, _ = run(["train", "--config", trained / "out" / "resolved-config.json", "--out", tmp_path / "replay"], capsys)
    assert code == 0
    assert (tmp_path / "replay" / "metrics.csv").read_bytes() == ref


def test_seed_override_changes_run(trained, tmp_path, capsys):
    code, _, _ = run(["train", "--config", trained / "cfg.json", "--out", tmp_path / "s", "--seed", 11], capsys)
    assert code == 0
    assert json.loads((tmp_path / "s" / "resolved-config.json").read_text())["train"]["seed"] == 11
    assert (tmp_path / "s" / "metrics.csv").read_bytes() != (trained / "out" / "metrics.csv").read_bytes()


def test_missing_config_exit_2(tmp_path, capsys):
    code, _, err = run(["train", "--config", tmp_path / "nope.json"], capsys)
    assert code == 2
    assert "nope.json" in err and len(err.strip().splitlines()) == 1


@pytest.mark.parametrize(
    "doc,needle",
    [
        ({"data": {"synthetic": SYNTH}, "trian": {}}, "trian"),
        ({"data": {"synthetic": SYNTH}, "train": {"lr": 0.1, "epoch": 3}}, "epoch"),
        ({"data": {"synthetic": {**SYNTH, "noise": 1}}}, "noise"),
        ({"data": {"synthetic": SYNTH}, "model": {"architecture": "resnet"}}, "architecture"),
        ({"data": {"synthetic": SYNTH}, "augment": {"preset": "tf", "source": {"sigma": 1}}}, "sigma"),
        ({"data": {"synthetic": SYNTH}, "train": {"weights": {"threshold": 2}}}, "threshold"),
        ({"model": {}}, "data"),
        ({"data": {}}, "synthetic"),
    ],
)
def test_strict_config_errors(tmp_path, capsys, doc, needle):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    code, _, err = run(["train", "--config", p, "--out", tmp_path / "o"], capsys)
    assert code == 2
    assert needle in err and len(err.strip().splitlines()) == 1


def test_invalid_json_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{\"data\": ")
    code, _, err = run(["train", "--config", p], capsys)
    assert code == 2 and "invalid JSON" in err


def test_numeric_abort_exit_3(tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise trainer.TrainingAborted("numeric failure at epoch 1, iteration 1: non-finite loss")

    monkeypatch.setattr(trainer, "run_training", boom)
    code, _, err = run(["train", "--config", write_config(tmp_path / "c.json"), "--out", tmp_path / "o"], capsys)
    assert code == 3 and "epoch 1, iteration 1" in err


def test_numeric_abort_from_real_divergence(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", train={"epochs": 2, "batch_size": 32, "lr": 1e38})
    code, _, err = run(["train", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 3 and "numeric failure" in err


def test_eval_both_networks(trained, capsys):
    for net in ("teacher", "student"):
        code, out, _ = run(["eval", "--checkpoint", trained / "out" / "final.ckpt", "--network", net], capsys)
        assert code == 0
        res = json.loads(out)
        assert res["network"] == net
        assert 0 <= res["accuracy"] <= 1 and 0 <= res["mean_class_accuracy"] <= 1
        conf = np.array(res["confusion"])
        assert conf.shape == (10, 10) and conf.sum() == 32
        assert res["accuracy"] == pytest.approx(np.trace(conf) / conf.sum())


def test_eval_matches_logged_metric(trained, capsys):
    code, out, _ = run(["eval", "--checkpoint", trained / "out" / "final.ckpt", "--domain", "source"], capsys)
    rows = trainer.read_metrics_csv(trained / "out" / "metrics.csv")
    assert json.loads(out)["accuracy"] == rows[-1]["teacher_src_acc"]


def test_eval_corrupt_checkpoint_exit_2(tmp_path, trained, capsys):
    blob = (trained / "out" / "final.ckpt").read_bytes()
    (tmp_path / "c.ckpt").write_bytes(blob[:100])
    code, _, err = run(["eval", "--checkpoint", tmp_path / "c.ckpt"], capsys)
    assert code == 2 and "c.ckpt" in err


def test_gen_data_then_train_matches_in_memory(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SYNTH))
    code, _, _ = run(["gen-data", "--spec", spec, "--out", tmp_path / "idx"], capsys)
    assert code == 0
    section = json.loads((tmp_path / "idx" / "data.json").read_text())
    # reference paths relative to the config file
    for role in section.values():
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            role[k] = "idx/" + role[k]
    idx_cfg = write_config(tmp_path / "idx.json", data=section)
    mem_cfg = write_config(tmp_path / "mem.json")
    a_src, a_tgt = build_domains(RunConfig.load(idx_cfg))
    b_src, b_tgt = build_domains(RunConfig.load(mem_cfg))
    for x, y in ((a_src.train, b_src.train), (a_src.test, b_src.test), (a_tgt.train, b_tgt.train), (a_tgt.test, b_tgt.test)):
        assert x.images.tobytes() == y.images.tobytes()
        assert x.labels.tolist() == y.labels.tolist()
    assert run(["train", "--config", idx_cfg, "--out", tmp_path / "a"], capsys)[0] == 0
    assert run(["train", "--config", mem_cfg, "--out", tmp_path / "b"], capsys)[0] == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_idx_config_with_preparation(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (12, 28, 28), dtype=np.uint8)
    labels = (np.arange(12) % 3).astype(np.uint8)
    for role in ("s", "t"):
        data.write_idx(tmp_path / f"{role}-i.idx", imgs)
        data.write_idx(tmp_path / f"{role}-l.idx", labels)
    prep = [{"op": "pad_to", "h": 32, "w": 32}, {"op": "replicate_channels", "c": 3}, {"op": "filter_classes", "keep": [0, 2]}]
    doc = {"data": {r: {"train_images": f"{p}-i.idx", "train_labels": f"{p}-l.idx", "prepare": prep}
                    for r, p in (("source", "s"), ("target", "t"))}}
    src, tgt = build_domains(RunConfig.from_dict(doc, tmp_path))
    assert src.train.shape == (32, 32, 3) and src.train.class_count == 2 and len(src.train) == 8
    assert abs(src.train.images.mean()) < 1e-5


def test_idx_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"data": {"source": {"train_images": "a.idx"}}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"data": {"synthetic": SYNTH, "source": {"train_images": "a"}, "target": {"train_images": "b"}}})


def test_preview_aug_off_is_identical(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", augment={"preset": "off"})
    code, _, _ = run(["preview-aug", "--config", cfg, "--out", tmp_path / "p", "--count", 9], capsys)
    assert code == 0
    before = augment.read_pgm(tmp_path / "p" / "before.pgm")
    after = augment.read_pgm(tmp_path / "p" / "after.pgm")
    assert before.shape == (3 * 17 - 1, 3 * 17 - 1)
    np.testing.assert_array_equal(before, after)


def test_preview_aug_tfa_changes_images(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", augment={"preset": "tfa"})
    assert run(["preview-aug", "--config", cfg, "--out", tmp_path / "p", "--count", 4], capsys)[0] == 0
    assert (tmp_path / "p" / "before.pgm").read_bytes() != (tmp_path / "p" / "after.pgm").read_bytes()


def test_gradcheck_command(capsys):
    code, out, _ = run(["gradcheck", "--arch", "mlp", "--seeds", 3], capsys)
    assert code == 0
    lines = out.strip().splitlines()
    assert any("dense" in ln for ln in lines) and lines[-1].startswith("worst max_rel_err=")
    assert all(ln.endswith("ok") for ln in lines[:-1])


def test_gradcheck_failure_exit_code(capsys, monkeypatch):
    monkeypatch.setattr(cli, "GRADCHECK_TOL", 0.0)
    code, out, _ = run(["gradcheck", "--arch", "mlp", "--seeds", 1], capsys)
    assert code == 1 and "FAIL" in out


def test_unknown_subcommand_exit_2(capsys):
    assert cli.main(["frobnicate"]) == 2


def test_final_checkpoint_embeds_run_config(trained):
    ck = checkpoint.load(trained / "out" / "final.ckpt")
    assert ck.config["run"]["model"]["architecture"] == "mlp"
    assert ck.epoch == 2
