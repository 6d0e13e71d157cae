import json
import math

import numpy as np
import pytest
import yaml

from fantasyid import cli
from fantasyid.config import RunConfig, from_dict, load_config, micro_config
from fantasyid.data import gen_data, load_dataset
from fantasyid.facepipe import read_ppm, write_ppm
from fantasyid.mesh3d import ConfigError
from fantasyid.numerics import read_tensor_file
from fantasyid.train import Trainer, load_checkpoint


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory, micro_data):
    """Micro dataset, a config file for it and a 10-step CLI training run."""
    cfg, root, clips = micro_data
    work = tmp_path_factory.mktemp("cli")
    cfg_path = work / "micro.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(root), "--out", str(work / "run")]) == 0
    write_ppm(work / "ref.ppm", clips[0].first_crop)
    return cfg, root, clips, work


def test_config_round_trip(tmp_path):
    cfg = RunConfig().replace(seed=7, injection="shared")
    assert from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_config(p) == cfg and load_config(p).hash() == cfg.hash()


def test_config_rejects_unknown_and_invalid(tmp_path):
    with pytest.raises(ConfigError):
        from_dict({"learning_rate": 1.0})
    with pytest.raises(ConfigError):
        RunConfig(injection="cross")
    p = tmp_path / "bad.yaml"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(p)


def test_gen_data_counts_and_reproducible(tmp_path):
    cfg = micro_config(identities=2, clips_per_identity=2)
    a = gen_data(cfg, tmp_path / "a")
    b = gen_data(cfg, tmp_path / "b")
    assert len(a["clips"]) == 4 and a["content_hash"] == b["content_hash"]
    clips = load_dataset(tmp_path / "a", cfg)
    assert all(len(c.collection) == cfg.n_views for c in clips)


def test_micro_train_trace(micro_run):
    cfg, _, _, work = micro_run
    manifest = json.loads((work / "run" / "manifest.json").read_text())
    assert manifest["steps"] == 10 and len(manifest["loss_trace"]) == 10
    assert manifest["config_hash"] == cfg.hash()
    assert (work / "run" / "ckpt_000005.fid").exists() and (work / "run" / "ckpt_000010.fid").exists()
    assert from_dict(manifest["config"]) == cfg


def test_resume_is_bit_exact(micro_run, tmp_path):
    cfg, root, _, work = micro_run
    full = json.loads((work / "run" / "manifest.json").read_text())["loss_trace"]
    out = tmp_path / "resumed"
    assert cli.main(["train", "--config", str(work / "micro.yaml"), "--data", str(root), "--out", str(out),
                     "--resume", str(work / "run" / "ckpt_000005.fid")]) == 0
    resumed = json.loads((out / "manifest.json").read_text())["loss_trace"]
    assert resumed == full
    ta, _ = read_tensor_file(work / "run" / "checkpoint.fid")
    tb, _ = read_tensor_file(out / "checkpoint.fid")
    assert all(np.array_equal(ta[k].numpy(), tb[k].numpy()) for k in ta)


def test_resume_refuses_changed_config(micro_run):
    cfg, _, clips, work = micro_run
    with pytest.raises(ConfigError):
        Trainer.resume(work / "run" / "ckpt_000005.fid", cfg.replace(hidden=32, heads=2), clips)


def test_sample_reproducible_and_manifest(micro_run):
    cfg, root, _, work = micro_run
    args = ["sample", "--checkpoint", str(work / "run" / "checkpoint.fid"), "--reference", str(work / "ref.ppm"),
            "--mesh", str(root / "identities" / "id0" / "mesh.txt"), "--seed", "3"]
    assert cli.main(args + ["--out", str(work / "s1")]) == 0
    assert cli.main(args + ["--out", str(work / "s2")]) == 0
    m = json.loads((work / "s1" / "manifest.json").read_text())
    assert m["steps"] == cfg.sample_steps and m["seed"] == 3
    assert len(m["frames"]) == cfg.video_frames
    for name in m["frames"]:
        a, b = read_ppm(work / "s1" / name), read_ppm(work / "s2" / name)
        assert a.shape == (cfg.video_res, cfg.video_res, 3) and np.array_equal(a, b)


def test_sample_refuses_injection_mismatch(micro_run):
    _, root, _, work = micro_run
    code = cli.main(["sample", "--checkpoint", str(work / "run" / "checkpoint.fid"),
                     "--reference", str(work / "ref.ppm"), "--mesh", str(root / "identities" / "id0" / "mesh.txt"),
                     "--injection", "shared", "--out", str(work / "bad")])
    assert code == cli.EXIT_CONFIG


def test_morph_identity_setting_matches_baseline(micro_run):
    _, root, _, work = micro_run
    out = work / "morph"
    assert cli.main(["morph", "--checkpoint", str(work / "run" / "checkpoint.fid"),
                     "--reference", str(work / "ref.ppm"), "--mesh", str(root / "identities" / "id0" / "mesh.txt"),
                     "--widths", "1.0", "1.4", "--out", str(out)]) == 0
    rows = json.loads((out / "morph.json").read_text())["rows"]
    assert rows[0]["descriptor_l2"] == 0.0 and rows[0]["frame_mad"] == 0.0
    assert rows[1]["descriptor_l2"] > 0
    assert (out / "grid.ppm").exists()


def test_eval_writes_report(micro_run):
    cfg, root, _, work = micro_run
    out = work / "eval"
    assert cli.main(["eval", "--checkpoint", str(work / "run" / "checkpoint.fid"), "--data", str(root),
                     "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config_hash"] == cfg.hash()
    assert set(report["aggregates"]) == {"FID", "RS", "IFS", "FM"}


def test_exit_codes(tmp_path, micro_run):
    _, root, _, work = micro_run
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", str(work / "micro.yaml"), "--data", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "r")]) == cli.EXIT_DATA
    assert cli.main(["sample", "--checkpoint", str(tmp_path / "nope.fid"), "--reference", str(work / "ref.ppm"),
                     "--mesh", str(root / "identities" / "id0" / "mesh.txt"), "--out", str(tmp_path / "x")]) \
        == cli.EXIT_DATA


def test_null_text_rate(micro_data):
    cfg, _, clips = micro_data
    trainer = Trainer(cfg.replace(batch_size=100), clips)
    drops = []
    for _ in range(100):
        batch, _, _ = trainer.next_batch()
        drops += batch.null_mask
    n = len(drops)
    assert abs(np.mean(drops) - 0.1) < 3 * math.sqrt(0.1 * 0.9 / n)


def test_single_reference_uses_first_frame(micro_data):
    cfg, _, clips = micro_data
    multi = Trainer(cfg, clips)
    single = Trainer(cfg.replace(single_reference=True), clips)
    for _ in range(5):
        bm, _, _ = multi.next_batch()
        bs, crops, _ = single.next_batch()
        assert all(r[1] == 0 for r in single.state.ref_log[-1])
        assert [r[0] for r in single.state.ref_log[-1]] == [r[0] for r in multi.state.ref_log[-1]]
        assert np.array_equal(bm.noise.numpy(), bs.noise.numpy())


def test_checkpoint_loads_model(micro_run):
    cfg, _, _, work = micro_run
    model, header = load_checkpoint(work / "run" / "checkpoint.fid")
    assert model.cfg == cfg and header["step"] == 10 and header["injection"] == cfg.injection
