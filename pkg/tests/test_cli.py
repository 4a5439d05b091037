import json

import numpy as np
import pytest

from glyphforge.cli import main
from glyphforge.imagecore import load_image


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    rc = main(["synth", "--classes", "2", "--per-class", "5", "--out", str(root),
               "--seed", "11", "--size", "16"])
    assert rc == 0
    return root


def test_synth_writes_both_domains(corpus):
    sc = sorted((corpus / "sc").rglob("*.png"))
    pc = sorted((corpus / "pc").rglob("*.png"))
    assert len(sc) == 10 and len(pc) == 10


def test_synth_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert main(["synth", "--classes", "1", "--per-class", "3", "--out",
                     str(tmp_path / sub), "--seed", "5", "--size", "16"]) == 0
    for pa, pb in zip(sorted((tmp_path / "a").rglob("*.png")), sorted((tmp_path / "b").rglob("*.png"))):
        assert pa.read_bytes() == pb.read_bytes()


def test_warp_deterministic_and_ablations(corpus, tmp_path):
    src = str(next((corpus / "sc").rglob("*.png")))
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    assert main(["warp", "--in", src, "--out", str(a), "--seed", "4"]) == 0
    assert main(["warp", "--in", src, "--out", str(b), "--seed", "4"]) == 0
    assert a.read_bytes() == b.read_bytes()

    tps = tmp_path / "tps.png"
    aff = tmp_path / "aff.png"
    assert main(["warp", "--in", src, "--out", str(tps), "--seed", "4", "--tps-only"]) == 0
    assert main(["warp", "--in", src, "--out", str(aff), "--seed", "4", "--affine-only"]) == 0
    assert tps.read_bytes() != aff.read_bytes()
    with pytest.raises(SystemExit) as exc:
        main(["warp", "--in", src, "--out", str(tmp_path / "x.png"), "--tps-only", "--affine-only"])
    assert exc.value.code == 2  # mutually exclusive


def test_eval_identical_sets_ndb_zero(corpus, capsys):
    rc = main(["eval", "--real", str(corpus / "sc"), "--gen", str(corpus / "sc"),
               "--bins", "4", "--seed", "1", "--size", "16"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["ndb"] == 0
    assert out["jsd"] <= 1e-9
    assert out["K"] == 4


def test_train_generate_eval_pipeline(corpus, tmp_path, capsys):
    run = tmp_path / "run"
    rc = main(["train", "--sc", str(corpus / "sc"), "--pc", str(corpus / "pc"),
               "--out", str(run), "--desk-scale", "--seed", "3",
               "--image-size", "16", "--batch-size", "4",
               "--constant-iters", "6", "--decay-iters", "6", "--checkpoint-every", "6"])
    assert rc == 0
    log_lines = (run / "train_log.jsonl").read_text().strip().splitlines()
    assert len(log_lines) == 12
    for line in log_lines:
        entry = json.loads(line)
        for key in ("L_Gg", "L_Dg", "L_GXY_GYX", "L_DY_DX", "L_snr", "RER", "L_div", "L_sacyc"):
            assert np.isfinite(entry[key]), f"{key} not finite: {line}"

    src = str(next((corpus / "sc").rglob("*.png")))
    gen_dir = tmp_path / "gen"
    rc = main(["generate", "--ckpt", str(run / "latest.ckpt"), "--in", src,
               "--n", "4", "--seed", "9", "--out", str(gen_dir)])
    assert rc == 0
    outs = sorted(gen_dir.glob("*.png"))
    assert len(outs) == 4
    for p in outs:
        img = load_image(p)
        assert img.data.min() >= 0.0 and img.data.max() <= 1.0

    gen2 = tmp_path / "gen2"
    rc = main(["generate", "--ckpt", str(run / "latest.ckpt"), "--in", src,
               "--n", "4", "--seed", "9", "--out", str(gen2)])
    assert rc == 0
    for pa, pb in zip(outs, sorted(gen2.glob("*.png"))):
        assert pa.read_bytes() == pb.read_bytes()

    capsys.readouterr()
    rc = main(["eval", "--real", str(corpus / "pc"), "--gen", str(gen_dir),
               "--bins", "3", "--seed", "1", "--size", "16"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(out) == {"ndb", "K", "jsd", "diversity", "n_real", "n_gen"}

    rc = main(["losses", "--report", str(run / "train_log.jsonl"),
               "--ckpt", str(run / "ckpt_000006.ckpt"),
               "--sc", str(corpus / "sc"), "--pc", str(corpus / "pc"), "--steps", "2"])
    assert rc == 0


def test_config_file_overlay_and_flag_precedence(corpus, tmp_path, capsys):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"constant_iters": 2, "decay_iters": 2,
                                    "batch_size": 4, "image_size": 16, "channel_mult": 0.25}))
    run = tmp_path / "run"
    rc = main(["train", "--sc", str(corpus / "sc"), "--pc", str(corpus / "pc"),
               "--out", str(run), "--config", str(cfg_file), "--seed", "2",
               "--decay-iters", "1"])  # flag beats file
    assert rc == 0
    lines = (run / "train_log.jsonl").read_text().strip().splitlines()
    assert len(lines) == 3  # 2 constant + 1 decay


def test_config_file_unknown_key_rejected(corpus, tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"not_a_field": 1}))
    rc = main(["train", "--sc", str(corpus / "sc"), "--pc", str(corpus / "pc"),
               "--out", str(tmp_path / "x"), "--config", str(cfg_file)])
    assert rc == 1


def test_usage_errors_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["not-a-command"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["warp", "--in", "x.png"])  # missing --out
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--sc", "a", "--pc", "b", "--out", "c", "--unknown-flag", "1"])
    assert exc.value.code == 2


def test_runtime_errors_exit_one(tmp_path):
    assert main(["eval", "--real", str(tmp_path), "--gen", str(tmp_path)]) == 1
    assert main(["generate", "--ckpt", str(tmp_path / "none.ckpt"), "--in", "x.png",
                 "--out", str(tmp_path)]) == 1


def test_grad_check_geometry_fast():
    assert main(["grad-check", "--module", "geometry"]) == 0
