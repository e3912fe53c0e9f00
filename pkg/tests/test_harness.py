import json

import numpy as np
import pytest
from PIL import Image

from akb.harness.cli import main
from akb.harness.config import ConfigError, ExperimentConfig, config_from_dict, load_config
from akb.harness.dataset import SplitManifest, ingest, load_images, synth_dataset
from akb.harness.experiments import (
    EVAL_HEADER,
    PlotDataError,
    emit_plotdata,
    search_knob,
)


# -- config ------------------------------------------------------------------------


def test_config_defaults():
    cfg = ExperimentConfig()
    assert cfg.snr_db == [0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0]
    assert cfg.baseline.quality == 75 and cfg.codec.train_snr_db == 10.0


@pytest.mark.parametrize(
    "data, key",
    [
        ({"bogus": 1}, "bogus"),
        ({"codec": {"widht": 3}}, "codec.widht"),
        ({"agent": {"alpha": 1, "betta": 2}}, "agent.betta"),
    ],
)
def test_config_rejects_unknown_keys(data, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        config_from_dict(data)


@pytest.mark.parametrize(
    "data",
    [
        {"schemes": ["ntscc"]},
        {"codec": {"backbone": "swin"}},
        {"entropy": {"rate_set": [0, 4, 2]}},
        {"entropy": {"eta": 0}},
        {"kb": {"kb_provider": "http"}},
        {"baseline": {"quality": 0}},
        {"snr_db": []},
        {"agent": {"action_mode": "pixel"}},
        {"agent": {"reward_baseline": "mean"}},
        {"codec": "nope"},
    ],
)
def test_config_rejects_bad_values(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_config_paths_resolve_and_must_exist(tmp_path):
    (tmp_path / "imgs").mkdir()
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"dataset": {"path": "imgs"}, "codec": {"checkpoint": "c.pt"}}))
    cfg = load_config(p)
    assert cfg.dataset.path == str(tmp_path / "imgs")
    assert cfg.codec.checkpoint == str(tmp_path / "c.pt")
    p.write_text(json.dumps({"dataset": {"path": "missing"}}))
    with pytest.raises(ConfigError, match="dataset.path"):
        load_config(p)
    p.write_text("{ not json")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(p)


# -- dataset ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("imgs")
    synth_dataset(d, 20, crop=16, seed=0)
    return d


def test_synth_dataset_deterministic(tmp_path, image_dir):
    synth_dataset(tmp_path, 3, crop=16, seed=0)
    for name in ("img_00000.png", "img_00002.png"):
        a = np.asarray(Image.open(tmp_path / name))
        assert a.shape == (16, 16, 3)
        assert np.array_equal(a, np.asarray(Image.open(image_dir / name)))


def test_ingest_split_is_seeded(image_dir, tmp_path):
    m1 = ingest(image_dir, 16, seed=3, manifest_path=tmp_path / "m.json")
    m2 = ingest(image_dir, 16, seed=3)
    m3 = ingest(image_dir, 16, seed=4)
    assert m1.to_json() == m2.to_json()
    assert m1.ids("test") != m3.ids("test")
    assert (len(m1.ids("train")), len(m1.ids("test"))) == (16, 4)
    assert not set(m1.ids("train")) & set(m1.ids("test"))
    back = SplitManifest.load(tmp_path / "m.json")
    assert back.to_json() == m1.to_json()
    X = load_images(back, "test")
    assert X.shape == (4, 16, 16, 3) and X.dtype == np.uint8


def test_ingest_counts_and_errors(image_dir, tmp_path):
    m = ingest(image_dir, 16, counts=(10, 5))
    assert [len(m.ids(s)) for s in ("train", "test", "unused")] == [10, 5, 5]
    with pytest.raises(ValueError):
        ingest(image_dir, 16, counts=(15, 10))
    one = tmp_path / "one"
    one.mkdir()
    Image.new("RGB", (8, 8)).save(one / "a.png")
    with pytest.raises(ValueError, match="at least 2"):
        ingest(one, 16)


def test_ingest_skips_undecodable(tmp_path, caplog):
    for i in range(3):
        Image.new("RGB", (20, 30), (i * 40, 0, 0)).save(tmp_path / f"{i}.png")
    (tmp_path / "bad.jpg").write_bytes(b"garbage")
    m = ingest(tmp_path, 8)
    assert [s["path"] for s in m.skipped] == ["bad.jpg"]
    assert len(m.entries) == 3
    assert "bad.jpg" in caplog.text


# -- reports ---------------------------------------------------------------------------


def test_emit_plotdata_sorts_and_splits(tmp_path):
    p = tmp_path / "eval.csv"
    p.write_text(
        ",".join(EVAL_HEADER) + "\n"
        "a,10.000000,0.1,30.0,1,5,0\n"
        "a,0.000000,0.1,20.0,1,5,0\n"
        "b,5.000000,0.1,25.0,1,5,0\n"
    )
    out = emit_plotdata([p], tmp_path / "plots")
    assert [q.name for q in out] == ["a_snr.csv", "b_snr.csv"]
    assert (tmp_path / "plots" / "a_snr.csv").read_text() == "x,y\n0.000000,20.000000\n10.000000,30.000000\n"


def test_emit_plotdata_errors(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("scheme,snr_db\na,1\n")
    with pytest.raises(PlotDataError, match="psnr_mean"):
        emit_plotdata([p], tmp_path)
    p.write_text("scheme,snr_db,psnr_mean\na,1,2\nb,2\n")
    with pytest.raises(PlotDataError, match="line 3"):
        emit_plotdata([p], tmp_path)
    p.write_text("scheme,snr_db,psnr_mean\na,1,x\n")
    with pytest.raises(PlotDataError, match="line 2"):
        emit_plotdata([p], tmp_path)


def test_search_knob():
    ks = search_knob(lambda k: k / 10, 0.0, 10.0, 0.37, 0.01, 30)
    assert ks.reachable and abs(ks.cbr - 0.37) <= 0.0037
    ks = search_knob(lambda k: k / 10, 0, 10, 0.35, 0.05, 30, integer=True)
    assert ks.knob in (3, 4) and not ks.reachable
    ks = search_knob(lambda k: 1.0, 0, 10, 0.5, 0.05, 30)
    assert not ks.reachable
    ks = search_knob(lambda k: np.log2(k), 1e-3, 16.0, 2.0, 0.01, 40, log=True)
    assert ks.reachable and ks.knob == pytest.approx(4, rel=0.03)


# -- CLI ---------------------------------------------------------------------------------


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_usage_error(capsys):
    code, _, err = _run(capsys, "no-such-command")
    assert code == 2 and json.loads(err)["error"] == "usage"


def test_cli_runtime_error_is_json(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
    code, _, err = _run(capsys, "--config", tmp_path / "c.json", "eval")
    body = json.loads(err)
    assert code == 1 and body["error"] == "ConfigError" and "bogus" in body["message"]


def test_cli_missing_checkpoint_names_scheme(capsys, tmp_path, image_dir):
    cfg = {"dataset": {"path": str(image_dir), "crop": 16}, "schemes": ["akb_jscc_no_ckb"], "output_dir": str(tmp_path)}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, _, err = _run(capsys, "--config", tmp_path / "c.json", "eval")
    assert code == 1 and "akb_jscc_no_ckb" in json.loads(err)["message"]


def test_cli_baseline(capsys, image_dir, tmp_path):
    code, out, _ = _run(capsys, "baseline", "--image", image_dir / "img_00001.png", "--snr", "14", "--save", tmp_path / "r.png")
    rep = json.loads(out)
    assert code == 0 and rep["quality"] == 75 and not rep["failed"] and rep["psnr_db"] > 20
    assert (tmp_path / "r.png").exists()
    code, out, _ = _run(capsys, "baseline", "--image", image_dir / "img_00001.png", "--snr", "0")
    assert code == 0 and json.loads(out)["failed"]


def test_cli_kb_build_and_search(capsys, image_dir, tmp_path):
    cfg = {"kb": {"kb_dim": 8}, "dataset": {"crop": 16}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    kb = tmp_path / "kb.akb"
    code, out, _ = _run(capsys, "--config", tmp_path / "c.json", "kb", "build", "--images", image_dir, "--out", kb)
    assert code == 0 and json.loads(out)["n"] == 20
    code, out, _ = _run(capsys, "--config", tmp_path / "c.json", "kb", "search", "--kb", kb, "--image", image_dir / "img_00004.png")
    res = json.loads(out)
    # stub captions are coarse, so the hit is the first entry sharing this caption
    assert code == 0 and res["entry_id"] <= "img_00004" and res["sq_distance"] == pytest.approx(0, abs=1e-9)
    assert res["side_symbols"] == 3  # ceil(log2 20) = 5 bits
    code, out, _ = _run(capsys, "--config", tmp_path / "c.json", "kb", "search", "--kb", kb, "--text", res["text"])
    assert json.loads(out)["index"] == res["index"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, image_dir):
    """A tiny end-to-end run: train codec and agent through the CLI."""
    root = tmp_path_factory.mktemp("run")
    cfg = {
        "dataset": {"path": str(image_dir), "crop": 16, "split_counts": [12, 6], "manifest": "manifest.json"},
        "codec": {"checkpoint": "codec.pt", "token_dim": 8, "reduction": 4, "width": 6, "jscc_width": 8,
                  "n_blocks": 1, "n_steps": 20, "batch_size": 4},
        "entropy": {"rate_set": [0, 1, 2, 4], "eta": 0.3},
        "agent": {"checkpoint": "agent.pt", "n_episodes": 32, "steps_per_update": 16, "minibatch_size": 8,
                  "channels": 4, "snr_choices": [0.0, 10.0]},
        "kb": {"path": "kb.akb", "kb_dim": 8},
        "sweep": {"cbr_targets": [0.065, 0.1068], "max_probes": 8},
        "snr_db": [0.0, 14.0],
        "seed": 5,
        "output_dir": "out",
    }
    path = root / "cfg.json"
    path.write_text(json.dumps(cfg))
    return root, path


def test_cli_pipeline(capsys, pipeline):
    root, cfg = pipeline
    code, out, err = _run(capsys, "--config", cfg, "train-codec")
    assert code == 0, err
    assert len(json.loads(out)["sha256"]) == 64
    code, out, err = _run(capsys, "--config", cfg, "train-agent")
    assert code == 0, err
    code, _, err = _run(capsys, "--config", cfg, "--deterministic", "eval", "--out", root / "e1.csv")
    assert code == 0, err
    code, _, err = _run(capsys, "--config", cfg, "--deterministic", "eval", "--out", root / "e2.csv")
    assert code == 0, err
    first = (root / "e1.csv").read_bytes()
    assert first == (root / "e2.csv").read_bytes()
    lines = first.decode().splitlines()
    assert lines[0] == ",".join(EVAL_HEADER)
    assert [l.split(",")[0] for l in lines[1:]] == [s for s in ExperimentConfig().schemes for _ in range(2)]
    meta = json.loads((root / "e1.meta.json").read_text())
    assert meta["jpeg_encoder"].startswith("Pillow") and len(meta["codec_checkpoint_sha256"]) == 64

    code, out, err = _run(capsys, "--config", cfg, "--deterministic", "sweep", "--schemes", "fixed_rate_jscc", "akb_jscc_no_ckb")
    assert code == 0, err
    sweep = (root / "out" / "sweep.csv").read_text().splitlines()
    assert sweep[0].endswith("cbr_target,knob,probes,unreachable") and len(sweep) == 5
    code, _, err = _run(capsys, "--config", cfg, "--deterministic", "ablate")
    assert code == 0, err
    ablate = (root / "out" / "ablate.csv").read_text().splitlines()
    no_ckb = [r for r in ablate[1:] if r.startswith("akb_jscc_no_ckb,")]
    assert all(r.endswith(",0.000000") for r in no_ckb)
    code, out, err = _run(capsys, "report", root / "e1.csv", root / "out" / "sweep.csv", "--out-dir", root / "plots")
    assert code == 0, err
    names = sorted(p.name for p in (root / "plots").iterdir())
    assert "jpeg_ldpc_snr.csv" in names and "fixed_rate_jscc_cbr.csv" in names
