import json

import numpy as np
import pytest

import beamloc


def test_geometry_round_trip():
    mics = beamloc.default_mic_positions()
    assert mics.shape == (16, 3)
    x = beamloc.azimuth_to_pixel(10.0)
    assert beamloc.pixel_to_azimuth(x) == pytest.approx(10.0)
    assert beamloc.tolerance_px(2.0) == pytest.approx(89.0, abs=1.0)


def test_beamformer_is_distortionless():
    design = beamloc.design_sdb([-30.0, 0.0, 30.0])
    assert design.weights.shape == (257, 3, 16)
    for d, az in enumerate(design.look_dirs_deg):
        assert abs(beamloc.beam_response(design, 42, d, az) - 1.0) < 1e-6
    out = design.apply(np.zeros((16, 4800)))
    assert out.shape == (3, 4800)


def test_log_mel_shape():
    rng = np.random.default_rng(0)
    img = beamloc.log_mel(rng.standard_normal(8000) * 0.1)
    assert img.shape == (64, 64)
    assert np.isfinite(img).all()


def test_loss_and_metrics():
    pos, conf, total = beamloc.loss(100.0, 1.0, True, 100.0)
    assert pos == 0.0 and total == pytest.approx(conf)
    dets = [(0, 0, 100.0, 0.9), (1, 0, 500.0, 0.1)]
    labels = [(0, 0, True, 100.0), (1, 0, False, None)]
    report = beamloc.evaluate(dets, labels)
    assert report["ap_at_2deg"] == pytest.approx(1.0)
    assert report["cls_accuracy"] == pytest.approx(1.0)


def test_errors_map_to_python():
    with pytest.raises(beamloc.Error):
        beamloc.log_mel(np.zeros(10))
    with pytest.raises(beamloc.FormatError):
        beamloc.config_hash('{"no_such_key": 1}')


def test_config_helper():
    cfg = beamloc.config(seed=5, simulate={"scene_seconds": 3.0})
    assert cfg["seed"] == 5
    assert cfg["simulate"]["scene_seconds"] == 3.0
    assert beamloc.config_hash(json.dumps(cfg)) != beamloc.config_hash("{}")


def test_simulate_writes_manifest(tmp_path):
    cfg = beamloc.config(simulate={"train_speech_scenes": 1, "train_silent_scenes": 0,
                                   "test_speech_scenes": 1, "test_silent_scenes": 0,
                                   "scene_seconds": 1.0})
    beamloc.simulate(json.dumps(cfg), tmp_path)
    manifest = json.loads((tmp_path / "dataset.json").read_text())
    assert "provenance" in manifest
    assert (tmp_path / "calibration.wav").exists()
