# Copyright (c) 2026 The msumamba Authors
# SPDX-License-Identifier: Apache-2.0

import numpy as np
import pytest

import msumamba as msu


def tiny_model_config(base=8):
    cfg = msu.default_run_config()["model"]
    cfg["base_dim"] = base
    cfg["stage_dims"] = [base, 2 * base, 4 * base, 8 * base]
    cfg["encoder_depths"] = [1, 1, 1, 1]
    cfg["decoder_depths"] = [1, 1, 1, 1]
    cfg["seed"] = 3
    return cfg


def test_forward_shape_and_determinism():
    m = msu.Model.from_config(tiny_model_config())
    x = np.random.default_rng(0).uniform(-1, 1, (1, 3, 32, 32))
    y = m.forward(x)
    assert y.shape == (1, 7, 32, 32)
    assert np.array_equal(y, m.forward(x))
    assert m.num_parameters > 0


def test_forward_rejects_indivisible_input():
    m = msu.Model.from_config(tiny_model_config())
    with pytest.raises(msu.Error):
        m.forward(np.zeros((1, 3, 40, 32)))


def test_strict_config():
    cfg = tiny_model_config()
    cfg["bogus"] = 1
    with pytest.raises(msu.ConfigError):
        msu.Model.from_config(cfg)
    run = msu.default_run_config()
    run["loss"]["focal_weight"] = 0.0
    run["loss"]["dice_weight"] = 0.0
    with pytest.raises(msu.ConfigError, match="weight"):
        msu.validate_run_config(run)


def test_phantom_is_seeded():
    a_img, a_mask = msu.phantom(5)
    b_img, b_mask = msu.phantom(5)
    assert a_img.shape == (64, 64, 3) and a_img.dtype == np.uint8
    assert a_mask.shape == (64, 64)
    assert np.array_equal(a_img, b_img) and np.array_equal(a_mask, b_mask)
    assert a_mask.max() < 7


def test_metrics_match_hand_counts():
    gt = np.array([[0, 1], [1, 2]])
    pred = np.array([[0, 1], [2, 2]])
    rep = msu.metrics(pred, gt, 3)
    # class 1: tp 1, fn 1; class 2: tp 1, fp 1; both have dice 2/3
    assert rep["classes"][1]["DC"] == pytest.approx(66.67)
    assert rep["classes"][1]["SE"] == pytest.approx(50.0)
    assert rep["classes"][2]["PRE"] == pytest.approx(50.0)
    assert rep["macro"]["mDC"] == pytest.approx(66.67)


def test_train_checkpoint_predict(tmp_path):
    data = tmp_path / "data"
    msu.synthesize(data, 4, 7, 32, 32)
    run = msu.default_run_config()
    run["model"] = tiny_model_config()
    run.update(batch_size=2, epochs=1, max_steps=2, val_every=0, seed=5,
               dataset_root=str(data), output_dir=str(tmp_path / "run"))
    run["split"] = {"train": 1.0, "val": 0.0, "test": 0.0}
    t = msu.Trainer(run)
    steps, finished = t.run()
    assert finished and len(steps) == 2
    assert all(np.isfinite(s["loss"]) for s in steps)

    m = msu.Model.load(tmp_path / "run" / "last.ckpt")
    img = np.full((50, 50, 3), 90, dtype=np.uint8)
    mask = m.predict(img, pad_to_32=True)
    assert mask.shape == (50, 50)
    assert np.array_equal(mask, t.model.predict(img, pad_to_32=True))
    rep = m.evaluate(data)
    assert "macro" in rep


def test_bad_checkpoint(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"nope")
    with pytest.raises(msu.CheckpointError):
        msu.Model.load(p)


def test_verify_subset():
    summary = msu.verify("gradcheck", ["linear"], trials=2)
    assert summary["passed"]
    assert "linear" in msu.gradcheck_names()
