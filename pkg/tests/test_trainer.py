import math
import os

import numpy as np
import pytest

from qdaed import checkpoint as ckpt_io
from qdaed.distill import DistillConfig, TeacherLogits
from qdaed.errors import ArgumentError, ConfigError, DataError, TrainingError
from qdaed.features import ManifestRecord, read_manifest, write_features, write_manifest
from qdaed.lstm import init_student
from qdaed.optim import Adam, clip_by_global_norm, global_norm
from qdaed.quantization import PackedIntTensor, fake_quantize, unpack
from qdaed.trainer import (
    QuantMode,
    TrainConfig,
    _pack_student,
    _student_meta,
    evaluate_checkpoint,
    export,
    inference_quantizer,
    quantize_pm,
    student_from_checkpoint,
    train,
)

SMALL = dict(hidden=8, max_epochs=2, patience=2, seed=3)


# -- optimizer -------------------------------------------------------------------


def test_adam_first_step_closed_form():
    p = {"w": np.float32([1.0, -2.0])}
    opt = Adam(p, lr=1e-3)
    opt.step({"w": np.float32([1.0, -0.5])})
    # bias-corrected m/sqrt(v) is sign(g) on the first step
    np.testing.assert_allclose(p["w"], [1.0 - 1e-3, -2.0 + 1e-3], rtol=0, atol=1e-7)


def test_adam_zero_gradient():
    p = {"w": np.float32([0.5])}
    opt = Adam(p)
    opt.step({"w": np.float32([0.0])})
    assert p["w"][0] == np.float32(0.5)
    opt.step({"w": np.float32([2.0])})
    m1 = opt.m["w"].copy()
    opt.step({"w": np.float32([0.0])})
    np.testing.assert_allclose(opt.m["w"], 0.9 * m1, rtol=1e-6)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(0)
        p = {"a": rng.standard_normal((3, 3)).astype(np.float32)}
        opt = Adam(p)
        for _ in range(20):
            opt.step({"a": rng.standard_normal((3, 3)).astype(np.float32)})
        return p["a"]

    assert np.array_equal(run(), run())


def test_global_norm_clipping():
    g = {"a": np.float32([3.0]), "b": np.float32([4.0])}
    assert global_norm(g) == 5.0
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    assert global_norm(clipped) == pytest.approx(1.0, rel=1e-6)
    same, _ = clip_by_global_norm(g, 10.0)
    assert same is g


# -- configuration -----------------------------------------------------------------


def test_quant_mode_parse():
    assert QuantMode.parse("none") == QuantMode()
    assert QuantMode.parse("qat:8") == QuantMode("qat", 8)
    assert str(QuantMode.parse("PM:4")) == "pm:4"
    for bad in ("qat:3", "qat", "int:8", "pm:x", "qat:32"):
        with pytest.raises(ConfigError):
            QuantMode.parse(bad)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(hidden=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)


def test_teacher_presence_must_match(tiny_manifest, tiny_teacher):
    with pytest.raises(ConfigError):
        train(TrainConfig(**SMALL), tiny_manifest, tiny_teacher[1])
    with pytest.raises(ConfigError):
        train(TrainConfig(distill=DistillConfig(), **SMALL), tiny_manifest, None)


def test_teacher_missing_ids(tiny_manifest, tiny_teacher):
    partial = TeacherLogits(list(tiny_teacher[1].items())[:10])
    with pytest.raises(DataError):
        train(TrainConfig(distill=DistillConfig(), **SMALL), tiny_manifest, partial)


# -- training ----------------------------------------------------------------------


def test_training_is_reproducible(tiny_manifest):
    a = train(TrainConfig(**SMALL), tiny_manifest)
    b = train(TrainConfig(**SMALL), tiny_manifest)
    assert ckpt_io.to_bytes(a) == ckpt_io.to_bytes(b)
    c = train(TrainConfig(**dict(SMALL, seed=4)), tiny_manifest)
    assert ckpt_io.to_bytes(c) != ckpt_io.to_bytes(a)


def test_qat_wiring_with_passthrough_equals_fp(tiny_manifest):
    fp = train(TrainConfig(**SMALL), tiny_manifest)
    qp = train(TrainConfig(quant=QuantMode("qat", 4), qat_passthrough=True, **SMALL), tiny_manifest)
    for k in fp.tensors:
        assert np.array_equal(fp.tensors[k], qp.tensors[k]), k
    assert fp.meta["log"] == qp.meta["log"]


def test_distill_with_zero_alpha_equals_plain(tiny_manifest, tiny_teacher):
    plain = train(TrainConfig(**SMALL), tiny_manifest)
    kd0 = train(TrainConfig(distill=DistillConfig(alpha_kd=0.0), **SMALL), tiny_manifest, tiny_teacher[1])
    for k in plain.tensors:
        assert np.array_equal(plain.tensors[k], kd0.tensors[k]), k
    assert plain.meta["log"]["loss"] == kd0.meta["log"]["loss"]


def test_distill_uses_measured_class_weights(tiny_manifest, tiny_teacher):
    ck = train(TrainConfig(distill=DistillConfig(), **SMALL), tiny_manifest, tiny_teacher[1])
    _, _, Y = tiny_manifest.load_split("train")
    expect = [(len(Y) - Y[:, c].sum()) / Y[:, c].sum() for c in range(3)]
    assert ck.meta["train"]["class_weights"] == pytest.approx(expect)


def test_validation_selection(fp_training_checkpoint):
    log = fp_training_checkpoint.meta["log"]
    assert log["best_val_eer"] == min(log["val_eer"])
    assert log["val_eer"][log["best_epoch"]] == log["best_val_eer"]


def test_best_checkpoint_reproduces_logged_eer(fp_training_checkpoint, tiny_manifest):
    rep, _, _ = evaluate_checkpoint(fp_training_checkpoint, tiny_manifest, "val")
    assert rep.avg_eer == fp_training_checkpoint.meta["log"]["best_val_eer"]


def test_early_stopping(tiny_manifest):
    ck = train(TrainConfig(hidden=8, max_epochs=50, patience=1, seed=0), tiny_manifest)
    log = ck.meta["log"]
    assert log["epochs_run"] < 50
    assert log["epochs_run"] == log["best_epoch"] + 2


def test_qat4_with_sixteen_bit_cell_stays_finite(tiny_manifest, tiny_teacher):
    ck = train(TrainConfig(hidden=16, max_epochs=20, patience=20, quant=QuantMode("qat", 4), distill=DistillConfig(), seed=1),
               tiny_manifest, tiny_teacher[1])
    assert ck.meta["log"]["epochs_run"] == 20
    assert all(math.isfinite(v) for v in ck.meta["log"]["loss"])


def test_qat4_with_four_bit_cell_does_not_crash(tiny_manifest):
    cfg = TrainConfig(hidden=16, max_epochs=5, patience=5, quant=QuantMode("qat", 4), cell_bits=4, seed=1)
    try:
        ck = train(cfg, tiny_manifest)
    except TrainingError as exc:
        assert exc.epoch is not None and exc.step is not None
    else:
        assert all(math.isfinite(v) for v in ck.meta["log"]["loss"])


def test_non_finite_loss_names_epoch_and_step(tmp_path):
    records = []
    os.makedirs(tmp_path / "f")
    rng = np.random.default_rng(0)
    for k, split in enumerate(["train"] * 6 + ["val"] * 4):
        m = rng.standard_normal((5, 64)).astype(np.float32)
        if k == 0:
            m[0, 0] = np.nan
        write_features(tmp_path / "f" / f"{k}.qdf", m)
        records.append(ManifestRecord(f"c{k}", f"f/{k}.qdf", (k % 2, 1 - k % 2), split))
    write_manifest(tmp_path / "m.tsv", records)
    with pytest.raises(TrainingError) as err:
        train(TrainConfig(hidden=4, max_epochs=2, batch_size=64), read_manifest(tmp_path / "m.tsv"))
    assert err.value.epoch == 0 and err.value.step == 0


# -- quantization at export ----------------------------------------------------------


def test_quantize_pm_outputs_lattice_weights(fp_training_checkpoint):
    pm = quantize_pm(fp_training_checkpoint, 4)
    src = student_from_checkpoint(fp_training_checkpoint).tensors()
    for name, t in pm.tensors.items():
        if name.startswith("W_"):
            assert isinstance(t, PackedIntTensor) and t.bits == 4
            assert np.array_equal(unpack(t), fake_quantize(src[name], 4))
        else:
            assert np.array_equal(t, src[name])
    assert not any(k.startswith("adam.") for k in pm.tensors)
    assert pm.meta["quant"] == {"mode": "pm", "bits": 4, "cell_bits": 16, "exported": True}


def test_quantize_pm_errors(fp_training_checkpoint, tiny_manifest):
    pm = quantize_pm(fp_training_checkpoint, 8)
    with pytest.raises(ArgumentError):
        quantize_pm(pm, 8)
    with pytest.raises(ArgumentError):
        quantize_pm(fp_training_checkpoint, 5)
    qat = train(TrainConfig(quant=QuantMode("qat", 8), **SMALL), tiny_manifest)
    with pytest.raises(ArgumentError):
        quantize_pm(qat, 8)


def test_pm16_close_to_fp(fp_training_checkpoint, tiny_manifest):
    fp, _, _ = evaluate_checkpoint(export(fp_training_checkpoint), tiny_manifest, "test")
    pm, _, _ = evaluate_checkpoint(quantize_pm(fp_training_checkpoint, 16), tiny_manifest, "test")
    assert abs(pm.avg_eer - fp.avg_eer) <= 0.005


def test_qat16_evaluation_close_to_fp(fp_training_checkpoint, tiny_manifest):
    fp, _, _ = evaluate_checkpoint(fp_training_checkpoint, tiny_manifest, "test")
    q16, _, _ = evaluate_checkpoint(fp_training_checkpoint, tiny_manifest, "test", mode="qat:16")
    assert abs(q16.avg_eer - fp.avg_eer) <= 0.01
    assert q16.mode == "qat:16"


def test_export_consistency_after_reload(fp_training_checkpoint, tiny_manifest, tmp_path):
    for bits in (4, 8):
        q = quantize_pm(fp_training_checkpoint, bits)
        before, p1, _ = evaluate_checkpoint(q, tiny_manifest, "test")
        path = tmp_path / f"q{bits}.qdck"
        ckpt_io.save(q, path)
        after, p2, _ = evaluate_checkpoint(ckpt_io.load(path), tiny_manifest, "test")
        assert np.array_equal(p1, p2)
        assert before.as_dict() == after.as_dict()


def test_qat_export_reproduces_training_forward(tiny_manifest):
    ck = train(TrainConfig(quant=QuantMode("qat", 4), **SMALL), tiny_manifest)
    shadow, _, _ = evaluate_checkpoint(ck, tiny_manifest, "val")
    exported, _, _ = evaluate_checkpoint(export(ck), tiny_manifest, "val")
    assert shadow.avg_eer == exported.avg_eer == ck.meta["log"]["best_val_eer"]
    assert all(isinstance(t, PackedIntTensor) for k, t in export(ck).tensors.items() if k.startswith("W_"))


def test_pm_mode_training_exports_packed(tiny_manifest):
    ck = train(TrainConfig(quant=QuantMode("pm", 8), **SMALL), tiny_manifest)
    assert not any(isinstance(t, PackedIntTensor) for t in ck.tensors.values())
    out = export(ck)
    assert out.meta["quant"]["mode"] == "pm" and out.meta["quant"]["bits"] == 8
    assert isinstance(out.tensors["W_f"], PackedIntTensor)


def test_packed_checkpoint_refuses_fp_evaluation(fp_training_checkpoint):
    with pytest.raises(ArgumentError):
        inference_quantizer(quantize_pm(fp_training_checkpoint, 8), "none")


def student_checkpoint(hidden):
    s = init_student(hidden, 64, 3, seed=0)
    meta = _student_meta(s, QuantMode(), 16, exported=True)
    return ckpt_io.Checkpoint(meta, dict(s.tensors()))


def test_storage_ratios_default_student():
    fp = student_checkpoint(256)
    n_fp = len(ckpt_io.to_bytes(fp))
    n8 = len(ckpt_io.to_bytes(_pack_student(fp, 8, "qat")))
    n4 = len(ckpt_io.to_bytes(_pack_student(fp, 4, "qat")))
    assert n8 / n_fp <= 0.27
    assert n4 / n_fp <= 0.14


def test_training_checkpoint_roundtrip(fp_training_checkpoint, tmp_path):
    path = tmp_path / "train.qdck"
    ckpt_io.save(fp_training_checkpoint, path)
    data = path.read_bytes()
    back = ckpt_io.load(path)
    assert ckpt_io.to_bytes(back) == data
    assert back.meta["optimizer"]["name"] == "adam"
    assert any(k.startswith("adam.m.") for k in back.tensors)
