import struct

import numpy as np
import pytest

from selfens import checkpoint, models
from selfens.checkpoint import Checkpoint, CheckpointError
from selfens.trainer import init_pair


def make_ckpt(seed=0, with_best=True):
    spec = models.mlp((4, 4, 1), 3, hidden=5)
    student, teacher = init_pair(spec, seed)
    rng = np.random.default_rng(seed)
    for p in student.params.values():
        p.adam_m[...] = rng.standard_normal(p.value.shape)
        p.adam_v[...] = rng.random(p.value.shape)
    for b in student.buffers.values():
        b[...] = rng.random(b.shape)
    student.step_count = 17
    ck = Checkpoint(spec, student, teacher, epoch=3, seed=seed, config={"train": {"lr": 0.001}},
                    history=[{"epoch": 1, "pass_rate": 0.25}], best_pass_rate=0.25, best_epoch=1)
    if with_best:
        ck.best = ck.copy()
        ck.best.epoch = 1
    return ck


def assert_same(a: Checkpoint, b: Checkpoint):
    assert a.spec == b.spec
    assert (a.epoch, a.seed, a.config, a.history) == (b.epoch, b.seed, b.config, b.history)
    assert (a.best_pass_rate, a.best_epoch) == (b.best_pass_rate, b.best_epoch)
    for sa, sb in ((a.student, b.student), (a.teacher, b.teacher)):
        assert sa.step_count == sb.step_count and sa.with_moments == sb.with_moments
        assert list(sa.params) == list(sb.params)
        for k in sa.params:
            assert sa.params[k].value.tobytes() == sb.params[k].value.tobytes()
            assert sa.params[k].value.dtype == sb.params[k].value.dtype
            if sa.with_moments:
                assert sa.params[k].adam_m.tobytes() == sb.params[k].adam_m.tobytes()
                assert sa.params[k].adam_v.tobytes() == sb.params[k].adam_v.tobytes()
        for k in sa.buffers:
            assert sa.buffers[k].tobytes() == sb.buffers[k].tobytes()


def test_round_trip_is_bit_exact(tmp_path):
    ck = make_ckpt()
    checkpoint.save(tmp_path / "a.ckpt", ck)
    back = checkpoint.load(tmp_path / "a.ckpt")
    assert_same(ck, back)
    assert_same(ck.best, back.best)
    assert back.teacher.with_moments is False


def test_save_load_save_byte_identical(tmp_path):
    checkpoint.save(tmp_path / "a.ckpt", make_ckpt(seed=5))
    checkpoint.save(tmp_path / "b.ckpt", checkpoint.load(tmp_path / "a.ckpt"))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_float64_stores_round_trip():
    ck = make_ckpt(with_best=False)
    ck.student = ck.student.astype(np.float64)
    ck.teacher = ck.teacher.astype(np.float64)
    assert_same(ck, checkpoint.from_bytes(checkpoint.to_bytes(ck)))


def test_bumped_version_rejected():
    blob = bytearray(checkpoint.to_bytes(make_ckpt()))
    struct.pack_into("<I", blob, len(checkpoint.MAGIC), checkpoint.VERSION + 1)
    with pytest.raises(CheckpointError, match="version 2"):
        checkpoint.from_bytes(bytes(blob))


@pytest.mark.parametrize(
    "mangle",
    [lambda b: b"NOTACKPT" + b[8:], lambda b: b[:40], lambda b: b[:-8], lambda b: b[:30] + b"{" + b[31:], lambda b: b""],
    ids=["magic", "header-cut", "payload-cut", "json", "empty"],
)
def test_corrupt_files_rejected(mangle):
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(mangle(checkpoint.to_bytes(make_ckpt())))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        checkpoint.load(tmp_path / "nope.ckpt")
