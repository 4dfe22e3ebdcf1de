import struct

import numpy as np
import pytest

from mdt import checkpoint as ckpt
from mdt.config import ConfigFileError, RunConfig, load_config, load_suite, parse_config
from mdt.network import model_config
from mdt.training import TrainConfig, init_train_state


# --------------------------------------------------------------------------
# config


def test_defaults_roundtrip_through_text():
    run = RunConfig()
    again = parse_config(run.to_text())
    assert again == run and again.fingerprint() == run.fingerprint()


def test_values_are_typed():
    run = parse_config("train.lr = 3e-4\nmodel.rel_bias = false\ndiffusion.min_snr_gamma = inf\n# comment\n\ntrain.batch = 16  # trailing\n")
    assert run.train.lr == 3e-4 and run.model.rel_bias is False
    assert run.diffusion.min_snr_gamma == float("inf") and run.train.batch == 16


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("train.lrr = 1", "unknown config key 'train.lrr'"),
        ("trainer.lr = 1", "unknown config key"),
        ("train.batch = many", "cannot parse"),
        ("version = 2", "unsupported config version"),
        ("no equals sign here", "expected 'key = value'"),
        ("model.variant = dit", "no masked pass"),
        ("model.classes = 5", "data.classes"),
        ("mask.ratio_lo = 0.9\nmask.ratio_hi = 0.1", "mask"),
    ],
)
def test_bad_configs_are_hard_errors(text, fragment):
    with pytest.raises(ConfigFileError, match=fragment):
        parse_config(text)


def test_include_and_override(tmp_path):
    (tmp_path / "base.cfg").write_text("train.lr = 0.01\ntrain.batch = 8\n")
    (tmp_path / "child.cfg").write_text("include = base.cfg\ntrain.batch = 4\n")
    run = load_config(str(tmp_path / "child.cfg"))
    assert run.train.lr == 0.01 and run.train.batch == 4


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ConfigFileError, match="nope.cfg"):
        load_config(str(tmp_path / "nope.cfg"))


def test_fingerprint_ignores_length_and_location_only():
    run = RunConfig()
    fp = run.fingerprint()
    assert run.replace(train__steps=7, run__out_dir="/elsewhere", run__name="x", train__ckpt_every=3).fingerprint() == fp
    assert run.replace(train__lr=2e-4).fingerprint() != fp
    assert run.replace(train__seed=1).fingerprint() != fp
    assert len(fp) == 64


def test_suite_file(tmp_path):
    (tmp_path / "a.cfg").write_text("train.lr = 0.01\n")
    (tmp_path / "s.suite").write_text("seeds = 0,1\neval_steps = 5,10\nrun.alpha = a.cfg\nrun.beta = a.cfg\n")
    suite = load_suite(str(tmp_path / "s.suite"))
    assert [n for n, _ in suite.entries] == ["alpha", "beta"] and suite.seeds == [0, 1] and suite.eval_steps == [5, 10]
    (tmp_path / "empty.suite").write_text("seeds = 0\n")
    with pytest.raises(ConfigFileError, match="no runs"):
        load_suite(str(tmp_path / "empty.suite"))
    (tmp_path / "bad.suite").write_text("frobnicate = 1\nrun.a = a.cfg\n")
    with pytest.raises(ConfigFileError):
        load_suite(str(tmp_path / "bad.suite"))


# --------------------------------------------------------------------------
# checkpoint container


def _state(opt="adamw", dtype="float64"):
    cfg = model_config("toy", "v2", depth=4, n2=2, dim=16, heads=2, input_size=4, freq_dim=16)
    state = init_train_state(cfg, TrainConfig(optimizer=opt, dtype=dtype, seed=3))
    rng = np.random.default_rng(0)
    for tree in state.opt.buffers.values():
        for k in tree:
            tree[k] = rng.standard_normal(tree[k].shape).astype(tree[k].dtype)
    state.data_state = {"epoch": 2, "pos": 5, "seed": 3}
    return state


@pytest.mark.parametrize("opt", ["adamw", "adan"])
@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_roundtrip_is_bit_exact(opt, dtype):
    state = _state(opt, dtype)
    for g in state.rngs.values():
        g.standard_normal(7)
    back = ckpt.to_state(ckpt.decode(ckpt.encode(ckpt.from_state(state, "f" * 64, {"config": "x = 1"}))))
    assert back.step == state.step and back.data_state == state.data_state
    for k, p in state.params.items():
        assert back.params[k].data.dtype == p.data.dtype
        np.testing.assert_array_equal(back.params[k].data, p.data)
    for buf, tree in state.opt.buffers.items():
        for k, v in tree.items():
            np.testing.assert_array_equal(back.opt.buffers[buf][k], v)
    for k, v in state.ema.items():
        np.testing.assert_array_equal(back.ema[k], v)
    for name, g in state.rngs.items():
        np.testing.assert_array_equal(back.rngs[name].standard_normal(5), g.standard_normal(5))
    assert (back.opt.kind, back.opt.count) == (state.opt.kind, state.opt.count)


def test_header_layout():
    ck = ckpt.Checkpoint("ab", 42, {"w": np.arange(6, dtype="<f4").reshape(2, 3)}, {}, {}, {})
    buf = ckpt.encode(ck)
    assert buf[:8] == b"MDTCKPT1"
    assert buf[8:10] == b"\x00\x02" and buf[10:12] == b"ab"
    assert struct.unpack(">Q", buf[12:20]) == (42,)
    assert struct.unpack(">I", buf[20:24]) == (1,)
    assert buf[24:27] == b"\x00\x01w"
    assert buf[27:29] == b"\x01\x02"  # float32 tag, rank 2
    assert struct.unpack(">II", buf[29:37]) == (2, 3)
    np.testing.assert_array_equal(np.frombuffer(buf[37:61], "<f4"), np.arange(6))
    assert struct.unpack(">Q", buf[-8:])[0] == ckpt.checksum(buf[:-8])


def test_corruption_and_truncation_are_detected():
    buf = ckpt.encode(ckpt.from_state(_state(), "fp"))
    flipped = bytearray(buf)
    flipped[len(buf) // 2] ^= 0x40
    with pytest.raises(ckpt.CheckpointError, match="checksum"):
        ckpt.decode(bytes(flipped))
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.decode(b"NOTACKPT" + buf[8:])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(buf[: len(buf) - 100])
    with pytest.raises(ckpt.CheckpointError, match="too short"):
        ckpt.decode(b"MDT")


def test_truncated_body_with_valid_checksum_reports_position():
    buf = ckpt.encode(ckpt.Checkpoint("fp", 1, {"w": np.zeros(4)}, {}, {}, {}))
    body = buf[:30]
    forged = body + struct.pack(">Q", ckpt.checksum(body))
    with pytest.raises(ckpt.CheckpointError, match="truncated while reading"):
        ckpt.decode(forged)


def test_save_is_atomic_and_loadable(tmp_path):
    path = tmp_path / "a.mdt"
    state = _state()
    ckpt.save(str(path), state, "fp")
    assert ckpt.load(str(path)).fingerprint == "fp"
    assert [p.name for p in tmp_path.iterdir()] == ["a.mdt"]
