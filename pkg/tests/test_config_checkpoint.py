import struct

import numpy as np
import pytest

from nasalsi.checkpoint import load_checkpoint, save_checkpoint
from nasalsi.config import RunConfig, config_hash, dump_config, parse_config, read_config, write_config
from nasalsi.errors import FormatError, ShapeError
from nasalsi.model import HEADS_FULL, HEADS_NO_EGG, ModelConfig, init_params
from nasalsi.trainer import PlateauConfig, TrainingConfig

TINY = ModelConfig(n_layers=3, input_dim=6, hidden=4, dense=4, seed=2)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = RunConfig(model=ModelConfig(hidden=16, heads=HEADS_NO_EGG),
                        train=TrainingConfig(lr=1e-3, plateau=PlateauConfig(patience=4)))
        write_config(tmp_path / "c.txt", cfg)
        assert read_config(tmp_path / "c.txt") == cfg
        assert config_hash(read_config(tmp_path / "c.txt")) == config_hash(cfg)

    def test_defaults_round_trip(self):
        assert parse_config(dump_config(RunConfig())) == RunConfig()

    def test_partial_override(self):
        cfg = parse_config("version = 1\ntrain.max_epochs = 7  # short\n")
        assert cfg.train.max_epochs == 7 and cfg.model == RunConfig().model

    def test_hash_sensitive(self):
        assert config_hash(RunConfig()) != config_hash(RunConfig(train=TrainingConfig(seed=1)))

    @pytest.mark.parametrize("text", [
        "train.lr = 0.1\n",
        "version = 2\n",
        "version = 1\ntrain.learning_rate = 0.1\n",
        "version = 1\nmodel.hidden\n",
        "version = 1\ntrain.lr = fast\n",
    ])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            parse_config(text)


class TestCheckpoint:
    def test_round_trip_float32(self, tmp_path):
        p = init_params(TINY)
        p.buffers["bn.running_mean"][:] = 0.125
        save_checkpoint(tmp_path / "m.ckpt", p, norm_stats={"f0": [80.0, 300.0]}, meta={"epoch": 3})
        q, header = load_checkpoint(tmp_path / "m.ckpt")
        assert q.config == p.config
        assert header["norm_stats"] == {"f0": [80.0, 300.0]} and header["meta"] == {"epoch": 3}
        for k in p.tensors:
            assert np.array_equal(q.tensors[k], p.tensors[k].astype(np.float32).astype(np.float64))
        assert np.all(q.buffers["bn.running_mean"] == 0.125)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "x")

    def test_bad_version(self, tmp_path):
        save_checkpoint(tmp_path / "m", init_params(TINY))
        raw = bytearray((tmp_path / "m").read_bytes())
        raw[4:8] = struct.pack("<I", 9)
        (tmp_path / "m").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(tmp_path / "m")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "m", init_params(TINY))
        (tmp_path / "m").write_bytes((tmp_path / "m").read_bytes()[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(tmp_path / "m")

    def test_head_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "m", init_params(TINY))
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "m", expected_heads=("vp",))
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "m", expected_heads=HEADS_NO_EGG)

    def test_egg_drop(self, tmp_path):
        save_checkpoint(tmp_path / "m", init_params(TINY))
        q, _ = load_checkpoint(tmp_path / "m", expected_heads=HEADS_NO_EGG, allow_egg_drop=True)
        assert q.config.heads == HEADS_NO_EGG
        assert not any("egg_env" in k for k in q.tensors)
        full, _ = load_checkpoint(tmp_path / "m", expected_heads=HEADS_FULL)
        assert full.config.heads == HEADS_FULL
