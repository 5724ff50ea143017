import json
import math

import numpy as np
import pytest

from amcground.checkpoint import Checkpoint, decode, encode, load_checkpoint, save_checkpoint
from amcground.errors import (
    ChecksumError,
    IncompatibleVersionError,
    NumericError,
    ParseError,
    ValidationError,
)
from amcground.groundata import generate_dataset, write_dataset
from amcground.microvlm import ModelConfig
from amcground.objectives import LossConfig
from amcground.train import (
    TrainConfig,
    adam_step,
    batches,
    format_config,
    load_config,
    parse_config,
    pointing_accuracy,
    train,
)

TINY = dict(image_size=64, patch_size=16, embed_dim=8, heads=2, vision_layers=1, text_layers=1,
            fusion_layers=2, vocab_size=24, max_text_len=12, itc_proj_dim=4, mlp_ratio=2)


def tiny_cfg(**kw):
    base = dict(batch_size=4, lr=1e-3, epochs=2, model=ModelConfig(**TINY))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(0, 10, "hard"), generate_dataset(1, 4, "hard", split="val")


# --- Adam ---------------------------------------------------------------------

def scalar(x):
    return {"w": np.array([x])}


def test_adam_two_step_trace():
    # recurrences written out by hand: m_t, v_t, then bias-corrected update
    p, m, v = scalar(1.0), scalar(0.0), scalar(0.0)
    expected_p = 1.0
    em = ev = 0.0
    for t, g in ((1, 0.5), (2, -0.2)):
        p, m, v = adam_step(p, scalar(g), m, v, lr=0.1, t=t)
        em = 0.9 * em + 0.1 * g
        ev = 0.999 * ev + 0.001 * g * g
        expected_p -= 0.1 * (em / (1 - 0.9 ** t)) / (math.sqrt(ev / (1 - 0.999 ** t)) + 1e-8)
        assert m["w"][0] == pytest.approx(em, abs=1e-15)
        assert v["w"][0] == pytest.approx(ev, abs=1e-15)
        assert p["w"][0] == pytest.approx(expected_p, abs=1e-15)
    assert p["w"][0] == pytest.approx(0.86543941811651, abs=1e-12)


def test_adam_zero_gradient_and_first_step_sign():
    params = {"a": np.array([1.0, -2.0, 3.0])}
    zeros = {"a": np.zeros(3)}
    p, _, _ = adam_step(params, zeros, zeros, zeros, lr=0.1, t=1)
    assert np.array_equal(p["a"], params["a"])
    g = {"a": np.array([0.3, -4.0, 0.0])}
    p, _, _ = adam_step(params, g, zeros, zeros, lr=0.01, t=1)
    assert np.all(np.sign(p["a"] - params["a"]) == -np.sign(g["a"]))
    # the first bias-corrected step has magnitude lr for every nonzero gradient
    assert np.allclose(np.abs(p["a"] - params["a"])[:2], 0.01, atol=1e-9)


def test_adam_rejects_bad_input():
    z = {"a": np.zeros(1)}
    with pytest.raises(ValidationError):
        adam_step(z, {"b": np.zeros(1)}, z, z, 0.1, 1)
    with pytest.raises(ValidationError):
        adam_step(z, z, z, z, 0.1, 0)


# --- config -------------------------------------------------------------------

def test_config_defaults_and_invariants():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.lr, cfg.epochs) == (32, 1e-5, 10)
    assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValidationError):
        TrainConfig(lr=0.0)


def test_parse_config_round_trip():
    text = "# experiment\nbatch_size = 8\nlr = 0.001  # fast\nloss.w_amc = 0\nmodel.embed_dim = 16\n"
    cfg = parse_config(text)
    assert cfg.batch_size == 8 and cfg.lr == 1e-3 and cfg.loss.w_amc == 0.0 and cfg.model.embed_dim == 16
    assert parse_config(format_config(cfg)) == cfg


def test_parse_config_unknown_key_names_line():
    with pytest.raises(ParseError, match="line 2"):
        parse_config("lr = 0.1\nlearning_rate = 0.1\n")
    with pytest.raises(ParseError, match="line 1"):
        parse_config("batch_size = many\n")
    with pytest.raises(ParseError):
        parse_config("just words\n")


def test_load_config_resolves_relative_paths(tmp_path):
    (tmp_path / "c.cfg").write_text("train_data = data/train\ncheckpoint = /abs/out.ckpt\n")
    cfg = load_config(tmp_path / "c.cfg")
    assert cfg.train_data == str(tmp_path / "data" / "train")
    assert cfg.checkpoint == "/abs/out.ckpt"


def test_batches_drop_singletons():
    out = batches(9, 4, np.random.default_rng(0))
    assert [len(b) for b in out] == [4, 4]
    assert sorted(np.concatenate(batches(8, 4, np.random.default_rng(0)))) == list(range(8))


# --- checkpoints --------------------------------------------------------------

def sample_checkpoint():
    rng = np.random.default_rng(0)
    params = {"b": rng.standard_normal(3), "a.w": rng.standard_normal((2, 3)).astype(np.float32)}
    return Checkpoint({"model": {"embed_dim": 8}}, params,
                      {k: np.zeros_like(v) for k, v in params.items()},
                      {k: np.ones_like(v) for k, v in params.items()},
                      step=17, epoch=3, rng_state=np.random.default_rng(5).bit_generator.state)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    ckpt = sample_checkpoint()
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.step == 17 and back.epoch == 3
    assert back.params["a.w"].dtype == np.float32
    assert np.array_equal(back.params["b"], ckpt.params["b"])
    assert back.rng_state == ckpt.rng_state
    assert encode(ckpt)[:4] == b"AMCK"


def test_checkpoint_corruption():
    data = bytearray(encode(sample_checkpoint()))
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    with pytest.raises(ChecksumError):
        decode(bytes(flipped))
    with pytest.raises(ParseError):
        decode(b"NOPE" + bytes(data[4:]))
    with pytest.raises(ParseError):
        decode(bytes(data[:10]))


def test_checkpoint_version_mismatch():
    import struct
    import zlib

    data = bytearray(encode(sample_checkpoint()))
    data[4:8] = struct.pack("<I", 99)
    body = bytes(data[:-4])
    with pytest.raises(IncompatibleVersionError):
        decode(body + struct.pack("<I", zlib.crc32(body)))


# --- training loop ------------------------------------------------------------

def test_train_is_deterministic(tmp_path, tiny_data):
    tr, va = tiny_data
    out = tmp_path / "run"
    out.mkdir()
    blobs = []
    for _ in range(2):
        cfg = tiny_cfg(checkpoint=str(out / "c.ckpt"), metrics=str(out / "m.jsonl"), eval_every=1)
        train(cfg, tr, va)
        blobs.append([(out / f).read_bytes() for f in ("c.ckpt", "m.jsonl", "m.eval.jsonl")])
    assert blobs[0] == blobs[1]
    rec = json.loads((out / "m.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"step", "epoch", "l_mlm", "l_itm", "l_itc", "l_amc", "total"}


def test_resume_equals_straight_through(tmp_path, tiny_data):
    tr, _ = tiny_data
    straight = tiny_cfg(epochs=4, checkpoint=str(tmp_path / "s.ckpt"), metrics=str(tmp_path / "s.jsonl"))
    train(straight, tr)
    half = tiny_cfg(epochs=4, checkpoint=str(tmp_path / "h.ckpt"), metrics=str(tmp_path / "r.jsonl"))
    train(half, tr, until_epoch=2)
    resumed = tiny_cfg(epochs=4, resume=str(tmp_path / "h.ckpt"), checkpoint=str(tmp_path / "r.ckpt"),
                       metrics=str(tmp_path / "r.jsonl"))
    train(resumed, tr)
    a, b = load_checkpoint(tmp_path / "s.ckpt"), load_checkpoint(tmp_path / "r.ckpt")
    assert a.step == b.step and a.epoch == b.epoch == 4
    for table in ("params", "m", "v"):
        for k in getattr(a, table):
            assert getattr(a, table)[k].tobytes() == getattr(b, table)[k].tobytes()
    assert (tmp_path / "s.jsonl").read_bytes() == (tmp_path / "r.jsonl").read_bytes()


def test_w_amc_zero_matches_disabled_path(tiny_data, monkeypatch):
    from amcground import train as train_mod

    tr, _ = tiny_data
    zero = train(tiny_cfg(epochs=1, loss=LossConfig(w_amc=0.0)), tr)
    real = train_mod.make_batch
    monkeypatch.setattr(train_mod, "make_batch", lambda *a, **k: real(*a, **k)._replace(masks=None))
    disabled = train(tiny_cfg(epochs=1), tr)
    for k in zero.params:
        assert zero.params[k].data.tobytes() == disabled.params[k].data.tobytes()
    assert zero.metrics == disabled.metrics
    assert all(r["l_amc"] == 0.0 for r in zero.metrics)


def test_nan_aborts_with_term_and_step(tiny_data):
    from amcground import train as train_mod

    tr, _ = tiny_data
    cfg = tiny_cfg(epochs=1)
    state = train_mod.initial_state(cfg)
    state.params["itm.w"].data[:] = np.nan
    batch = train_mod.make_batch(tr[:4], cfg.model)
    with pytest.raises(NumericError, match=r"l_itm.*step 1"):
        train_mod.train_step(state, batch, cfg)


def test_training_reduces_matching_loss(tiny_data):
    tr, _ = tiny_data
    result = train(tiny_cfg(epochs=8, lr=3e-3, loss=LossConfig(w_amc=0.0)), tr)
    first = np.mean([r["l_itm"] for r in result.metrics[:2]])
    last = np.mean([r["l_itm"] for r in result.metrics[-2:]])
    assert abs(first - math.log(2)) < 0.2
    assert last < first


def test_train_from_files(tmp_path):
    write_dataset(tmp_path / "train", generate_dataset(0, 6, "hard"))
    write_dataset(tmp_path / "val", generate_dataset(1, 3, "hard", split="val"))
    cfg = tiny_cfg(epochs=1, train_data=str(tmp_path / "train"), val_data=str(tmp_path / "val"), eval_every=1)
    result = train(cfg)
    assert len(result.evals) == 1 and 0.0 <= result.evals[0]["pointing"] <= 1.0
    report = pointing_accuracy(result.params, generate_dataset(1, 3, "hard", split="val"))
    assert report.overall == result.evals[0]["pointing"]


def test_train_rejects_tiny_dataset(tiny_data):
    with pytest.raises(ValidationError):
        train(tiny_cfg(), tiny_data[0][:1])
