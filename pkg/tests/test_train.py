import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgmix import data as D
from dgmix import model as M
from dgmix.exceptions import (
    ChecksumError,
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    TrainingDiverged,
    UsageError,
)
from dgmix.tensorio import decode_tensors, encode_tensors, load_tensors, save_tensors
from dgmix.train import (
    SgdState,
    TrainConfig,
    TrainLog,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sgd_step,
    train,
)

TINY = dict(conv1=2, conv2=3, fc1=8, batch_size=10, log_interval=5)


@pytest.fixture(scope="module")
def micro_episode():
    base = D.sample_per_class(D.bundled_digits(), 5, seed=0)
    return D.make_episode(D.build_domains(base), 45)


# ------------------------------------------------------------------ schedule

def test_lr_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.01
    assert abs(lr_at(10000, cfg) - 0.01 * 11 ** -0.75) < 1e-15
    assert round(lr_at(10000, cfg), 6) == 0.001656
    flat = replace(cfg, lr_gamma=0.0)
    assert all(lr_at(t, flat) == 0.01 for t in (0, 10, 10 ** 6))


@settings(max_examples=50)
@given(st.integers(0, 10 ** 6), st.integers(1, 1000))
def test_lr_non_increasing(t, dt):
    cfg = TrainConfig()
    assert lr_at(t + dt, cfg) <= lr_at(t, cfg)


# ----------------------------------------------------------------------- SGD

def step(theta, g, state, lr=0.1, mu=0.0, wd=0.0):
    p = {"w": theta}
    sgd_step(p, {"w": np.array([g])}, state, lr, mu, wd)
    return p["w"]


def test_sgd_plain_step():
    state = SgdState()
    assert step(np.array([1.0]), 0.5, state)[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_zero_grad_keeps_params():
    theta = np.array([1.3])
    step(theta, 0.0, SgdState(), mu=0.9)
    assert theta[0] == 1.3


def test_sgd_momentum_two_steps():
    theta, state = np.array([1.0]), SgdState()
    step(theta, 0.5, state, mu=0.9)
    assert state.velocity["w"][0] == pytest.approx(-0.05, abs=1e-15)
    assert theta[0] == pytest.approx(0.95, abs=1e-15)
    step(theta, 0.5, state, mu=0.9)
    assert state.velocity["w"][0] == pytest.approx(-0.095, abs=1e-15)
    assert theta[0] == pytest.approx(0.855, abs=1e-15)


def test_weight_decay_shrinks_monotonically():
    theta, state = np.array([2.0, -3.0]), SgdState()
    prev = np.abs(theta).copy()
    for _ in range(20):
        sgd_step({"w": theta}, {"w": np.zeros(2)}, state, 0.1, 0.0, 0.05)
        assert np.all(np.abs(theta) < prev)
        prev = np.abs(theta).copy()


def test_bias_decay_switch():
    p = {"a.bias": np.array([1.0]), "a.weight": np.array([1.0])}
    g = {k: np.zeros(1) for k in p}
    sgd_step(p, g, SgdState(), 0.1, 0.0, 0.5, decay_biases=False)
    assert p["a.bias"][0] == 1.0 and p["a.weight"][0] < 1.0


def test_sgd_shape_mismatch():
    with pytest.raises(UsageError):
        sgd_step({"w": np.ones(2)}, {"w": np.ones(3)}, SgdState(), 0.1, 0.0, 0.0)


# -------------------------------------------------------------------- config

@pytest.mark.parametrize("key,value", [
    ("alpha", 1.5), ("alpha", -0.1), ("lam", -1.0), ("batch_size", 0), ("base_lr", 0.0),
    ("iterations", -1), ("head_scope", "trunk"), ("dtype", "float16"),
])
def test_config_rejects_by_key(key, value):
    with pytest.raises(ConfigError) as info:
        TrainConfig(**{key: value})
    assert info.value.key == key and key in str(info.value)


def test_config_digest_tracks_values():
    assert TrainConfig().digest() == TrainConfig().digest()
    assert TrainConfig().digest() != TrainConfig(alpha=0.5).digest()


# ---------------------------------------------------------------------- train

def test_zero_iterations_returns_init(micro_episode):
    cfg = TrainConfig(iterations=0, **TINY)
    res = train(cfg, micro_episode)
    ref = M.init_params(cfg.architecture(5, 10), cfg.init_seed)
    for k in ref.arrays:
        np.testing.assert_array_equal(res.params[k], ref[k])
    assert res.iteration == 0 and res.log.records == []


def test_initial_loss_with_zero_heads(micro_episode):
    cfg = TrainConfig(iterations=1, batch_size=25, head_init="zeros")
    res = train(cfg, micro_episode)
    assert abs(res.log.records[0].loss - (math.log(10) + 0.5 * math.log(5))) <= 1e-9


def test_micro_run_descends():
    base = D.sample_per_class(D.bundled_digits(), 5, seed=1)  # 50 images per domain
    ep = D.make_episode(D.build_domains(base), 45)
    res = train(TrainConfig(iterations=200, batch_size=25, log_interval=199), ep)
    first, last = res.log.records[0], res.log.records[-1]
    assert (first.iteration, last.iteration) == (0, 199)
    assert last.loss_cls < first.loss_cls


def test_training_is_deterministic(micro_episode):
    cfg = TrainConfig(iterations=12, **TINY)
    a, b = train(cfg, micro_episode), train(cfg, micro_episode)
    for k in a.params.arrays:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert a.log == b.log


def test_log_intervals_and_csv(micro_episode, tmp_path):
    res = train(TrainConfig(iterations=12, **TINY), micro_episode)
    assert [r.iteration for r in res.log.records] == [0, 5, 10, 11]
    path = tmp_path / "log.csv"
    res.log.to_csv(path)
    assert path.read_text().splitlines()[0] == "iteration,lr,loss,loss_cls,loss_dom,batch_acc"
    assert TrainLog.from_csv(path) == res.log


def test_divergence_reports_snapshot(micro_episode):
    cfg = TrainConfig(iterations=5, **TINY)
    from dgmix.train import initial_params

    params = initial_params(cfg, micro_episode)
    params.arrays["heads.bias"][0, 0] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        train(cfg, micro_episode, params)
    snap = info.value.snapshot
    assert snap["iteration"] == 0 and snap["lr"] == 0.01
    assert set(snap) >= {"iteration", "lr", "loss", "loss_cls", "loss_dom"}


def test_float32_mode_trains(micro_episode):
    res = train(TrainConfig(iterations=3, dtype="float32", **TINY), micro_episode)
    assert all(v.dtype == np.float32 for v in res.params.arrays.values())


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(micro_episode, tmp_path):
    cfg = TrainConfig(iterations=4, head_scope="fc1", branch_convs="separate", **TINY)
    res = train(cfg, micro_episode)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, res.params, res.state, cfg, res.iteration)
    ck = load_checkpoint(path)
    assert ck.config == cfg and ck.iteration == 4 and ck.params.arch == res.params.arch
    for k in res.params.arrays:
        np.testing.assert_array_equal(ck.params[k], res.params[k])
        np.testing.assert_array_equal(ck.state.velocity[k], res.state.velocity[k])


def test_checkpoint_truncated_and_corrupt(micro_episode, tmp_path):
    cfg = TrainConfig(iterations=0, **TINY)
    res = train(cfg, micro_episode)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, res.params, res.state, cfg, 0)
    blob = path.read_bytes()
    path.write_bytes(blob[:-100])
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
    flipped = bytearray(blob)
    flipped[200] ^= 1
    path.write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_resume_matches_uninterrupted(micro_episode, tmp_path):
    cfg = TrainConfig(iterations=100, **TINY)
    full = train(cfg, micro_episode)
    half = train(replace(cfg, iterations=50), micro_episode)
    path = tmp_path / "half.ckpt"
    save_checkpoint(path, half.params, half.state, cfg, half.iteration)
    ck = load_checkpoint(path)
    rest = train(ck.config, micro_episode, ck.params, ck.state, start=ck.iteration)
    for k in full.params.arrays:
        np.testing.assert_array_equal(rest.params[k], full.params[k])


# ------------------------------------------------------------------ tensorio

def test_tensor_format_round_trip(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "scalar": np.asarray(2.5), "empty": np.zeros((0, 4))}
    blob = encode_tensors(tensors, b"d" * 32)
    digest, back = decode_tensors(blob)
    assert digest == b"d" * 32 and list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        np.testing.assert_array_equal(back[k], tensors[k])
    save_tensors(tmp_path / "t", tensors)
    assert (tmp_path / "t").read_bytes() == encode_tensors(tensors)
    assert load_tensors(tmp_path / "t")[1]["a"].tolist() == tensors["a"].tolist()


def test_tensor_format_layout():
    blob = encode_tensors({"x": np.array([1.5])})
    assert blob[:8] == b"DGMXTNSR"
    assert np.frombuffer(blob[-16:-8], "<f8")[0] == 1.5


def test_tensor_format_errors():
    blob = encode_tensors({"x": np.ones(3)})
    with pytest.raises(ChecksumError):
        decode_tensors(blob[:-1])
    from dgmix.tensorio import checksum

    bad_magic = b"NOTMAGIC" + blob[8:-8]
    with pytest.raises(CheckpointError):
        decode_tensors(bad_magic + checksum(bad_magic))
    body = bytearray(blob[:-8])
    body[8] += 1  # version field
    with pytest.raises(CheckpointVersionError):
        decode_tensors(bytes(body) + checksum(bytes(body)))
