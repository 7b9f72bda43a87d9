import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pmpnet import tensor as T
from pmpnet.errors import ConfigError, ContractError, FormatError, ParseError, TrainingAborted
from pmpnet.model import ModelConfig, build_params
from pmpnet.params import ParamStore
from pmpnet.trainer import (AdamState, Checkpoint, TrainConfig, adam_step, evaluate,
                            load_checkpoint, metrics_header, save_checkpoint, train_loop,
                            write_metrics_csv)

TINY = ModelConfig.toy(channel_scale=0.125, n_points=64, noise_dim=4, neighborhood_k=8)


def _pairs(seed, count=6):
    rng = np.random.default_rng(seed)
    partial = rng.uniform(-0.9, 0.9, (count, 64, 3))
    return partial, partial + rng.normal(0, 0.05, partial.shape)


def _params(*values):
    store = ParamStore(np.float32)
    for i, v in enumerate(values):
        store[f"p{i}"] = np.asarray(v, dtype=np.float32)
    return store


@given(st.integers(0, 200))
def test_lr_decay_law(epoch):
    cfg = TrainConfig()
    assert cfg.lr(epoch) == 1e-3 * 0.5 ** (epoch // 20)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})


def test_adam_zero_gradient_is_a_no_op():
    store = _params([1.0, -2.0])
    store["p0"].grad = np.zeros(2, dtype=np.float32)
    adam_step(store, AdamState(), 1e-3)
    np.testing.assert_array_equal(store["p0"].data, [1.0, -2.0])


def test_adam_first_step_is_minus_lr_times_sign():
    store = _params([1.0, 1.0, 1.0])
    store["p0"].grad = np.array([0.3, -7.0, 1e-3], dtype=np.float32)
    adam_step(store, AdamState(), 1e-2)
    np.testing.assert_allclose(store["p0"].data, [0.99, 1.01, 0.99], rtol=1e-5)


def test_adam_converges_on_quadratic():
    store = _params([0.0])
    state = AdamState()
    for _ in range(200):
        w = store["p0"]
        store.zero_grad()
        T.backward(T.sum(T.square(w - 3.0)), wrt=[w])
        adam_step(store, state, 0.1)
    assert abs(float(store["p0"].data[0]) - 3.0) < 1e-2


def test_adam_requires_every_gradient():
    store = _params([1.0], [2.0])
    store["p0"].grad = np.ones(1, dtype=np.float32)
    with pytest.raises(ContractError, match="p1"):
        adam_step(store, AdamState(), 1e-3)


def _checkpoint():
    partial, complete = _pairs(0)
    _, ckpt = train_loop(partial, complete, TINY, TrainConfig(epochs=1, batch_size=4))
    return ckpt


@pytest.fixture(scope="module")
def ckpt():
    return _checkpoint()


def test_checkpoint_round_trip_bit_exact(ckpt, tmp_path):
    path = tmp_path / "c.pmpc"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.model == ckpt.model and back.train == ckpt.train and back.epoch == 1
    assert back.adam.step == ckpt.adam.step
    for name, t in ckpt.params.items():
        assert np.array_equal(back.params[name].data, t.data)
        assert np.array_equal(back.adam.m[name], ckpt.adam.m[name])
    save_checkpoint(back, tmp_path / "again.pmpc")
    assert (tmp_path / "again.pmpc").read_bytes() == path.read_bytes()
    assert path.read_bytes()[:4] == b"PMPC"


def test_checkpoint_errors(ckpt, tmp_path):
    path = tmp_path / "c.pmpc"
    save_checkpoint(ckpt, path)
    raw = path.read_bytes()
    (tmp_path / "magic.pmpc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "magic.pmpc")
    (tmp_path / "ver.pmpc").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "ver.pmpc")
    for cut in (6, 20, len(raw) - 3):
        (tmp_path / "short.pmpc").write_bytes(raw[:cut])
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "short.pmpc")


def test_resume_equals_uninterrupted():
    partial, complete = _pairs(1)
    cfg = TrainConfig(epochs=3, batch_size=4, seed=5)
    full_log, full = train_loop(partial, complete, TINY, cfg)
    first_log, half = train_loop(partial, complete, TINY, cfg, until_epoch=1)
    rest_log, resumed = train_loop(partial, complete, TINY, cfg, resume=half)
    assert [r.total for r in first_log + rest_log] == [r.total for r in full_log]
    for name, t in full.params.items():
        assert np.array_equal(resumed.params[name].data, t.data)


def test_training_is_deterministic_and_logs(tmp_path):
    partial, complete = _pairs(2)
    cfg = TrainConfig(epochs=2, batch_size=4)
    bufs = []
    for _ in range(2):
        log, _ = train_loop(partial, complete, TINY, cfg)
        buf = io.StringIO()
        write_metrics_csv(log, buf, TINY.steps)
        bufs.append(buf.getvalue())
    assert bufs[0] == bufs[1]
    assert bufs[0].splitlines()[0] == "epoch,step_cd_1,step_cd_2,step_cd_3,pmd,total,lr"
    assert metrics_header(2) == ["epoch", "step_cd_1", "step_cd_2", "pmd", "total", "lr"]


def test_zero_head_first_epoch_starts_from_input_chamfer():
    from pmpnet.losses import chamfer
    partial, complete = _pairs(3, count=4)
    cfg = ModelConfig.toy(channel_scale=0.125, n_points=64, noise_dim=4, neighborhood_k=8,
                          zero_head=True)
    # lr too small to move anything within the single batch
    log, _ = train_loop(partial, complete, cfg, TrainConfig(epochs=1, batch_size=4, lr0=1e-30))
    expect = 3 * np.mean([chamfer(p, c).item() for p, c in zip(partial, complete)])
    assert log[0].total == pytest.approx(expect, rel=1e-5)
    assert log[0].pmd == 0.0


def test_non_finite_loss_aborts():
    partial, complete = _pairs(4, count=4)
    complete[0, 0, 0] = np.inf
    with pytest.raises(TrainingAborted) as err:
        train_loop(partial, complete, TINY, TrainConfig(epochs=1, batch_size=4))
    assert err.value.checkpoint is not None and err.value.checkpoint.epoch == 0


def test_evaluate_columns(ckpt):
    partial, complete = _pairs(5, count=3)
    table = evaluate(partial, complete, ckpt.params, TINY)
    assert table.rows.shape == (3, 6) and np.isfinite(table.rows).all()
    buf = io.StringIO()
    table.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "id,cd_l1,cd_l2,hausdorff,fidelity,mmd,pmd" and lines[-1].startswith("mean,")


def test_untrained_store_shapes_match_config():
    params = build_params(TINY)
    assert all(t.dtype == np.float32 for t in params.values())
    assert params.count() > 0
