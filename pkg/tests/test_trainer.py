import csv
import struct

import numpy as np
import pytest

import refshape.tensor as T
import refshape.trainer as trainer
from conftest import tiny_config
from refshape.nets import NetworkConfig
from refshape.surface import MIDFACE
from refshape.tensor import Tensor
from refshape.trainer import (
    HISTORY_COLUMNS,
    Checkpoint,
    CheckpointError,
    CheckpointVersionError,
    ManifestError,
    TrainConfig,
    TrainingError,
    TrainingSet,
    batch_schedule,
    epoch_means,
    infer,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history_csv,
)


def same_state(a: Checkpoint, b: Checkpoint) -> bool:
    keys = a.params.keys()
    return (
        keys == b.params.keys()
        and all(np.array_equal(a.params[k], b.params[k]) for k in keys)
        and all(np.array_equal(a.adam_m[k], b.adam_m[k]) for k in keys)
        and all(np.array_equal(a.adam_v[k], b.adam_v[k]) for k in keys)
        and a.adam_step == b.adam_step
        and np.array_equal(a.history, b.history, equal_nan=True)
    )


@pytest.fixture(scope="module")
def two_epochs(tiny_data):
    return train(tiny_data, tiny_config(2))


# ------------------------------------------------------------------ config


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0), dict(lr=0.0), dict(checkpoint_interval=-1)])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_defaults_and_round_trip():
    c = TrainConfig()
    assert (c.epochs, c.lr, c.batch_size) == (400, 1e-4, 4)
    d = tiny_config(5, checkpoint_interval=2)
    assert TrainConfig.from_dict(d.to_dict()) == d
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 1, "bogus": 2})


def test_batch_schedule_covers_every_pair():
    batches = batch_schedule(10, 4, seed=0, epoch=3)
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    assert all(np.array_equal(a, b) for a, b in zip(batches, batch_schedule(10, 4, 0, 3)))


# ------------------------------------------------------------------ dataset


def test_training_set_validation(tiny_data):
    n = tiny_data.normals[0]
    with pytest.raises(ManifestError):
        TrainingSet([n], [], np.zeros((0, 2)))
    with pytest.raises(ManifestError):
        TrainingSet([n], list(tiny_data.patients), np.array([[5, 0]]))
    odd = n.with_vertices(n.vertices)
    object.__setattr__(odd, "landmarks", n.landmarks[::-1].copy())
    with pytest.raises(ManifestError):
        TrainingSet([n, odd], list(tiny_data.patients), np.array([[0, 0]]))
    assert len(tiny_data.pairs) == 6


def test_bad_manifest(tmp_path):
    (tmp_path / "m.json").write_text("{}")
    with pytest.raises(ManifestError):
        TrainingSet.from_manifest(tmp_path / "m.json")


# ----------------------------------------------------------------- training


def test_history_alternates_simulator_first(two_epochs):
    h = two_epochs.history
    assert h.shape == (2 * 2 * 2, len(HISTORY_COLUMNS))  # epochs x batches x nets
    assert h[0::2, 2].tolist() == [0] * 4 and h[1::2, 2].tolist() == [1] * 4
    assert np.array_equal(h[0::2, :2], h[1::2, :2])
    assert np.isfinite(h[:, 3]).all()
    assert np.isnan(h[h[:, 2] == 1][:, 4:6]).all()
    assert set(epoch_means(h, "corrector")) == {1, 2}


def test_training_is_deterministic(tiny_data, two_epochs):
    again = train(tiny_data, tiny_config(2))
    assert same_state(two_epochs, again)


def test_steps_per_network(two_epochs):
    assert set(two_epochs.adam_step.values()) == {4}  # one Adam step per network per batch


def test_simulated_bones_are_detached(tiny_data, two_epochs):
    sim, corr = two_epochs.networks()
    nrm = np.stack([n.vertices for n in tiny_data.normals[:1]])
    dfm = np.stack([p.vertices for p in tiny_data.patients[:1]])
    mask = (tiny_data.normals[0].region == 1)[None]
    with T.no_grad():
        out = sim(nrm, dfm, mask)
    assert not out.requires_grad
    loss = T.sum_squares(corr(nrm + out.data, mask))
    T.backward(loss)
    assert all(p.grad is None for p in sim.parameters())
    assert any(p.grad is not None for p in corr.parameters())


def test_non_finite_loss_aborts(tiny_data, monkeypatch):
    monkeypatch.setattr(trainer, "corrector_loss", lambda *a, **k: Tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(tiny_data, tiny_config(1))


def test_resume_matches_uninterrupted_run(tiny_data, tmp_path):
    full = train(tiny_data, tiny_config(4, checkpoint_interval=2), checkpoint_dir=tmp_path)
    mid = load_checkpoint(tmp_path / "epoch_0002.rshf")
    assert mid.epoch == 2
    resumed = train(tiny_data, tiny_config(4, checkpoint_interval=2), resume=mid)
    assert same_state(full, resumed)
    assert same_state(full, load_checkpoint(tmp_path / "final.rshf"))


def test_resume_rejects_other_network(tiny_data, two_epochs):
    other = TrainConfig(epochs=3, network=NetworkConfig.desk())
    with pytest.raises(ValueError):
        train(tiny_data, other, resume=two_epochs)
    with pytest.raises(ValueError):
        train(tiny_data, tiny_config(2), resume=two_epochs)


# --------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_forward(tiny_data, two_epochs, tmp_path):
    path = tmp_path / "c.rshf"
    save_checkpoint(two_epochs, path)
    loaded = load_checkpoint(path)
    assert loaded.config == two_epochs.config and loaded.box == two_epochs.box
    assert same_state(loaded, two_epochs)
    p = tiny_data.patients[0]
    a, _ = infer(two_epochs, p)
    b, _ = infer(loaded, p)
    assert np.array_equal(a.vertices, b.vertices)
    assert path.read_bytes()[:4] == b"RSHF"


def test_checkpoint_corruption(two_epochs, tmp_path):
    path = tmp_path / "c.rshf"
    save_checkpoint(two_epochs, path)
    data = path.read_bytes()
    (tmp_path / "cut.rshf").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.rshf")
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    (tmp_path / "flip.rshf").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "flip.rshf")
    (tmp_path / "v.rshf").write_bytes(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.rshf")
    (tmp_path / "junk.rshf").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.rshf")


def test_history_csv(two_epochs, tmp_path):
    write_history_csv(two_epochs.history, tmp_path / "h.csv")
    rows = list(csv.reader((tmp_path / "h.csv").open()))
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert len(rows) == 1 + len(two_epochs.history)
    assert rows[1][2] == "simulator" and rows[2][2] == "corrector"
    assert rows[2][4] == rows[2][5] == "" and rows[1][4] != ""


# ------------------------------------------------------------------ inference


def test_zero_head_inference_is_identity(tiny_data):
    ck = Checkpoint.fresh(tiny_config(1), tiny_data.box(), zero_head=True)
    p = tiny_data.patients[1]
    out, field = infer(ck, p)
    assert np.array_equal(out.vertices, p.vertices) and not field.vectors.any()


def test_inference_permutation_and_midface(tiny_data, two_epochs):
    p = tiny_data.patients[0]
    out, field = infer(two_epochs, p)
    mid = p.region == MIDFACE
    assert np.array_equal(out.vertices[mid], p.vertices[mid])
    perm = np.random.default_rng(0).permutation(p.n_vertices)
    out2, field2 = infer(two_epochs, p.permuted(perm))
    np.testing.assert_allclose(field2.vectors, field.vectors[perm], atol=1e-5)


def test_infer_needs_box_for_bare_network(two_epochs, tiny_data):
    with pytest.raises(ValueError):
        infer(two_epochs.corrector(), tiny_data.patients[0])
