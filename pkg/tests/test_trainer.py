import numpy as np
import pytest

from reprise import netcore, trainer
from reprise.netcore import Architecture
from reprise.optim import Schedule
from reprise.simworld import VehicleKind
from reprise.trainer import TrainConfig, VehicleSchedule, make_context_input, train_model


def small(mode="labeled", **kw):
    base = dict(mode=mode, epochs=3, steps_per_epoch=100, bptt_every=20,
                schedule=Schedule.constant(1e-3), vehicle_switch_period=30, R_w=8,
                activity_reset_every=150)
    base.update(kw)
    return TrainConfig(**base)


def test_context_inputs():
    np.testing.assert_array_equal(make_context_input("labeled", VehicleKind.ROCKET), [1, 0, 0])
    np.testing.assert_array_equal(make_context_input("labeled", VehicleKind.GLIDER), [0, 0, 1])
    est = np.array([0.2, 0.5, 0.9])
    out = make_context_input("emergent", inferred=est)
    np.testing.assert_array_equal(out, est)
    assert out is not est


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="other")
    with pytest.raises(ValueError):
        TrainConfig(steps_per_epoch=100, bptt_every=30)
    with pytest.raises(ValueError):
        TrainConfig(mode="emergent", vehicle_switch_period=1, R_c=2)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochz": 3})
    with pytest.raises(ValueError):
        TrainConfig(mode="emergent", weight_context="mean")
    with pytest.raises(ValueError):
        TrainConfig(epochs=2.5)
    cfg = TrainConfig.desk(mode="emergent", random_switch=[20, 30])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.epochs == 300 and cfg.schedule == Schedule.desk()


def test_zero_epochs_returns_init():
    arch = Architecture("LSTM", 4)
    p, rep = train_model(arch, small(epochs=0))
    np.testing.assert_array_equal(p.flat(), netcore.init_weights(arch, 0).flat())
    assert rep.epoch_loss == []


@pytest.mark.parametrize("mode", ["labeled", "emergent"])
def test_training_is_bit_reproducible(mode, tmp_path):
    arch = Architecture("LSTM", 4)
    paths = []
    for k in range(2):
        p, rep = train_model(arch, small(mode))
        assert len(rep.epoch_loss) == 3 and len(rep.epoch_lr) == 3
        paths.append(tmp_path / f"loss{k}.csv")
        rep.write_csv(paths[-1])
        if k == 0:
            first = p.flat()
    assert paths[0].read_bytes() == paths[1].read_bytes()
    np.testing.assert_array_equal(first, p.flat())
    assert paths[0].read_text().splitlines()[0] == "epoch,mean_loss,lr"


def test_labeled_training_reduces_loss():
    arch = Architecture("LSTM", 6)
    _, rep = train_model(arch, small(epochs=30, steps_per_epoch=200, bptt_every=50,
                                     schedule=Schedule.constant(3e-3)))
    assert np.mean(rep.epoch_loss[-3:]) < 0.5 * np.mean(rep.epoch_loss[:3])


@pytest.mark.parametrize("kind,weight_context", [("RNN", "current"), ("LSTM", "current"),
                                                 ("LSTM", "recorded")])
def test_emergent_fast_path_matches_reference(kind, weight_context):
    arch = Architecture(kind, 5)
    cfg = small("emergent", eta_w=1e-3, weight_update_every=2, eta_sigma_train=0.01,
                weight_context=weight_context)
    a, ra = train_model(arch, cfg, fast=True)
    b, rb = train_model(arch, cfg, fast=False)
    np.testing.assert_allclose(a.flat(), b.flat(), atol=1e-12)
    np.testing.assert_allclose(ra.epoch_loss, rb.epoch_loss, rtol=1e-9)
    np.testing.assert_allclose(ra.last_contexts, rb.last_contexts, atol=1e-12)
    np.testing.assert_array_equal(ra.last_kinds, rb.last_kinds)


def test_emergent_never_sees_labels(monkeypatch):
    """True kinds drive the simulator only: scrambling the label array the
    trainer gets back changes no weight, and the context slots arrive blank."""
    arch = Architecture("LSTM", 4)
    cfg = small("emergent")
    a, ra = train_model(arch, cfg)
    original = trainer._emergent_data
    seen = []

    def scrambled(*args, **kw):
        x, deltas, kinds, vehicle = original(*args, **kw)
        seen.append(x[:, trainer.CONTEXT].copy())
        return x, deltas, (kinds + 1) % 3, vehicle

    monkeypatch.setattr(trainer, "_emergent_data", scrambled)
    b, rb = train_model(arch, cfg)
    np.testing.assert_array_equal(a.flat(), b.flat())
    np.testing.assert_array_equal(ra.epoch_loss, rb.epoch_loss)
    np.testing.assert_array_equal(ra.last_contexts, rb.last_contexts)
    assert not np.array_equal(ra.last_kinds, rb.last_kinds)
    assert all(np.all(c == 0) for c in seen)


def test_vehicle_schedule_switches_to_other_kind():
    s = VehicleSchedule(np.random.default_rng(0), 5)
    kinds = []
    for _ in range(100):
        kinds.append(s.kind)
        s.advance()
    kinds = np.array(kinds)
    changes = np.flatnonzero(kinds[1:] != kinds[:-1]) + 1
    np.testing.assert_array_equal(changes, np.arange(5, 100, 5))
    r = VehicleSchedule(np.random.default_rng(1), 0, (20, 30))
    steps, last, gaps = 0, 0, []
    for t in range(1, 1000):
        if r.advance():
            gaps.append(t - last)
            last = t
    assert min(gaps) >= 20 and max(gaps) <= 30


def test_divergence_raises():
    arch = Architecture("RNN", 3)
    bad = netcore.init_weights(arch, 0)
    bad.readout[:] = np.nan
    with pytest.raises(trainer.TrainingDiverged) as e:
        train_model(arch, small(), init=bad)
    assert len(e.value.report.epoch_loss) == 1
