import numpy as np
import pandas as pd
import pytest

from modules import autodiff as ad
from modules.checkpoint import read_checkpoint
from modules.losses import NonFiniteLossError
from modules.model import RoutedFusionDetector, aux_objective, batch_objective, parameter_groups, routing_rows
from modules.trainer import Trainer

EXPECTED_GROUPS = [
    "encoder.visual", "encoder.semantic", "encoder.mixer",
    "backbone.lidar_input", "backbone.radar_input", "backbone.shared_layers", "backbone.radar_layers",
    "backbone.fusions", "backbone.shared_bev", "backbone.radar_bev",
    "router", "head", "aux_head",
]


@pytest.fixture
def model(tiny_config):
    return RoutedFusionDetector(tiny_config)


@pytest.fixture
def batch(model, tiny_scenes):
    # a clear-weather and a heavy-snow scene
    return [model.prepare(tiny_scenes[0], scene_id=0), model.prepare(tiny_scenes[6], scene_id=6)]


def test_parameter_groups(model):
    groups = parameter_groups(model)
    assert list(groups) == EXPECTED_GROUPS
    assert sum(len(v) for v in groups.values()) == len(model.parameters())


def test_initialisation_is_seeded(tiny_config):
    a = RoutedFusionDetector(tiny_config).state_dict()
    b = RoutedFusionDetector(tiny_config).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    tiny_config.run.seed = 1
    c = RoutedFusionDetector(tiny_config).state_dict()
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_forward_shapes_and_equal_start(model, batch, tiny_vocab):
    out = model(batch[0], tiny_vocab.as_tensor())
    assert out.logits.shape == (model.anchors.count, 1)
    assert out.reg.shape == (model.anchors.count, 8)
    np.testing.assert_allclose(out.weights.as_array(), [1 / 3] * 3, atol=1e-15)
    assert out.condition.token.shape == (8,)


def test_prepare_assigns_targets(model, tiny_scenes):
    prepared = model.prepare(tiny_scenes[0], scene_id=0)
    assert prepared.targets.labels.shape == (model.anchors.count,)
    assert len(prepared.gts) == 1
    assert model.prepare(tiny_scenes[0], with_targets=False).targets is None


def test_fixed_branch_ablation(tiny_config, tiny_scenes, tiny_vocab):
    tiny_config.ablation.fixed_branch = "L"
    model = RoutedFusionDetector(tiny_config)
    out = model(model.prepare(tiny_scenes[2]), tiny_vocab.as_tensor())
    assert out.weights.as_array().tolist() == [1.0, 0.0, 0.0]


def test_fresh_batch_objective(model, batch, tiny_vocab):
    total, parts, weights = batch_objective(model, batch, tiny_vocab.as_tensor())
    row = parts.as_row()
    # equal-start routing: both centres coincide and entropy is maximal
    assert row["H_bar"] == pytest.approx(1.0, abs=1e-12)
    assert row["L_ent"] == 0.0
    assert row["L_intra"] == 0.0
    assert row["L_inter"] == pytest.approx(0.12, abs=1e-12)
    expected = row["L_det"] + 0.1 * row["L_aux"] + 0.02 * (row["L_intra"] + row["L_inter"]) + 0.01 * row["L_ent"]
    assert total.item() == pytest.approx(expected, abs=1e-12)
    assert len(weights) == 2


def test_objective_gradients_are_finite(model, batch, tiny_vocab):
    total, _, _ = batch_objective(model, batch, tiny_vocab.as_tensor())
    ad.backward(total)
    for name, param in model.named_parameters():
        assert param.grad is None or np.all(np.isfinite(param.grad)), name
    assert np.abs(model.head.cls.bias.grad).sum() > 0


def test_aux_objective_is_positive(model, batch, tiny_vocab):
    value = aux_objective(model, batch, tiny_vocab.as_tensor()).item()
    assert np.isfinite(value) and value > 0


def test_predict_returns_detections_and_weights(model, batch, tiny_vocab):
    dets, weights = model.predict(batch[0], tiny_vocab.as_tensor())
    assert isinstance(dets, list)
    assert weights.shape == (3,)
    for det in dets:
        assert det.confidence >= model.config.eval.conf_thresh


def test_routing_rows():
    rows = routing_rows([3], ["fog"], [np.full(3, 1 / 3)])
    assert rows[0]["sample_id"] == 3 and rows[0]["weather"] == "fog"
    assert rows[0]["entropy"] == pytest.approx(1.0)


def test_trainer_writes_run_folder(tiny_config, tiny_scenes, tiny_vocab, tmp_path):
    result = Trainer(tiny_config, tiny_vocab.as_tensor(), tmp_path).train(tiny_scenes)
    assert result.steps == 4
    assert len(result.epoch_losses) == 1 and result.best_epoch == 0
    for name in ("best.ckpt", "final.ckpt", "loss_log.csv", "routing_epochs.csv", "seed.txt", "resolved_config.ini"):
        assert (tmp_path / name).exists(), name
    loss_log = pd.read_csv(tmp_path / "loss_log.csv")
    assert loss_log["step"].tolist() == [0, 1, 2, 3]
    routing = pd.read_csv(tmp_path / "routing_epochs.csv")
    assert len(routing) == 7


def test_training_is_reproducible(tiny_config, tiny_scenes, tiny_vocab, tmp_path):
    for name in ("a", "b"):
        Trainer(tiny_config, tiny_vocab.as_tensor(), tmp_path / name).train(tiny_scenes)
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert (tmp_path / "a" / "loss_log.csv").read_text() == (tmp_path / "b" / "loss_log.csv").read_text()


def test_visual_pretraining_touches_only_visual_and_aux(tiny_config, tiny_scenes, tiny_vocab, tmp_path):
    tiny_config.optim.visual_pretrain_epochs = 1
    trainer = Trainer(tiny_config, tiny_vocab.as_tensor(), tmp_path)
    before = trainer.model.state_dict()
    trainer.train(tiny_scenes)
    after = read_checkpoint(tmp_path / "final.ckpt")
    for name in before:
        if not np.array_equal(before[name], after[name]):
            assert name.startswith(("encoder.visual", "aux_head")), name
    assert not np.array_equal(before["aux_head.out.weight"], after["aux_head.out.weight"])
    assert np.array_equal(before["backbone.shared_layers.0.down"], after["backbone.shared_layers.0.down"])
    assert pd.read_csv(tmp_path / "loss_log.csv").empty


def test_non_finite_loss_aborts_with_step(tiny_config, tiny_scenes, tiny_vocab, tmp_path):
    trainer = Trainer(tiny_config, tiny_vocab.as_tensor(), tmp_path)
    trainer.model.head.cls.bias.data[:] = np.nan
    with pytest.raises(NonFiniteLossError, match="step 0"):
        trainer.train(tiny_scenes)
    assert (tmp_path / "loss_log.csv").exists()
