import numpy as np
import pytest

from p2det.detector import (
    AssignerSettings,
    Detection,
    LossSettings,
    Model,
    ModelConfig,
    NumericalAbort,
    SGD,
    TrainConfig,
    compute_losses,
    make_batch,
    param_stats,
    predict,
    rotated_nms,
    train,
    train_step,
)
from p2det.geometry import OrientedBox, obb_to_corners
from p2det.gradsuite import _model_check
from p2det.synthgen import SceneConfig, gen_scene
from p2det.tensor import Tensor

TINY = dict(d=8, heads=2, patch=8, encoder_depth=1, fusion_depth=1, backbone_channels=8, head_channels=8)


@pytest.fixture(scope="module")
def scfg():
    return SceneConfig(size=32, towers_per_scene=(2, 2), tower_short_edge=(3.0, 4.0))


@pytest.fixture(scope="module")
def scenes(scfg):
    return [gen_scene(scfg, i) for i in range(4)]


@pytest.fixture
def model():
    return Model(ModelConfig(**TINY), init_seed=0)


def norm(c):
    return c.norm_mean, c.norm_std


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(d=7), dict(d=8, heads=3), dict(stride=6), dict(d=0)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            ModelConfig(**bad)


class TestForward:
    def test_shapes(self, model, scenes, scfg):
        b = make_batch(scenes[:2], *norm(scfg))
        out = model.forward(b.images, b.prompts)
        G = 32 // model.cfg.stride
        assert out.logits.shape == (2, G, G)
        assert out.init_quads.shape == (2, G * G, 8)
        assert out.refined_quads.shape == (2, G * G, 8)

    def test_zero_prompts_finite(self, model, scenes, scfg):
        b = make_batch(scenes[:1], *norm(scfg))
        out = model.forward(b.images, [[]])
        assert np.all(np.isfinite(out.logits.data)) and np.all(np.isfinite(out.refined_quads.data))

    def test_indivisible_size(self, model):
        with pytest.raises(ValueError):
            model.forward(np.zeros((1, 1, 30, 30)), [[]])

    def test_prompt_list_count(self, model):
        with pytest.raises(ValueError):
            model.forward(np.zeros((2, 1, 32, 32)), [[]])

    def test_identity_cross_attention_init(self):
        rand = Model(ModelConfig(**TINY), init_seed=3).params
        eye = Model(ModelConfig(**TINY, cross_attn_init="identity"), init_seed=3).params
        touched = {k for k in eye if any(f".{a}.{w}" in k for a in ("t2i", "i2t") for w in ("wq", "wk"))}
        assert len(touched) == 4 * TINY["fusion_depth"]
        for k in touched:
            np.testing.assert_array_equal(eye[k].data, np.eye(TINY["d"]))
        assert all(eye[k].data.tobytes() == rand[k].data.tobytes() for k in set(eye) - touched)

    def test_seeded_init(self):
        a, b = Model(ModelConfig(**TINY), init_seed=3), Model(ModelConfig(**TINY), init_seed=3)
        assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)

    def test_composed_gradient(self, rng):
        results = _model_check(rng, 1e-5, 2)
        assert results and max(r.error for r in results) < 1e-4


class TestTraining:
    def test_zero_lr_leaves_params_bit_exact(self, model, scenes, scfg):
        before = {k: v.data.tobytes() for k, v in model.params.items()}
        opt = SGD(model.params, lr=0.0)
        for _ in range(3):
            train_step(model, make_batch(scenes[:2], *norm(scfg)), opt, AssignerSettings(), LossSettings())
        assert all(model.params[k].data.tobytes() == before[k] for k in before)

    def test_deterministic_trajectory(self, scenes, scfg):
        def run():
            m = Model(ModelConfig(**TINY), init_seed=1)
            h = train(m, scenes, TrainConfig(epochs=2, batch_size=2), AssignerSettings(), LossSettings(), norm(scfg))
            return [bd.total for bd in h], {k: v.data.tobytes() for k, v in m.params.items()}

        assert run() == run()

    def test_overfit_single_scene(self, scfg):
        scene = gen_scene(scfg, 0)
        assert len(scene.gts) == 2
        m = Model(ModelConfig(**TINY), init_seed=0)
        h = train(m, [scene], TrainConfig(epochs=100, batch_size=1, grad_clip=5), AssignerSettings(), LossSettings(), norm(scfg))
        windows = np.array([bd.total for bd in h]).reshape(5, 20).mean(axis=1)
        assert np.all(np.diff(windows) < 0)

    def test_full_prompt_dropout_matches_promptless_model(self, scenes, scfg):
        def run(mcfg, tcfg):
            m = Model(mcfg, init_seed=2)
            h = train(m, scenes, tcfg, AssignerSettings(), LossSettings(), norm(scfg))
            return [bd.total for bd in h], {k: v.data.tobytes() for k, v in m.params.items()}

        dropped = run(ModelConfig(**TINY), TrainConfig(epochs=2, batch_size=2, prompt_dropout=1.0))
        promptless = run(ModelConfig(**TINY, use_prompts=False), TrainConfig(epochs=2, batch_size=2))
        assert dropped == promptless

    def test_partial_prompt_dropout_changes_trajectory(self, scenes, scfg):
        def totals(p):
            m = Model(ModelConfig(**TINY), init_seed=2)
            h = train(m, scenes, TrainConfig(epochs=3, batch_size=2, prompt_dropout=p), AssignerSettings(), LossSettings(), norm(scfg))
            return [bd.total for bd in h]

        assert totals(0.5) != totals(0.0)

    def test_max_steps(self, model, scenes, scfg):
        h = train(model, scenes, TrainConfig(epochs=10, batch_size=2, max_steps=3), AssignerSettings(), LossSettings(), norm(scfg))
        assert len(h) == 3

    def test_loss_breakdown_identity(self, model, scenes, scfg):
        ls = LossSettings(lambdas=(0.5, 2.0, 1.5))
        total, bd, targets = compute_losses(model, make_batch(scenes, *norm(scfg)), AssignerSettings(), ls)
        assert bd.total == 0.5 * bd.l_cls + 2.0 * bd.l_d1 + 1.5 * bd.l_d2
        assert float(total.data) == pytest.approx(bd.total, rel=1e-12)
        assert targets.num_positive > 0

    def test_abort_carries_diagnostics(self, model, scenes, scfg):
        model.params["backbone.out.b"].data[0] = np.nan
        with pytest.raises(NumericalAbort) as info:
            train(model, scenes, TrainConfig(epochs=1, batch_size=2), AssignerSettings(), LossSettings(), norm(scfg))
        diag = info.value.diagnostics
        assert diag["step"] == 0 and "lr" in diag and diag["recent_losses"] == []
        assert diag["params"]["backbone.out.b"]["finite"] is False

    def test_param_stats(self):
        stats = param_stats({"a": Tensor(np.array([1.0, -3.0])), "b": Tensor(np.array([np.inf]))})
        assert stats["a"] == {"max_abs": 3.0, "finite": True}
        assert stats["b"] == {"max_abs": None, "finite": False}

    def test_grad_clip_bounds_step(self):
        p = {"w": Tensor(np.zeros(4))}
        p["w"].grad = np.full(4, 10.0)
        opt = SGD(p, lr=1.0, momentum=0.0, grad_clip=1.0)
        assert opt.step() == pytest.approx(20.0)
        assert np.linalg.norm(p["w"].data) == pytest.approx(1.0, abs=1e-12)


class TestInference:
    def det(self, box, score):
        return Detection(quad=obb_to_corners(box), score=score)

    def test_nms_identical_quads(self):
        b = OrientedBox(10, 10, 8, 3, 0.2)
        kept = rotated_nms([self.det(b, 0.8), self.det(b, 0.9)], 0.5)
        assert [d.score for d in kept] == [0.9]

    def test_nms_keeps_disjoint(self):
        kept = rotated_nms([self.det(OrientedBox(10, 10, 8, 3), 0.5), self.det(OrientedBox(40, 40, 8, 3), 0.7)], 0.1)
        assert [d.score for d in kept] == [0.7, 0.5]

    def test_nms_equal_scores_stable(self):
        b = OrientedBox(10, 10, 8, 3, 0.2)
        a, c = self.det(b, 0.5), self.det(b, 0.5)
        assert rotated_nms([a, c], 0.5)[0] is a

    def test_empty_when_nothing_passes(self, model, scenes, scfg):
        assert predict(model, scenes[0].image, scenes[0].prompts, norm(scfg), score_thresh=1.0) == []

    def test_detections_are_valid(self, model, scenes, scfg):
        dets = predict(model, scenes[0].image, scenes[0].prompts, norm(scfg), score_thresh=0.0, max_dets=5)
        assert 0 < len(dets) <= 5
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)
        assert all(0.0 <= s <= 1.0 for s in scores)
        assert all(d.quad.shape == (4, 2) for d in dets)
