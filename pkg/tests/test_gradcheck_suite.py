import numpy as np
import pytest

import numeric as nm
from gradcheck_suite import CHECKS, GRADCHECK_TOLERANCE, gradcheck_suite


def test_every_check_passes():
    results, passed, seconds = gradcheck_suite(seed=0)
    assert set(results) == set(CHECKS)
    assert passed, {k: v for k, v in results.items() if v >= GRADCHECK_TOLERANCE}
    assert seconds < 120


def test_selected_checks_only():
    results, passed, _ = gradcheck_suite(names=["numeric.matmul", "fusion.cross_attention"])
    assert sorted(results) == ["fusion.cross_attention", "numeric.matmul"] and passed


def test_suite_restores_default_precision():
    with nm.precision("float32"):
        gradcheck_suite(names=["numeric.softmax"])
        assert nm.get_default_dtype() is np.float32


def test_broken_backward_is_caught(monkeypatch):
    def sigmoid_missing_factor(a):
        a = nm.as_tensor(a)
        out = 1.0 / (1.0 + np.exp(-a.data))
        return nm.Tensor._from_op(out, (a,), lambda g: (g * out,), "sigmoid")

    monkeypatch.setattr(nm, "sigmoid", sigmoid_missing_factor)
    results, passed, _ = gradcheck_suite(names=["fusion.token_gate_alpha", "numeric.matmul"])
    assert not passed
    assert results["fusion.token_gate_alpha"] > 1e-2
    assert results["numeric.matmul"] < GRADCHECK_TOLERANCE


def test_unknown_check_name():
    with pytest.raises(KeyError):
        gradcheck_suite(names=["numeric.fft"])


def test_key_bias_coordinates_name_real_tensors():
    from gradcheck_suite import TINY_VIT, _key_bias_coords
    from model import ClipMgModel
    from visual_encoder import VitConfig

    cfg = VitConfig(**TINY_VIT)
    model = ClipMgModel(vit_config=cfg, heatmap_canvas=8, num_classes=4, sigma_rel=0.5)
    names = {p.name for p in model.named_parameters().values()}
    coords = _key_bias_coords(cfg)
    assert len(coords) == cfg.depth and set(coords) <= names
    assert all(c.tolist() == list(range(cfg.width, 2 * cfg.width)) for c in coords.values())


@pytest.mark.parametrize("name", ["visual.encoder", "model.full", "model.no_gated_fusion"])
def test_attention_towers_pass(name):
    results, passed, _ = gradcheck_suite(names=[name])
    assert passed, results
