import numpy as np
import pytest

from pae.backbone import (
    ViTConfig, accuracy, embed_features, encoder_block, forward_deep_prompted, init_backbone,
    init_params, load_backbone, patchify, save_backbone, FrozenBackbone,
)
from pae.mpa import fit_probe_head
from pae.synth_data import PlantedTaskSpec, generate_dataset, source_spec
from pae.tensor_core import Tape, Tensor
from pae.tensor_core.errors import ConfigError, ShapeError


def identity_backbone(seed=0):
    """Blocks whose residual branches output zero."""
    cfg = ViTConfig()
    p = init_params(cfg, seed)
    for i in range(cfg.layers):
        for k in ("attn.wo", "attn.bo", "mlp.w2", "mlp.b2"):
            p[f"blocks.{i}.{k}"] = np.zeros_like(p[f"blocks.{i}.{k}"])
    return FrozenBackbone(cfg, p).freeze()


def test_config_validation():
    with pytest.raises(ConfigError):
        ViTConfig(img_h=30)
    with pytest.raises(ConfigError):
        ViTConfig(d=30, heads=4)
    assert ViTConfig().n_patches == 64


def test_patchify_layout():
    img = np.arange(64.0).reshape(8, 8)
    p = patchify(img, 4)
    assert p.shape == (1, 4, 16)
    assert np.array_equal(p[0, 1], img[:4, 4:].ravel())


def test_forward_shapes(random_backbone, rng):
    x = rng.uniform(-1, 1, size=(3, 32, 32))
    assert forward_deep_prompted(x, None, random_backbone).shape == (3, 8)
    prompts = rng.standard_normal((4, 5, 32))
    assert forward_deep_prompted(x, prompts, random_backbone).shape == (3, 8)


def test_prompt_shape_errors(random_backbone, rng):
    x = rng.uniform(-1, 1, size=(2, 32, 32))
    with pytest.raises(ShapeError):
        forward_deep_prompted(x, rng.standard_normal((3, 4, 32)), random_backbone)
    with pytest.raises(ShapeError):
        forward_deep_prompted(x, rng.standard_normal((4, 4, 16)), random_backbone)


def test_prompts_change_output(rng):
    bb = init_backbone(ViTConfig(), 0)
    bb.params["head.w"] = rng.standard_normal((32, 8))
    bb.freeze()
    x = rng.uniform(-1, 1, size=(2, 32, 32))
    a = forward_deep_prompted(x, None, bb).data
    b = forward_deep_prompted(x, rng.standard_normal((4, 2, 32)), bb).data
    assert not np.allclose(a, b)


def test_identity_blocks_pass_tokens(rng):
    bb = identity_backbone()
    tokens = Tensor(rng.standard_normal((5, 32)))
    assert np.allclose(encoder_block(tokens, bb.constants(), 0, 4).data, tokens.data)


def test_frozen_weights_are_readonly(random_backbone):
    with pytest.raises(ValueError):
        random_backbone.params["patch.w"][0, 0] = 1.0


def test_gradients_only_reach_prompts(random_backbone, rng):
    x = rng.uniform(-1, 1, size=(2, 32, 32))
    prompts = [Tensor(rng.standard_normal((2, 32)), requires_grad=True) for _ in range(4)]
    with Tape() as tape:
        loss = forward_deep_prompted(x, prompts, random_backbone).sum()
    grads = tape.backward(loss, prompts)
    assert all(g.shape == (2, 32) for g in grads)
    assert all(t.grad is None for t in random_backbone.constants().values())


def test_save_load_roundtrip(tmp_path, random_backbone):
    save_backbone(random_backbone, tmp_path)
    back = load_backbone(tmp_path)
    assert back.digest() == random_backbone.digest()
    assert back.config == random_backbone.config
    assert "source_task=" in (tmp_path / "manifest.txt").read_text()


def test_pretraining_learns_source(source_backbone):
    src = generate_dataset(source_spec(0))
    logits = forward_deep_prompted(src["val"].images, None, source_backbone).data
    assert accuracy(logits, src["val"].labels) > 0.9


def test_linear_probe_separates_downstream(source_backbone):
    ds = generate_dataset(PlantedTaskSpec(n_train=512, n_val=256, n_test=0))
    probe = fit_probe_head(source_backbone, ds["train"].images, ds["train"].labels, 8, steps=500)
    feats = embed_features(source_backbone, ds["val"].images)
    assert accuracy(probe.logits(feats), ds["val"].labels) > 0.8
