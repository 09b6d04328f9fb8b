import numpy as np
import pytest

from camforge import fusion
from camforge.model import (
    MINIMAL_CONFIG,
    ConfigError,
    ModelConfig,
    cam_head,
    forward,
    infer_multiscale,
    init,
    load_checkpoint,
    refined_cam,
    save_checkpoint,
    state_bytes,
)
from camforge.tensor import Tensor, no_grad

SMALL = ModelConfig(image_size=32, patch_size=8, num_blocks=2, num_heads=2, embed_dim=16,
                    cnn_channels=8, num_classes=3, seed=0)


@pytest.fixture(scope="module")
def state():
    return init(SMALL)


def test_init_is_deterministic():
    assert state_bytes(init(SMALL)) == state_bytes(init(SMALL))


def test_init_seeds_differ():
    a = init(ModelConfig(**{**SMALL.__dict__, "seed": 1}))
    b = init(ModelConfig(**{**SMALL.__dict__, "seed": 2}))
    assert state_bytes(a) != state_bytes(b)


def test_heads_must_divide_embedding():
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=63, num_heads=4)


@pytest.mark.parametrize("bad", [dict(image_size=60), dict(patch_size=3, image_size=63),
                                 dict(num_classes=0), dict(num_blocks=0), dict(cnn_channels=1)])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_default_config_values():
    cfg = ModelConfig()
    assert (cfg.image_size, cfg.patch_size, cfg.num_blocks, cfg.num_heads, cfg.embed_dim, cfg.cnn_channels) == \
        (64, 8, 4, 4, 64, 32)
    assert cfg.grid == 8 and cfg.num_patches == 64


def test_forward_shapes(state, rng):
    art = forward(state, rng.uniform(size=(3, 32, 32)))
    g = SMALL.grid
    assert art.f.shape == (1, SMALL.cnn_channels, g, g)
    assert art.cam.shape == (1, SMALL.num_classes, g, g)
    assert art.tokens.shape == (1, 1 + g * g, SMALL.embed_dim)
    assert art.attention.shape == (1, SMALL.num_blocks, SMALL.num_heads, 1 + g * g, 1 + g * g)


def test_attention_rows_are_stochastic(state, rng):
    with no_grad():
        attn = forward(state, rng.uniform(size=(4, 3, 32, 32))).attention.data
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-9)
    assert attn.min() >= 0 and attn.max() <= 1


def test_wrong_image_size_rejected(state):
    with pytest.raises(ValueError, match="image size"):
        forward(state, np.zeros((3, 16, 16)))
    with pytest.raises(ValueError):
        forward(state, np.zeros((1, 32, 32)))


def test_batch_permutation(state, rng):
    images = rng.uniform(size=(3, 3, 32, 32))
    perm = [2, 0, 1]
    with no_grad():
        a = forward(state, images)
        b = forward(state, images[perm])
    for name in ("f", "cam", "tokens", "attention"):
        np.testing.assert_allclose(getattr(b, name).data, getattr(a, name).data[perm], rtol=0, atol=1e-12)


def test_forward_is_deterministic(state, rng):
    img = rng.uniform(size=(3, 32, 32))
    with no_grad():
        assert forward(state, img).cam.data.tobytes() == forward(state, img).cam.data.tobytes()


def test_cam_head_selector_zero_and_hand_value(state, rng):
    f = rng.normal(size=(SMALL.cnn_channels, 4, 4))
    w = np.zeros((SMALL.num_classes, SMALL.cnn_channels))
    w[0, 5] = 1.0
    out = cam_head(state.replace(**{"cam.w": Tensor(w)}), f).data
    np.testing.assert_array_equal(out[0], f[5])
    np.testing.assert_array_equal(out[1:], 0.0)

    tiny = state.replace(**{"cam.w": Tensor([[2.0, -1.0]])})
    assert cam_head(tiny, np.array([[[1.0]], [[3.0]]])).data.tolist() == [[[-1.0]]]


def test_cam_head_is_linear(state, rng):
    f1, f2 = rng.normal(size=(2, SMALL.cnn_channels, 4, 4))
    lhs = cam_head(state, f1 + f2).data
    rhs = cam_head(state, f1).data + cam_head(state, f2).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_refined_cam_uses_block_sum_without_noise(state, rng):
    img = rng.uniform(size=(3, 32, 32))
    with no_grad(), fusion.watch_noise() as calls:
        art = forward(state, img)
        a_star = fusion.fuse(art.attention).A_star.data[0]
        out = refined_cam(state, img)
    cam = art.cam.data[0].reshape(SMALL.num_classes, -1)
    np.testing.assert_allclose(out.reshape(SMALL.num_classes, -1), cam @ a_star.T, rtol=0, atol=1e-12)
    assert calls == []


def test_multiscale_degenerate_cases(state, rng):
    img = rng.uniform(size=(3, 32, 32))
    single = refined_cam(state, img)
    np.testing.assert_array_equal(infer_multiscale(state, img, [32]), single)
    np.testing.assert_allclose(infer_multiscale(state, img, [32, 32]), single, rtol=0, atol=1e-15)


def test_multiscale_matches_per_scale_oracle(state, rng):
    from camforge.imaging import resize_bilinear
    img = rng.uniform(size=(3, 32, 32))
    scales = [16, 32, 48]
    out = infer_multiscale(state, img, scales)
    assert out.shape == (SMALL.num_classes, SMALL.grid, SMALL.grid)
    per = [resize_bilinear(refined_cam(state, resize_bilinear(img, s), check_size=False), SMALL.grid) for s in scales]
    np.testing.assert_allclose(out, sum(per) / 3, rtol=0, atol=1e-12)


def test_multiscale_rejects_bad_scale(state):
    with pytest.raises(ValueError):
        infer_multiscale(state, np.zeros((3, 32, 32)), [30])


def test_checkpoint_round_trip(tmp_path, state):
    save_checkpoint(state, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.config == state.config
    assert state_bytes(back) == state_bytes(state)


def test_minimal_config_matches_gradient_problem_size():
    cfg = MINIMAL_CONFIG
    assert (cfg.image_size, cfg.patch_size, cfg.num_blocks, cfg.num_heads, cfg.embed_dim, cfg.cnn_channels,
            cfg.num_classes) == (16, 8, 1, 1, 8, 4, 2)
