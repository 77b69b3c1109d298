import numpy as np
import pytest
import torch

from toolseg.errors import DataError, ParameterError
from toolseg.losses import ce_jaccard_loss
from toolseg.segmodel import (
    ModelConfig,
    build_model,
    flat_parameters,
    forward,
    load_checkpoint,
    parameter_count,
    predict_mask,
    probs_from_logits,
    save_checkpoint,
)


def test_probability_simplex(rng):
    model = build_model(ModelConfig(widths=(4, 8, 16)))
    probs = forward(model, rng.random((2, 16, 24, 3)).astype(np.float32))
    assert probs.shape == (2, 16, 24, 2)
    assert np.all(probs >= 0) and np.all(probs <= 1)
    assert np.abs(probs.sum(-1) - 1).max() <= 1e-5


def test_forward_is_pure(rng):
    model = build_model(ModelConfig(widths=(4, 8)))
    x = rng.random((8, 8, 3)).astype(np.float32)
    assert forward(model, x).tobytes() == forward(model, x.copy()).tobytes()


def test_batch_composition_does_not_change_outputs(rng):
    model = build_model(ModelConfig(widths=(4, 8)))
    x = rng.random((3, 8, 8, 3)).astype(np.float32)
    together = forward(model, x)
    alone = np.stack([forward(model, xi) for xi in x])
    np.testing.assert_allclose(together, alone, atol=1e-6)


def test_zero_parameters_give_uniform_output(rng):
    cfg = ModelConfig(widths=(4, 8), n_classes=2)
    model = build_model(cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    probs = forward(model, rng.random((8, 8, 3)).astype(np.float32))
    np.testing.assert_array_equal(probs, np.full((8, 8, 2), 0.5, np.float32))


def test_predict_mask_examples(rng):
    assert predict_mask(np.array([[[0.9, 0.1]]]))[0, 0] == 0
    assert predict_mask(np.array([[[0.5, 0.5]]]))[0, 0] == 0
    probs = rng.dirichlet([1, 1], size=(8, 8))
    out = predict_mask(probs)
    for i in range(8):
        for j in range(8):
            expected = 1 if probs[i, j, 1] > probs[i, j, 0] else 0
            assert out[i, j] == expected


@pytest.mark.parametrize(
    "cfg",
    [
        ModelConfig(),
        ModelConfig(widths=(4, 8)),
        ModelConfig(widths=(8,), n_classes=3),
        ModelConfig(widths=(5, 7, 11), in_channels=1),
    ],
)
def test_parameter_count_closed_form(cfg):
    model = build_model(cfg)
    assert sum(p.numel() for p in model.parameters()) == parameter_count(cfg)


def test_default_parameter_count_by_hand():
    # 4 levels, widths 16/32/64/128, RGB in, 2 classes
    enc = (3 * 16 * 9 + 16 + 16 * 16 * 9 + 16) + (16 * 32 * 9 + 32 + 32 * 32 * 9 + 32) \
        + (32 * 64 * 9 + 64 + 64 * 64 * 9 + 64) + (64 * 128 * 9 + 128 + 128 * 128 * 9 + 128)
    dec = 0
    for hi, lo in ((128, 64), (64, 32), (32, 16)):
        dec += hi * lo * 4 + lo + 2 * lo * lo * 9 + lo + lo * lo * 9 + lo
    head = 16 * 2 + 2
    assert parameter_count(ModelConfig()) == enc + dec + head


@pytest.mark.parametrize("hw", [(8, 8), (16, 32), (64, 48)])
def test_output_shape_matches_input(hw):
    model = build_model(ModelConfig(widths=(4, 8, 8, 8)))
    x = torch.zeros(1, 3, *hw)
    assert model(x).shape == (1, 2, *hw)


def test_indivisible_input_rejected():
    model = build_model(ModelConfig(widths=(4, 8, 16)))
    with pytest.raises(ParameterError):
        model(torch.zeros(1, 3, 10, 12))
    with pytest.raises(ParameterError):
        model(torch.zeros(1, 4, 8, 8))


def test_init_is_seeded():
    a = flat_parameters(build_model(ModelConfig(widths=(4, 8), init_seed=1)))
    b = flat_parameters(build_model(ModelConfig(widths=(4, 8), init_seed=1)))
    c = flat_parameters(build_model(ModelConfig(widths=(4, 8), init_seed=2)))
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_parameter_gradients_match_finite_differences():
    """Two-level model on 8x8 input; 120 randomly probed parameters."""
    torch.manual_seed(0)
    model = build_model(ModelConfig(widths=(4, 8), init_seed=3)).double()
    gen = np.random.default_rng(7)
    x = torch.from_numpy(gen.random((2, 3, 8, 8)))
    target = torch.from_numpy(gen.integers(0, 2, size=(2, 8, 8)))

    def loss_fn():
        p, logp = probs_from_logits(model(x))
        return ce_jaccard_loss(p, target, log_y_p=logp)

    model.zero_grad()
    loss_fn().backward()
    params = list(model.parameters())
    sizes = np.array([p.numel() for p in params])
    eps = 1e-4
    worst = 0.0
    for _ in range(120):
        k = gen.choice(len(params), p=sizes / sizes.sum())
        i = int(gen.integers(params[k].numel()))
        flat = params[k].data.view(-1)
        analytic = params[k].grad.view(-1)[i].item()
        old = flat[i].item()
        with torch.no_grad():
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
        numeric = (up - down) / (2 * eps)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7)
        worst = max(worst, err)
    assert worst <= 1e-3


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(ModelConfig(widths=(4, 8), init_seed=5))
    sha = save_checkpoint(tmp_path / "m.ckpt", model, step=17, meta={"mode": "SCL"})
    loaded, header = load_checkpoint(tmp_path / "m.ckpt")
    assert header["step"] == 17 and header["meta"] == {"mode": "SCL"}
    assert loaded.cfg == model.cfg
    assert flat_parameters(loaded).tobytes() == flat_parameters(model).tobytes()
    sha2 = save_checkpoint(tmp_path / "m2.ckpt", loaded, step=17, meta={"mode": "SCL"})
    assert sha == sha2
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_layout(tmp_path):
    import json
    import struct

    model = build_model(ModelConfig(widths=(4,)))
    save_checkpoint(tmp_path / "m.ckpt", model, step=0)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"TSEGCKPT"
    version, hlen = struct.unpack("<II", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    assert version == 1
    assert len(raw) == 16 + hlen + 4 * header["n_params"] + 32


def test_corrupt_checkpoint_rejected(tmp_path):
    model = build_model(ModelConfig(widths=(4,)))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, step=0)
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(DataError):
        load_checkpoint(path)
