import math

import numpy as np
import pytest
import torch
from torch import nn

from director.diffcore import (
    MLP,
    Adam,
    ConfigError,
    GRUCell,
    ImageDecoder,
    ImageEncoder,
    OptimizerConfig,
    TrainingDivergence,
    adam_update,
    load_checkpoint,
    save_checkpoint,
)

from conftest import check_gradients


# ----------------------------------------------------------------- MLP


def test_zero_mlp_outputs_bias():
    net = MLP(5, 3, layers=1, units=4)
    for p in net.parameters():
        nn.init.zeros_(p)
    with torch.no_grad():
        net.head.bias.copy_(torch.tensor([0.0, 0.0, 0.0]))
    assert torch.equal(net(torch.randn(7, 5)), torch.zeros(7, 3))


def test_layernorm_of_constant_is_zero():
    net = MLP(4, 2, layers=1, units=6)
    with torch.no_grad():
        net.hidden[0].weight.fill_(0.3)
        net.hidden[0].bias.zero_()
    hidden = net.hidden(torch.ones(1, 4))
    assert torch.allclose(hidden, torch.zeros(1, 6), atol=1e-6)


def test_mlp_width_mismatch():
    with pytest.raises(ConfigError):
        MLP(4, 2, layers=1, units=8)(torch.zeros(3, 5))


def test_mlp_nonfinite_output():
    with pytest.raises(TrainingDivergence):
        MLP(2, 1, layers=0)(torch.tensor([[math.inf, 0.0]]))


def test_mlp_gradients_match_finite_differences():
    net = MLP(4, 3, layers=3, units=5).double()
    x = torch.randn(6, 4, dtype=torch.float64)
    w = torch.randn(6, 3, dtype=torch.float64)
    params = [p for p in net.parameters()]
    err = check_gradients(lambda: (net(x) * w).sum(), params)
    assert err < 1e-2


def test_layernorm_gradients_match_finite_differences():
    norm = nn.LayerNorm(6).double()
    x = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    w = torch.randn(4, 6, dtype=torch.float64)
    assert check_gradients(lambda: (norm(x) * w).sum(), [x, norm.weight, norm.bias]) < 1e-2


# ----------------------------------------------------------------- GRU


def test_gru_zero_params_halves_hidden():
    cell = GRUCell(3, 4)
    for p in cell.parameters():
        nn.init.zeros_(p)
    h = torch.randn(2, 4)
    assert torch.allclose(cell(h, torch.randn(2, 3)), 0.5 * h)


def test_gru_all_zero():
    cell = GRUCell(3, 4)
    for p in cell.parameters():
        nn.init.zeros_(p)
    assert torch.equal(cell(torch.zeros(1, 4), torch.zeros(1, 3)), torch.zeros(1, 4))


def test_gru_matches_torch_cell():
    # torch weights h by its update gate z, ours weights the candidate by u = 1 - z.
    ours = GRUCell(3, 5)
    ref = nn.GRUCell(3, 5)
    w_ir, w_iz, w_in = ref.weight_ih.detach().chunk(3, 0)
    w_hr, w_hz, w_hn = ref.weight_hh.detach().chunk(3, 0)
    b_ir, b_iz, b_in = ref.bias_ih.detach().chunk(3)
    b_hr, b_hz, b_hn = ref.bias_hh.detach().chunk(3)
    with torch.no_grad():
        ours.w_x.copy_(torch.cat([w_ir, -w_iz, w_in]).T)
        ours.w_h.copy_(torch.cat([w_hr, -w_hz, w_hn]).T)
        ours.b_x.copy_(torch.cat([b_ir, -b_iz, b_in]))
        ours.b_h.copy_(torch.cat([b_hr, -b_hz, b_hn]))
    x, h = torch.randn(8, 3), torch.randn(8, 5)
    assert torch.allclose(ours(h, x), ref(x, h), atol=1e-6)


def test_gru_gradients_match_finite_differences():
    cell = GRUCell(3, 4).double()
    x = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    h = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    err = check_gradients(lambda: cell(h, x).sum(), [x, h, *cell.parameters()])
    assert err < 1e-2


def test_gru_width_mismatch():
    with pytest.raises(ConfigError):
        GRUCell(3, 4)(torch.zeros(1, 5), torch.zeros(1, 3))


# --------------------------------------------------------- conv paths


def test_encoder_decoder_shapes():
    enc = ImageEncoder(64, depth=4)
    dec = ImageDecoder(10, 64, depth=4)
    emb = enc(torch.rand(2, 3, 64, 64, 3))
    assert emb.shape == (2, 3, enc.out_dim)
    assert dec(torch.randn(2, 3, 10)).shape == (2, 3, 64, 64, 3)


def test_small_image_paths():
    enc = ImageEncoder(16, mlp_units=8)
    dec = ImageDecoder(5, 16, mlp_units=8)
    assert enc(torch.rand(4, 16, 16, 3)).shape == (4, 8)
    assert dec(torch.randn(4, 5)).shape == (4, 16, 16, 3)


def test_unsupported_image_size():
    with pytest.raises(ConfigError):
        ImageEncoder(32)


def test_conv_encoder_gradients_match_finite_differences():
    enc = ImageEncoder(64, depth=2).double()
    x = torch.rand(1, 64, 64, 3, dtype=torch.float64)
    w = torch.randn(1, enc.out_dim, dtype=torch.float64)
    last = enc.net[-2]
    err = check_gradients(lambda: (enc(x) * w).sum(), [last.weight, last.bias, enc.net[0].bias])
    assert err < 1e-2


def test_decoder_gradients_match_finite_differences():
    dec = ImageDecoder(6, 64, depth=2).double()
    feat = torch.randn(1, 6, dtype=torch.float64, requires_grad=True)
    target = torch.rand(1, 64, 64, 3, dtype=torch.float64)
    loss = lambda: ((dec(feat) - target) ** 2).sum()
    err = check_gradients(loss, [feat, dec.proj.bias, dec.net[-1].weight, dec.net[0].bias])
    assert err < 1e-2


# ---------------------------------------------------------------- Adam


def test_adam_first_step():
    value = torch.zeros(1)
    adam_update(value, torch.ones(1), {}, OptimizerConfig(weight_decay=0.0))
    assert value.item() == pytest.approx(-1e-4 / (1 + 1e-6), rel=1e-6)
    assert value.item() == pytest.approx(-9.999e-5, abs=1e-8)


def test_adam_zero_gradient_no_decay_is_noop():
    value = torch.tensor([0.7, -2.0])
    adam_update(value, torch.zeros(2), {}, OptimizerConfig(weight_decay=0.0))
    assert torch.equal(value, torch.tensor([0.7, -2.0]))


def test_adam_descends_quadratic():
    w = nn.Parameter(torch.ones(1))
    opt = Adam([w], OptimizerConfig(lr=0.05))
    prev = abs(w.item())
    for _ in range(10):
        opt.minimize((w ** 2).sum())
        assert abs(w.item()) < prev
        prev = abs(w.item())


def test_adam_matches_torch_adamw():
    torch.manual_seed(1)
    a = nn.Parameter(torch.randn(4, 3))
    b = nn.Parameter(a.detach().clone())
    cfg = OptimizerConfig(lr=1e-2, weight_decay=1e-2, eps=1e-6)
    ours = Adam([a], cfg)
    ref = torch.optim.AdamW([b], lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                            weight_decay=cfg.weight_decay)
    target = torch.randn(4, 3)
    for _ in range(25):
        ours.minimize(((a - target) ** 3).abs().sum())
        ref.zero_grad()
        ((b - target) ** 3).abs().sum().backward()
        ref.step()
    assert torch.allclose(a, b, atol=1e-6)


def test_adam_gradient_clipping():
    w = nn.Parameter(torch.zeros(2))
    opt = Adam([w], OptimizerConfig(grad_clip=1.0))
    w.grad = torch.tensor([30.0, 40.0])
    norm = opt.step()
    assert norm == pytest.approx(50.0)
    assert torch.allclose(opt.state[0]["m"], torch.tensor([0.06, 0.08]), atol=1e-6)


def test_optimizer_config_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(lr=0)
    with pytest.raises(ConfigError):
        OptimizerConfig(grad_clip=-1.0)


# ---------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    tensors = {"a/b": torch.randn(3, 4), "scalar": torch.tensor(2.5), "empty": torch.zeros(0, 2)}
    meta = {"step": 7, "nested": {"x": [1, 2]}}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, tensors, meta)
    loaded, loaded_meta = load_checkpoint(path)
    assert loaded_meta == meta
    assert set(loaded) == set(tensors)
    for k, v in tensors.items():
        assert loaded[k].shape == v.shape
        assert np.array_equal(loaded[k].numpy().view(np.uint32), v.numpy().view(np.uint32))
    assert not path.with_suffix(".ckpt.tmp").exists()


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ConfigError):
        load_checkpoint(path)


def test_checkpoint_rejects_other_versions(tmp_path):
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, {"a": torch.ones(1)})
    data = bytearray(path.read_bytes())
    data[4] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(ConfigError, match="version"):
        load_checkpoint(path)
