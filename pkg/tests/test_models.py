import math

import numpy as np
import pytest
import torch
from torch.nn import functional as F

from eegcond.conditioning import EMBED_DIM, ProfileEmbedder
from eegcond.models import (BACKBONES, ModelSpec, NonFiniteActivation, build_model,
                            count_params, forward, init_params, load_checkpoint,
                            save_checkpoint)


@pytest.fixture(autouse=True, scope="module")
def _float64_default():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def _spec(backbone, use_ids=False, C=4, **kw):
    T = kw.pop("n_times", 32 if backbone == "eegnet" else 10)
    return ModelSpec(backbone=backbone, use_ids=use_ids, n_channels=C, n_times=T, **kw)


def _batch(spec, B=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(B, spec.n_channels, spec.n_times, generator=g, dtype=torch.float64)
    codes = torch.randint(0, 2, (B, 4), generator=g).double()
    y = torch.arange(B) % 2
    return x, codes, y


# --- gradient checks --------------------------------------------------------

def _rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(a.abs().max().item(), b.abs().max().item(), 1e-12)
    return (a - b).abs().max().item() / scale


def _fd_check(params: dict, loss_fn, n_coords=12, h=1e-6, seed=0):
    """Central differences on a random subset of each tensor's entries.

    Returns {name: relative error}, relative error being the largest
    absolute deviation over the sampled entries divided by the largest
    magnitude of either gradient there.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    out = {}
    for name, p in params.items():
        flat = p.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        analytic = p.grad.view(-1)[idx].clone()
        numeric = torch.empty_like(analytic)
        with torch.no_grad():
            for k, i in enumerate(idx):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                numeric[k] = (up - down) / (2 * h)
        out[name] = _rel_error(analytic, numeric)
    return out


@pytest.mark.parametrize("backbone", BACKBONES)
@pytest.mark.parametrize("use_ids", [False, True])
def test_backbone_gradients(backbone, use_ids):
    spec = _spec(backbone, use_ids, dmu_delays=3)
    model = build_model(spec, seed=1)
    model.eval()  # dropout off, batch norm on fixed statistics
    x, codes, y = _batch(spec)
    params = dict(model.named_parameters())
    errors = _fd_check(params, lambda: F.cross_entropy(model(x, codes if use_ids else None), y))
    assert max(errors.values()) < 1e-4, errors


def test_eegnet_gradients_with_batch_statistics():
    # training-mode batch norm is deterministic; only dropout is switched off
    spec = _spec("eegnet", True, dropout=0.0)
    model = build_model(spec, seed=2)
    model.train()
    x, codes, y = _batch(spec, B=4)
    params = dict(model.named_parameters())
    errors = _fd_check(params, lambda: F.cross_entropy(model(x, codes), y), n_coords=8)
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize("kind", ["affine", "lookup"])
def test_embedder_gradients(kind):
    emb = ProfileEmbedder(kind).double()
    with torch.no_grad():
        for p in emb.parameters():
            p.copy_(torch.randn_like(p))
    codes = torch.tensor([[1, 0, 1, 1], [0, 0, 1, 0], [1, 1, 1, 1]], dtype=torch.float64)
    target = torch.randn(3, EMBED_DIM)
    errors = _fd_check(dict(emb.named_parameters()),
                       lambda: ((torch.tanh(emb(codes)) - target) ** 2).sum(), n_coords=30)
    assert max(errors.values()) < 1e-4, errors


# --- recurrent cells against independent references -------------------------

def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def test_lstm_single_step_two_units():
    spec = ModelSpec("lstm", n_channels=3, n_times=1)
    model = build_model(spec, seed=4)
    cell = model.backbone
    x = np.array([[0.3, -1.2, 0.7]])
    h = np.array([[0.1, -0.4]])
    c = np.array([[0.5, 0.2]])
    H = 2
    rng = np.random.default_rng(5)
    W_ih = rng.standard_normal((4 * H, 3))
    W_hh = rng.standard_normal((4 * H, H))
    b = rng.standard_normal(4 * H)
    # gate order i, f, g, o
    zi, zf, zg, zo = np.split(x @ W_ih.T + h @ W_hh.T + b, 4, axis=1)
    c_new = _sigmoid(zf) * c + _sigmoid(zi) * np.tanh(zg)
    h_new = _sigmoid(zo) * np.tanh(c_new)
    with torch.no_grad():
        cell.W_hh = torch.nn.Parameter(torch.as_tensor(W_hh))
        xw = torch.as_tensor(x @ W_ih.T + b)
        h_t, c_t = cell.step(xw, torch.as_tensor(h), torch.as_tensor(c))
    np.testing.assert_allclose(h_t.numpy(), h_new, rtol=1e-13)
    np.testing.assert_allclose(c_t.numpy(), c_new, rtol=1e-13)


def test_lstm_matches_torch_reference():
    spec = ModelSpec("lstm", n_channels=5, n_times=9)
    model = build_model(spec, seed=6)
    lstm = model.backbone
    ref = torch.nn.LSTMCell(5, 64).double()
    with torch.no_grad():
        ref.weight_ih.copy_(lstm.W_ih)
        ref.weight_hh.copy_(lstm.W_hh)
        ref.bias_ih.copy_(lstm.bias)
        ref.bias_hh.zero_()
    x = torch.randn(2, 5, 9)
    h = c = torch.zeros(2, 64)
    ours = lstm.states(x)
    for t in range(9):
        h, c = ref(x[:, :, t], (h, c))
        torch.testing.assert_close(ours[t], h, rtol=1e-12, atol=1e-12)


def test_lstm_forget_bias_is_one():
    model = build_model(ModelSpec("lstm", n_channels=3), seed=0)
    b = model.backbone.bias.detach()
    assert torch.all(b[64:128] == 1) and torch.all(b[:64] == 0) and torch.all(b[128:] == 0)


def _dmu_reference(cell, x):
    """Plain numpy loop over the delay-gate update."""
    W_g, U_g, b_g = (cell.W_g.detach().numpy(), cell.U_g.detach().numpy(),
                     cell.b_g.detach().numpy())
    W_z, U_z, b_z = (cell.W_z.detach().numpy(), cell.U_z.detach().numpy(),
                     cell.b_z.detach().numpy())
    W_c, U_c, b_c = (cell.W_c.detach().numpy(), cell.U_c.detach().numpy(),
                     cell.b_c.detach().numpy())
    H, D = cell.hidden, cell.delays
    B, _, T = x.shape
    past = [np.zeros((B, H)) for _ in range(D)]   # past[d-1] = h_{t-d}
    out = []
    for t in range(T):
        xt = x[:, :, t]
        logits = (xt @ W_g.T + past[0] @ U_g.T + b_g).reshape(B, H, D)
        a = np.exp(logits - logits.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        m = sum(a[:, :, d] * past[d] for d in range(D))
        z = _sigmoid(xt @ W_z.T + m @ U_z.T + b_z)
        c = np.tanh(xt @ W_c.T + m @ U_c.T + b_c)
        h = (1 - z) * m + z * c
        past = [h] + past[:-1]
        out.append(h)
    return out


@pytest.mark.parametrize("D", [1, 3, 20])
def test_dmu_matches_numpy_reference(D):
    spec = ModelSpec("dmu", n_channels=4, n_times=25, dmu_delays=D)
    model = build_model(spec, seed=7)
    x = torch.randn(3, 4, 25)
    ours = model.backbone.states(x)
    ref = _dmu_reference(model.backbone, x.numpy())
    for a, b in zip(ours, ref):
        np.testing.assert_allclose(a.detach().numpy(), b, rtol=1e-11, atol=1e-12)


def test_dmu_single_delay_is_a_gated_recurrent_update():
    # with one delay the gate is identically 1 and the memory is h_{t-1}
    spec = ModelSpec("dmu", n_channels=3, n_times=6, dmu_delays=1)
    cell = build_model(spec, seed=8).backbone
    x = torch.randn(2, 3, 6)
    hs, gates = cell.states(x, return_gates=True)
    h = torch.zeros(2, 64)
    for t in range(6):
        a, m = gates[t]
        assert torch.all(a == 1)
        assert torch.equal(m, hs[t - 1] if t else torch.zeros_like(m))
        xt = x[:, :, t]
        z = torch.sigmoid(xt @ cell.W_z.T + h @ cell.U_z.T + cell.b_z)
        c = torch.tanh(xt @ cell.W_c.T + h @ cell.U_c.T + cell.b_c)
        h = (1 - z) * h + z * c
        torch.testing.assert_close(hs[t], h, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backbone", ["lstm", "dmu"])
def test_recurrent_states_are_causal(backbone):
    spec = ModelSpec(backbone, n_channels=3, n_times=12, dmu_delays=4)
    cell = build_model(spec, seed=9).backbone
    x = torch.randn(2, 3, 12)
    y = x.clone()
    y[:, :, 7:] += torch.randn(2, 3, 5)
    a, b = cell.states(x), cell.states(y)
    for t in range(7):
        assert torch.equal(a[t], b[t])
    assert not torch.equal(a[7], b[7])


# --- shapes, counts, init ---------------------------------------------------

def _expected_count(spec: ModelSpec) -> int:
    C, H = spec.input_channels, spec.hidden
    emb = (EMBED_DIM * 4 + EMBED_DIM) if spec.use_ids else 0
    if spec.backbone == "eegnet":
        F1, D, F2 = spec.F1, spec.depth_mult, spec.F2
        flat = F2 * (spec.n_times // spec.pool1 // spec.pool2)
        n = (F1 * spec.temporal_kernel + 2 * F1 + F1 * D * C + 2 * F1 * D
             + F1 * D * spec.separable_kernel + F2 * F1 * D + 2 * F2 + 2 * flat + 2)
    elif spec.backbone == "lstm":
        n = 4 * H * (C + H) + 4 * H + 2 * H + 2
    else:
        D = spec.dmu_delays
        n = H * D * (C + H) + H * D + 2 * (H * C + H * H + H) + 2 * H + 2
    return n + emb


@pytest.mark.parametrize("backbone", BACKBONES)
@pytest.mark.parametrize("use_ids", [False, True])
def test_parameter_count_formula(backbone, use_ids):
    spec = ModelSpec(backbone, use_ids, n_channels=64)
    assert count_params(build_model(spec)) == _expected_count(spec)


def test_eegnet_layout():
    spec = ModelSpec("eegnet", n_channels=64)
    net = build_model(spec).backbone
    assert net.n_flat == 128
    assert net.spatial.out_channels == 32 and net.separable_point.out_channels == 64
    assert net.temporal.kernel_size == (1, 32) and net.separable_depth.kernel_size == (1, 16)
    assert net.drop.p == 0.25


@pytest.mark.parametrize("backbone", BACKBONES)
def test_output_shape_and_single_epoch_forward(backbone):
    spec = _spec(backbone, True)
    model = build_model(spec).eval()
    x, codes, _ = _batch(spec, B=5)
    assert model(x, codes).shape == (5, 2)
    single = forward(model, x[2].numpy(), codes[2].numpy())
    torch.testing.assert_close(single, model(x, codes)[2], rtol=1e-12, atol=1e-12)


def test_prefused_input_is_accepted():
    spec = _spec("lstm", True)
    model = build_model(spec)
    x, codes, _ = _batch(spec)
    fused = model.prepare(x, codes)
    assert fused.shape[1] == spec.n_channels + EMBED_DIM
    torch.testing.assert_close(model(fused), model(x, codes))


def test_shape_guards():
    spec = _spec("eegnet", True)
    model = build_model(spec)
    x, codes, _ = _batch(spec)
    with pytest.raises(ValueError):
        model(x[:, :, :-1], codes)
    with pytest.raises(ValueError, match="codes"):
        model(x)
    with pytest.raises(ValueError):
        model(x[:, :2], codes)


def test_non_finite_activation_names_layer():
    spec = _spec("lstm")
    model = build_model(spec)
    x, _, _ = _batch(spec)
    x[0, 0, 3] = float("nan")
    with pytest.raises(NonFiniteActivation, match="lstm"):
        model(x)


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(backbone="gru")
    with pytest.raises(ValueError):
        ModelSpec(hidden=32)
    with pytest.raises(ValueError):
        ModelSpec(F2=32)
    with pytest.raises(ValueError):
        ModelSpec(n_times=20)
    assert ModelSpec.from_dict(ModelSpec(use_ids=True).to_dict()) == ModelSpec(use_ids=True)


@pytest.mark.parametrize("backbone", BACKBONES)
def test_init_is_deterministic_and_shared_across_variants(backbone):
    a = init_params(_spec(backbone), seed=3)
    b = init_params(_spec(backbone), seed=3)
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = init_params(_spec(backbone), seed=4)
    assert any(not torch.equal(a[k], c[k]) for k in a if a[k].abs().sum() > 0)
    ids = init_params(_spec(backbone, True), seed=3)
    assert set(a) <= set(ids)
    # only weights that read the input channels change shape
    widened = {"eegnet": 1, "lstm": 1, "dmu": 3}[backbone]
    shared = [k for k in a if a[k].shape == ids[k].shape]
    assert len(shared) == len(a) - widened
    assert all(torch.equal(a[k], ids[k]) for k in shared)


def test_init_bounds():
    params = init_params(ModelSpec("dmu", n_channels=8), seed=0)
    for name, p in params.items():
        if p.ndim >= 2:
            bound = 1 / math.sqrt(int(np.prod(p.shape[1:])))
            assert p.abs().max() <= bound


# --- checkpoints -------------------------------------------------------------

@pytest.mark.parametrize("backbone", BACKBONES)
def test_checkpoint_round_trip(tmp_path, backbone):
    spec = _spec(backbone, True)
    model = build_model(spec, seed=11).eval()
    x, codes, _ = _batch(spec)
    save_checkpoint(tmp_path / "m.npz", model, step=17, seed=11, extra={"note": "x"})
    back, meta = load_checkpoint(tmp_path / "m.npz")
    back.eval()
    assert meta["step"] == 17 and meta["extra"] == {"note": "x"} and back.spec == spec
    assert torch.equal(back(x, codes), model(x, codes))
    save_checkpoint(tmp_path / "n.npz", back, step=17, seed=11, extra={"note": "x"})
    assert (tmp_path / "m.npz").read_bytes() == (tmp_path / "n.npz").read_bytes()
