import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tactile_rom import rom
from tactile_rom.fileio import FormatError


def toy(seed=0, d=24, hidden=(32, 24, 16), r=6):
    return rom.init_params(d, d, hidden, r, seed=seed).astype(np.float64)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_shapes_chain_and_latent_size():
    p = rom.init_params(36, 36, (20, 10), 4)
    p.check()
    assert p.encoder[0].W.shape == (20, 36)
    assert p.encoder[-1].W.shape == (4, 10)
    assert p.decoder[0].W.shape == (10, 4)
    assert p.decoder[-1].W.shape == (36, 20)
    assert p.encoder[-1].gain is None and p.decoder[-1].gain is None
    assert p.encoder[0].W.dtype == np.float32
    z = rom.encode(np.zeros(36), p)
    assert z.shape == (4,)
    assert rom.decode(z, p).shape == (36,)


def test_wrong_input_length_rejected():
    p = toy()
    with pytest.raises(rom.ShapeError):
        rom.encode(np.zeros(23), p)
    with pytest.raises(rom.ShapeError):
        rom.decode(np.zeros(5), p)


def test_nonfinite_parameters_detected():
    p = toy()
    p.decoder[1].W[0, 0] = np.nan
    with pytest.raises(rom.CorruptParametersError):
        p.check()
    with pytest.raises(rom.CorruptParametersError):
        rom.decode(np.ones(6), p)


def test_backward_without_cache_raises():
    p = toy()
    with pytest.raises(rom.MissingCacheError):
        rom.mlp_backward(p.decoder, None, np.zeros((1, 24)))


def test_he_uniform_bounds():
    p = rom.init_params(400, 400, (50,), 8, seed=3)
    W = p.encoder[0].W
    bound = np.sqrt(6.0 / 400)
    assert np.abs(W).max() <= bound
    assert W.std() == pytest.approx(bound / np.sqrt(3), rel=0.05)
    assert np.all(p.encoder[0].b == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_layernorm_rows_are_standardised(seed, amp):
    p = toy(seed)
    X = amp * np.random.default_rng(seed).normal(size=(5, 24))
    _, cache = rom.mlp_forward(p.encoder, X)
    for h, z, n, sigma in cache[:-1]:
        live = sigma[:, 0] > np.sqrt(rom.LN_EPS)
        assert np.all(np.abs(n.mean(axis=1)) < 1e-10)
        var = (n * n).mean(axis=1)
        assert np.all(np.abs(var[live] - 1.0) < 1e-8)


def test_decoder_jacobian_vjp_matches_finite_differences():
    p = toy(1)
    rng = np.random.default_rng(0)
    z = rng.normal(size=6)
    w = rng.normal(size=24)
    _, cache = rom.decode_with_cache(z, p)
    g = rom.decode_vjp(p, cache, w)
    gfd = fd_grad(lambda q: w @ rom.decode(q, p), z)
    assert rel_err(g, gfd) < 1e-4


def test_encoder_input_gradient_matches_finite_differences():
    p = toy(2)
    rng = np.random.default_rng(1)
    x = rng.normal(size=24)
    w = rng.normal(size=6)
    _, cache = rom.mlp_forward(p.encoder, x[None])
    _, dx = rom.mlp_backward(p.encoder, cache, w[None])
    gfd = fd_grad(lambda q: w @ rom.encode(q, p), x)
    assert rel_err(dx[0], gfd) < 1e-4


@pytest.mark.parametrize("which", ["encoder", "decoder"])
def test_parameter_gradients_match_finite_differences(which):
    p = toy(4)
    rng = np.random.default_rng(2)
    X = rng.normal(size=(3, 24))
    T = rng.normal(size=(3, 24))

    def loss():
        y, _, _ = rom.forward(p, X)
        return 0.5 * np.sum((y - T) ** 2)

    y, _, caches = rom.forward(p, X)
    flat, _ = rom.backward(y - T, caches, p)
    names = [n for n, _ in p.named_arrays()]
    for (name, a), g in zip(p.named_arrays(), flat):
        if not name.startswith(which):
            continue
        idx = rng.choice(a.size, size=min(a.size, 12), replace=False)
        num = []
        for i in idx:
            old = a.flat[i]
            a.flat[i] = old + 1e-6
            lp = loss()
            a.flat[i] = old - 1e-6
            lm = loss()
            a.flat[i] = old
            num.append((lp - lm) / 2e-6)
        assert rel_err(g.flat[idx], np.array(num)) < 1e-4, name
    assert len(flat) == len(names)


def test_latent_gradient_is_added_to_encoder_path():
    p = toy(5)
    X = np.random.default_rng(3).normal(size=(2, 24))
    y, z, caches = rom.forward(p, X)
    gz = np.random.default_rng(4).normal(size=z.shape)
    flat0, dx0 = rom.backward(np.zeros_like(y), caches, p)
    flat1, dx1 = rom.backward(np.zeros_like(y), caches, p, loss_grad_wrt_latent=gz)
    assert all(np.all(g == 0) for g in flat0)
    _, cache = rom.mlp_forward(p.encoder, X)
    _, dx = rom.mlp_backward(p.encoder, cache, gz)
    assert np.allclose(dx1, dx)


def test_state_encoding_round_trip():
    rng = np.random.default_rng(0)
    rest = rng.uniform(size=(7, 3))
    x = rest + 1e-4 * rng.normal(size=(4, 7, 3))
    F = np.eye(3) + 1e-2 * rng.normal(size=(4, 7, 3, 3))
    enc = rom.StateEncoding(rest)
    raw = enc.flatten(x, F)
    enc.fit(raw)
    q = enc.normalize(raw)
    per = q.reshape(-1, 12)
    assert np.allclose(per.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(per.std(axis=0), 1, atol=1e-12)
    x2, F2 = enc.unflatten(enc.denormalize(q))
    assert np.allclose(x2, x, atol=1e-15)
    assert np.allclose(F2, F, atol=1e-14)
    assert enc.channel_scale_vector().shape == (84,)


def test_checkpoint_round_trip(tmp_path):
    p = rom.init_params(24, 24, (16, 8), 4, seed=9)
    enc = rom.StateEncoding(np.arange(6.0).reshape(2, 3), np.linspace(0, 1, 12), np.full(12, 2.0))
    path = tmp_path / "m.romw"
    rom.save_checkpoint(path, p, enc, {"note": "x"})
    p2, enc2, meta, extra = rom.load_checkpoint(path)
    assert meta == {"note": "x"} and extra == {}
    for (n1, a1), (n2, a2) in zip(p.named_arrays(), p2.named_arrays()):
        assert n1 == n2 and np.array_equal(a1, a2)
    assert np.array_equal(enc2.rest, enc.rest)
    assert np.array_equal(enc2.mean, enc.mean)
    z = np.ones(4, np.float32)
    assert np.array_equal(rom.decode(z, p), rom.decode(z, p2))


def test_truncated_checkpoint_rejected(tmp_path):
    p = rom.init_params(24, 24, (8,), 4)
    path = tmp_path / "m.romw"
    rom.save_checkpoint(path, p, rom.StateEncoding(np.zeros((2, 3))))
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(FormatError):
        rom.load_checkpoint(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        rom.load_checkpoint(path)


def test_scaled_hidden_floors_at_latent():
    assert rom.scaled_hidden(100_000) == (512, 256, 128)
    assert rom.scaled_hidden(8000) == (64, 64, 64)
    assert rom.scaled_hidden(50_000) == (256, 128, 64)
