"""MLP autoencoder over flattened particle states, with manual backprop.

Hidden layers are affine -> ReLU -> LayerNorm; the latent and output layers
are affine only so latents and displacements can take either sign.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fileio import read_checkpoint, write_checkpoint

LN_EPS = 1e-10
DEFAULT_HIDDEN = (512, 256, 128)
DEFAULT_LATENT = 64


class ShapeError(ValueError):
    pass


class CorruptParametersError(FloatingPointError):
    pass


class MissingCacheError(RuntimeError):
    pass


def scaled_hidden(n_fine, hidden=DEFAULT_HIDDEN, latent=DEFAULT_LATENT, reference=100_000):
    """Shrink hidden widths in proportion to the particle count, never below the latent size."""
    if n_fine >= reference:
        return tuple(hidden)
    s = n_fine / reference
    return tuple(max(latent, int(round(h * s))) for h in hidden)


@dataclass
class Layer:
    W: np.ndarray                 # (out, in)
    b: np.ndarray                 # (out,)
    gain: np.ndarray | None = None
    offset: np.ndarray | None = None

    @property
    def normed(self):
        return self.gain is not None

    def arrays(self):
        out = [("W", self.W), ("b", self.b)]
        if self.normed:
            out += [("gain", self.gain), ("offset", self.offset)]
        return out


@dataclass
class AutoencoderParams:
    encoder: list
    decoder: list
    input_dim: int
    hidden: tuple
    latent: int
    output_dim: int

    @property
    def architecture(self):
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "latent": self.latent, "output_dim": self.output_dim}

    def named_arrays(self):
        """(name, array) in checkpoint layer order."""
        out = []
        for part, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(layers):
                out += [(f"{part}.{i}.{k}", a) for k, a in layer.arrays()]
        return out

    def flat(self):
        return [a for _, a in self.named_arrays()]

    def astype(self, dtype):
        def conv(layers):
            return [Layer(l.W.astype(dtype), l.b.astype(dtype),
                          None if l.gain is None else l.gain.astype(dtype),
                          None if l.offset is None else l.offset.astype(dtype)) for l in layers]
        return AutoencoderParams(conv(self.encoder), conv(self.decoder), self.input_dim,
                                 tuple(self.hidden), self.latent, self.output_dim)

    def copy(self):
        return self.astype(self.encoder[0].W.dtype)

    def check(self):
        dims_e = [self.input_dim, *self.hidden, self.latent]
        dims_d = [self.latent, *reversed(self.hidden), self.output_dim]
        for layers, dims in ((self.encoder, dims_e), (self.decoder, dims_d)):
            if len(layers) != len(dims) - 1:
                raise ShapeError("layer count does not match architecture")
            for l, (a, b) in zip(layers, zip(dims[:-1], dims[1:])):
                if l.W.shape != (b, a) or l.b.shape != (b,):
                    raise ShapeError(f"layer shape {l.W.shape} does not chain ({a} -> {b})")
        for name, a in self.named_arrays():
            if not np.all(np.isfinite(a)):
                raise CorruptParametersError(f"non-finite values in {name}")


def init_params(input_dim, output_dim, hidden=DEFAULT_HIDDEN, latent=DEFAULT_LATENT, seed=0,
                dtype=np.float32) -> AutoencoderParams:
    """He-uniform weights, zero biases, unit LN gain, zero LN offset."""
    rng = np.random.default_rng(seed)

    def make(dims):
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            bound = np.sqrt(6.0 / a)
            W = rng.uniform(-bound, bound, size=(b, a)).astype(dtype)
            last = i == len(dims) - 2
            layers.append(Layer(W, np.zeros(b, dtype),
                                None if last else np.ones(b, dtype),
                                None if last else np.zeros(b, dtype)))
        return layers

    hidden = tuple(hidden)
    enc = make([input_dim, *hidden, latent])
    dec = make([latent, *reversed(hidden), output_dim])
    return AutoencoderParams(enc, dec, input_dim, hidden, latent, output_dim)


# --- forward / backward -----------------------------------------------------------

def mlp_forward(layers, X, keep_cache=True):
    """Forward a batch (B, in). Returns (Y, cache)."""
    cache = []
    h = X
    for layer in layers:
        z = h @ layer.W.T + layer.b
        if layer.normed:
            a = np.maximum(z, 0)
            mu = a.mean(axis=1, keepdims=True)
            c = a - mu
            # eps only floors the spread, so live rows are standardised exactly
            sigma = np.sqrt(np.maximum((c * c).mean(axis=1, keepdims=True), LN_EPS))
            n = c / sigma
            out = n * layer.gain + layer.offset
            if keep_cache:
                cache.append((h, z, n, sigma))
        else:
            out = z
            if keep_cache:
                cache.append((h, None, None, None))
        h = out
    return h, (cache if keep_cache else None)


def layernorm_backward(dn, n, sigma):
    """Gradient through n = (a - mean(a)) / sqrt(max(var(a), eps)), per row."""
    live = sigma > np.sqrt(LN_EPS)
    return (dn - dn.mean(axis=1, keepdims=True)
            - live * n * (dn * n).mean(axis=1, keepdims=True)) / sigma


def mlp_backward(layers, cache, dY, need_params=True, need_input=True):
    """Reverse pass. Returns (per-layer grads in arrays() order, dX or None)."""
    if cache is None or len(cache) != len(layers):
        raise MissingCacheError("backward called without a matching forward cache")
    grads = [None] * len(layers)
    d = dY
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        h, z, n, sigma = cache[i]
        if layer.normed:
            g = {}
            if need_params:
                g["gain"] = (d * n).sum(axis=0)
                g["offset"] = d.sum(axis=0)
            dz = layernorm_backward(d * layer.gain, n, sigma) * (z > 0)
        else:
            g = {}
            dz = d
        if need_params:
            g["W"] = dz.T @ h
            g["b"] = dz.sum(axis=0)
            grads[i] = g
        if i == 0 and not need_input:
            return grads, None
        d = dz @ layer.W
    return grads, d


def _batch(x, dim):
    x = np.asarray(x)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != dim:
        raise ShapeError(f"expected vectors of length {dim}, got {X.shape[1]}")
    return X, single


def encode(state_flat, params: AutoencoderParams):
    X, single = _batch(state_flat, params.input_dim)
    z, _ = mlp_forward(params.encoder, X.astype(params.encoder[0].W.dtype, copy=False), False)
    return z[0] if single else z


def decode(z, params: AutoencoderParams):
    Z, single = _batch(z, params.latent)
    y, _ = mlp_forward(params.decoder, Z.astype(params.decoder[0].W.dtype, copy=False), False)
    if not np.all(np.isfinite(y)):
        raise CorruptParametersError("decoder produced non-finite output")
    return y[0] if single else y


def decode_with_cache(z, params):
    Z, single = _batch(z, params.latent)
    y, cache = mlp_forward(params.decoder, Z.astype(params.decoder[0].W.dtype, copy=False))
    if not np.all(np.isfinite(y)):
        raise CorruptParametersError("decoder produced non-finite output")
    return (y[0] if single else y), cache


def decode_vjp(params, cache, dy):
    """dL/dz given dL/d(decode output)."""
    dY = np.atleast_2d(dy).astype(params.decoder[0].W.dtype, copy=False)
    _, dz = mlp_backward(params.decoder, cache, dY, need_params=False)
    return dz[0] if np.ndim(dy) == 1 else dz


def forward(params, X):
    """Full autoencoder pass on a batch; returns (reconstruction, latents, caches)."""
    z, enc_cache = mlp_forward(params.encoder, X)
    y, dec_cache = mlp_forward(params.decoder, z)
    return y, z, (enc_cache, dec_cache)


def backward(loss_grad_wrt_output, caches, params, loss_grad_wrt_latent=None, input_grad=True):
    """Gradients of all parameters (flat, in checkpoint order) and of the input."""
    enc_cache, dec_cache = caches
    dec_grads, dz = mlp_backward(params.decoder, dec_cache, loss_grad_wrt_output)
    if loss_grad_wrt_latent is not None:
        dz = dz + loss_grad_wrt_latent
    enc_grads, dX = mlp_backward(params.encoder, enc_cache, dz, need_input=input_grad)
    flat = []
    for layers, grads in ((params.encoder, enc_grads), (params.decoder, dec_grads)):
        for layer, g in zip(layers, grads):
            flat += [g[k] for k, _ in layer.arrays()]
    return flat, dX


# --- state flattening -----------------------------------------------------------------

@dataclass
class StateEncoding:
    """Per-particle [displacement(3), F(9)] in fixed particle order, standardised per channel."""
    rest: np.ndarray                     # (N, 3)
    mean: np.ndarray = field(default_factory=lambda: np.zeros(12))
    scale: np.ndarray = field(default_factory=lambda: np.ones(12))

    @property
    def n(self):
        return len(self.rest)

    @property
    def dim(self):
        return 12 * self.n

    def flatten(self, x, F):
        """Raw (unnormalised) vectors from positions (..., N, 3) and F (..., N, 3, 3)."""
        x = np.asarray(x, dtype=np.float64)
        F = np.asarray(F, dtype=np.float64)
        lead = x.shape[:-2]
        u = x - self.rest
        return np.concatenate([u, F.reshape(*lead, self.n, 9)], axis=-1).reshape(*lead, self.dim)

    def unflatten(self, q):
        q = np.asarray(q)
        lead = q.shape[:-1]
        per = q.reshape(*lead, self.n, 12)
        return self.rest + per[..., :3], per[..., 3:].reshape(*lead, self.n, 3, 3)

    def fit(self, raw):
        """Freeze channel statistics from raw training vectors (M, 12N)."""
        per = np.asarray(raw, dtype=np.float64).reshape(-1, 12)
        self.mean = per.mean(axis=0)
        std = per.std(axis=0)
        self.scale = np.where(std > 1e-12, std, 1.0)
        return self

    def normalize(self, raw):
        lead = raw.shape[:-1]
        per = raw.reshape(*lead, self.n, 12)
        return ((per - self.mean) / self.scale).reshape(*lead, self.dim)

    def denormalize(self, q):
        lead = q.shape[:-1]
        per = np.asarray(q, dtype=np.float64).reshape(*lead, self.n, 12)
        return (per * self.scale + self.mean).reshape(*lead, self.dim)

    def channel_scale_vector(self):
        """d(raw)/d(normalised) for every entry of a flattened vector."""
        return np.tile(self.scale, self.n)


# --- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, params: AutoencoderParams, encoding: StateEncoding, metadata=None,
                    extra_arrays=()):
    header = {
        "architecture": params.architecture,
        "normalization": {"mean": encoding.mean.tolist(), "scale": encoding.scale.tolist()},
        "metadata": metadata or {},
    }
    arrays = params.named_arrays() + [("rest_positions", encoding.rest)] + list(extra_arrays)
    write_checkpoint(path, header, arrays)


def load_checkpoint(path):
    """Returns (params, encoding, metadata, extra arrays dict)."""
    header, arrays = read_checkpoint(path)
    arch = header["architecture"]
    named = dict(arrays)
    hidden = tuple(arch["hidden"])

    def collect(part, count):
        layers = []
        for i in range(count):
            pre = f"{part}.{i}."
            layers.append(Layer(named[pre + "W"], named[pre + "b"],
                                named.get(pre + "gain"), named.get(pre + "offset")))
        return layers

    n_layers = len(hidden) + 1
    params = AutoencoderParams(collect("encoder", n_layers), collect("decoder", n_layers),
                               arch["input_dim"], hidden, arch["latent"], arch["output_dim"])
    params.check()
    norm = header["normalization"]
    enc = StateEncoding(named["rest_positions"].astype(np.float64),
                        np.asarray(norm["mean"]), np.asarray(norm["scale"]))
    used = {n for n, _ in params.named_arrays()} | {"rest_positions"}
    extra = {k: v for k, v in named.items() if k not in used}
    return params, enc, header.get("metadata", {}), extra
