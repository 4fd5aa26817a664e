"""Small convolutional network engine on dense numpy arrays.

Forward, manual backprop, SGD with momentum, gradient checking, and a
binary checkpoint format. The architecture is a fixed stack: a few
valid-mode conv layers (ReLU + max-pool after each), one fully connected
embedding layer (ReLU), and a linear classification head with softmax.
Everything is deterministic for a given seed; float64 mode exists for
gradient checking.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"WSLC"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient turns NaN/Inf during training."""

    def __init__(self, iteration, detail=""):
        self.iteration = iteration
        super().__init__(f"non-finite value at iteration {iteration}: {detail}")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    conv_layers: tuple of (out_channels, kernel_size, stride) per stage,
    each followed by ReLU and ``pool`` x ``pool`` max-pooling. May be
    empty, in which case the input is flattened straight into the
    embedding layer.
    """

    conv_layers: tuple = ((16, 3, 1), (32, 3, 1), (64, 3, 1))
    pool: int = 2
    embed_dim: int = 64
    num_classes: int = 8
    in_channels: int = 3
    input_size: int = 32

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.pool < 1:
            raise ValueError("pool must be >= 1")
        for oc, k, s in self.conv_layers:
            if oc < 1 or k < 1 or s < 1:
                raise ValueError(f"bad conv layer ({oc}, {k}, {s})")
        self.stage_shapes()  # raises if spatial dims collapse

    def stage_shapes(self):
        """(channels, height, width) after each conv+pool stage."""
        c, h, w = self.in_channels, self.input_size, self.input_size
        shapes = [(c, h, w)]
        for oc, k, s in self.conv_layers:
            h = (h - k) // s + 1
            w = (w - k) // s + 1
            if h < 1 or w < 1:
                raise ValueError("conv output collapsed below 1x1")
            h //= self.pool
            w //= self.pool
            if h < 1 or w < 1:
                raise ValueError("pooled output collapsed below 1x1")
            c = oc
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_dim(self):
        c, h, w = self.stage_shapes()[-1]
        return c * h * w


@dataclass
class Model:
    spec: ModelSpec
    params: dict  # name -> ndarray, insertion order fixed at build time
    rng_seed: int = 0

    def __post_init__(self):
        expected = param_shapes(self.spec)
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            raise ValueError(f"param shapes {got} do not match spec {expected}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        return Model(self.spec, {k: v.astype(dtype) for k, v in self.params.items()},
                     self.rng_seed)

    def copy(self):
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()},
                     self.rng_seed)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_step: int = 200
    momentum: float = 0.9
    total_iters: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.lr_step < 1:
            raise ValueError("batch_size and lr_step must be positive")
        if self.total_iters < 0:
            # zero is allowed so a fine-tune can be configured as a no-op
            raise ValueError("total_iters must be non-negative")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError("lr_decay_factor must be in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def param_shapes(spec):
    """Expected parameter shapes in build order."""
    shapes = {}
    c = spec.in_channels
    for i, (oc, k, _s) in enumerate(spec.conv_layers):
        shapes[f"conv{i}.w"] = (oc, c, k, k)
        shapes[f"conv{i}.b"] = (oc,)
        c = oc
    shapes["fc_embed.w"] = (spec.flat_dim, spec.embed_dim)
    shapes["fc_embed.b"] = (spec.embed_dim,)
    shapes["fc_out.w"] = (spec.embed_dim, spec.num_classes)
    shapes["fc_out.b"] = (spec.num_classes,)
    return shapes


def xavier_init(fan_in, fan_out, dims, rng):
    """Uniform Glorot draw on [-b, b] with b = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=dims)


def build_model(spec, seed, dtype=np.float32):
    """Fresh model with Xavier weights and zero biases, one rng stream."""
    rng = np.random.default_rng(seed)
    params = {}
    c = spec.in_channels
    for i, (oc, k, _s) in enumerate(spec.conv_layers):
        w = xavier_init(c * k * k, oc * k * k, (oc, c, k, k), rng)
        params[f"conv{i}.w"] = w.astype(dtype)
        params[f"conv{i}.b"] = np.zeros(oc, dtype=dtype)
        c = oc
    params["fc_embed.w"] = xavier_init(
        spec.flat_dim, spec.embed_dim, (spec.flat_dim, spec.embed_dim), rng).astype(dtype)
    params["fc_embed.b"] = np.zeros(spec.embed_dim, dtype=dtype)
    params["fc_out.w"] = xavier_init(
        spec.embed_dim, spec.num_classes, (spec.embed_dim, spec.num_classes), rng).astype(dtype)
    params["fc_out.b"] = np.zeros(spec.num_classes, dtype=dtype)
    return Model(spec, params, rng_seed=seed)


def softmax(logits):
    """Row-wise stabilized softmax over the last axis."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


# --- layer primitives -------------------------------------------------------

def _im2col(x, k, s):
    # x: (N, C, H, W) -> cols (N, C*k*k, OH*OW)
    n, c, _h, _w = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::s, ::s]
    oh, ow = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, c * k * k, oh * ow)
    return cols, oh, ow


def _col2im(dcols, x_shape, k, s, oh, ow):
    n, c, _h, _w = x_shape
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += d6[:, :, i, j]
    return dx


def _maxpool(x, p):
    n, c, h, w = x.shape
    oh, ow = h // p, w // p
    xc = x[:, :, :oh * p, :ow * p]
    xr = np.ascontiguousarray(
        xc.reshape(n, c, oh, p, ow, p).transpose(0, 1, 2, 4, 3, 5)).reshape(
        n, c, oh, ow, p * p)
    arg = xr.argmax(axis=4)  # first index wins ties, deterministic
    out = np.take_along_axis(xr, arg[..., None], axis=4)[..., 0]
    return out, arg


def _maxpool_backward(dout, arg, x_shape, p):
    n, c, h, w = x_shape
    oh, ow = h // p, w // p
    dxr = np.zeros((n, c, oh, ow, p * p), dtype=dout.dtype)
    np.put_along_axis(dxr, arg[..., None], dout[..., None], axis=4)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, :oh * p, :ow * p] = dxr.reshape(n, c, oh, ow, p, p).transpose(
        0, 1, 2, 4, 3, 5).reshape(n, c, oh * p, ow * p)
    return dx


# --- forward / backward -----------------------------------------------------

def _check_batch(model, batch):
    spec = model.spec
    if batch.ndim != 4 or batch.shape[1:] != (
            spec.in_channels, spec.input_size, spec.input_size):
        raise ValueError(
            f"batch shape {batch.shape} does not match spec input "
            f"(N, {spec.in_channels}, {spec.input_size}, {spec.input_size})")


def forward_with_cache(model, batch):
    """Forward pass that also returns the cache backward_from_cache needs."""
    _check_batch(model, batch)
    p = model.params
    spec = model.spec
    x = np.asarray(batch, dtype=model.dtype)
    convs = []
    for i, (_oc, k, s) in enumerate(spec.conv_layers):
        cols, oh, ow = _im2col(x, k, s)
        w2d = p[f"conv{i}.w"].reshape(p[f"conv{i}.w"].shape[0], -1)
        pre = np.matmul(w2d, cols) + p[f"conv{i}.b"][:, None]
        pre = pre.reshape(x.shape[0], -1, oh, ow)
        mask = pre > 0
        act = pre * mask
        pooled, arg = _maxpool(act, spec.pool)
        convs.append((x.shape, cols, oh, ow, mask, act.shape, arg))
        x = pooled
    flat = x.reshape(x.shape[0], -1)
    h_pre = flat @ p["fc_embed.w"] + p["fc_embed.b"]
    h_mask = h_pre > 0
    embeds = h_pre * h_mask
    logits = embeds @ p["fc_out.w"] + p["fc_out.b"]
    probs = softmax(logits)
    cache = (convs, x.shape, flat, h_mask, embeds)
    return probs, embeds, cache


def forward(model, batch):
    """Class probabilities and penultimate-layer embeddings for a batch.

    Pure function: no state is touched. Each probability row sums to one.
    """
    probs, embeds, _ = forward_with_cache(model, batch)
    if not np.all(np.isfinite(probs)):
        raise FloatingPointError("non-finite probabilities in forward pass")
    return probs, embeds


def embed(model, images):
    """Embeddings only (identical to the second output of forward)."""
    return forward(model, images)[1]


def backward_from_cache(model, cache, dlogits):
    p = model.params
    spec = model.spec
    convs, pooled_shape, flat, h_mask, embeds = cache
    if dlogits.shape != (flat.shape[0], spec.num_classes):
        raise ValueError(
            f"upstream gradient shape {dlogits.shape} does not match "
            f"({flat.shape[0]}, {spec.num_classes})")
    dlogits = np.asarray(dlogits, dtype=model.dtype)
    grads = {}
    grads["fc_out.w"] = embeds.T @ dlogits
    grads["fc_out.b"] = dlogits.sum(axis=0)
    dh = (dlogits @ p["fc_out.w"].T) * h_mask
    grads["fc_embed.w"] = flat.T @ dh
    grads["fc_embed.b"] = dh.sum(axis=0)
    dx = (dh @ p["fc_embed.w"].T).reshape(pooled_shape)
    for i in reversed(range(len(spec.conv_layers))):
        _oc, k, s = spec.conv_layers[i]
        x_shape, cols, oh, ow, mask, act_shape, arg = convs[i]
        dact = _maxpool_backward(dx, arg, act_shape, spec.pool)
        dpre = (dact * mask).reshape(dact.shape[0], dact.shape[1], -1)
        w2d = p[f"conv{i}.w"].reshape(p[f"conv{i}.w"].shape[0], -1)
        grads[f"conv{i}.w"] = np.einsum("nop,nkp->ok", dpre, cols).reshape(
            p[f"conv{i}.w"].shape)
        grads[f"conv{i}.b"] = dpre.sum(axis=(0, 2))
        dcols = np.matmul(w2d.T, dpre)
        dx = _col2im(dcols, x_shape, k, s, oh, ow)
    return {name: grads[name] for name in p}


def backward(model, batch, dlogits):
    """Parameter gradients for an upstream gradient at the logits.

    Recomputes the forward pass internally, so the result only depends on
    (model, batch, dlogits).
    """
    _, _, cache = forward_with_cache(model, batch)
    return backward_from_cache(model, cache, dlogits)


def sgd_step(params, grads, lr, momentum, velocity):
    """In-place momentum SGD: v <- momentum*v + g, w <- w - lr*v."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(-1, f"gradient for {name}")
        v = velocity[name]
        v *= momentum
        v += g
        params[name] -= lr * v


def lr_schedule(cfg, iteration):
    """Step decay: base_lr * decay^floor(iteration / lr_step)."""
    return cfg.base_lr * cfg.lr_decay_factor ** (iteration // cfg.lr_step)


# --- gradient checking ------------------------------------------------------

def _head_loss(model, batch, head, labels, targets):
    probs, _, cache = forward_with_cache(model, batch)
    n = batch.shape[0]
    if head == "softmax_ce":
        loss = -np.mean(np.log(probs[np.arange(n), labels]))
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), labels] = 1.0
        dlogits = (probs - onehot) / n
    elif head == "squared_error":
        convs, pooled_shape, flat, h_mask, embeds = cache
        logits = embeds @ model.params["fc_out.w"] + model.params["fc_out.b"]
        diff = logits - targets
        loss = 0.5 * np.mean(diff * diff)
        dlogits = diff / diff.size
    else:
        raise ValueError(f"unknown head {head!r}")
    return loss, dlogits, cache


def grad_check(model, batch, labels=None, h=1e-5, head="softmax_ce",
               targets=None, coords_per_param=50, seed=0):
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 regardless of the model dtype. Samples up to
    ``coords_per_param`` coordinates from every parameter tensor.
    """
    m = model.astype(np.float64)
    batch = np.asarray(batch, dtype=np.float64)
    if targets is not None:
        targets = np.asarray(targets, dtype=np.float64)
    loss, dlogits, cache = _head_loss(m, batch, head, labels, targets)
    analytic = backward_from_cache(m, cache, dlogits)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in m.params.items():
        flat = arr.reshape(-1)
        size = flat.size
        idx = (np.arange(size) if size <= coords_per_param
               else np.sort(rng.choice(size, coords_per_param, replace=False)))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp, _, _ = _head_loss(m, batch, head, labels, targets)
            flat[i] = orig - h
            lm, _, _ = _head_loss(m, batch, head, labels, targets)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


# --- checkpoint format ------------------------------------------------------
# Little-endian: magic "WSLC", version u32, param count u32, then per param
# name_len u16 + utf-8 name + ndim u8 + dims u32 each + raw float32 data.

def write_param_file(params, path):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_param_file(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<I", data, 8)
    off = 12
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        params[name] = arr.copy()
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after last parameter")
    return params


def save_checkpoint(model, path):
    """Write model parameters; bit-exact round-trip for float32 models."""
    write_param_file(model.params, path)


def load_checkpoint(path, spec):
    """Read parameters back into a Model (shape-validated against spec)."""
    return Model(spec, read_param_file(path))
