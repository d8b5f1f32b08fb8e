"""Small dual-head convolutional density regressor, written directly in numpy.

Layout is channels-first with an implicit batch of one: activations are
``(C, H, W)`` arrays.  The network:

    trunk   conv3x3(1->16) relu  pool2  conv3x3(16->32) relu  pool2  conv3x3(32->32) relu  pool2
    hr head tconv4x4/2(32->16) relu  conv1x1(16->1)          -> H/4  x W/4
    lr head conv3x3/2(32->16)  relu  conv1x1(16->1)          -> H/16 x W/16
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatMismatch, ShapeError

CKPT_MAGIC = b"CKP1"
ARCH_NAME = "crowdkiln-dualhead-v1"

# name -> (kind, in_channels, out_channels, kernel, stride, pad)
LAYERS = {
    "trunk.conv1": ("conv", 1, 16, 3, 1, 1),
    "trunk.conv2": ("conv", 16, 32, 3, 1, 1),
    "trunk.conv3": ("conv", 32, 32, 3, 1, 1),
    "hr.up": ("tconv", 32, 16, 4, 2, 1),
    "hr.out": ("conv", 16, 1, 1, 1, 0),
    "lr.conv": ("conv", 32, 16, 3, 2, 1),
    "lr.out": ("conv", 16, 1, 1, 1, 0),
}
HEAD_LAYERS = {
    "hr": ("hr.up", "hr.out"),
    "lr": ("lr.conv", "lr.out"),
}
PRECISIONS = {"single": np.float32, "double": np.float64}
# only used by the finite-difference oracle
_ORACLE_DTYPES = {**PRECISIONS, "extended": np.longdouble}


def _weight_shape(kind, cin, cout, k):
    # transposed convs store (in, out, k, k), plain convs (out, in, k, k)
    return (cin, cout, k, k) if kind == "tconv" else (cout, cin, k, k)


def param_names() -> list[str]:
    names = []
    for layer in LAYERS:
        names += [f"{layer}.w", f"{layer}.b"]
    return names


@dataclass
class RegressorModel:
    params: dict[str, np.ndarray]
    precision: str = "double"

    @property
    def dtype(self):
        return _ORACLE_DTYPES[self.precision]

    def descriptor(self) -> dict:
        return {
            "arch": ARCH_NAME,
            "precision": self.precision,
            "layers": [[name, *spec] for name, spec in LAYERS.items()],
        }

    def copy(self) -> "RegressorModel":
        return RegressorModel({k: v.copy() for k, v in self.params.items()}, self.precision)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in param_names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def predict(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        hr, lr, _ = forward(self, image, keep_cache=False)
        return hr, lr


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    learning_rate: float
    momentum: float = 0.95

    @classmethod
    def zeros_like(cls, model: RegressorModel, learning_rate: float, momentum: float = 0.95):
        return cls({k: np.zeros_like(v) for k, v in model.params.items()}, learning_rate, momentum)


def init_model(seed: int, precision: str = "double") -> RegressorModel:
    """He-uniform weights from a PCG64 stream, zero biases."""
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
    dtype = PRECISIONS[precision]
    rng = np.random.default_rng(seed)
    params = {}
    for name, (kind, cin, cout, k, stride, _) in LAYERS.items():
        fan_in = cin * k * k // (stride * stride) if kind == "tconv" else cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        params[f"{name}.w"] = rng.uniform(-bound, bound, _weight_shape(kind, cin, cout, k)).astype(dtype)
        params[f"{name}.b"] = np.zeros(cout, dtype=dtype)
    return RegressorModel(params, precision)


# --------------------------------------------------------------------------- layer primitives


def _im2col(xp, k, stride, ho, wo):
    """``(C*k*k, ho*wo)`` patch matrix, rows ordered (channel, ki, kj)."""
    v = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : stride * ho : stride, : stride * wo : stride]
    return v.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * k * k, ho * wo)


def _col2im(cols, shape, k, stride, ho, wo):
    """Adjoint of ``_im2col``: scatter-add patches back into a padded array of ``shape``."""
    out = np.zeros(shape, dtype=cols.dtype)
    c6 = cols.reshape(shape[0], k, k, ho, wo)
    for di in range(k):
        for dj in range(k):
            out[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += c6[:, di, dj]
    return out


def conv_forward(x, w, b, stride, pad):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    out = w.reshape(cout, -1) @ _im2col(xp, k, stride, ho, wo) + b[:, None]
    return out.reshape(cout, ho, wo)


def conv_backward(dout, x, w, stride, pad):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    _, ho, wo = dout.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    d2 = dout.reshape(cout, -1)
    dw = (d2 @ _im2col(xp, k, stride, ho, wo).T).reshape(w.shape)
    dxp = _col2im(w.reshape(cout, -1).T @ d2, xp.shape, k, stride, ho, wo)
    dx = dxp[:, pad : pad + h, pad : pad + wd] if pad else dxp
    return dx, dw, d2.sum(axis=1)


def tconv_forward(x, w, b, stride, pad):
    """Transposed convolution: the input-adjoint of ``conv_forward``."""
    cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wd - 1) * stride - 2 * pad + k
    cols = w.reshape(cin, -1).T @ x.reshape(cin, -1)
    yp = _col2im(cols, (cout, ho + 2 * pad, wo + 2 * pad), k, stride, h, wd)
    return yp[:, pad : pad + ho, pad : pad + wo] + b[:, None, None]


def tconv_backward(dout, x, w, stride, pad):
    cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    dyp = np.pad(dout, ((0, 0), (pad, pad), (pad, pad))) if pad else dout
    cols = _im2col(dyp, k, stride, h, wd)
    dx = (w.reshape(cin, -1) @ cols).reshape(cin, h, wd)
    dw = (x.reshape(cin, -1) @ cols.T).reshape(w.shape)
    return dx, dw, dout.reshape(cout, -1).sum(axis=1)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return np.where(x > 0, dout, 0)


def maxpool_forward(x):
    """2x2/2 max pool; ties go to the first cell in row-major window order."""
    c, h, w = x.shape
    win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = win.argmax(axis=3)
    return np.take_along_axis(win, idx[..., None], axis=3)[..., 0], idx


def maxpool_backward(dout, idx):
    c, ho, wo = dout.shape
    win = np.zeros((c, ho, wo, 4), dtype=dout.dtype)
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=3)
    return win.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * ho, 2 * wo)


# --------------------------------------------------------------------------- network


def _check_input(image):
    if image.ndim != 2:
        raise ShapeError(f"expected a 2-D grayscale image, got shape {image.shape}")
    h, w = image.shape
    if h == 0 or w == 0 or h % 16 or w % 16:
        raise ShapeError(f"image dims {h}x{w} must be positive multiples of 16")


def forward(model: RegressorModel, image, keep_cache: bool = True):
    """Return ``(hr, lr, cache)``; ``hr`` is ``(H/4, W/4)``, ``lr`` is ``(H/16, W/16)``."""
    image = np.asarray(image)
    _check_input(image)
    p = model.params
    c = {}
    a = image.astype(model.dtype)[None]
    for i, name in enumerate(("trunk.conv1", "trunk.conv2", "trunk.conv3"), 1):
        _, _, _, _, stride, pad = LAYERS[name]
        c[f"x{i}"] = a
        z = conv_forward(a, p[f"{name}.w"], p[f"{name}.b"], stride, pad)
        c[f"z{i}"] = z
        a, c[f"pool{i}"] = maxpool_forward(relu_forward(z))
    c["feat"] = a

    _, _, _, _, stride, pad = LAYERS["hr.up"]
    zh = tconv_forward(a, p["hr.up.w"], p["hr.up.b"], stride, pad)
    ah = relu_forward(zh)
    hr = conv_forward(ah, p["hr.out.w"], p["hr.out.b"], 1, 0)
    c["zh"], c["ah"] = zh, ah

    _, _, _, _, stride, pad = LAYERS["lr.conv"]
    zl = conv_forward(a, p["lr.conv.w"], p["lr.conv.b"], stride, pad)
    al = relu_forward(zl)
    lr = conv_forward(al, p["lr.out.w"], p["lr.out.b"], 1, 0)
    c["zl"], c["al"] = zl, al
    return hr[0], lr[0], (c if keep_cache else None)


def backward(model: RegressorModel, cache, grad_hr, grad_lr) -> dict[str, np.ndarray]:
    """Parameter gradients of ``<hr, grad_hr> + <lr, grad_lr>``."""
    p = model.params
    c = cache
    if grad_hr.shape != c["ah"].shape[1:] or grad_lr.shape != c["al"].shape[1:]:
        raise ShapeError(
            f"gradient shapes {grad_hr.shape}, {grad_lr.shape} do not match outputs "
            f"{c['ah'].shape[1:]}, {c['al'].shape[1:]}"
        )
    g = {}
    dt = model.dtype

    d_ah, g["hr.out.w"], g["hr.out.b"] = conv_backward(np.asarray(grad_hr, dt)[None], c["ah"], p["hr.out.w"], 1, 0)
    _, _, _, _, stride, pad = LAYERS["hr.up"]
    d_feat, g["hr.up.w"], g["hr.up.b"] = tconv_backward(
        relu_backward(d_ah, c["zh"]), c["feat"], p["hr.up.w"], stride, pad
    )

    d_al, g["lr.out.w"], g["lr.out.b"] = conv_backward(np.asarray(grad_lr, dt)[None], c["al"], p["lr.out.w"], 1, 0)
    _, _, _, _, stride, pad = LAYERS["lr.conv"]
    d_feat_lr, g["lr.conv.w"], g["lr.conv.b"] = conv_backward(
        relu_backward(d_al, c["zl"]), c["feat"], p["lr.conv.w"], stride, pad
    )
    da = d_feat + d_feat_lr

    for i, name in ((3, "trunk.conv3"), (2, "trunk.conv2"), (1, "trunk.conv1")):
        _, _, _, _, stride, pad = LAYERS[name]
        dz = relu_backward(maxpool_backward(da, c[f"pool{i}"]), c[f"z{i}"])
        da, g[f"{name}.w"], g[f"{name}.b"] = conv_backward(dz, c[f"x{i}"], p[f"{name}.w"], stride, pad)
    return g


def sgd_step(model: RegressorModel, grads: dict[str, np.ndarray], opt: OptimizerState) -> None:
    """Classical momentum: ``v = mu * v + g``; ``p -= lr * v``."""
    for name, param in model.params.items():
        grad = grads[name]
        v = opt.velocity[name]
        if grad.shape != param.shape or v.shape != param.shape:
            raise ShapeError(f"{name}: param {param.shape}, grad {grad.shape}, velocity {v.shape}")
        v *= opt.momentum
        v += grad
        param -= opt.learning_rate * v


# --------------------------------------------------------------------------- gradient check


def half_sq_loss(model, image, g_hr, g_lr):
    hr, lr, _ = forward(model, image, keep_cache=False)
    return 0.5 * np.sum((hr - g_hr) ** 2) + 0.5 * np.sum((lr - g_lr) ** 2)


def _loss_difference(plus, minus, g_hr, g_lr):
    # L(+) - L(-) factored as a difference of squares to avoid cancelling two large sums
    (hp, lp), (hm, lm) = plus, minus
    return 0.5 * (np.sum((hp - hm) * (hp + hm - 2 * g_hr)) + np.sum((lp - lm) * (lp + lm - 2 * g_lr)))


def grad_check(
    model: RegressorModel,
    image,
    g_hr,
    g_lr,
    fd_step: float = 1e-6,
    *,
    samples_per_tensor: int = 200,
    seed: int = 0,
    backward_fn=None,
    names=None,
    return_details: bool = False,
):
    """Max relative error between ``backward`` and central differences.

    Samples up to ``samples_per_tensor`` entries of every parameter tensor.
    The perturbed forward passes run in ``np.longdouble`` so the oracle's
    roundoff stays well below the analytic path's.  The relative error of one
    entry is ``|a - n| / max(|a|, |n|, floor)`` with ``floor = 1e-7 * max |grad|``
    over the sampled entries, so exact zeros on both sides (dead units) count
    as agreement rather than 0/0.
    """
    if model.precision != "double":
        raise ValueError("gradient checks need a double-precision model")
    backward_fn = backward_fn or backward
    hr, lr, cache = forward(model, image)
    analytic = backward_fn(model, cache, hr - g_hr, lr - g_lr)
    probe = RegressorModel({k: v.astype(np.longdouble) for k, v in model.params.items()}, "extended")
    g_hr = np.asarray(g_hr, np.longdouble)
    g_lr = np.asarray(g_lr, np.longdouble)
    rng = np.random.default_rng(seed)
    pairs = []
    for name in names or param_names():
        flat = probe.params[name].reshape(-1)
        n = min(samples_per_tensor, flat.size)
        for j in rng.choice(flat.size, size=n, replace=False):
            old = flat[j]
            flat[j] = old + fd_step
            plus = probe.predict(image)
            flat[j] = old - fd_step
            minus = probe.predict(image)
            flat[j] = old
            numeric = _loss_difference(plus, minus, g_hr, g_lr) / (2 * fd_step)
            pairs.append((name, float(analytic[name].reshape(-1)[j]), float(numeric)))
    a = np.array([q[1] for q in pairs])
    n = np.array([q[2] for q in pairs])
    floor = 1e-7 * max(np.abs(a).max(), np.abs(n).max(), 1e-300)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if return_details:
        per_tensor = {}
        for (name, _, _), r in zip(pairs, rel):
            per_tensor[name] = max(per_tensor.get(name, 0.0), float(r))
        return float(rel.max()), per_tensor
    return float(rel.max())


# --------------------------------------------------------------------------- checkpoints


def _pack_tensor(buf, name, arr, dtype):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)) + nb)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def save_checkpoint(model: RegressorModel, path, opt: OptimizerState | None = None) -> None:
    """Write ``CKP1 | u32 json length | json | u32 tensor count | tensors``.

    Tensor data is float32 for single-precision models and float64 for
    double-precision ones (recorded as ``dtype`` in the JSON descriptor), so
    round trips are lossless in either mode.
    """
    desc = model.descriptor()
    data_dtype = "<f4" if model.precision == "single" else "<f8"
    desc["dtype"] = "float32" if model.precision == "single" else "float64"
    tensors = [(name, model.params[name]) for name in param_names()]
    if opt is not None:
        desc["optimizer"] = {"learning_rate": opt.learning_rate, "momentum": opt.momentum}
        tensors += [(f"velocity/{name}", opt.velocity[name]) for name in param_names()]
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _pack_tensor(buf, name, arr, data_dtype)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[RegressorModel, OptimizerState | None]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatMismatch(f"{path}: bad magic {data[:4]!r}")
    try:
        (n_json,) = struct.unpack_from("<I", data, 4)
        desc = json.loads(data[8 : 8 + n_json].decode("utf-8"))
        if desc.get("arch") != ARCH_NAME:
            raise FormatMismatch(f"{path}: unknown architecture {desc.get('arch')!r}")
        precision = desc["precision"]
        dtype = np.dtype("<f4" if desc["dtype"] == "float32" else "<f8")
        off = 8 + n_json
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            name = data[off + 2 : off + 2 + nlen].decode("utf-8")
            off += 2 + nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 1)
            off += 1 + 4 * ndim
            size = int(np.prod(shape)) * dtype.itemsize
            if off + size > len(data):
                raise FormatMismatch(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=off).reshape(
                shape
            ).astype(PRECISIONS[precision])
            off += size
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatMismatch(f"{path}: corrupt checkpoint ({exc})") from exc
    missing = [n for n in param_names() if n not in tensors]
    if missing:
        raise FormatMismatch(f"{path}: missing tensors {missing}")
    model = RegressorModel({n: tensors[n] for n in param_names()}, precision)
    opt = None
    if "optimizer" in desc:
        o = desc["optimizer"]
        opt = OptimizerState(
            {n: tensors[f"velocity/{n}"] for n in param_names()}, o["learning_rate"], o["momentum"]
        )
    return model, opt
