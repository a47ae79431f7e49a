"""Tensor primitives and the SubFlowNet encoder-decoder variants.

Everything operates on "Tensor4" arrays: plain numpy ndarrays with dims
(batch, channels, height, width).  Convolution is implemented as im2col
(per-tap strided slice copies) plus one batched matmul, and transposed
convolution is its exact adjoint (col2im scatter), so the two share kernels
and satisfy <conv(x), y> == <x, deconv(y)>.

Kernel axis order is always (conv_out, conv_in, k, k): a conv layer maps
conv_in -> conv_out channels, and a deconv layer with the same array maps
conv_out -> conv_in.  Deconv layers carry no bias.

Architectures (spatial sizes for 48x48 input):
  encoder  conv 7x7 s1 (48) -> conv 5x5 s2 (24) -> conv 3x3 s2 (12) -> conv 3x3 s2 (6)
  decoder  deconv 4x4 s2 (12) -> deconv 4x4 s2 (24) -> deconv 4x4 s2 (48)
Encoder activations at resolutions 12 and 24 are added onto the matching
deconv outputs before the decoder activation.  SubFlowNetS stacks the two
input frames into one 2-channel stream; SubFlowNetC runs one stream per
frame, concatenates, and finishes with two 3x3 convolutions.  The output
head has 2 channels (u, v) and no activation.  Input frames are [0, 1]
luma, centered to mid-gray at the entry of the forward pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, ParameterError, StateError

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1
VARIANTS = ("SubFlowNetS", "SubFlowNetC")
DEFAULT_WIDTHS = {"SubFlowNetS": (8, 16, 32, 32), "SubFlowNetC": (8, 8, 16, 16)}
LEAKY_SLOPE = 0.1

# Luma frames arrive in [0, 1]; the forward pass shifts them to [-0.5, 0.5]
# so first-layer pre-activations are not dominated by the frame's DC level
# (zero-bias leaky units then split on texture contrast, not brightness).
INPUT_OFFSET = 0.5

# When True, every conv/deconv output is checked for NaN/inf.
DEBUG_FINITE = False


def _check_finite(name: str, arr: np.ndarray) -> None:
    if DEBUG_FINITE and not np.all(np.isfinite(arr)):
        raise StateError(f"non-finite values after {name}")


# ---------------------------------------------------------------------------
# im2col / col2im


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, out_h, out_w), xp.dtype)
    for di in range(k):
        ilim = di + stride * (out_h - 1) + 1
        for dj in range(k):
            jlim = dj + stride * (out_w - 1) + 1
            cols[:, :, di, dj] = xp[:, :, di:ilim:stride, dj:jlim:stride]
    return cols


def _col2im(gcols: np.ndarray, xp_shape, k: int, stride: int) -> np.ndarray:
    out_h, out_w = gcols.shape[-2:]
    gxp = np.zeros(xp_shape, gcols.dtype)
    for di in range(k):
        ilim = di + stride * (out_h - 1) + 1
        for dj in range(k):
            jlim = dj + stride * (out_w - 1) + 1
            gxp[:, :, di:ilim:stride, dj:jlim:stride] += gcols[:, :, di, dj]
    return gxp


# ---------------------------------------------------------------------------
# convolution


def conv2d_forward(x, kernel, bias=None, stride=1, want_cache=True):
    """Strided cross-correlation with zero padding (k-1)/2.

    Returns (out, cache); cache is None when ``want_cache`` is false.
    """
    if x.ndim != 4:
        raise DimensionError(f"input must be (b, c, h, w), got {x.shape}")
    out_ch, in_ch, k, k2 = kernel.shape
    if k != k2:
        raise ParameterError(f"kernel must be square, got {k}x{k2}")
    if stride not in (1, 2):
        raise ParameterError(f"stride must be 1 or 2, got {stride}")
    if x.shape[1] != in_ch:
        raise DimensionError(
            f"input has {x.shape[1]} channels, kernel expects {in_ch}"
        )
    b, _, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out_h = (h + 2 * p - k) // stride + 1
    out_w = (w + 2 * p - k) // stride + 1
    cols = _im2col(xp, k, stride, out_h, out_w)
    colsf = cols.reshape(b, in_ch * k * k, out_h * out_w)
    out = np.matmul(kernel.reshape(out_ch, -1), colsf).reshape(b, out_ch, out_h, out_w)
    if bias is not None:
        out = out + bias[None, :, None, None]
    _check_finite("conv2d", out)
    cache = (x.shape, xp.shape, colsf, kernel, stride, p) if want_cache else None
    return out, cache


def conv2d_backward(gout, cache):
    """Gradients of conv2d_forward: returns (gx, gkernel, gbias)."""
    if cache is None:
        raise StateError("conv2d backward called without a forward cache")
    x_shape, xp_shape, colsf, kernel, stride, p = cache
    b, _, h, w = x_shape
    out_ch, in_ch, k, _ = kernel.shape
    _, _, out_h, out_w = gout.shape
    g2 = gout.reshape(b, out_ch, out_h * out_w)
    gbias = gout.sum(axis=(0, 2, 3))
    gkernel = np.matmul(g2, colsf.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    gcols = np.matmul(kernel.reshape(out_ch, -1).T, g2).reshape(
        b, in_ch, k, k, out_h, out_w
    )
    gxp = _col2im(gcols, xp_shape, k, stride)
    gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
    return gx, gkernel, gbias


# ---------------------------------------------------------------------------
# transposed convolution


def _deconv_geometry(kernel, stride):
    in_ch, out_ch, k, k2 = kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]
    if k != k2:
        raise ParameterError(f"kernel must be square, got {k}x{k2}")
    if stride < 1 or (k - stride) < 0 or (k - stride) % 2:
        raise ParameterError(
            f"deconv needs k >= stride with k - stride even, got k={k} stride={stride}"
        )
    return in_ch, out_ch, k, (k - stride) // 2


def deconv2d_forward(x, kernel, stride=2, want_cache=True):
    """Transposed convolution, the exact adjoint of conv2d_forward.

    ``kernel`` keeps conv axis order (conv_out, conv_in, k, k); this op
    consumes conv_out channels and emits conv_in.  With k=4, stride=2 the
    spatial dims double exactly.
    """
    if x.ndim != 4:
        raise DimensionError(f"input must be (b, c, h, w), got {x.shape}")
    in_ch, out_ch, k, p = _deconv_geometry(kernel, stride)
    if x.shape[1] != in_ch:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {in_ch}")
    b, _, h, w = x.shape
    out_h = stride * (h - 1) + k - 2 * p
    out_w = stride * (w - 1) + k - 2 * p
    g2 = x.reshape(b, in_ch, h * w)
    gcols = np.matmul(kernel.reshape(in_ch, -1).T, g2).reshape(b, out_ch, k, k, h, w)
    padded_shape = (b, out_ch, out_h + 2 * p, out_w + 2 * p)
    padded = _col2im(gcols, padded_shape, k, stride)
    out = padded[:, :, p : p + out_h, p : p + out_w] if p else padded
    _check_finite("deconv2d", out)
    cache = (x, kernel, stride, p) if want_cache else None
    return out, cache


def deconv2d_backward(gout, cache):
    """Gradients of deconv2d_forward: returns (gx, gkernel)."""
    if cache is None:
        raise StateError("deconv2d backward called without a forward cache")
    x, kernel, stride, p = cache
    in_ch, out_ch, k, _ = kernel.shape
    b, _, h, w = x.shape
    gp = np.pad(gout, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _im2col(gp, k, stride, h, w)
    colsf = cols.reshape(b, out_ch * k * k, h * w)
    gx = np.matmul(kernel.reshape(in_ch, -1), colsf).reshape(b, in_ch, h, w)
    x2 = x.reshape(b, in_ch, h * w)
    gkernel = np.matmul(x2, colsf.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    return gx, gkernel


# ---------------------------------------------------------------------------
# pointwise ops


def leaky_relu(x, slope=LEAKY_SLOPE):
    """f(x) = x for x > 0, slope*x otherwise."""
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(gout, x, slope=LEAKY_SLOPE):
    return np.where(x > 0, gout, slope * gout)


def apply_texture_mask(pred, mask_u, mask_v):
    """Zero a 2-channel field outside its per-direction masks.

    ``pred`` is (b, 2, h, w); masks may be (h, w) or (b, h, w).  The same
    multiplication is its own gradient rule: gradients flow only through
    masked-true positions.
    """
    if pred.ndim != 4 or pred.shape[1] != 2:
        raise DimensionError(f"pred must be (b, 2, h, w), got {pred.shape}")
    mu = np.asarray(mask_u)
    mv = np.asarray(mask_v)
    if mu.shape != mv.shape:
        raise DimensionError(f"mask shapes differ: {mu.shape} vs {mv.shape}")
    if mu.shape == pred.shape[-2:]:
        m = np.stack([mu, mv])[None]
    elif mu.shape == (pred.shape[0],) + pred.shape[-2:]:
        m = np.stack([mu, mv], axis=1)
    else:
        raise DimensionError(
            f"masks of shape {mu.shape} do not match prediction {pred.shape}"
        )
    return pred * m.astype(pred.dtype)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ConvLayer:
    """Weights of one (de)convolution layer.

    ``kernel`` is (conv_out, conv_in, k, k); ``bias`` is None for deconv
    layers.
    """

    name: str
    kind: str  # "conv" | "deconv"
    kernel: np.ndarray
    bias: np.ndarray | None
    stride: int

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]

    def param_count(self) -> int:
        return self.kernel.size + (self.bias.size if self.bias is not None else 0)


@dataclass
class NetworkParams:
    """A SubFlowNet variant's ordered layers plus wiring flags."""

    variant: str
    layers: dict  # name -> ConvLayer, in definition order
    widths: tuple
    share_streams: bool = False

    def total_params(self) -> int:
        return sum(layer.param_count() for layer in self.layers.values())


def count_params(params: NetworkParams) -> int:
    """Total number of weight and bias elements."""
    return params.total_params()


def _init_layer(rng, name, kind, a_ch, b_ch, k, stride, bias, dtype):
    fan_in = (b_ch if kind == "conv" else a_ch) * k * k
    bound = np.sqrt(1.0 / fan_in)
    kernel = rng.uniform(-bound, bound, size=(a_ch, b_ch, k, k)).astype(dtype)
    bias_arr = np.zeros(a_ch, dtype=dtype) if bias else None
    return ConvLayer(name=name, kind=kind, kernel=kernel, bias=bias_arr, stride=stride)


def _stream_layer_specs(prefix, in_ch, widths):
    w1, w2, w3, w4 = widths
    return [
        (f"{prefix}enc1", "conv", w1, in_ch, 7, 1, True),
        (f"{prefix}enc2", "conv", w2, w1, 5, 2, True),
        (f"{prefix}enc3", "conv", w3, w2, 3, 2, True),
        (f"{prefix}enc4", "conv", w4, w3, 3, 2, True),
        (f"{prefix}dec1", "deconv", w4, w3, 4, 2, False),
        (f"{prefix}dec2", "deconv", w3, w2, 4, 2, False),
        (f"{prefix}dec3", "deconv", w2, w1, 4, 2, False),
    ]


def init_network(
    variant: str,
    widths: tuple | None = None,
    seed: int = 0,
    dtype=np.float32,
    share_streams: bool = False,
) -> NetworkParams:
    """Build a randomly initialized network.

    ``widths`` are the four encoder channel counts (w1, w2, w3, w4); the
    decoder widths (w3, w2, w1) follow from the skip additions.  Weights are
    uniform in +-sqrt(1/fan_in), biases zero.
    """
    if variant not in VARIANTS:
        raise ParameterError(f"variant must be one of {VARIANTS}, got {variant!r}")
    widths = tuple(widths) if widths is not None else DEFAULT_WIDTHS[variant]
    if len(widths) != 4 or any(w < 1 for w in widths):
        raise ParameterError(f"widths must be four positive channel counts, got {widths}")
    w1 = widths[0]
    rng = np.random.default_rng(seed)
    specs = []
    if variant == "SubFlowNetS":
        specs += _stream_layer_specs("", 2, widths)
        specs += [("head", "conv", 2, w1, 3, 1, True)]
    else:
        specs += _stream_layer_specs("a_", 1, widths)
        if not share_streams:
            specs += _stream_layer_specs("b_", 1, widths)
        specs += [
            ("trans1", "conv", w1, 2 * w1, 3, 1, True),
            ("head", "conv", 2, w1, 3, 1, True),
        ]
    layers = {}
    for name, kind, a_ch, b_ch, k, stride, bias in specs:
        layers[name] = _init_layer(rng, name, kind, a_ch, b_ch, k, stride, bias, dtype)
    return NetworkParams(
        variant=variant, layers=layers, widths=widths, share_streams=share_streams
    )


# ---------------------------------------------------------------------------
# forward / backward


def _conv_act(layer, x, want_cache):
    z, c = conv2d_forward(x, layer.kernel, layer.bias, layer.stride, want_cache)
    return leaky_relu(z), (c, z)


def _stream_forward(layers, prefix, x, want_cache):
    """Encoder-decoder with skip additions at the 1/2 and 1/4 resolutions."""
    a1, c1 = _conv_act(layers[f"{prefix}enc1"], x, want_cache)
    a2, c2 = _conv_act(layers[f"{prefix}enc2"], a1, want_cache)
    a3, c3 = _conv_act(layers[f"{prefix}enc3"], a2, want_cache)
    a4, c4 = _conv_act(layers[f"{prefix}enc4"], a3, want_cache)
    z5, c5 = deconv2d_forward(a4, layers[f"{prefix}dec1"].kernel, 2, want_cache)
    s5 = z5 + a3
    d1 = leaky_relu(s5)
    z6, c6 = deconv2d_forward(d1, layers[f"{prefix}dec2"].kernel, 2, want_cache)
    s6 = z6 + a2
    d2 = leaky_relu(s6)
    z7, c7 = deconv2d_forward(d2, layers[f"{prefix}dec3"].kernel, 2, want_cache)
    d3 = leaky_relu(z7)
    tape = (c1, c2, c3, c4, c5, s5, c6, s6, c7, z7) if want_cache else None
    return d3, tape


def _stream_backward(layers, prefix, tape, gout, grads):
    c1, c2, c3, c4, c5, s5, c6, s6, c7, z7 = tape
    gz7 = leaky_relu_backward(gout, z7)
    gd2, gk7 = deconv2d_backward(gz7, c7)
    _accumulate(grads, f"{prefix}dec3", gk7, None)
    gs6 = leaky_relu_backward(gd2, s6)
    gd1, gk6 = deconv2d_backward(gs6, c6)
    _accumulate(grads, f"{prefix}dec2", gk6, None)
    gs5 = leaky_relu_backward(gd1, s5)
    ga4, gk5 = deconv2d_backward(gs5, c5)
    _accumulate(grads, f"{prefix}dec1", gk5, None)
    ga3 = _conv_act_backward(layers, f"{prefix}enc4", c4, ga4, grads) + gs5
    ga2 = _conv_act_backward(layers, f"{prefix}enc3", c3, ga3, grads) + gs6
    ga1 = _conv_act_backward(layers, f"{prefix}enc2", c2, ga2, grads)
    return _conv_act_backward(layers, f"{prefix}enc1", c1, ga1, grads)


def _conv_act_backward(layers, name, cache, gact, grads):
    c, z = cache
    gz = leaky_relu_backward(gact, z)
    gx, gk, gb = conv2d_backward(gz, c)
    _accumulate(grads, name, gk, gb)
    return gx


def _accumulate(grads, name, gkernel, gbias):
    if name in grads:
        grads[name]["kernel"] = grads[name]["kernel"] + gkernel
        if gbias is not None:
            grads[name]["bias"] = grads[name]["bias"] + gbias
    else:
        grads[name] = {"kernel": gkernel, "bias": gbias}


def _validate_inputs(reference, current):
    for name, t in (("reference", reference), ("current", current)):
        if t.ndim != 4 or t.shape[1] != 1:
            raise DimensionError(f"{name} must be (b, 1, h, w), got {t.shape}")
    if reference.shape != current.shape:
        raise DimensionError(
            f"reference {reference.shape} and current {current.shape} differ"
        )
    h, w = reference.shape[2:]
    if h % 8 or w % 8 or h < 8 or w < 8:
        raise DimensionError(
            f"spatial dims must be multiples of 8 and at least 8, got {h}x{w}"
        )


def forward(params: NetworkParams, reference, current, want_cache=True):
    """Predict a (b, 2, h, w) displacement field from two (b, 1, h, w) frames.

    Frames are [0, 1] luma and are centered by ``INPUT_OFFSET`` before the
    first convolution.  Returns (out, cache); pass ``want_cache=False`` for
    inference to skip retaining backward buffers.
    """
    _validate_inputs(reference, current)
    reference = reference - reference.dtype.type(INPUT_OFFSET)
    current = current - current.dtype.type(INPUT_OFFSET)
    layers = params.layers
    if params.variant == "SubFlowNetS":
        x = np.concatenate([reference, current], axis=1)
        d3, stream_tape = _stream_forward(layers, "", x, want_cache)
        out, c_head = conv2d_forward(
            d3, layers["head"].kernel, layers["head"].bias, 1, want_cache
        )
        cache = ("S", stream_tape, c_head) if want_cache else None
        return out, cache
    prefix_b = "a_" if params.share_streams else "b_"
    da, tape_a = _stream_forward(layers, "a_", reference, want_cache)
    db, tape_b = _stream_forward(layers, prefix_b, current, want_cache)
    cat = np.concatenate([da, db], axis=1)
    t_layer = layers["trans1"]
    t1, c_t1 = conv2d_forward(cat, t_layer.kernel, t_layer.bias, 1, want_cache)
    a_t1 = leaky_relu(t1)
    out, c_head = conv2d_forward(
        a_t1, layers["head"].kernel, layers["head"].bias, 1, want_cache
    )
    cache = (
        ("C", tape_a, tape_b, prefix_b, da.shape[1], c_t1, t1, c_head)
        if want_cache
        else None
    )
    return out, cache


def backward(params: NetworkParams, cache, gout):
    """Reverse-mode gradients of :func:`forward`.

    Returns (grads, greference, gcurrent) where ``grads`` maps layer names
    to {"kernel": array, "bias": array-or-None}.
    """
    if cache is None:
        raise StateError("backward called without a forward cache")
    layers = params.layers
    grads: dict = {}
    if cache[0] == "S":
        _, stream_tape, c_head = cache
        gd3, gk, gb = conv2d_backward(gout, c_head)
        _accumulate(grads, "head", gk, gb)
        gx = _stream_backward(layers, "", stream_tape, gd3, grads)
        return grads, gx[:, :1], gx[:, 1:]
    _, tape_a, tape_b, prefix_b, split, c_t1, t1, c_head = cache
    ga_t1, gk, gb = conv2d_backward(gout, c_head)
    _accumulate(grads, "head", gk, gb)
    gt1 = leaky_relu_backward(ga_t1, t1)
    gcat, gk, gb = conv2d_backward(gt1, c_t1)
    _accumulate(grads, "trans1", gk, gb)
    gref = _stream_backward(layers, "a_", tape_a, gcat[:, :split], grads)
    gcur = _stream_backward(layers, prefix_b, tape_b, gcat[:, split:], grads)
    return grads, gref, gcur


def predict(params: NetworkParams, reference, current):
    """Inference-only forward pass."""
    out, _ = forward(params, reference, current, want_cache=False)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _fnv1a(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(params: NetworkParams, path) -> None:
    """Serialize weights to the binary checkpoint format (magic ``SFCK``)."""
    body = bytearray()
    body += struct.pack("<I", CHECKPOINT_VERSION)
    body += struct.pack("<BB", VARIANTS.index(params.variant) + 1, int(params.share_streams))
    body += struct.pack("<H", len(params.layers))
    for layer in params.layers.values():
        name = layer.name.encode()
        body += struct.pack("<B", len(name)) + name
        a_ch, b_ch, k, _ = layer.kernel.shape
        body += struct.pack(
            "<BBBHHH",
            0 if layer.kind == "conv" else 1,
            int(layer.bias is not None),
            layer.stride,
            a_ch,
            b_ch,
            k,
        )
    for layer in params.layers.values():
        body += layer.kernel.astype("<f4").tobytes()
        if layer.bias is not None:
            body += layer.bias.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(body)
        fh.write(struct.pack("<Q", _fnv1a(bytes(body))))


def load_checkpoint(path) -> NetworkParams:
    """Read a checkpoint back into NetworkParams (float32 weights)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        rest = fh.read()
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r} in checkpoint {path}")
    if len(rest) < 8:
        raise FormatError(f"truncated checkpoint {path}")
    body, (checksum,) = rest[:-8], struct.unpack("<Q", rest[-8:])
    if _fnv1a(body) != checksum:
        raise FormatError(f"checksum mismatch in checkpoint {path}")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, body, off)
        off += size
        return values

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    variant_id, share = take("<BB")
    if not 1 <= variant_id <= len(VARIANTS):
        raise FormatError(f"unknown variant id {variant_id}")
    (layer_count,) = take("<H")
    descriptors = []
    for _ in range(layer_count):
        (name_len,) = take("<B")
        name = body[off : off + name_len].decode()
        off += name_len
        kind_id, has_bias, stride, a_ch, b_ch, k = take("<BBBHHH")
        descriptors.append((name, kind_id, has_bias, stride, a_ch, b_ch, k))
    layers = {}
    for name, kind_id, has_bias, stride, a_ch, b_ch, k in descriptors:
        n = a_ch * b_ch * k * k
        kernel = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(
            a_ch, b_ch, k, k
        )
        off += 4 * n
        bias = None
        if has_bias:
            bias = np.frombuffer(body, dtype="<f4", count=a_ch, offset=off).copy()
            off += 4 * a_ch
        layers[name] = ConvLayer(
            name=name,
            kind="conv" if kind_id == 0 else "deconv",
            kernel=kernel.copy(),
            bias=bias,
            stride=stride,
        )
    enc_names = [n for n in layers if n.endswith(("enc1", "enc2", "enc3", "enc4"))]
    widths = tuple(layers[n].kernel.shape[0] for n in sorted(enc_names)[:4])
    return NetworkParams(
        variant=VARIANTS[variant_id - 1],
        layers=layers,
        widths=widths,
        share_streams=bool(share),
    )
