"""Dense NCHW tensor ops with hand-written gradients, the UNet generator and
the patch discriminator.

Every op keeps the dtype of its input, so gradient checks run in float64
while training runs in float32.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PN_EPS = 1e-8
CHECKPOINT_MAGIC = b"SCTF1"


# -- primitive ops -------------------------------------------------------------

def _im2col(x, kh, kw):
    """(B, C, H, W) -> (B*H*W, kh*kw*C) patches of the zero-padded input.

    Channels are innermost so the gather copies contiguous runs.
    """
    B, C, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B, H, W, C, kh, kw
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, kh * kw * C)


def _wmat(w):
    """Weights [O, C, kh, kw] as an (O, kh*kw*C) matrix matching ``_im2col``."""
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def conv2d(x, w, b, cols=None):
    """Same-size zero-padded cross-correlation plus bias."""
    B, C, H, W = x.shape
    O, I, kh, kw = w.shape
    if I != C:
        raise ValueError(f"conv2d: input has {C} channels, weights expect {I}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel sizes must be odd")
    if kh == 1 and kw == 1:
        y = x.transpose(0, 2, 3, 1).reshape(-1, C) @ w[:, :, 0, 0].T + b
    else:
        if cols is None:
            cols = _im2col(x, kh, kw)
        y = cols @ _wmat(w).T + b
    return y.reshape(B, H, W, O).transpose(0, 3, 1, 2)


def conv2d_grad(x, w, upstream, cols=None, need_dx=True, need_dw=True):
    """Gradients ``(dx, dw, db)`` of ``sum(conv2d(x, w, b) * upstream)``.

    ``dx`` is the correlation of ``upstream`` with the spatially flipped,
    channel-transposed kernel. Skipped outputs are returned as None.
    """
    B, C, H, W = x.shape
    O, I, kh, kw = w.shape
    if upstream.shape != (B, O, H, W):
        raise ValueError(f"conv2d_grad: upstream shape {upstream.shape} != {(B, O, H, W)}")
    db = dw = dx = None
    if need_dw:
        db = upstream.sum(axis=(0, 2, 3))
        g = upstream.transpose(0, 2, 3, 1).reshape(B * H * W, O)
        if kh == 1 and kw == 1:
            dw = (g.T @ x.transpose(0, 2, 3, 1).reshape(-1, C))[:, :, None, None]
        else:
            if cols is None:
                cols = _im2col(x, kh, kw)
            dw = (g.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
    if need_dx:
        wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx = conv2d(upstream, wf, np.zeros(C, dtype=upstream.dtype))
    return dx, dw, db


def avg_pool2(x):
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {H}x{W}")
    return x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def avg_pool2_grad(upstream):
    return np.repeat(np.repeat(upstream, 2, axis=2), 2, axis=3) * upstream.dtype.type(0.25)


def nn_upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def nn_upsample2_grad(upstream):
    B, C, H, W = upstream.shape
    return upstream.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))


def pixelwise_norm(x, eps=PN_EPS):
    """Standardise the channel vector at every pixel (population std)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    return xc * inv, inv


def pixelwise_norm_grad(y, inv, upstream):
    gm = upstream.mean(axis=1, keepdims=True)
    gy = (upstream * y).mean(axis=1, keepdims=True)
    return inv * (upstream - gm - y * gy)


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x, upstream):
    return upstream * (x > 0)


# -- layers ----------------------------------------------------------------------
#
# Each layer caches what its backward pass needs; ``backward`` accumulates
# parameter gradients into the ``grads`` dict (skipped when it is None) and
# returns the input gradient (None when ``need_dx`` is false).

class Conv:
    def __init__(self, name, cin, cout, k):
        self.name, self.cin, self.cout, self.k = name, cin, cout, k

    def shapes(self):
        return {self.name + ".w": (self.cout, self.cin, self.k, self.k), self.name + ".b": (self.cout,)}

    def init(self, rng, params, dtype):
        std = np.sqrt(2.0 / (self.cin * self.k * self.k))
        params[self.name + ".w"] = (rng.standard_normal((self.cout, self.cin, self.k, self.k))
                                    * std).astype(dtype)
        params[self.name + ".b"] = np.zeros(self.cout, dtype=dtype)

    def forward(self, params, x):
        w = params[self.name + ".w"]
        self.x = x
        self.cols = _im2col(x, self.k, self.k) if self.k > 1 else None
        return conv2d(x, w, params[self.name + ".b"], cols=self.cols)

    def backward(self, params, grads, dy, need_dx=True):
        dx, dw, db = conv2d_grad(self.x, params[self.name + ".w"], dy, cols=self.cols,
                                 need_dx=need_dx, need_dw=grads is not None)
        if grads is not None:
            grads[self.name + ".w"] = dw
            grads[self.name + ".b"] = db
        self.x = self.cols = None
        return dx


class ConvBlock:
    """conv -> pixelwise norm -> ReLU."""

    def __init__(self, name, cin, cout, k=3, norm=True):
        self.conv = Conv(name, cin, cout, k)
        self.norm = norm

    def shapes(self):
        return self.conv.shapes()

    def init(self, rng, params, dtype):
        self.conv.init(rng, params, dtype)

    def forward(self, params, x):
        h = self.conv.forward(params, x)
        if self.norm:
            h, self.inv = pixelwise_norm(h)
            self.y = h
        self.pre = h
        return relu(h)

    def backward(self, params, grads, dy, need_dx=True):
        g = relu_grad(self.pre, dy)
        if self.norm:
            g = pixelwise_norm_grad(self.y, self.inv, g)
        self.pre = self.y = self.inv = None
        return self.conv.backward(params, grads, g, need_dx)


class Sequential:
    def __init__(self, layers):
        self.layers = layers

    def shapes(self):
        return {k: v for layer in self.layers for k, v in layer.shapes().items()}

    def init(self, rng, params, dtype):
        for layer in self.layers:
            layer.init(rng, params, dtype)

    def forward(self, params, x):
        for layer in self.layers:
            x = layer.forward(params, x)
        return x

    def backward(self, params, grads, dy, need_dx=True):
        last = len(self.layers) - 1
        for n, layer in enumerate(reversed(self.layers)):
            dy = layer.backward(params, grads, dy, need_dx or n < last)
        return dy


# -- networks ---------------------------------------------------------------------

class Generator:
    """UNet over 4 scales with widths base * 2**s.

    Each of the three upper scales holds two conv blocks on the way down and
    two on the way up (four per scale); the bottom scale holds four. A 1x1
    conv + ReLU adapts the input channels, a linear 1x1 conv produces the
    output. Downsampling is 2x2 average pooling, upsampling 2x nearest
    neighbour, and skips are concatenated before the first decoder conv.
    """

    kind = "generator"

    def __init__(self, in_ch=3, out_ch=1, base=32, scales=4, enc_convs=2, dec_convs=2,
                 bottom_convs=4):
        self.config = dict(in_ch=in_ch, out_ch=out_ch, base=base, scales=scales,
                           enc_convs=enc_convs, dec_convs=dec_convs, bottom_convs=bottom_convs)
        self.scales = scales
        width = [base * 2 ** s for s in range(scales)]
        self.width = width
        self.inp = Conv("in", in_ch, base, 1)
        self.enc, self.dec = [], []
        cin = base
        for s in range(scales - 1):
            blocks = []
            for n in range(enc_convs):
                blocks.append(ConvBlock(f"enc{s}.{n}", cin, width[s]))
                cin = width[s]
            self.enc.append(Sequential(blocks))
        blocks = []
        for n in range(bottom_convs):
            blocks.append(ConvBlock(f"mid.{n}", cin, width[-1]))
            cin = width[-1]
        self.mid = Sequential(blocks)
        for s in reversed(range(scales - 1)):
            blocks = [ConvBlock(f"dec{s}.0", width[s + 1] + width[s], width[s])]
            for n in range(1, dec_convs):
                blocks.append(ConvBlock(f"dec{s}.{n}", width[s], width[s]))
            self.dec.append(Sequential(blocks))
        self.out = Conv("out", base, out_ch, 1)

    @property
    def divisor(self) -> int:
        return 2 ** (self.scales - 1)

    def _modules(self):
        return [self.inp, *self.enc, self.mid, *self.dec, self.out]

    def param_shapes(self) -> dict:
        return {k: v for m in self._modules() for k, v in m.shapes().items()}

    def init_params(self, rng, dtype=np.float32) -> dict:
        params = {}
        for m in self._modules():
            m.init(rng, params, dtype)
        return params

    def forward(self, params, x):
        H, W = x.shape[2:]
        if H % self.divisor or W % self.divisor:
            raise ValueError(f"generator input {H}x{W} not divisible by {self.divisor}")
        h = self.inp.forward(params, x)
        self.in_pre = h
        h = relu(h)
        self.skip_ch = []
        skips = []
        for enc in self.enc:
            h = enc.forward(params, h)
            skips.append(h)
            h = avg_pool2(h)
        h = self.mid.forward(params, h)
        for dec, skip in zip(self.dec, reversed(skips)):
            up = nn_upsample2(h)
            self.skip_ch.append(up.shape[1])
            h = dec.forward(params, np.concatenate([up, skip], axis=1))
        return self.out.forward(params, h)

    def backward(self, params, dy, need_dx=False):
        """Returns ``(grads, dx)`` for the most recent forward call."""
        grads = {}
        g = self.out.backward(params, grads, dy)
        dskips = []
        for dec, nup in zip(reversed(self.dec), reversed(self.skip_ch)):
            g = dec.backward(params, grads, g)
            dskips.append(g[:, nup:])
            g = nn_upsample2_grad(g[:, :nup])
        g = self.mid.backward(params, grads, g)
        for enc, dskip in zip(reversed(self.enc), reversed(dskips)):
            g = avg_pool2_grad(g) + dskip
            g = enc.backward(params, grads, g)
        g = relu_grad(self.in_pre, g)
        dx = self.inp.backward(params, grads, g, need_dx)
        self.in_pre = None
        return grads, dx

    def layer_sequence(self):
        """Deepest input-to-output path as (kind, kernel) stages."""
        seq = [("conv", 1)]
        n_enc = len(self.enc[0].layers)
        n_dec = len(self.dec[0].layers)
        for _ in range(self.scales - 1):
            seq += [("conv", 3)] * n_enc + [("pool", 2)]
        seq += [("conv", 3)] * len(self.mid.layers)
        for _ in range(self.scales - 1):
            seq += [("upsample", 2)] + [("conv", 3)] * n_dec
        return seq + [("conv", 1)]


class Discriminator:
    """Stride-1 conv stack with ReLU, ending in a 1x1 conv to one logit per pixel."""

    kind = "discriminator"

    def __init__(self, in_ch=4, width=64, layers=4):
        self.config = dict(in_ch=in_ch, width=width, layers=layers)
        self.in_ch = in_ch
        blocks = []
        cin = in_ch
        for n in range(layers):
            blocks.append(ConvBlock(f"d{n}", cin, width, norm=False))
            cin = width
        self.body = Sequential(blocks)
        self.head = Conv("head", width, 1, 1)

    def param_shapes(self) -> dict:
        return {**self.body.shapes(), **self.head.shapes()}

    def init_params(self, rng, dtype=np.float32) -> dict:
        params = {}
        self.body.init(rng, params, dtype)
        self.head.init(rng, params, dtype)
        return params

    def forward(self, params, x):
        if x.shape[1] != self.in_ch:
            raise ValueError(f"discriminator expects {self.in_ch} channels, got {x.shape[1]}")
        return self.head.forward(params, self.body.forward(params, x))

    def backward(self, params, dy, need_grads=True, need_dx=False):
        grads = {} if need_grads else None
        g = self.head.backward(params, grads, dy)
        return grads, self.body.backward(params, grads, g, need_dx)

    def layer_sequence(self):
        return [("conv", 3)] * len(self.body.layers) + [("conv", 1)]


def generator_forward(params, mr, net: Generator | None = None):
    return (net or Generator()).forward(params, mr)


def discriminator_forward(params, x, net: Discriminator | None = None):
    return (net or Discriminator()).forward(params, x)


# -- receptive fields ----------------------------------------------------------------

def receptive_field_analytic(stages) -> tuple[int, int]:
    """Size/jump recurrence over ``(kind, kernel)`` stages, kinds conv/pool/upsample."""
    size, jump = 1.0, 1.0
    for kind, k in stages:
        if kind == "conv":
            size += (k - 1) * jump
        elif kind == "pool":
            size += (k - 1) * jump
            jump *= k
        elif kind == "upsample":
            jump /= k
        else:
            raise ValueError(f"unsupported layer kind {kind!r}")
    return int(size), int(size)


def receptive_field_empirical(net, params, shape, pixel=None) -> tuple[int, int]:
    """Extent of input pixels with non-zero gradient for one output pixel.

    Uses float64 copies of the parameters and a strictly positive random input.
    """
    B, C, H, W = shape
    p64 = {k: v.astype(np.float64) for k, v in params.items()}
    x = np.random.default_rng(0).uniform(0.1, 1.0, size=shape)
    y = net.forward(p64, x)
    r, c = pixel if pixel is not None else (H // 2, W // 2)
    dy = np.zeros_like(y)
    dy[0, 0, r, c] = 1.0
    _, dx = net.backward(p64, dy, need_dx=True)
    hit = np.abs(dx[0]).sum(axis=0) != 0
    rows = np.flatnonzero(hit.any(axis=1))
    cols = np.flatnonzero(hit.any(axis=0))
    if len(rows) == 0:
        return 0, 0
    return int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


# -- checkpoints -------------------------------------------------------------------------

def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Magic line, compact JSON manifest line, then float32-le payloads in manifest order."""
    names = list(tensors)
    manifest = {
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC + b"\n"):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    start = len(CHECKPOINT_MAGIC) + 1
    end = data.index(b"\n", start)
    manifest = json.loads(data[start:end])
    off = end + 1
    tensors = {}
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"]))
        buf = data[off:off + 4 * n]
        if len(buf) != 4 * n:
            raise ValueError(f"{path}: truncated payload for {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        off += 4 * n
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return tensors, manifest["meta"]
