"""Small fully-convolutional segmenter plus a multi-label classification head.

The segmenter is ``depth`` same-padded 3x3 conv + ReLU layers of ``features``
channels followed by a 1x1 projection to class logits and a per-pixel
softmax. The feature map entering the projection is the latent map that the
head consumes: conv 1x1 -> ReLU -> conv 3x3 -> ReLU -> global average pool ->
FC -> ReLU -> FC -> sigmoid.

Everything works on NHWC float64 batches; single images are accepted and
returned without the batch axis. Gradients are written by hand.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mlsl.grid import read_framed, write_framed


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


Params = dict[str, np.ndarray]


# -- layer primitives ------------------------------------------------------


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    """(N,H,W,Cin) -> (N,H,W,Cin,k,k) view over the zero-padded input."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    return sliding_window_view(xp, (k, k), axis=(1, 2))


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Same-padded conv. ``w`` is (k, k, Cin, Cout). Returns output and window view."""
    k = w.shape[0]
    if k == 1:
        return x @ w[0, 0] + b, None
    cols = _windows(x, k)
    return np.tensordot(cols, w.transpose(2, 0, 1, 3), axes=3) + b, cols


def conv_backward(
    dy: np.ndarray, x: np.ndarray, cols: np.ndarray | None, w: np.ndarray, need_dx: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    k = w.shape[0]
    db = dy.sum(axis=(0, 1, 2))
    if k == 1:
        dw = np.tensordot(x, dy, axes=([0, 1, 2], [0, 1, 2]))[None, None]
        dx = dy @ w[0, 0].T if need_dx else None
        return dw, db, dx
    dw = np.tensordot(cols, dy, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    dx = None
    if need_dx:
        # full correlation == same conv with the spatially flipped, transposed kernel
        flipped = w[::-1, ::-1].transpose(0, 1, 3, 2)
        dx = np.tensordot(_windows(dy, k), flipped.transpose(2, 0, 1, 3), axes=3)
    return dw, db, dx


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gap(x: np.ndarray) -> np.ndarray:
    """Global average pool over the two spatial axes of an NHWC batch."""
    return x.mean(axis=(1, 2))


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected HxWxC or NxHxWxC, got shape {x.shape}")
    return x, False


# -- networks --------------------------------------------------------------


@dataclass
class SegNet:
    num_classes: int
    features: int = 16
    depth: int = 3
    params: Params = field(default_factory=dict)

    @classmethod
    def init(cls, num_classes: int, features: int = 16, depth: int = 3, rng=None) -> "SegNet":
        rng = np.random.default_rng(rng)
        params: Params = {}
        cin = 3
        for i in range(depth):
            params[f"conv{i}.w"] = _uniform(rng, (3, 3, cin, features), 9 * cin)
            params[f"conv{i}.b"] = np.zeros(features)
            cin = features
        params["proj.w"] = _uniform(rng, (1, 1, cin, num_classes), cin)
        params["proj.b"] = np.zeros(num_classes)
        return cls(num_classes, features, depth, params)

    @property
    def latent_channels(self) -> int:
        return self.features if self.depth else 3

    def with_params(self, params: Params) -> "SegNet":
        return SegNet(self.num_classes, self.features, self.depth, params)

    def _forward(self, x: np.ndarray):
        if x.shape[-1] != 3:
            raise ShapeError(f"segmenter expects 3 input channels, got {x.shape[-1]}")
        caches = []
        a = x - 0.5
        for i in range(self.depth):
            z, cols = conv_forward(a, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            caches.append((a, cols, z > 0))
            a = np.maximum(z, 0.0)
        logits, _ = conv_forward(a, self.params["proj.w"], self.params["proj.b"])
        return softmax(logits), a, caches

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Per-pixel class probabilities for one image or a batch."""
        x, single = _as_batch(images)
        probs, _, _ = self._forward(x)
        return probs[0] if single else probs

    def _backward(self, dprobs, probs, latent, caches, dlatent=None) -> tuple[Params, np.ndarray]:
        grads: Params = {}
        dlogits = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        dw, db, da = conv_backward(dlogits, latent, None, self.params["proj.w"])
        grads["proj.w"], grads["proj.b"] = dw, db
        if dlatent is not None:
            da = da + dlatent
        for i in reversed(range(self.depth)):
            a_in, cols, mask = caches[i]
            dz = da * mask
            dw, db, da = conv_backward(dz, a_in, cols, self.params[f"conv{i}.w"], need_dx=i > 0)
            grads[f"conv{i}.w"], grads[f"conv{i}.b"] = dw, db
        return grads, da


@dataclass
class ClsHead:
    in_channels: int
    num_classes: int
    depth: int = 32
    hidden: int = 16
    params: Params = field(default_factory=dict)

    @classmethod
    def init(cls, in_channels: int, num_classes: int, depth: int = 32, hidden: int = 16, rng=None) -> "ClsHead":
        rng = np.random.default_rng(rng)
        params = {
            "c1.w": _uniform(rng, (1, 1, in_channels, depth), in_channels),
            "c1.b": np.zeros(depth),
            "c2.w": _uniform(rng, (3, 3, depth, depth), 9 * depth),
            "c2.b": np.zeros(depth),
            "fc1.w": _uniform(rng, (depth, hidden), depth),
            "fc1.b": np.zeros(hidden),
            "fc2.w": _uniform(rng, (hidden, num_classes), hidden),
            "fc2.b": np.zeros(num_classes),
        }
        return cls(in_channels, num_classes, depth, hidden, params)

    def with_params(self, params: Params) -> "ClsHead":
        return ClsHead(self.in_channels, self.num_classes, self.depth, self.hidden, params)

    def _forward(self, latent: np.ndarray):
        if latent.shape[-1] != self.in_channels:
            raise ShapeError(f"head expects {self.in_channels} latent channels, got {latent.shape[-1]}")
        p = self.params
        z1, _ = conv_forward(latent, p["c1.w"], p["c1.b"])
        a1 = np.maximum(z1, 0.0)
        z2, cols2 = conv_forward(a1, p["c2.w"], p["c2.b"])
        a2 = np.maximum(z2, 0.0)
        g = gap(a2)
        z3 = g @ p["fc1.w"] + p["fc1.b"]
        a3 = np.maximum(z3, 0.0)
        scores = sigmoid(a3 @ p["fc2.w"] + p["fc2.b"])
        return scores, (latent, z1 > 0, a1, cols2, z2 > 0, g, z3 > 0, a3, a2.shape)

    def predict(self, latent: np.ndarray) -> np.ndarray:
        x, single = _as_batch(latent)
        scores, _ = self._forward(x)
        return scores[0] if single else scores

    def _backward(self, dscores, scores, cache) -> tuple[Params, np.ndarray]:
        latent, m1, a1, cols2, m2, g, m3, a3, shape2 = cache
        p = self.params
        grads: Params = {}
        dz4 = dscores * scores * (1.0 - scores)
        grads["fc2.w"], grads["fc2.b"] = a3.T @ dz4, dz4.sum(axis=0)
        dz3 = (dz4 @ p["fc2.w"].T) * m3
        grads["fc1.w"], grads["fc1.b"] = g.T @ dz3, dz3.sum(axis=0)
        dg = dz3 @ p["fc1.w"].T
        n, h, w, d = shape2
        da2 = np.broadcast_to(dg[:, None, None, :] / (h * w), shape2)
        dz2 = da2 * m2
        grads["c2.w"], grads["c2.b"], da1 = conv_backward(dz2, a1, cols2, p["c2.w"])
        dz1 = da1 * m1
        grads["c1.w"], grads["c1.b"], dlatent = conv_backward(dz1, latent, None, p["c1.w"])
        return grads, dlatent


# -- forward/backward through both networks ---------------------------------


class Pass:
    """Cached forward pass; ``backward`` turns loss gradients into parameter gradients."""

    def __init__(self, net: SegNet, head: ClsHead | None, images: np.ndarray):
        x, self._single = _as_batch(images)
        self.net, self.head, self.images = net, head, x
        self._seg_params = dict(net.params)
        self._head_params = dict(head.params) if head is not None else None
        self._probs, self._latent, self._seg_cache = net._forward(x)
        self._scores = self._head_cache = None
        if head is not None:
            self._scores, self._head_cache = head._forward(self._latent)

    def _view(self, a):
        if a is None:
            return None
        return a[0] if self._single else a

    @property
    def probs(self) -> np.ndarray:
        return self._view(self._probs)

    @property
    def latent(self) -> np.ndarray:
        return self._view(self._latent)

    @property
    def scores(self) -> np.ndarray | None:
        return self._view(self._scores)

    def _check_fresh(self, images) -> None:
        if images is not None:
            x, _ = _as_batch(images)
            if x.shape != self.images.shape or not np.array_equal(x, self.images):
                raise StaleCacheError("backward called with inputs different from the cached forward")
        if any(self.net.params.get(k) is not v for k, v in self._seg_params.items()):
            raise StaleCacheError("segmenter parameters changed since forward")
        if self.head is not None and any(
            self.head.params.get(k) is not v for k, v in self._head_params.items()
        ):
            raise StaleCacheError("head parameters changed since forward")

    def backward(self, dprobs=None, dscores=None, images=None) -> tuple[Params, Params | None]:
        """Gradients of the loss w.r.t. segmenter and head parameters.

        ``dprobs`` is dL/dprobs (same shape as ``probs``), ``dscores`` is
        dL/dscores. Either may be None, meaning that loss term is inactive.
        Head gradients are None when no head was run or ``dscores`` is None.
        """
        self._check_fresh(images)
        dp = np.zeros_like(self._probs) if dprobs is None else np.asarray(dprobs, dtype=np.float64)
        if self._single and dprobs is not None:
            dp = dp[None]
        head_grads = None
        dlatent = None
        if dscores is not None:
            if self.head is None:
                raise ShapeError("dscores given but forward ran without a head")
            ds = np.asarray(dscores, dtype=np.float64)
            if self._single:
                ds = ds[None]
            head_grads, dlatent = self.head._backward(ds, self._scores, self._head_cache)
        seg_grads, _ = self.net._backward(dp, self._probs, self._latent, self._seg_cache, dlatent)
        return seg_grads, head_grads


def forward_seg(net: SegNet, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and latent map for one image (or batch)."""
    p = Pass(net, None, image)
    return p.probs, p.latent


def forward_cls(head: ClsHead, latent: np.ndarray) -> np.ndarray:
    return head.predict(latent)


def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    """Plain SGD: returns new arrays, leaving ``params`` untouched."""
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name}")
        out[name] = p - lr * g
    return out


def add_grads(a: Params | None, b: Params | None) -> Params | None:
    if a is None:
        return b
    if b is None:
        return a
    return {k: a[k] + b[k] for k in a}


# -- checkpoints -----------------------------------------------------------


def _param_items(net: SegNet, head: ClsHead | None):
    for name in sorted(net.params):
        yield "seg." + name, net.params[name]
    if head is not None:
        for name in sorted(head.params):
            yield "head." + name, head.params[name]


def digest(net: SegNet, head: ClsHead | None = None) -> str:
    h = hashlib.sha256()
    for name, arr in _param_items(net, head):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(path, net: SegNet, head: ClsHead | None = None, seed: int | None = None) -> None:
    layout, chunks, offset = [], [], 0
    for name, arr in _param_items(net, head):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "format": "mlsl-checkpoint/1",
        "dtype": "float64",
        "C": net.num_classes,
        "F": net.features,
        "depth": net.depth,
        "head": None if head is None else {"D": head.depth, "D2": head.hidden},
        "seed": seed,
        "params": layout,
    }
    write_framed(path, header, b"".join(chunks))


def load_checkpoint(path) -> tuple[SegNet, ClsHead | None, dict]:
    header, payload = read_framed(path)
    if header.get("format") != "mlsl-checkpoint/1":
        raise ValueError(f"{path}: not an mlsl checkpoint")
    seg, hd = {}, {}
    for item in header["params"]:
        n = int(np.prod(item["shape"])) * 8
        arr = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=item["offset"])
        arr = arr.reshape(item["shape"]).astype(np.float64)
        kind, name = item["name"].split(".", 1)
        (seg if kind == "seg" else hd)[name] = arr
    net = SegNet(header["C"], header["F"], header["depth"], seg)
    head = None
    if header["head"] is not None:
        cfg = header["head"]
        head = ClsHead(net.latent_channels, header["C"], cfg["D"], cfg["D2"], hd)
    return net, head, header
