"""Small differentiable networks with hand-written backpropagation.

A network is an ordered list of :class:`LayerSpec` entries and one flat
float64 parameter vector. Layers read their weights through views into
that vector, and :func:`backward` returns gradients in the same flat layout.

The feature tap is the pre-ReLU penultimate activation: the input of the
final ReLU before the classifier head (or the head input when no such ReLU
exists). Image batches are laid out as (batch, height, width, channels).
"""

from dataclasses import dataclass, field

import numpy as np

from .container import content_hash, seed_from_section, seed_section
from .errors import ShapeError, SpecError
from .rng import SplitMix64

DENSE, CONV3X3, RELU, GAP, HEAD = "dense", "conv3x3", "relu", "gap", "linear_head"
KIND_CODES = {DENSE: 1, CONV3X3: 2, RELU: 3, GAP: 4, HEAD: 5}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int = 0
    n_out: int = 0

    def param_shapes(self):
        if self.kind in (DENSE, HEAD):
            return [(self.n_in, self.n_out), (self.n_out,)]
        if self.kind == CONV3X3:
            return [(3, 3, self.n_in, self.n_out), (self.n_out,)]
        return []

    @property
    def fan_in(self):
        return 9 * self.n_in if self.kind == CONV3X3 else self.n_in


def dense(n_in, n_out):
    return LayerSpec(DENSE, n_in, n_out)


def conv3x3(in_ch, out_ch):
    return LayerSpec(CONV3X3, in_ch, out_ch)


def relu():
    return LayerSpec(RELU)


def gap():
    return LayerSpec(GAP)


def linear_head(n_in, classes):
    return LayerSpec(HEAD, n_in, classes)


def mlp_spec(d_in, hidden, d_feat, classes=None):
    """dense -> relu -> dense[tap] -> relu (-> linear_head)."""
    layers = [dense(d_in, hidden), relu(), dense(hidden, d_feat), relu()]
    if classes:
        layers.append(linear_head(d_feat, classes))
    return layers


def conv_spec(in_ch, d_feat, classes=None, widths=(16, 32)):
    """conv3x3 -> relu -> conv3x3 -> gap -> dense[tap] -> relu (-> linear_head)."""
    layers = [conv3x3(in_ch, widths[0]), relu(), conv3x3(widths[0], widths[1]), gap(),
              dense(widths[1], d_feat), relu()]
    if classes:
        layers.append(linear_head(d_feat, classes))
    return layers


def validate_spec(spec):
    """Check width compatibility and return (input kind, tap index, feature width)."""
    spec = list(spec)
    if not spec:
        raise SpecError("empty network spec")
    for i, layer in enumerate(spec):
        if layer.kind not in KIND_CODES:
            raise SpecError(f"layer {i}: unknown kind {layer.kind!r}")
        if layer.kind in (DENSE, CONV3X3, HEAD) and (layer.n_in < 1 or layer.n_out < 1):
            raise SpecError(f"layer {i}: widths must be positive")
        if layer.kind == HEAD and i != len(spec) - 1:
            raise SpecError("linear_head must be the last layer")

    first = next((l for l in spec if l.kind in (DENSE, CONV3X3, HEAD)), None)
    if first is None:
        raise SpecError("network needs at least one parametric layer")
    input_kind = "image" if first.kind == CONV3X3 else "vector"
    kind, width = input_kind, first.n_in
    for i, layer in enumerate(spec):
        if layer.kind == CONV3X3:
            if kind != "image" or layer.n_in != width:
                raise SpecError(f"layer {i}: conv3x3 expects image with {layer.n_in} channels, got {kind} of width {width}")
            width = layer.n_out
        elif layer.kind in (DENSE, HEAD):
            if kind != "vector" or layer.n_in != width:
                raise SpecError(f"layer {i}: {layer.kind} expects vector of width {layer.n_in}, got {kind} of width {width}")
            width = layer.n_out
        elif layer.kind == GAP:
            if kind != "image":
                raise SpecError(f"layer {i}: gap needs an image input")
            kind = "vector"

    end = len(spec) - 1 if spec[-1].kind == HEAD else len(spec)
    last = end - 1
    if last >= 0 and spec[last].kind == RELU:
        last -= 1
    if last < 0:
        raise SpecError("no layer available for the feature tap")
    if _layer_output_kind(spec, last, input_kind) != "vector":
        raise SpecError("feature tap must be a vector (add gap before it)")
    return input_kind, last, _width_after(spec, last, first.n_in)


def _layer_output_kind(spec, index, input_kind):
    kind = input_kind
    for layer in spec[:index + 1]:
        if layer.kind == GAP:
            kind = "vector"
    return kind


def _width_after(spec, index, width):
    for layer in spec[:index + 1]:
        if layer.kind in (DENSE, CONV3X3, HEAD):
            width = layer.n_out
    return width


@dataclass
class Network:
    spec: tuple
    params: np.ndarray
    rng_seed: int = 0
    input_kind: str = field(init=False)
    tap: int = field(init=False)
    feature_dim: int = field(init=False)

    def __post_init__(self):
        self.spec = tuple(self.spec)
        self.input_kind, self.tap, self.feature_dim = validate_spec(self.spec)
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        expected = sum(int(np.prod(s)) for layer in self.spec for s in layer.param_shapes())
        if self.params.shape != (expected,):
            raise SpecError(f"expected {expected} parameters, got {self.params.shape}")

    @property
    def has_head(self):
        return self.spec[-1].kind == HEAD

    @property
    def input_width(self):
        return next(l.n_in for l in self.spec if l.kind in (DENSE, CONV3X3, HEAD))

    def layer_params(self, flat=None):
        """Per-layer lists of array views into ``flat`` (default: own params)."""
        flat = self.params if flat is None else flat
        out, pos = [], 0
        for layer in self.spec:
            views = []
            for shape in layer.param_shapes():
                size = int(np.prod(shape))
                views.append(flat[pos:pos + size].reshape(shape))
                pos += size
            out.append(views)
        return out

    def weight_mask(self):
        """1.0 on weight matrices, 0.0 on biases."""
        mask = np.zeros_like(self.params)
        for layer_views in self.layer_params(mask):
            if layer_views:
                layer_views[0][...] = 1.0
        return mask

    def copy(self):
        return Network(self.spec, self.params.copy(), self.rng_seed)

    def to_sections(self, prefix=""):
        rows = [[KIND_CODES[l.kind], l.n_in, l.n_out] for l in self.spec]
        return {
            f"{prefix}spec": np.array(rows, dtype=np.int64),
            f"{prefix}params": self.params,
            f"{prefix}seed": seed_section(self.rng_seed),
        }

    @classmethod
    def from_sections(cls, sections, prefix=""):
        rows = sections[f"{prefix}spec"]
        spec = [LayerSpec(CODE_KINDS[int(r[0])], int(r[1]), int(r[2])) for r in rows]
        return cls(spec, sections[f"{prefix}params"].copy(), seed_from_section(sections[f"{prefix}seed"]))

    def digest(self):
        return content_hash(self.to_sections())


def init_network(spec, seed):
    """He-initialised network: weights ~ N(0, 2/fan_in), biases zero."""
    spec = tuple(spec)
    validate_spec(spec)
    stream = SplitMix64(seed)
    chunks = []
    for layer in spec:
        shapes = layer.param_shapes()
        if not shapes:
            continue
        w_shape, b_shape = shapes
        chunks.append(stream.normal(w_shape, np.sqrt(2.0 / layer.fan_in)).ravel())
        chunks.append(np.zeros(int(np.prod(b_shape))))
    params = np.concatenate(chunks) if chunks else np.zeros(0)
    return Network(spec, params, int(seed))


# ---------------------------------------------------------------- layer kernels

def _im2col(x):
    b, h, w, c = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [padded[:, i:i + h, j:j + w, :] for i in range(3) for j in range(3)]
    return np.concatenate(cols, axis=3)  # (b, h, w, 9c)


def _col2im(dcols, shape):
    b, h, w, c = shape
    dpadded = np.zeros((b, h + 2, w + 2, c))
    k = 0
    for i in range(3):
        for j in range(3):
            dpadded[:, i:i + h, j:j + w, :] += dcols[..., k * c:(k + 1) * c]
            k += 1
    return dpadded[:, 1:h + 1, 1:w + 1, :]


def _layer_forward(layer, views, x):
    if layer.kind in (DENSE, HEAD):
        w, b = views
        return x @ w + b, x
    if layer.kind == CONV3X3:
        w, b = views
        cols = _im2col(x)
        return cols @ w.reshape(-1, layer.n_out) + b, (cols, x.shape)
    if layer.kind == RELU:
        return np.maximum(x, 0.0), x > 0
    if layer.kind == GAP:
        return x.mean(axis=(1, 2)), x.shape
    raise SpecError(layer.kind)


def _layer_backward(layer, views, saved, grad, grad_views):
    if layer.kind in (DENSE, HEAD):
        w, _ = views
        grad_views[0][...] += saved.T @ grad
        grad_views[1][...] += grad.sum(axis=0)
        return grad @ w.T
    if layer.kind == CONV3X3:
        w, _ = views
        cols, shape = saved
        wr = w.reshape(-1, layer.n_out)
        grad_views[0][...] += (cols.reshape(-1, wr.shape[0]).T @ grad.reshape(-1, layer.n_out)).reshape(w.shape)
        grad_views[1][...] += grad.sum(axis=(0, 1, 2))
        return _col2im(grad @ wr.T, shape)
    if layer.kind == RELU:
        return grad * saved
    if layer.kind == GAP:
        b, h, w, c = saved
        return np.broadcast_to(grad[:, None, None, :] / (h * w), saved).copy()
    raise SpecError(layer.kind)


@dataclass
class ForwardCache:
    saved: list
    features: np.ndarray
    batch_size: int


def _check_batch(net, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if net.input_kind == "vector":
        if batch.ndim != 2 or batch.shape[1] != net.input_width:
            raise ShapeError(f"expected (batch, {net.input_width}) input, got {batch.shape}")
    elif batch.ndim != 4 or batch.shape[3] != net.input_width:
        raise ShapeError(f"expected (batch, h, w, {net.input_width}) input, got {batch.shape}")
    return batch


def forward(net, batch):
    """Run ``net`` on ``batch``.

    Returns ``(features, logits, cache)``; ``features`` is the pre-ReLU tap
    and ``logits`` is ``None`` unless the layer list ends in a linear head.
    """
    x = _check_batch(net, batch)
    saved, features = [], None
    for i, (layer, views) in enumerate(zip(net.spec, net.layer_params())):
        x, s = _layer_forward(layer, views, x)
        saved.append(s)
        if i == net.tap:
            features = x
    logits = x if net.has_head else None
    return features, logits, ForwardCache(saved, features, features.shape[0])


def backward(net, cache, feature_grad=None, logit_grad=None, return_input_grad=False):
    """Gradient of the loss w.r.t. the flat parameter vector.

    ``feature_grad`` is dL/d(features) at the tap and ``logit_grad`` is
    dL/d(logits); either may be ``None``. Parameters are not modified.
    """
    if feature_grad is not None:
        feature_grad = np.asarray(feature_grad, dtype=np.float64)
        if feature_grad.shape != cache.features.shape:
            raise ShapeError(f"feature grad shape {feature_grad.shape} != {cache.features.shape}")
    if logit_grad is not None:
        if not net.has_head:
            raise ShapeError("network has no logits")
        logit_grad = np.asarray(logit_grad, dtype=np.float64)
        if logit_grad.shape != (cache.batch_size, net.spec[-1].n_out):
            raise ShapeError(f"logit grad shape {logit_grad.shape} mismatched")

    grads = np.zeros_like(net.params)
    grad_views = net.layer_params(grads)
    views = net.layer_params()
    g = logit_grad
    for i in range(len(net.spec) - 1, -1, -1):
        if i == net.tap and feature_grad is not None:
            g = feature_grad if g is None else g + feature_grad
        if g is None:
            continue
        g = _layer_backward(net.spec[i], views[i], cache.saved[i], g, grad_views[i])
    if return_input_grad:
        return grads, g
    return grads


def downstream_features(net, batch):
    """Post-ReLU penultimate representation: what a classifier head would consume."""
    features, _, _ = forward(net, batch)
    return np.maximum(features, 0.0) if net.spec[net.tap + 1:net.tap + 2] == (relu(),) else features


# ---------------------------------------------------------------- projection head

class ParametricHead:
    """Learnable D_s -> D_t linear map followed by batch normalisation.

    On globally pooled vectors this is exactly a 1x1 convolution plus BN.
    ``position`` selects whether the head reads the student's pre-ReLU tap
    or its ReLU output. Parameters are flat: weight, bias, scale, shift.
    """

    def __init__(self, d_student, d_teacher, position="pre_relu", seed=0, momentum=0.9, bn_eps=1e-5):
        if position not in ("pre_relu", "post_relu"):
            raise SpecError(f"position must be pre_relu or post_relu, got {position!r}")
        self.d_student, self.d_teacher = int(d_student), int(d_teacher)
        self.position = position
        self.momentum = momentum
        self.bn_eps = bn_eps
        n = self.d_teacher
        weight = SplitMix64(seed).normal((self.d_student, n), np.sqrt(2.0 / self.d_student))
        self.params = np.concatenate([weight.ravel(), np.zeros(n), np.ones(n), np.zeros(n)])
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)

    def views(self, flat=None):
        flat = self.params if flat is None else flat
        ds, dt = self.d_student, self.d_teacher
        w = flat[:ds * dt].reshape(ds, dt)
        rest = flat[ds * dt:]
        return w, rest[:dt], rest[dt:2 * dt], rest[2 * dt:]

    def decay_mask(self):
        """Weight decay on the linear map only; BN scale/shift are exempt."""
        mask = np.zeros_like(self.params)
        w, b, _, _ = self.views(mask)
        w[...] = 1.0
        b[...] = 1.0
        return mask

    def forward(self, x, train=True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_student:
            raise ShapeError(f"head expects (batch, {self.d_student}), got {x.shape}")
        w, b, scale, shift = self.views()
        inp = np.maximum(x, 0.0) if self.position == "post_relu" else x
        z = inp @ w + b
        if train:
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean
            self.running_var = m * self.running_var + (1 - m) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.bn_eps)
        zhat = (z - mean) * inv_std
        return scale * zhat + shift, (x, inp, zhat, inv_std, train)

    def backward(self, cache, grad):
        """Return (flat parameter gradient, gradient w.r.t. the head input)."""
        x, inp, zhat, inv_std, train = cache
        w, _, scale, _ = self.views()
        grads = np.zeros_like(self.params)
        gw, gb, gscale, gshift = self.views(grads)
        gscale[...] = np.sum(grad * zhat, axis=0)
        gshift[...] = np.sum(grad, axis=0)
        dzhat = grad * scale
        if train:
            n = grad.shape[0]
            dz = inv_std / n * (n * dzhat - dzhat.sum(axis=0) - zhat * np.sum(dzhat * zhat, axis=0))
        else:
            dz = dzhat * inv_std
        gw[...] = inp.T @ dz
        gb[...] = dz.sum(axis=0)
        dx = dz @ w.T
        if self.position == "post_relu":
            dx = dx * (x > 0)
        return grads, dx

    @property
    def shapes(self):
        w, b, s, t = self.views()
        return {"weight": w.shape, "bias": b.shape, "scale": s.shape, "shift": t.shape}


# ---------------------------------------------------------------- gradient check

KINK_NUDGE = 1e-3


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    worst_layer: int
    analytic: float
    numeric: float
    tol: float
    n_params: int
    nudged: int = 0

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max rel err {self.max_rel_error:.3e} at param {self.worst_index} "
                f"(layer {self.worst_layer}): analytic {self.analytic:.6e} vs fd {self.numeric:.6e}")


def _layer_of(net, index):
    pos = 0
    for i, layer in enumerate(net.spec):
        pos += sum(int(np.prod(s)) for s in layer.param_shapes())
        if index < pos:
            return i
    return -1


def _nudge_zeros(batch):
    """Move inputs sitting exactly on a ReLU kink to +-KINK_NUDGE (sign alternates by position)."""
    batch = batch.copy()
    flat = batch.reshape(-1)
    zeros = np.flatnonzero(flat == 0.0)
    flat[zeros] = np.where(zeros % 2 == 0, KINK_NUDGE, -KINK_NUDGE)
    return batch, zeros.size


def grad_check(net, loss_fn, batch, tol=1e-4):
    """Compare analytic gradients with central finite differences.

    ``loss_fn(features, logits)`` must return ``(loss, feature_grad,
    logit_grad)``. The step for parameter ``j`` is ``1e-5 * max(1, |theta_j|)``
    and the per-parameter error is ``|ga - gfd| / max(1e-8, |ga| + |gfd|)``.
    The network is restored before returning.
    """
    batch, nudged = _nudge_zeros(np.asarray(batch, dtype=np.float64))
    features, logits, cache = forward(net, batch)
    _, fg, lg = loss_fn(features, logits)
    analytic = backward(net, cache, fg, lg)

    original = net.params.copy()
    numeric = np.zeros_like(original)
    try:
        for j in range(original.size):
            h = 1e-5 * max(1.0, abs(original[j]))
            net.params[j] = original[j] + h
            f, l, _ = forward(net, batch)
            plus = loss_fn(f, l)[0]
            net.params[j] = original[j] - h
            f, l, _ = forward(net, batch)
            minus = loss_fn(f, l)[0]
            net.params[j] = original[j]
            numeric[j] = (plus - minus) / (2 * h)
    finally:
        net.params[...] = original

    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    worst = int(np.argmax(rel)) if rel.size else -1
    return GradCheckReport(
        max_rel_error=float(rel[worst]) if rel.size else 0.0,
        worst_index=worst,
        worst_layer=_layer_of(net, worst) if worst >= 0 else -1,
        analytic=float(analytic[worst]) if rel.size else 0.0,
        numeric=float(numeric[worst]) if rel.size else 0.0,
        tol=tol,
        n_params=original.size,
        nudged=nudged,
    )
