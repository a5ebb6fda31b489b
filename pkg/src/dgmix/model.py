"""Source-specific classifier heads fused by a learned domain-prediction branch.

Layout (defaults reproduce LeNet on 28x28 digits)::

    image -> conv1 -> relu -> pool -> conv2 -> relu -> pool -> flatten
          -> fc1 -> relu -> {head_1 .. head_N} -> per-domain class scores
    pool2 output -> global avg pool -> fc (-> N) -> softmax -> mixing weights

The mixing weights blend the head scores, optionally pulled toward the
uniform average by a switch value per sample (a 0/1 draw during training,
the constant ``alpha`` at inference).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import layers as L
from .exceptions import ShapeError, UsageError, ValidationError

HEAD_SCOPES = ("classifier", "fc1")
BRANCH_CONVS = ("shared", "separate")


@dataclass(frozen=True)
class Architecture:
    """Layer widths and sharing boundaries.

    ``head_scope="classifier"`` gives each domain only its own final
    classifier layer; ``"fc1"`` makes fc1 domain-specific too.
    ``branch_convs="shared"`` runs the domain branch on the trunk's own
    convolution weights; ``"separate"`` gives it a private copy with the
    same hyperparameters.
    """

    n_domains: int = 5
    n_classes: int = 10
    image_size: int = 28
    in_channels: int = 1
    conv1: int = 20
    conv2: int = 50
    kernel: int = 5
    fc1: int = 500
    head_scope: str = "classifier"
    branch_convs: str = "shared"
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("n_domains", "n_classes", "image_size", "in_channels", "conv1", "conv2", "kernel", "fc1"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.head_scope not in HEAD_SCOPES:
            raise ValidationError(f"head_scope must be one of {HEAD_SCOPES}, got {self.head_scope!r}")
        if self.branch_convs not in BRANCH_CONVS:
            raise ValidationError(f"branch_convs must be one of {BRANCH_CONVS}, got {self.branch_convs!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValidationError(f"dtype must be float64 or float32, got {self.dtype!r}")
        self.spatial_sizes()

    def spatial_sizes(self):
        s1 = self.image_size - self.kernel + 1
        if s1 < 2 or s1 % 2:
            raise ShapeError(f"conv1 output {s1} for image {self.image_size} must be even and >= 2")
        s2 = s1 // 2 - self.kernel + 1
        if s2 < 2 or s2 % 2:
            raise ShapeError(f"conv2 output {s2} must be even and >= 2")
        return s1, s2

    @property
    def flat_features(self):
        return self.conv2 * (self.spatial_sizes()[1] // 2) ** 2

    def shapes(self):
        k, c0 = self.kernel, self.in_channels
        N, C = self.n_domains, self.n_classes
        out = {
            "conv1.weight": (self.conv1, c0, k, k),
            "conv1.bias": (self.conv1,),
            "conv2.weight": (self.conv2, self.conv1, k, k),
            "conv2.bias": (self.conv2,),
        }
        if self.head_scope == "classifier":
            out["fc1.weight"] = (self.flat_features, self.fc1)
            out["fc1.bias"] = (self.fc1,)
        else:
            out["heads.fc1.weight"] = (N, self.flat_features, self.fc1)
            out["heads.fc1.bias"] = (N, self.fc1)
        out["heads.weight"] = (N, self.fc1, C)
        out["heads.bias"] = (N, C)
        if self.branch_convs == "separate":
            out["branch.conv1.weight"] = out["conv1.weight"]
            out["branch.conv1.bias"] = out["conv1.bias"]
            out["branch.conv2.weight"] = out["conv2.weight"]
            out["branch.conv2.bias"] = out["conv2.bias"]
        out["branch.fc.weight"] = (self.conv2, N)
        out["branch.fc.bias"] = (N,)
        return out


def _glorot_bound(shape):
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    else:
        fan_in, fan_out = shape[-2], shape[-1]
    return np.sqrt(6.0 / (fan_in + fan_out))


@dataclass
class ModelParams:
    arch: Architecture
    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self):
        return ModelParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def group(self, prefix):
        return {k: v for k, v in self.arrays.items() if _group_of(k) == prefix}

    def n_params(self):
        return sum(v.size for v in self.arrays.values())


def _group_of(name):
    if name.startswith("heads."):
        return "heads"
    if name.startswith("branch."):
        return "branch"
    return "trunk"


def init_params(arch=None, seed=0, head_init="glorot", branch_init="zeros"):
    """Glorot-uniform weights, zero biases, zero branch classifier by default."""
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(arch.dtype)
    arrays = {}
    for name, shape in arch.shapes().items():
        zero = name.endswith(".bias")
        zero |= name.startswith("branch.fc.") and branch_init == "zeros"
        zero |= name in ("heads.weight",) and head_init == "zeros"
        if zero:
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            b = _glorot_bound(shape)
            arrays[name] = rng.uniform(-b, b, size=shape).astype(dtype)
    if arch.branch_convs == "separate" and branch_init != "independent":
        # identical start; the copies are free to diverge during training
        for k in ("conv1.weight", "conv2.weight"):
            arrays["branch." + k] = arrays[k].copy()
    return ModelParams(arch, arrays)


# ------------------------------------------------------------------ forward

def _conv_stack(images, p, prefix=""):
    h, c1 = L.conv2d(images, p[prefix + "conv1.weight"], p[prefix + "conv1.bias"])
    h, r1 = L.relu(h)
    h, m1 = L.maxpool2(h)
    h, c2 = L.conv2d(h, p[prefix + "conv2.weight"], p[prefix + "conv2.bias"])
    h, r2 = L.relu(h)
    h, m2 = L.maxpool2(h)
    return h, (c1, r1, m1, c2, r2, m2)


def _conv_stack_backward(caches, grad, prefix=""):
    c1, r1, m1, c2, r2, m2 = caches
    g = L.maxpool2_backward(m2, grad).grad_input
    g = L.relu_backward(r2, g).grad_input
    lg2 = L.conv2d_backward(c2, g)
    g = L.maxpool2_backward(m1, lg2.grad_input).grad_input
    g = L.relu_backward(r1, g).grad_input
    lg1 = L.conv2d_backward(c1, g, need_input_grad=False)
    return {
        prefix + "conv1.weight": lg1.grad_params[0],
        prefix + "conv1.bias": lg1.grad_params[1],
        prefix + "conv2.weight": lg2.grad_params[0],
        prefix + "conv2.bias": lg2.grad_params[1],
    }


def _check_images(images, arch):
    images = np.asarray(images)
    want = (arch.in_channels, arch.image_size, arch.image_size)
    if images.ndim != 4 or images.shape[1:] != want:
        raise ShapeError(f"images must have shape (B, {', '.join(map(str, want))}), got {images.shape}")
    return images.astype(arch.dtype, copy=False)


def trunk_forward(images, params):
    """Shared feature extractor.

    Returns ``(features, cache)``; features are the fc1 activations
    ``(B, fc1)`` when only the classifier is domain-specific, otherwise the
    flattened pool2 output.
    """
    arch = params.arch
    images = _check_images(images, arch)
    pooled, conv_caches = _conv_stack(images, params)
    flat = pooled.reshape(pooled.shape[0], -1)
    cache = {"conv": conv_caches, "pooled": pooled}
    if arch.head_scope == "classifier":
        h, cache["fc1"] = L.affine(flat, params["fc1.weight"], params["fc1.bias"])
        feats, cache["fc1_relu"] = L.relu(h)
    else:
        feats = flat
    return feats, cache


def heads_forward(features, params):
    """Per-domain class scores ``(B, N, C)``; each head is its own affine map."""
    arch = params.arch
    B = features.shape[0]
    scores = np.empty((B, arch.n_domains, arch.n_classes), dtype=features.dtype)
    caches = []
    for j in range(arch.n_domains):
        h, hc = features, {}
        if arch.head_scope == "fc1":
            h, hc["fc1"] = L.affine(h, params["heads.fc1.weight"][j], params["heads.fc1.bias"][j])
            h, hc["relu"] = L.relu(h)
        scores[:, j, :], hc["out"] = L.affine(h, params["heads.weight"][j], params["heads.bias"][j])
        caches.append(hc)
    return scores, caches


def domain_branch_forward(images, params, pooled=None):
    """Mixing weights ``(B, N)`` on the simplex, plus the cache.

    With shared convolutions, ``pooled`` (the trunk's pool2 output) can be
    passed in to skip recomputing identical activations.
    """
    arch = params.arch
    cache = {}
    if arch.branch_convs == "separate":
        images = _check_images(images, arch)
        pooled, cache["conv"] = _conv_stack(images, params, "branch.")
    elif pooled is None:
        pooled = trunk_forward(images, params)[1]["pooled"]
    g, cache["gap"] = L.global_avg_pool(pooled)
    logits, cache["fc"] = L.affine(g, params["branch.fc.weight"], params["branch.fc.bias"])
    w = L.softmax_rows(logits)
    cache["w"] = w
    return w, cache


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha!r}")


def blend_coefficients(w, switch):
    """Per-(sample, head) weights ``(1 - s) w + s / N``, shape ``(B, N)``."""
    n = w.shape[1]
    s = np.asarray(switch, dtype=w.dtype).reshape(-1, 1)
    return (1 - s) * w + s / n


def mix(scores, w, alpha=0.0, switch=None):
    """Fuse head scores ``(B, N, C)`` into ``(B, C)``.

    With ``switch=None`` this is the deterministic blend
    ``(1 - alpha) * sum_j w_j f_j + alpha * mean_j f_j``.  Otherwise
    ``switch`` holds one boolean per sample: True selects the uniform
    average, False the weighted sum, and ``alpha`` is ignored.
    """
    scores = np.asarray(scores)
    w = np.asarray(w, dtype=scores.dtype)
    if scores.ndim != 3 or w.shape != scores.shape[:2]:
        raise ShapeError(f"scores {scores.shape} and weights {w.shape} are incompatible")
    if switch is None:
        _check_alpha(alpha)
        s = np.full(scores.shape[0], alpha, dtype=scores.dtype)
    else:
        s = np.asarray(switch).astype(scores.dtype).reshape(-1)
        if s.shape[0] != scores.shape[0]:
            raise ShapeError(f"need one switch per sample, got {s.shape[0]} for batch {scores.shape[0]}")
    return _mix(scores, w, s)


def _mix(scores, w, s):
    weighted = np.einsum("bn,bnc->bc", w, scores)
    uniform = scores.mean(axis=1)
    return (1 - s)[:, None] * weighted + s[:, None] * uniform


def draw_switches(rng, batch_size, alpha):
    """Per-sample Bernoulli(alpha) draws; True means 'use uniform weights'."""
    _check_alpha(alpha)
    return rng.random(batch_size) < alpha


def indicator_weights(domain_labels, n_domains):
    """One-hot weights from 1-based domain labels."""
    d = np.asarray(domain_labels)
    if d.ndim != 1:
        raise ValidationError("domain labels must be a 1-D sequence")
    if d.size and (d.min() < 1 or d.max() > n_domains):
        raise ValidationError(f"domain labels must lie in 1..{n_domains}, got {d.min()}..{d.max()}")
    return L.onehot(d - 1, n_domains)


@dataclass
class ForwardCache:
    trunk: dict
    heads: list
    branch: dict
    features: np.ndarray
    scores: np.ndarray
    w: np.ndarray  # branch output
    mix_w: np.ndarray  # weights actually used for mixing
    switch: np.ndarray
    fixed_weights: bool
    z: np.ndarray


def forward(params, images, switch, weights=None):
    """Full forward pass.

    ``switch`` is the per-sample blend value: a 0/1 draw in training, the
    constant ``alpha`` at inference.  ``weights`` optionally replaces the
    branch output in the mixing step (e.g. indicator weights); the branch is
    still evaluated for its own loss.
    """
    feats, tcache = trunk_forward(images, params)
    scores, hcaches = heads_forward(feats, params)
    w, bcache = domain_branch_forward(images, params, pooled=tcache["pooled"])
    s = np.broadcast_to(np.asarray(switch, dtype=feats.dtype), (feats.shape[0],)).copy()
    if np.any((s < 0) | (s > 1)):
        raise ValidationError("switch values must lie in [0, 1]")
    mix_w = w if weights is None else np.asarray(weights, dtype=w.dtype)
    if mix_w.shape != w.shape:
        raise ShapeError(f"fixed weights {mix_w.shape} do not match {w.shape}")
    z = _mix(scores, mix_w, s)
    return z, w, ForwardCache(tcache, hcaches, bcache, feats, scores, w, mix_w, s, weights is not None, z)


# --------------------------------------------------------------- loss / grads

@dataclass
class LossParts:
    total: float
    cls: float
    dom: float


def total_loss(z, y, w, d, lam):
    """Mean cross-entropy on softmax(z) plus ``lam`` times domain cross-entropy on w."""
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam!r}")
    return loss_parts(z, y, w, d, lam).total


def loss_parts(z, y, w, d, lam):
    lc = L.cross_entropy(L.softmax_rows(z), y)
    ld = L.cross_entropy(w, d)
    return LossParts(lc + lam * ld, lc, ld)


def model_backward(params, cache, y, d, lam):
    """Gradients of the total loss for every parameter array.

    The switch values stored in ``cache`` are constants.  Classification
    gradients reach the branch through the mixing weights; the domain loss
    adds its own term.
    """
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam!r}")
    if not isinstance(cache, ForwardCache):
        raise UsageError("model_backward needs the ForwardCache returned by forward()")
    B, N, C = cache.scores.shape
    if np.shape(y) != (B, C) or np.shape(d) != (B, N):
        raise UsageError(f"labels {np.shape(y)}/{np.shape(d)} do not match cached batch ({B}, N={N}, C={C})")
    arch = params.arch
    dtype = cache.z.dtype
    grads = {}

    p = L.softmax_rows(cache.z)
    dz = L.softmax_cross_entropy_grad(p, y).astype(dtype, copy=False)
    s = cache.switch
    coef = blend_coefficients(cache.mix_w, s)
    dscores = coef[:, :, None] * dz[:, None, :]

    # heads
    dfeat = np.zeros_like(cache.features)
    hw = np.zeros_like(params["heads.weight"])
    hb = np.zeros_like(params["heads.bias"])
    if arch.head_scope == "fc1":
        hfw = np.zeros_like(params["heads.fc1.weight"])
        hfb = np.zeros_like(params["heads.fc1.bias"])
    for j, hc in enumerate(cache.heads):
        lg = L.affine_backward(hc["out"], dscores[:, j, :])
        hw[j], hb[j] = lg.grad_params
        g = lg.grad_input
        if arch.head_scope == "fc1":
            g = L.relu_backward(hc["relu"], g).grad_input
            lg = L.affine_backward(hc["fc1"], g)
            hfw[j], hfb[j] = lg.grad_params
            g = lg.grad_input
        dfeat += g
    grads["heads.weight"], grads["heads.bias"] = hw, hb
    if arch.head_scope == "fc1":
        grads["heads.fc1.weight"], grads["heads.fc1.bias"] = hfw, hfb

    # branch: mixing path through softmax Jacobian, domain loss via fused form
    w = cache.w
    dlogits = lam * L.softmax_cross_entropy_grad(w, d).astype(dtype, copy=False)
    if not cache.fixed_weights:
        dw = (1 - s)[:, None] * np.einsum("bnc,bc->bn", cache.scores, dz)
        dlogits = dlogits + w * (dw - np.sum(dw * w, axis=1, keepdims=True))
    lg = L.affine_backward(cache.branch["fc"], dlogits)
    grads["branch.fc.weight"], grads["branch.fc.bias"] = lg.grad_params
    dpooled_branch = L.global_avg_pool_backward(cache.branch["gap"], lg.grad_input).grad_input

    # trunk
    tc = cache.trunk
    pooled = tc["pooled"]
    if arch.head_scope == "classifier":
        g = L.relu_backward(tc["fc1_relu"], dfeat).grad_input
        lg = L.affine_backward(tc["fc1"], g)
        grads["fc1.weight"], grads["fc1.bias"] = lg.grad_params
        dflat = lg.grad_input
    else:
        dflat = dfeat
    dpooled = dflat.reshape(pooled.shape)
    if arch.branch_convs == "shared":
        grads.update(_conv_stack_backward(tc["conv"], dpooled + dpooled_branch))
    else:
        grads.update(_conv_stack_backward(tc["conv"], dpooled))
        grads.update(_conv_stack_backward(cache.branch["conv"], dpooled_branch, "branch."))
    return {k: grads[k] for k in params.arrays}


def loss_and_grads(params, images, y, d, lam, switch, weights=None):
    """Forward, loss and backward in one call; returns ``(LossParts, grads, z)``."""
    z, w, cache = forward(params, images, switch, weights)
    parts = loss_parts(z, y, w, d, lam)
    return parts, model_backward(params, cache, y, d, lam), z


def activation_pattern(params, images):
    """Bytes identifying the piecewise-linear regime: relu masks and pool winners."""
    _, _, cache = forward(params, images, 0.0)
    parts = []

    def conv(caches):
        _, r1, m1, _, r2, m2 = caches
        parts.extend([r1.mask, m1.argmax, r2.mask, m2.argmax])

    conv(cache.trunk["conv"])
    if "fc1_relu" in cache.trunk:
        parts.append(cache.trunk["fc1_relu"].mask)
    for hc in cache.heads:
        if "relu" in hc:
            parts.append(hc["relu"].mask)
    if "conv" in cache.branch:
        conv(cache.branch["conv"])
    return b"".join(
        np.packbits(a).tobytes() if a.dtype == bool else a.astype(np.uint8).tobytes() for a in parts
    )


# ---------------------------------------------------------------- inference

def predict(images, params, alpha, chunk_size=500):
    """Class predictions from the deterministic blend, plus the mixing weights.

    Ties in the class argmax go to the lowest index.
    """
    _check_alpha(alpha)
    z, w = predict_scores(images, params, alpha, chunk_size)
    return np.argmax(z, axis=1), w


def predict_scores(images, params, alpha, chunk_size=500):
    _check_alpha(alpha)
    images = _check_images(images, params.arch)
    zs, ws = [], []
    for start in range(0, images.shape[0], chunk_size):
        part = images[start:start + chunk_size]
        z, w, _ = forward(params, part, alpha)
        zs.append(z)
        ws.append(w)
    if not zs:
        n, c = params.arch.n_domains, params.arch.n_classes
        return np.empty((0, c)), np.empty((0, n))
    return np.concatenate(zs), np.concatenate(ws)


def arch_to_dict(arch):
    return asdict(arch)


def arch_from_dict(d: Optional[dict]):
    return Architecture(**(d or {}))
