"""Central finite-difference checks for every backward pass.

Each check builds a random scalar function ``f = sum(R * layer(x))`` (or the
real loss for the loss and network checks), compares the analytic gradient
with ``(f(x + h) - f(x - h)) / 2h`` coordinate by coordinate, and reports the
largest relative error ``|a - n| / max(|a|, |n|, floor)``.

Finite differences straddling a ReLU kink or a max-pool switch are not
meaningful; those coordinates are detected (the switch pattern differs
between the two evaluations) and skipped.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import network as net
from . import objective as obj
from .tensor import make_rng

STEP = 1e-5
# Denominator floor of the relative error.  Central differences at STEP carry
# round-off of roughly eps*|f|/STEP ~ 1e-11 for the O(1) losses used here, so
# coordinates with |gradient| below ~1e-7 cannot be resolved to TOLERANCE; the
# floor keeps them from dominating while leaving real gradients (1e-4 .. 1e-1)
# held to the full relative tolerance.
FLOOR = 1e-6
TOLERANCE = 1e-4
COMPONENTS = ("conv", "deconv", "pool", "relu", "sigmoid", "fusion", "losses", "network", "network_small")


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    coords: int
    skipped: int = 0

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def rel_error(a: np.ndarray, n: np.ndarray, floor: float = FLOOR) -> float:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def _switches(fn):
    with L.record_switches() as log:
        val = fn()
    return val, log


def _same_switches(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(f, x: np.ndarray, coords=None, step: float = STEP):
    """Central differences of scalar ``f()`` w.r.t. ``x`` (modified in place).

    Returns ``(flat_coords, values, skipped_mask)``.
    """
    flat = x.reshape(-1)
    coords = np.arange(flat.size) if coords is None else np.asarray(coords)
    vals = np.empty(coords.size)
    skipped = np.zeros(coords.size, dtype=bool)
    _, base_sw = _switches(f)
    for k, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + step
        fp, sp = _switches(f)
        flat[i] = old - step
        fm, sm = _switches(f)
        flat[i] = old
        vals[k] = (fp - fm) / (2 * step)
        skipped[k] = not (_same_switches(sp, base_sw) and _same_switches(sm, base_sw))
    return coords, vals, skipped


def _compare(name, pairs):
    """``pairs``: iterable of (analytic_full_array, coords, numeric, skipped)."""
    worst, count, skip = 0.0, 0, 0
    for analytic, coords, numeric, skipped in pairs:
        a = analytic.reshape(-1)[coords]
        keep = ~skipped
        worst = max(worst, rel_error(a[keep], numeric[keep]))
        count += int(keep.sum())
        skip += int(skipped.sum())
    return CheckResult(name, worst, count, skip)


def _away_from(rng, shape, lo=1e-3):
    x = rng.standard_normal(shape)
    bad = np.abs(x) < lo
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) < lo
    return x


def check_conv(seed=0) -> CheckResult:
    rng = make_rng(seed, 10)
    x = rng.standard_normal((1, 2, 6, 6))
    p = L.ConvParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), 1, 1)
    R = rng.standard_normal((1, 3, 6, 6))
    f = lambda: float(np.sum(R * L.conv_forward(x, p)))
    g = L.conv_backward(x, p, R)
    return _compare("conv", [(g.d_input, *numeric_grad(f, x)), (g.d_weights, *numeric_grad(f, p.weights)),
                             (g.d_bias, *numeric_grad(f, p.bias))])


def check_deconv(seed=0) -> CheckResult:
    rng = make_rng(seed, 11)
    x = rng.standard_normal((1, 2, 3, 3))
    p = L.DeconvParams(rng.standard_normal((2, 2, 4, 4)), rng.standard_normal(2), 2, 1)
    R = rng.standard_normal((1, 2, 6, 6))
    f = lambda: float(np.sum(R * L.deconv_forward(x, p)))
    g = L.deconv_backward(x, p, R)
    return _compare("deconv", [(g.d_input, *numeric_grad(f, x)), (g.d_weights, *numeric_grad(f, p.weights)),
                               (g.d_bias, *numeric_grad(f, p.bias))])


def check_pool(seed=0) -> CheckResult:
    rng = make_rng(seed, 12)
    # distinct values spaced far beyond the step: no switch flips
    x = rng.permutation(72).astype(np.float64).reshape(1, 2, 6, 6) * 0.1
    R = rng.standard_normal((1, 2, 3, 3))
    f = lambda: float(np.sum(R * L.maxpool_forward(x)[0]))
    _, idx = L.maxpool_forward(x)
    d = L.maxpool_backward(R, idx, x.shape)
    return _compare("pool", [(d, *numeric_grad(f, x))])


def check_relu(seed=0) -> CheckResult:
    rng = make_rng(seed, 13)
    x = _away_from(rng, (1, 2, 6, 6))
    R = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(R * L.relu(x)))
    return _compare("relu", [(L.relu_backward(x, R), *numeric_grad(f, x))])


def check_sigmoid(seed=0) -> CheckResult:
    rng = make_rng(seed, 14)
    x = rng.standard_normal((1, 2, 6, 6)) * 2
    R = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(R * L.sigmoid(x)))
    return _compare("sigmoid", [(L.sigmoid_backward(L.sigmoid(x), R), *numeric_grad(f, x))])


def _fusion_state(M, rng, activation="logit"):
    spec = net.NetworkSpec(encoder_blocks=((1, 2),) * M, tap_points=tuple(f"conv{b}_1" for b in range(1, M + 1)),
                           fusion_activation=activation)
    st = net.build(spec, 0)
    st.params["fusion.w"] = rng.standard_normal(M + 1)
    return st


def check_fusion(seed=0) -> CheckResult:
    rng = make_rng(seed, 15)
    pairs = []
    for activation in net.FUSION_ACTIVATIONS:
        st = _fusion_state(3, rng, activation)
        logits = [rng.standard_normal((1, 1, 6, 6)) * 2 for _ in range(3)]
        maps = [L.sigmoid(a) for a in logits]
        inputs = logits if activation == "logit" else maps
        R = rng.standard_normal((1, 1, 6, 6))
        f = lambda: float(np.sum(R * net.fuse(st, maps, logits)))
        F = net.fuse(st, maps, logits)
        d_a = R if activation == "linear" else L.sigmoid_backward(F, R)
        w = st.params["fusion.w"]
        gw = np.array([np.sum(d_a * s) for s in inputs] + [np.sum(d_a)])
        pairs.append((gw, *numeric_grad(f, st.params["fusion.w"])))
        for m in range(3):
            pairs.append((w[m] * d_a, *numeric_grad(f, inputs[m])))
    return _compare("fusion", pairs)


def check_losses(seed=0) -> CheckResult:
    rng = make_rng(seed, 16)
    pred = rng.uniform(0.05, 0.95, (1, 1, 6, 6))
    gt = rng.uniform(0, 1, (1, 1, 6, 6))
    f = lambda: obj.cross_entropy(pred, gt)[0]
    pairs = [(obj.cross_entropy(pred, gt)[1], *numeric_grad(f, pred))]
    maps = [rng.uniform(0.05, 0.95, (1, 1, 6, 6)) for _ in range(3)]
    fused = rng.uniform(0.05, 0.95, (1, 1, 6, 6))
    trace = net.ForwardTrace(None, {}, {}, maps, fused)
    fc = lambda: obj.combined_objective(trace, gt)[0].combined
    _, d_branch, d_fused = obj.combined_objective(trace, gt)
    pairs.append((d_fused, *numeric_grad(fc, fused)))
    for m in range(3):
        pairs.append((d_branch[m], *numeric_grad(fc, maps[m])))
    return _compare("losses", pairs)


def _network_check(name, spec, dims, seed, per_tensor):
    rng = make_rng(seed, 17)
    st = net.build(spec, seed)
    # Redraw every weight at unit-gain scale and jitter the biases: training
    # init (std 0.01 decoders) leaves deep gradients near 1e-8, where central
    # differences are dominated by round-off (~eps*|f|/step).
    for k, v in st.params.items():
        if k == "fusion.w" and spec.fusion_activation == "linear":
            # keep the unbounded linear fusion a positive mixture, away from
            # the loss's 1/F curvature near 0
            v[:-1] *= rng.uniform(0.7, 1.3, v.size - 1)
        elif k == "fusion.w":
            v += rng.normal(0, 0.3, v.shape)
        elif k.endswith(".b"):
            v += rng.normal(0, 0.05, v.shape)
        elif not (spec.upsampling == "fixed_bilinear" and ".deconv" in k):
            fan_in = v[0].size if k.startswith(("enc.", "cls.")) else v.shape[0] * v.shape[2] * v.shape[3] / 4
            v[...] = rng.normal(0, np.sqrt(2.0 / fan_in), v.shape)
    h, w = dims
    image = rng.uniform(-0.5, 0.5, (1, spec.input_channels, h, w))
    gt = rng.uniform(0, 1, (1, 1, h, w))

    def f():
        return obj.combined_objective(net.forward(st, image), gt, spec.deep_supervision)[0].combined

    trace = net.forward(st, image)
    _, d_branch, d_fused = obj.combined_objective(trace, gt, spec.deep_supervision)
    grads = net.backward(st, trace, d_branch, d_fused)
    pairs = []
    for k, v in st.params.items():
        if spec.fusion == "average" and k == "fusion.w":
            continue
        coords = None if per_tensor is None or v.size <= per_tensor else rng.choice(v.size, per_tensor, replace=False)
        pairs.append((grads[k], *numeric_grad(f, v, coords)))
    return _compare(name, pairs)


def check_network(seed=0, per_tensor=8) -> CheckResult:
    """Whole tiny-profile network (13 convs, 3 branches), sampled coordinates."""
    return _network_check("network", net.tiny_spec(), (16, 16), seed, per_tensor)


def check_network_small(seed=0) -> CheckResult:
    """Two-block, single-tap network on an 8x8 input, every coordinate."""
    spec = net.NetworkSpec(encoder_blocks=((2, 4), (2, 4)), tap_points=("conv2_2",), decoder_channel_schedules={"conv2_2": (3,)})
    return _network_check("network_small", spec, (8, 8), seed, None)


def check_network_variants(seed=0, per_tensor=4) -> list[CheckResult]:
    out = []
    for label, kw in (("average", {"fusion": "average"}), ("no_ds", {"deep_supervision": False}),
                      ("bilinear", {"upsampling": "fixed_bilinear"}), ("sigmoid", {"fusion_activation": "sigmoid"}),
                      ("linear", {"fusion_activation": "linear"})):
        out.append(_network_check(f"network[{label}]", net.tiny_spec(**kw), (16, 16), seed, per_tensor))
    return out


CHECKS = {
    "conv": check_conv,
    "deconv": check_deconv,
    "pool": check_pool,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "fusion": check_fusion,
    "losses": check_losses,
    "network": check_network,
    "network_small": check_network_small,
}

# backward functions a test hook may corrupt, keyed by component name
_PERTURBABLE = {
    "conv": (L, "conv_backward"),
    "deconv": (L, "deconv_backward"),
    "pool": (L, "maxpool_backward"),
    "relu": (L, "relu_backward"),
    "sigmoid": (L, "sigmoid_backward"),
    "losses": (obj, "cross_entropy"),
}


@contextlib.contextmanager
def perturbed(component: str | None, factor: float = 1.01):
    """Scale the output of one backward function (harness sensitivity test)."""
    if component is None:
        yield
        return
    if component not in _PERTURBABLE:
        raise ValueError(f"cannot perturb {component!r}; choose from {sorted(_PERTURBABLE)}")
    mod, attr = _PERTURBABLE[component]
    orig = getattr(mod, attr)

    def wrapped(*args, **kwargs):
        out = orig(*args, **kwargs)
        if isinstance(out, L.LayerGrads):
            return L.LayerGrads(out.d_input * factor, out.d_weights * factor, out.d_bias * factor)
        if isinstance(out, tuple):
            return (out[0], out[1] * factor)
        return out * factor

    setattr(mod, attr, wrapped)
    try:
        yield
    finally:
        setattr(mod, attr, orig)


def run_all(seed: int = 0, perturb: str | None = None, variants: bool = True) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    with perturbed(perturb):
        results = [fn(seed) for fn in CHECKS.values()]
        if variants:
            results.extend(check_network_variants(seed))
    return results, time.perf_counter() - t0
