"""Encoder / multi-branch decoder / fusion graph.

The encoder is a VGG16-style stack of 3x3 convolutions with ReLU and 2x2 max
pooling between blocks (none after the last block).  Every tapped encoder
layer feeds a decoder branch of stride-2 transposed convolutions (one per
pooling stage above the tap) followed by a 1x1 classifier and a sigmoid, so
each branch emits a map at input resolution.  A fusion layer merges the
branch maps into the final prediction.

Parameters live in a flat ``{name: ndarray}`` mapping in canonical order:

    enc.conv{b}_{i}.w / .b                  encoder convolutions
    dec.{tap}.deconv{j}.w / .b              learned decoder upsamplers
    cls.{tap}.w / .b                        1x1 branch classifiers
    fusion.w                                M fusion weights followed by a bias

The forward trace keeps only the image, the tap activations and the pool
argmaxes; backward recomputes each encoder segment between checkpoints and
each decoder branch from its tap.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import layers as L
from . import weights as wfile
from .errors import IntegrityError, ShapeError
from .tensor import check4, make_rng, name_key

VGG16_BLOCKS = ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512))
TINY_BLOCKS = ((2, 8), (2, 16), (3, 32), (3, 64), (3, 64))
DEFAULT_TAPS = ("conv3_3", "conv4_3", "conv5_3")
INIT_STD = 0.01

_TAP_RE = re.compile(r"^conv(\d+)[_-](\d+)$")


def normalize_tap(name: str) -> str:
    m = _TAP_RE.match(name.strip())
    if not m:
        raise ValueError(f"bad encoder layer name {name!r} (expected e.g. conv4_3)")
    return f"conv{int(m.group(1))}_{int(m.group(2))}"


def _tap_position(name: str) -> tuple[int, int]:
    m = _TAP_RE.match(name)
    return int(m.group(1)), int(m.group(2))


FUSION_ACTIVATIONS = ("logit", "sigmoid", "linear")


@dataclass(frozen=True)
class NetworkSpec:
    encoder_blocks: tuple = VGG16_BLOCKS
    tap_points: tuple = DEFAULT_TAPS
    # tap -> deconv output channels; None derives base * 2**(d-1-j)
    decoder_channel_schedules: Mapping | None = None
    fusion: str = "learned"  # learned | average
    # logit: sigmoid(b + sum w_m a_m) over branch logits a_m
    # sigmoid: sigmoid(b + sum w_m S_m) over branch probabilities
    # linear: b + sum w_m S_m
    fusion_activation: str = "logit"
    deep_supervision: bool = True
    upsampling: str = "learned"  # learned | fixed_bilinear
    deconv_kernel: int = 4
    deconv_init: str = "bilinear"  # bilinear | gaussian
    encoder_init: str = "he"  # he | gaussian
    input_channels: int = 3
    input_dims: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "encoder_blocks", tuple(tuple(int(v) for v in b) for b in self.encoder_blocks))
        object.__setattr__(self, "tap_points", tuple(normalize_tap(t) for t in self.tap_points))
        if self.input_dims is not None:
            object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        self.validate()

    # -- structure ---------------------------------------------------------

    def validate(self) -> None:
        if not self.encoder_blocks:
            raise ValueError("encoder needs at least one block")
        if not self.tap_points:
            raise ValueError("at least one tap point is required")
        if len(set(self.tap_points)) != len(self.tap_points):
            raise ValueError("duplicate tap points")
        for tap in self.tap_points:
            b, i = _tap_position(tap)
            if not (1 <= b <= len(self.encoder_blocks) and 1 <= i <= self.encoder_blocks[b - 1][0]):
                raise ValueError(f"tap {tap} does not name an encoder layer")
        for name, allowed in (
            ("fusion", ("learned", "average")),
            ("fusion_activation", FUSION_ACTIVATIONS),
            ("upsampling", ("learned", "fixed_bilinear")),
            ("deconv_init", ("bilinear", "gaussian")),
            ("encoder_init", ("he", "gaussian")),
        ):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.upsampling == "fixed_bilinear" and self.deconv_kernel != 4:
            raise ValueError("fixed bilinear upsampling needs deconv_kernel=4")
        if self.deconv_kernel < 2 or self.deconv_kernel % 2:
            raise ValueError("deconv_kernel must be even and >= 2 for exact doubling")
        for tap in self.tap_points:
            sched = self.schedule(tap)
            if len(sched) != self.tap_depth(tap):
                raise ValueError(f"tap {tap} needs {self.tap_depth(tap)} deconv layers, schedule has {len(sched)}")
        if self.input_dims is not None:
            f = self.size_factor
            if any(d % f or d < f for d in self.input_dims):
                raise ValueError(f"input dims {self.input_dims} must be positive multiples of {f}")

    @property
    def M(self) -> int:
        return len(self.tap_points)

    @property
    def conv_layers(self) -> list[tuple[str, int, int]]:
        """``(name, in_channels, out_channels)`` for every encoder convolution."""
        out, c_in = [], self.input_channels
        for b, (count, ch) in enumerate(self.encoder_blocks, start=1):
            for i in range(1, count + 1):
                out.append((f"conv{b}_{i}", c_in, ch))
                c_in = ch
        return out

    def tap_depth(self, tap: str) -> int:
        """Number of 2x pooling stages between the input and ``tap``."""
        return _tap_position(tap)[0] - 1

    def tap_channels(self, tap: str) -> int:
        return self.encoder_blocks[_tap_position(tap)[0] - 1][1]

    @property
    def size_factor(self) -> int:
        return 2 ** max(self.tap_depth(t) for t in self.tap_points)

    def schedule(self, tap: str) -> tuple[int, ...]:
        if self.upsampling == "fixed_bilinear":
            return (1,) * self.tap_depth(tap)
        if self.decoder_channel_schedules and tap in self.decoder_channel_schedules:
            return tuple(int(c) for c in self.decoder_channel_schedules[tap])
        d = self.tap_depth(tap)
        base = max(1, self.encoder_blocks[0][1] // 2)
        return tuple(base * 2 ** (d - 1 - j) for j in range(d))

    def param_shapes(self) -> dict[str, tuple]:
        shapes: dict[str, tuple] = {}
        for name, cin, cout in self.conv_layers:
            shapes[f"enc.{name}.w"] = (cout, cin, 3, 3)
            shapes[f"enc.{name}.b"] = (cout,)
        k = self.deconv_kernel
        for tap in self.tap_points:
            c = self.tap_channels(tap)
            if self.upsampling == "learned":
                for j, cout in enumerate(self.schedule(tap), start=1):
                    shapes[f"dec.{tap}.deconv{j}.w"] = (c, cout, k, k)
                    shapes[f"dec.{tap}.deconv{j}.b"] = (cout,)
                    c = cout
            shapes[f"cls.{tap}.w"] = (1, c, 1, 1)
            shapes[f"cls.{tap}.b"] = (1,)
        shapes["fusion.w"] = (self.M + 1,)
        return shapes


def tiny_spec(**overrides) -> NetworkSpec:
    """Same topology as the full network with channels scaled down 8x."""
    return NetworkSpec(encoder_blocks=TINY_BLOCKS, **overrides)


def full_spec(**overrides) -> NetworkSpec:
    return NetworkSpec(**overrides)


PROFILES = {"full": full_spec, "tiny": tiny_spec}


# ---------------------------------------------------------------------------
# state


@dataclass
class NetworkState:
    spec: NetworkSpec
    params: dict[str, np.ndarray]

    def conv(self, layer: str) -> L.ConvParams:
        return L.ConvParams(self.params[f"enc.{layer}.w"], self.params[f"enc.{layer}.b"], 1, 1)

    def deconvs(self, tap: str) -> list[L.DeconvParams]:
        k = self.spec.deconv_kernel
        if self.spec.upsampling == "fixed_bilinear":
            fixed = L.DeconvParams(L.bilinear_kernel(4)[None, None], np.zeros(1), 2, 1)
            return [fixed] * self.spec.tap_depth(tap)
        return [
            L.DeconvParams(self.params[f"dec.{tap}.deconv{j}.w"], self.params[f"dec.{tap}.deconv{j}.b"], 2, (k - 2) // 2)
            for j in range(1, self.spec.tap_depth(tap) + 1)
        ]

    def classifier(self, tap: str) -> L.ConvParams:
        return L.ConvParams(self.params[f"cls.{tap}.w"], self.params[f"cls.{tap}.b"])

    @property
    def encoder_params(self) -> list[L.ConvParams]:
        return [self.conv(name) for name, _, _ in self.spec.conv_layers]

    @property
    def decoder_params(self) -> dict[str, list[L.DeconvParams]]:
        return {tap: self.deconvs(tap) for tap in self.spec.tap_points}

    @property
    def classifier_params(self) -> dict[str, L.ConvParams]:
        return {tap: self.classifier(tap) for tap in self.spec.tap_points}

    @property
    def fusion_weights(self) -> np.ndarray:
        return self.params["fusion.w"]

    def copy(self) -> "NetworkState":
        return NetworkState(self.spec, {k: v.copy() for k, v in self.params.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def _init_param(spec: NetworkSpec, name: str, shape: tuple, seed: int) -> np.ndarray:
    rng = make_rng(seed, name_key(name))
    if name.endswith(".b"):
        return np.zeros(shape)
    if name == "fusion.w":
        w = np.full(shape, 1.0 / spec.M)
        w[-1] = 0.0
        return w
    if name.startswith("enc."):
        if spec.encoder_init == "he":
            fan_in = shape[1] * shape[2] * shape[3]
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return rng.normal(0.0, INIT_STD, size=shape)
    if name.startswith("dec.") and spec.deconv_init == "bilinear":
        cin = shape[0]
        kern = L.bilinear_kernel(shape[2])
        return np.broadcast_to(kern / cin, shape) + rng.normal(0.0, INIT_STD, size=shape)
    return rng.normal(0.0, INIT_STD, size=shape)


def build(spec: NetworkSpec, init_seed: int = 0, pretrained=None) -> NetworkState:
    """Fresh network state; the encoder is taken from ``pretrained`` when given."""
    shapes = spec.param_shapes()
    params = {name: _init_param(spec, name, shape, init_seed) for name, shape in shapes.items()}
    if pretrained is not None:
        entries = wfile.read_entries(pretrained) if not isinstance(pretrained, Mapping) else pretrained
        for name, shape in shapes.items():
            if not name.startswith("enc."):
                continue
            if name not in entries:
                raise IntegrityError(f"pretrained file lacks encoder layer {name}")
            if tuple(entries[name].shape) != shape:
                raise IntegrityError(
                    f"pretrained layer {name} has shape {tuple(entries[name].shape)}, expected {shape}"
                )
            params[name] = np.array(entries[name], dtype=np.float64)
    return NetworkState(spec, params)


def save_weights(state: NetworkState, path) -> None:
    wfile.write_entries(path, state.params)


def check_entries(spec: NetworkSpec, entries: Mapping[str, np.ndarray]) -> None:
    shapes = spec.param_shapes()
    for name, shape in shapes.items():
        if name not in entries:
            raise IntegrityError(f"weight file lacks layer {name}")
        if tuple(entries[name].shape) != shape:
            raise IntegrityError(f"layer {name} has shape {tuple(entries[name].shape)}, expected {shape}")
    extra = [n for n in entries if n not in shapes]
    if extra:
        raise IntegrityError(f"weight file has unexpected layer {extra[0]}")


def spec_from_entries(entries: Mapping[str, np.ndarray], **overrides) -> NetworkSpec:
    """Recover the architecture from parameter names and shapes.

    Fusion mode, fusion activation and the supervision flag are training
    choices not visible in the weights; they come from ``overrides``.
    """
    blocks: dict[int, list] = {}
    for name, arr in entries.items():
        m = re.match(r"^enc\.conv(\d+)_(\d+)\.w$", name)
        if m:
            blocks.setdefault(int(m.group(1)), []).append((int(m.group(2)), arr.shape))
    if not blocks:
        raise IntegrityError("weight file has no encoder layers")
    enc = []
    for b in sorted(blocks):
        convs = sorted(blocks[b])
        enc.append((len(convs), convs[-1][1][0]))
    taps = [n[4:-2] for n in entries if n.startswith("cls.") and n.endswith(".w")]
    upsampling = "learned" if any(n.startswith("dec.") for n in entries) else "fixed_bilinear"
    schedules, k = {}, 4
    if upsampling == "learned":
        for tap in taps:
            j, sched = 1, []
            while f"dec.{tap}.deconv{j}.w" in entries:
                w = entries[f"dec.{tap}.deconv{j}.w"]
                sched.append(w.shape[1])
                k = w.shape[2]
                j += 1
            schedules[tap] = tuple(sched)
    input_channels = entries[f"enc.conv1_1.w"].shape[1]
    kw = dict(
        encoder_blocks=tuple(enc),
        tap_points=tuple(taps),
        decoder_channel_schedules=schedules or None,
        upsampling=upsampling,
        deconv_kernel=k,
        input_channels=input_channels,
    )
    kw.update(overrides)
    return NetworkSpec(**kw)


def load_weights(path, spec: NetworkSpec | None = None, **spec_overrides) -> NetworkState:
    entries = wfile.read_entries(path)
    if spec is None:
        spec = spec_from_entries(entries, **spec_overrides)
    check_entries(spec, entries)
    return NetworkState(spec, {name: entries[name] for name in spec.param_shapes()})


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    image: np.ndarray
    taps: dict[str, np.ndarray]
    pool_indices: dict[str, np.ndarray]
    branch_maps: list[np.ndarray]
    fused_map: np.ndarray
    extras: dict = field(default_factory=dict)


def _encoder_program(spec: NetworkSpec) -> list[tuple]:
    """Ops up to the deepest tap: ``("conv", name)`` and ``("pool", name)``."""
    deepest = max(_tap_position(t) for t in spec.tap_points)
    prog = []
    for b, (count, _) in enumerate(spec.encoder_blocks, start=1):
        for i in range(1, count + 1):
            prog.append(("conv", f"conv{b}_{i}"))
            if (b, i) == deepest:
                return prog
        if b < len(spec.encoder_blocks):
            prog.append(("pool", f"pool{b}"))
    return prog


def _segments(spec: NetworkSpec) -> list[tuple[str | None, str, list]]:
    """Split the encoder program at taps: ``[(start_checkpoint, end_tap, ops)]``."""
    segs, start, ops = [], None, []
    taps = set(spec.tap_points)
    for op in _encoder_program(spec):
        ops.append(op)
        if op[0] == "conv" and op[1] in taps:
            segs.append((start, op[1], ops))
            start, ops = op[1], []
    return segs


def check_image(spec: NetworkSpec, image: np.ndarray) -> None:
    check4(image, "image")
    n, c, h, w = image.shape
    if c != spec.input_channels:
        raise ShapeError(f"image has {c} channels, network expects {spec.input_channels}")
    if spec.input_dims is not None and (h, w) != spec.input_dims:
        raise ShapeError(f"image dims {(h, w)} != network input dims {spec.input_dims}")
    f = spec.size_factor
    if h % f or w % f:
        raise ShapeError(f"image dims {(h, w)} must be multiples of {f}")


def _run_segment(state: NetworkState, x: np.ndarray, ops: list, keep: bool, pool_idx: dict):
    inputs = []
    for kind, name in ops:
        if keep:
            inputs.append(x)
        if kind == "conv":
            x = L.relu(L.conv_forward(x, state.conv(name)))
        else:
            x, idx = L.maxpool_forward(x)
            pool_idx[name] = idx
    return x, inputs


def _branch_forward(state: NetworkState, tap: str, z: np.ndarray, keep: bool = False):
    acts = []
    if state.spec.upsampling == "learned":
        for p in state.deconvs(tap):
            if keep:
                acts.append(z)
            z = L.relu(L.deconv_forward(z, p))
        if keep:
            acts.append(z)
        logits = L.conv_forward(z, state.classifier(tap))
    else:
        if keep:
            acts.append(z)
        logits = L.conv_forward(z, state.classifier(tap))
        for p in state.deconvs(tap):
            if keep:
                acts.append(logits)
            logits = L.deconv_forward(logits, p)
    return L.sigmoid(logits), logits, acts


def fuse(state: NetworkState, maps: list[np.ndarray], logits: list[np.ndarray] | None = None) -> np.ndarray:
    """Merge branch maps; the ``logit`` activation needs the branch logits too."""
    spec = state.spec
    if spec.fusion == "average":
        return sum(maps) / spec.M
    w = state.fusion_weights
    act = spec.fusion_activation
    inputs = logits if act == "logit" else maps
    if inputs is None:
        raise ValueError("logit fusion needs the branch logits")
    a = w[-1] + sum(w[m] * s for m, s in enumerate(inputs))
    return a if act == "linear" else L.sigmoid(a)


def forward(state: NetworkState, image: np.ndarray) -> ForwardTrace:
    spec = state.spec
    check_image(spec, image)
    x = np.ascontiguousarray(image, dtype=np.float64)
    taps, pool_idx = {}, {}
    for _, end, ops in _segments(spec):
        x, _ = _run_segment(state, x, ops, False, pool_idx)
        taps[end] = x
    outs = [_branch_forward(state, tap, taps[tap]) for tap in spec.tap_points]
    maps = [o[0] for o in outs]
    logits = [o[1] for o in outs]
    return ForwardTrace(image, taps, pool_idx, maps, fuse(state, maps, logits), {"branch_logits": logits})


def backward(state: NetworkState, trace: ForwardTrace, d_branch, d_fused) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradients w.r.t. every emitted map.

    ``d_branch`` is a list of M arrays (or ``None`` for all-zero); ``d_fused``
    likewise.  Returns a dict with the same keys and shapes as ``state.params``.
    """
    spec = state.spec
    grads = state.zeros_like()
    maps, F = trace.branch_maps, trace.fused_map
    if d_fused is None:
        d_fused = np.zeros_like(F)
    if d_fused.shape != F.shape:
        raise ShapeError(f"d_fused shape {d_fused.shape} != {F.shape} (stale trace?)")
    d_maps = []
    for m, s in enumerate(maps):
        d = np.zeros_like(s) if d_branch is None or d_branch[m] is None else np.array(d_branch[m], dtype=np.float64)
        if d.shape != s.shape:
            raise ShapeError(f"d_branch[{m}] shape {d.shape} != {s.shape} (stale trace?)")
        d_maps.append(d)

    # fusion; logit fusion feeds the branch logits directly
    d_extra = [None] * spec.M
    if spec.fusion == "average":
        for m in range(spec.M):
            d_maps[m] += d_fused / spec.M
    else:
        w = state.fusion_weights
        act = spec.fusion_activation
        d_a = d_fused if act == "linear" else L.sigmoid_backward(F, d_fused)
        inputs = trace.extras["branch_logits"] if act == "logit" else maps
        gw = grads["fusion.w"]
        for m, s in enumerate(inputs):
            gw[m] = np.sum(d_a * s)
            if act == "logit":
                d_extra[m] = w[m] * d_a
            else:
                d_maps[m] += w[m] * d_a
        gw[-1] = np.sum(d_a)

    # decoder branches
    d_taps: dict[str, np.ndarray] = {}
    for m, tap in enumerate(spec.tap_points):
        z_tap = trace.taps[tap]
        s, _, acts = _branch_forward(state, tap, z_tap, keep=True)
        d_logits = L.sigmoid_backward(s, d_maps[m])
        if d_extra[m] is not None:
            d_logits = d_logits + d_extra[m]
        cls = state.classifier(tap)
        deconvs = state.deconvs(tap)
        if spec.upsampling == "learned":
            g = L.conv_backward(acts[-1], cls, d_logits)
            grads[f"cls.{tap}.w"] += g.d_weights
            grads[f"cls.{tap}.b"] += g.d_bias
            d = g.d_input
            for j in range(len(deconvs), 0, -1):
                d = L.relu_backward(acts[j], d)
                g = L.deconv_backward(acts[j - 1], deconvs[j - 1], d)
                grads[f"dec.{tap}.deconv{j}.w"] += g.d_weights
                grads[f"dec.{tap}.deconv{j}.b"] += g.d_bias
                d = g.d_input
        else:
            d = d_logits
            for j in range(len(deconvs), 0, -1):
                d = L.deconv_backward(acts[j], deconvs[j - 1], d).d_input
            g = L.conv_backward(acts[0], cls, d)
            grads[f"cls.{tap}.w"] += g.d_weights
            grads[f"cls.{tap}.b"] += g.d_bias
            d = g.d_input
        d_taps[tap] = d

    # encoder, segment by segment from the deepest tap back to the image
    d_carry = None
    for start, end, ops in reversed(_segments(spec)):
        d = d_taps[end] if d_carry is None else d_taps[end] + d_carry
        x0 = trace.image if start is None else trace.taps[start]
        out, inputs = _run_segment(state, x0, ops, True, {})
        y = out
        for (kind, name), x_in in zip(reversed(ops), reversed(inputs)):
            if kind == "conv":
                d = L.relu_backward(y, d)
                g = L.conv_backward(x_in, state.conv(name), d)
                grads[f"enc.{name}.w"] += g.d_weights
                grads[f"enc.{name}.b"] += g.d_bias
                d = g.d_input
            else:
                d = L.maxpool_backward(d, trace.pool_indices[name], x_in.shape)
            y = x_in
        d_carry = d
    return grads


def with_spec(state: NetworkState, **changes) -> NetworkState:
    """Same parameters under a spec differing only in non-structural fields."""
    spec = replace(state.spec, **changes)
    check_entries(spec, state.params)
    return NetworkState(spec, state.params)
