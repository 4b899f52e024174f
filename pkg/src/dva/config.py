"""Run configuration: flat ``key = value`` text with ``net.``/``train.``/``data.`` prefixes.

Every key has a default; unknown keys are rejected.  Files are read first and
``--key=value`` overrides are applied afterwards (last writer wins).  The fully
resolved configuration is written into the run directory so a run can be
replayed from it alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from . import network as net
from .data import PrepareConfig
from .errors import ConfigError
from .objective import TrainConfig


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str):
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else float(t)


def _choice(*allowed: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}; got {t!r}")
        return t

    return parse


def _taps(text: str) -> tuple:
    taps = tuple(net.normalize_tap(t) for t in text.split(",") if t.strip())
    if not taps:
        raise ValueError("at least one tap is required")
    return taps


def _text(text: str) -> str:
    return text.strip()


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    help: str


_TRAIN_DEFAULTS = TrainConfig()
_DATA_DEFAULTS = PrepareConfig()

FIELDS: dict[str, Field] = {
    "seed": Field(int, 0, "seed for initialisation, batch order and every sampled quantity"),
    "out": Field(_text, "run", "run directory (weights/, maps/, logs/, loss.csv, resolved.config)"),
    "net.profile": Field(_choice("tiny", "full"), "full", "channel widths: full VGG16 or the reduced test profile"),
    "net.taps": Field(_taps, net.DEFAULT_TAPS, "comma-separated encoder layers feeding decoder branches"),
    "net.fusion": Field(_choice("learned", "average"), "learned", "learned 1x1 fusion or plain average"),
    "net.fusion_activation": Field(_choice(*net.FUSION_ACTIVATIONS), "logit", "form of the learned fusion"),
    "net.deep_supervision": Field(_bool, True, "attach the loss to every branch map as well"),
    "net.upsampling": Field(_choice("learned", "fixed_bilinear"), "learned", "decoder upsampling"),
    "net.deconv_init": Field(_choice("bilinear", "gaussian"), "bilinear", "initial deconvolution kernels"),
    "net.encoder_init": Field(_choice("he", "gaussian"), "he", "encoder init when no pretrained file is given"),
    "net.pretrained": Field(_text, "", "weight file providing encoder parameters (optional)"),
    "train.batch_size": Field(int, _TRAIN_DEFAULTS.batch_size, "images per iteration"),
    "train.lr": Field(float, _TRAIN_DEFAULTS.lr, "base learning rate"),
    "train.lr_decay_factor": Field(float, _TRAIN_DEFAULTS.lr_decay_factor, "step decay factor"),
    "train.lr_decay_every": Field(int, _TRAIN_DEFAULTS.lr_decay_every, "iterations between decays"),
    "train.momentum": Field(float, _TRAIN_DEFAULTS.momentum, "SGD momentum"),
    "train.weight_decay": Field(float, _TRAIN_DEFAULTS.weight_decay, "L2 penalty"),
    "train.max_iters": Field(int, _TRAIN_DEFAULTS.max_iters, "number of SGD iterations"),
    "train.validate_every": Field(int, _TRAIN_DEFAULTS.validate_every, "iterations between validation passes"),
    "train.loss_reduction": Field(_choice("sum", "mean"), _TRAIN_DEFAULTS.loss_reduction, "pixel reduction of the optimised loss"),
    "train.checkpoint_every": Field(int, 0, "iterations between checkpoints (0 = only at the end)"),
    "data.manifest": Field(_text, "", "tab-separated dataset manifest"),
    "data.train_split": Field(_text, "train", "manifest split used for training"),
    "data.val_split": Field(_text, "val", "manifest split used for validation (skipped when empty)"),
    "data.max_side": Field(int, _DATA_DEFAULTS.max_side, "longer image side fed to the network"),
    "data.multiple": Field(int, _DATA_DEFAULTS.multiple, "network dims are rounded down to this multiple"),
    "data.blur_sigma": Field(_optional_float, None, "ground-truth Gaussian sigma in pixels (auto = max_side/32)"),
}


def format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved configuration values keyed by their flat names."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k: f.default for k, f in FIELDS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    # -- construction ----------------------------------------------------

    def set(self, key: str, value: Any, origin: str = "") -> None:
        if key not in FIELDS:
            where = f" ({origin})" if origin else ""
            raise ConfigError(f"unknown config key {key!r}{where}")
        if isinstance(value, str):
            try:
                value = FIELDS[key].parse(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        self.values[key] = value

    def update_text(self, text: str, origin: str = "<config>") -> None:
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            self.set(key, value, f"{origin}:{lineno}")

    def apply_overrides(self, args: Iterable[str]) -> None:
        for arg in args:
            if not arg.startswith("--") or "=" not in arg:
                raise ConfigError(f"unrecognised argument {arg!r} (overrides look like --train.lr=1e-3)")
            key, value = arg[2:].split("=", 1)
            self.set(key.strip(), value, "command line")

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "RunConfig":
        cfg = cls()
        if path:
            p = Path(path)
            try:
                text = p.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
            cfg.update_text(text, str(p))
        cfg.apply_overrides(overrides)
        return cfg

    # -- views -----------------------------------------------------------

    def __getitem__(self, key: str):
        return self.values[key]

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in FIELDS)

    def write(self, path) -> None:
        from .weights import atomic_write_bytes

        atomic_write_bytes(path, self.to_text().encode())

    def net_spec(self) -> net.NetworkSpec:
        kw = dict(
            tap_points=self["net.taps"],
            fusion=self["net.fusion"],
            fusion_activation=self["net.fusion_activation"],
            deep_supervision=self["net.deep_supervision"],
            upsampling=self["net.upsampling"],
            deconv_init=self["net.deconv_init"],
            encoder_init=self["net.encoder_init"],
        )
        try:
            return net.PROFILES[self["net.profile"]](**kw)
        except ValueError as exc:
            raise ConfigError(f"invalid network configuration: {exc}") from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                batch_size=self["train.batch_size"],
                lr=self["train.lr"],
                lr_decay_factor=self["train.lr_decay_factor"],
                lr_decay_every=self["train.lr_decay_every"],
                momentum=self["train.momentum"],
                weight_decay=self["train.weight_decay"],
                max_iters=self["train.max_iters"],
                seed=self["seed"],
                validate_every=self["train.validate_every"],
                loss_reduction=self["train.loss_reduction"],
            )
        except ValueError as exc:
            raise ConfigError(f"invalid training configuration: {exc}") from None

    def prepare_config(self) -> PrepareConfig:
        try:
            return PrepareConfig(
                max_side=self["data.max_side"],
                multiple=self["data.multiple"],
                blur_sigma=self["data.blur_sigma"],
            )
        except ValueError as exc:
            raise ConfigError(f"invalid data configuration: {exc}") from None
