"""Small image-to-image CNNs whose parameters are shared across mesh levels.

Every model maps ``(N, C_in, H, W)`` to ``(N, C_out, H, W)`` and owns no
resolution-dependent state, so one parameter set applies unchanged at every
level of the hierarchy.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    avgpool2,
    concat_channels,
    conv2d,
    relu,
    upsample_nearest2,
)

__all__ = [
    "ModelConfig",
    "Model",
    "build",
    "default_config",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
    "count_params",
]

KINDS = ("convstack", "resnet", "unet")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    ``channels`` is interpreted per kind:

    * convstack: ``[C_in, hidden..., C_out]``, one conv per transition.
    * resnet: ``[C_in, hidden, C_out]``; ``depth`` residual blocks.
    * unet: ``[C_in, f_1, ..., f_depth, C_out]``; ``depth`` resolution levels.
    """

    kind: str = "convstack"
    channels: tuple[int, ...] = (2, 16, 16, 1)
    depth: int = 2
    kernel_size: int = 3
    zero_final: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channel counts must be positive, got {list(self.channels)}")
        if self.kind == "convstack" and len(self.channels) < 2:
            raise ValueError("convstack needs at least [C_in, C_out]")
        if self.kind == "resnet":
            if len(self.channels) != 3:
                raise ValueError("resnet channels must be [C_in, hidden, C_out]")
            if self.depth < 0:
                raise ValueError("resnet depth must be >= 0")
        if self.kind == "unet":
            if self.depth < 1:
                raise ValueError("unet depth must be >= 1")
            if len(self.channels) != self.depth + 2:
                raise ValueError(f"unet with depth {self.depth} needs {self.depth + 2} channel entries, "
                                 f"got {len(self.channels)}")

    @property
    def min_spatial(self) -> int:
        if self.kind == "unet":
            return 2 ** self.depth
        return self.kernel_size

    @property
    def in_channels(self) -> int:
        return self.channels[0]

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


def default_config(kind: str, in_channels: int, out_channels: int) -> ModelConfig:
    """Desk-scale defaults for each architecture."""
    if kind == "convstack":
        return ModelConfig("convstack", (in_channels, 16, 16, out_channels))
    if kind == "resnet":
        return ModelConfig("resnet", (in_channels, 32, out_channels), depth=2)
    if kind == "unet":
        return ModelConfig("unet", (in_channels, 8, 16, out_channels), depth=2)
    raise ValueError(f"unknown model kind {kind!r}")


def _conv_params(rng, c_in, c_out, k, zero=False):
    a = 1.0 / np.sqrt(c_in * k * k)
    w = np.zeros((c_out, c_in, k, k)) if zero else rng.uniform(-a, a, size=(c_out, c_in, k, k))
    return Tensor(w, requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True)


@dataclass
class Model:
    config: ModelConfig
    names: list[str] = field(default_factory=list)

    @property
    def min_spatial(self) -> int:
        return self.config.min_spatial

    def init_params(self, rng: np.random.Generator) -> OrderedDict:
        cfg = self.config
        k = cfg.kernel_size
        ch = cfg.channels
        p = OrderedDict()

        def conv(name, c_in, c_out, zero=False):
            p[f"{name}.w"], p[f"{name}.b"] = _conv_params(rng, c_in, c_out, k, zero)

        if cfg.kind == "convstack":
            n = len(ch) - 1
            for i in range(n):
                conv(f"conv{i}", ch[i], ch[i + 1], zero=cfg.zero_final and i == n - 1)
        elif cfg.kind == "resnet":
            c_in, hid, c_out = ch
            conv("lift", c_in, hid)
            for b in range(cfg.depth):
                conv(f"block{b}.conv1", hid, hid)
                conv(f"block{b}.conv2", hid, hid)
            conv("proj", hid, c_out, zero=cfg.zero_final)
        else:
            filters = ch[1:-1]
            prev = ch[0]
            for lvl, f in enumerate(filters):
                conv(f"enc{lvl}.in", prev, f)
                conv(f"enc{lvl}.res1", f, f)
                conv(f"enc{lvl}.res2", f, f)
                prev = f
            for lvl in range(len(filters) - 2, -1, -1):
                f = filters[lvl]
                conv(f"dec{lvl}.in", filters[lvl + 1] + f, f)
                conv(f"dec{lvl}.res1", f, f)
                conv(f"dec{lvl}.res2", f, f)
            conv("out", filters[0], ch[-1], zero=cfg.zero_final)
        self.names = list(p)
        return p

    def check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4:
            raise ShapeError(f"model input must be (N, C, H, W), got {x.shape}")
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise ShapeError(f"model expects {self.config.in_channels} input channels, got {c}")
        m = self.min_spatial
        if h < m or w < m:
            raise ShapeError(f"input {h}x{w} is below the model's minimum spatial size {m}")
        if self.config.kind == "unet":
            f = 2 ** (self.config.depth - 1)
            if h % f or w % f:
                raise ShapeError(f"unet input {h}x{w} must be divisible by {f}")

    def forward(self, params, x: Tensor) -> Tensor:
        self.check_input(x)
        cfg = self.config

        def conv(name, t):
            return conv2d(t, params[f"{name}.w"], params[f"{name}.b"])

        if cfg.kind == "convstack":
            n = len(cfg.channels) - 1
            h = x
            for i in range(n):
                h = conv(f"conv{i}", h)
                if i < n - 1:
                    h = relu(h)
            return h
        if cfg.kind == "resnet":
            h = relu(conv("lift", x))
            for b in range(cfg.depth):
                r = conv(f"block{b}.conv2", relu(conv(f"block{b}.conv1", h)))
                h = add(h, r)
            return conv("proj", h)
        return self._unet(params, x, conv)

    def _unet(self, params, x, conv, drop_skip: int | None = None):
        depth = self.config.depth

        def resblock(name, t):
            return add(t, conv(f"{name}.res2", relu(conv(f"{name}.res1", t))))

        skips = []
        h = x
        for lvl in range(depth):
            if lvl > 0:
                h = avgpool2(h)
            h = resblock(f"enc{lvl}", relu(conv(f"enc{lvl}.in", h)))
            skips.append(h)
        for lvl in range(depth - 2, -1, -1):
            skip = skips[lvl]
            if drop_skip == lvl:
                skip = Tensor(np.zeros(skip.shape))
            h = concat_channels(upsample_nearest2(h), skip)
            h = resblock(f"dec{lvl}", relu(conv(f"dec{lvl}.in", h)))
        return conv("out", h)

    def forward_without_skip(self, params, x: Tensor, level: int = 0) -> Tensor:
        """UNet forward with the skip connection at ``level`` zeroed (wiring check)."""
        if self.config.kind != "unet":
            raise ValueError("only unet models have skip connections")
        self.check_input(x)
        return self._unet(params, x, lambda name, t: conv2d(t, params[f"{name}.w"], params[f"{name}.b"]),
                          drop_skip=level)


def build(config: ModelConfig, rng: np.random.Generator):
    """Instantiate ``config`` and draw its initial parameters from ``rng``."""
    model = Model(config)
    return model, model.init_params(rng)


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is a NumPy ``.npz`` archive. Entry ``__meta__`` holds a JSON
# string {"format": "msgrad-checkpoint", "version": 1, "config": {...},
# "names": [...]}; every parameter is stored under its own name with its
# original shape and float64 dtype.

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: Model, params) -> None:
    meta = {
        "format": "msgrad-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "names": list(params),
    }
    arrays = {name: t.data for name, t in params.items()}
    with open(Path(path), "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != "msgrad-checkpoint":
            raise ValueError(f"{path}: not a msgrad checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        cfg = meta["config"]
        config = ModelConfig(**{**cfg, "channels": tuple(cfg["channels"])})
        params = OrderedDict((n, Tensor(z[n], requires_grad=True)) for n in meta["names"])
    return Model(config, list(params)), params


def count_params(params) -> int:
    return sum(t.size for t in params.values())

