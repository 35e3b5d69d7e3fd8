"""Tight frame U-net encoder/decoder.

The encoder applies, at each level, a learned 3x3 convolution followed by
batch normalisation and ReLU, then splits every channel with the Haar
filter bank. The three high-pass bands are emitted as coefficients and the
low-pass band feeds the next level; the low-pass output of the last level
is the coarse coefficient stack. With ``bypass=True`` the input of each
level is emitted as an additional coefficient stack.

The decoder runs the recursion backwards: the four bands of a level are
upsampled separately, concatenated along channels (together with the
bypass stack when present) and merged by a learned convolution + batch
norm + ReLU. A final transposed convolution + batch norm produces the
single-channel image.

Coefficients are exposed as a :class:`CoeffPyramid` so the decoder can be
driven by arbitrary coefficients, e.g. thresholded or optimised ones.
"""

from __future__ import annotations

from collections.abc import Callable, Iterator
from dataclasses import asdict, dataclass

import numpy as np

from . import haar
from .tensor import (
    BatchNormState,
    Tensor,
    batchnorm,
    concat,
    conv2d,
    conv2d_transpose,
    relu,
)


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters.

    ``nonlinearity`` and ``batchnorm`` exist for the linear harness used to
    check the perfect-recovery property; trained models keep the defaults.
    """

    levels: int = 3
    base_channels: int = 8
    channel_growth: int = 2
    kernel_size: int = 3
    bypass: bool = True
    in_channels: int = 1
    nonlinearity: str = "relu"
    batchnorm: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1 or self.channel_growth < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.nonlinearity not in ("relu", "identity"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    def features(self, level: int) -> int:
        """Channels produced by the level's encoder convolution (d_level)."""
        return self.base_channels * self.channel_growth**level

    def inputs(self, level: int) -> int:
        """Channels entering the level (c_level)."""
        return self.in_channels if level == 0 else self.features(level - 1)

    def decoder_inputs(self, level: int) -> int:
        n = 4 * self.features(level)
        return n + self.inputs(level) if self.bypass else n

    def decoder_outputs(self, level: int) -> int:
        # the top merge keeps d_0 channels; the final deconv maps them to the image
        return self.features(0) if level == 0 else self.inputs(level)

    def check_size(self, height: int, width: int) -> None:
        m = 2**self.levels
        if height % m or width % m:
            raise ValueError(f"image size {height}x{width} not divisible by 2**levels = {m}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        return cls(**d)


# --------------------------------------------------------------------------
# parameters


@dataclass
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    role: str  # "encoder" or "decoder"
    kind: str  # "weight", "bias", "gamma", "beta"
    fan_in: int = 0


def param_specs(config: ArchConfig) -> list[ParamSpec]:
    """All trainable tensors in a fixed order, with their shapes."""
    k = config.kernel_size
    specs: list[ParamSpec] = []

    def layer(prefix, role, w_shape, fan_in, bias=True):
        specs.append(ParamSpec(f"{prefix}.weight", w_shape, role, "weight", fan_in))
        out = w_shape[1] if prefix == "out.deconv" else w_shape[0]
        if bias:
            specs.append(ParamSpec(f"{prefix}.bias", (out,), role, "bias"))
        if config.batchnorm:
            bn = prefix.rsplit(".", 1)[0] + ".bn"
            specs.append(ParamSpec(f"{bn}.gamma", (out,), role, "gamma"))
            specs.append(ParamSpec(f"{bn}.beta", (out,), role, "beta"))

    for lvl in range(config.levels):
        c, d = config.inputs(lvl), config.features(lvl)
        layer(f"enc{lvl}.conv", "encoder", (d, c, k, k), c * k * k)
    for lvl in reversed(range(config.levels)):
        cin, cout = config.decoder_inputs(lvl), config.decoder_outputs(lvl)
        layer(f"dec{lvl}.conv", "decoder", (cout, cin, k, k), cin * k * k)
    d0 = config.features(0)
    # transposed conv kernel (D, C, k, k) maps D -> C channels
    layer("out.deconv", "decoder", (d0, config.in_channels, k, k), d0 * k * k, bias=False)
    return specs


def bn_names(config: ArchConfig) -> list[tuple[str, int]]:
    if not config.batchnorm:
        return []
    names = [(f"enc{lvl}.bn", config.features(lvl)) for lvl in range(config.levels)]
    names += [(f"dec{lvl}.bn", config.decoder_outputs(lvl)) for lvl in reversed(range(config.levels))]
    names.append(("out.bn", config.in_channels))
    return names


@dataclass
class NetworkParams:
    """Trainable tensors plus batch-norm running statistics.

    ``theta`` (encoder) and ``eta`` (decoder) partition :attr:`tensors` by
    the role recorded in :func:`param_specs`.
    """

    config: ArchConfig
    tensors: dict[str, Tensor]
    bn: dict[str, BatchNormState]

    def __post_init__(self):
        expected = {s.name: s.shape for s in param_specs(self.config)}
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"parameter set mismatch; missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"tensor {name} has shape {self.tensors[name].shape}, expected {shape}")
        for name, ch in bn_names(self.config):
            st = self.bn.get(name)
            if st is None or st.running_mean.shape != (ch,) or st.running_var.shape != (ch,):
                raise ValueError(f"batch-norm state {name} missing or mis-shaped")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self, role: str | None = None) -> list[str]:
        return [s.name for s in param_specs(self.config) if role is None or s.role == role]

    @property
    def theta(self) -> dict[str, Tensor]:
        return {n: self.tensors[n] for n in self.names("encoder")}

    @property
    def eta(self) -> dict[str, Tensor]:
        return {n: self.tensors[n] for n in self.names("decoder")}

    def with_tensors(self, updates: dict[str, Tensor]) -> NetworkParams:
        """Copy with some tensors replaced; batch-norm state is shared."""
        return NetworkParams(self.config, {**self.tensors, **updates}, self.bn)

    def frozen(self) -> NetworkParams:
        """Gradient-free view; running statistics are copied so inference cannot mutate them."""
        return NetworkParams(
            self.config,
            {n: t.detach() for n, t in self.tensors.items()},
            {n: s.copy() for n, s in self.bn.items()},
        )

    def trainable(self) -> NetworkParams:
        return NetworkParams(
            self.config,
            {n: Tensor(t.data, requires_grad=True, name=n) for n, t in self.tensors.items()},
            self.bn,
        )

    def copy(self) -> NetworkParams:
        return NetworkParams(
            self.config,
            {n: Tensor(t.data, requires_grad=t.requires_grad, name=n) for n, t in self.tensors.items()},
            {n: s.copy() for n, s in self.bn.items()},
        )

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_params(config: ArchConfig, seed: int = 0) -> NetworkParams:
    """He-normal weights (variance 2 / fan_in), zero biases, gamma 1, beta 0."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for spec in param_specs(config):
        if spec.kind == "weight":
            arr = rng.standard_normal(spec.shape) * np.sqrt(2.0 / spec.fan_in)
        elif spec.kind == "gamma":
            arr = np.ones(spec.shape)
        else:
            arr = np.zeros(spec.shape)
        tensors[spec.name] = Tensor(arr, requires_grad=True, name=spec.name)
    bn = {name: BatchNormState.fresh(ch) for name, ch in bn_names(config)}
    return NetworkParams(config, tensors, bn)


# --------------------------------------------------------------------------
# coefficients

HIGH_BANDS = ("h", "v", "d")


@dataclass
class CoeffPyramid:
    """Encoded coefficients.

    ``high[i]`` holds the ``(h, v, d)`` stacks of level ``i + 1`` (level 1 is
    the finest), each (B, d_i, H / 2**(i+1), W / 2**(i+1)). ``coarse`` is the
    low-pass stack of the last level. ``bypass[i]``, present only for bypass
    networks, is the input of level ``i + 1``, (B, c_i, H / 2**i, W / 2**i).

    :meth:`entries` fixes the order of the index set used by
    :meth:`flatten` / :meth:`unflatten`.
    """

    high: list[tuple[Tensor, Tensor, Tensor]]
    coarse: Tensor
    bypass: list[Tensor] | None = None

    @property
    def levels(self) -> int:
        return len(self.high)

    @property
    def has_bypass(self) -> bool:
        return self.bypass is not None

    def entries(self) -> Iterator[tuple[str, Tensor]]:
        for i, bands in enumerate(self.high):
            for band, t in zip(HIGH_BANDS, bands):
                yield f"level{i + 1}.{band}", t
        yield "coarse", self.coarse
        if self.bypass is not None:
            for i, t in enumerate(self.bypass):
                yield f"bypass{i + 1}", t

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.entries()]

    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.tensors()]

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> CoeffPyramid:
        """Apply ``fn(entry_name, tensor)`` to every stack."""
        high = [
            tuple(fn(f"level{i + 1}.{b}", t) for b, t in zip(HIGH_BANDS, bands)) for i, bands in enumerate(self.high)
        ]
        coarse = fn("coarse", self.coarse)
        bypass = None if self.bypass is None else [fn(f"bypass{i + 1}", t) for i, t in enumerate(self.bypass)]
        return CoeffPyramid(high, coarse, bypass)

    def map_arrays(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> CoeffPyramid:
        return self.map(lambda name, t: Tensor(fn(name, t.data)))

    def detach(self) -> CoeffPyramid:
        return self.map(lambda _, t: t.detach())

    def requiring_grad(self) -> CoeffPyramid:
        return self.map(lambda _, t: Tensor(t.data, requires_grad=True))

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors()])

    def unflatten(self, vector: np.ndarray) -> CoeffPyramid:
        """Pyramid with this one's layout holding the entries of ``vector``."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.count(),):
            raise ValueError(f"vector of length {vector.size} does not match {self.count()} coefficients")
        pos = 0

        def take(_, t):
            nonlocal pos
            chunk = vector[pos : pos + t.size].reshape(t.shape)
            pos += t.size
            return Tensor(chunk)

        return self.map(take)

    def high_only(self) -> list[Tensor]:
        return [t for bands in self.high for t in bands]


def coefficient_shapes(config: ArchConfig, height: int, width: int, batch: int = 1) -> list[tuple[int, ...]]:
    """Closed-form stack shapes in :meth:`CoeffPyramid.entries` order."""
    config.check_size(height, width)
    shapes = []
    for lvl in range(config.levels):
        s = 2 ** (lvl + 1)
        shapes += [(batch, config.features(lvl), height // s, width // s)] * 3
    s = 2**config.levels
    shapes.append((batch, config.features(config.levels - 1), height // s, width // s))
    if config.bypass:
        for lvl in range(config.levels):
            s = 2**lvl
            shapes.append((batch, config.inputs(lvl), height // s, width // s))
    return shapes


def zeros_like_layout(config: ArchConfig, height: int, width: int, batch: int = 1) -> CoeffPyramid:
    shapes = iter(coefficient_shapes(config, height, width, batch))
    high = [tuple(Tensor(np.zeros(next(shapes))) for _ in HIGH_BANDS) for _ in range(config.levels)]
    coarse = Tensor(np.zeros(next(shapes)))
    bypass = [Tensor(np.zeros(next(shapes))) for _ in range(config.levels)] if config.bypass else None
    return CoeffPyramid(high, coarse, bypass)


def zero_bypass(xi: CoeffPyramid) -> CoeffPyramid:
    """Zero the bypass stacks, leaving the frame coefficients untouched."""
    if xi.bypass is None:
        raise ValueError("zero_bypass called on a pyramid without bypass stacks")
    return CoeffPyramid(list(xi.high), xi.coarse, [Tensor(np.zeros(t.shape)) for t in xi.bypass])


# --------------------------------------------------------------------------
# forward passes


def _block(params: NetworkParams, prefix: str, bn: str, x: Tensor, mode: str, activate: bool = True) -> Tensor:
    cfg = params.config
    pad = cfg.kernel_size // 2
    y = conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride=1, padding=pad)
    if cfg.batchnorm:
        y = batchnorm(y, params[f"{bn}.gamma"], params[f"{bn}.beta"], params.bn[bn], mode)
    if activate and cfg.nonlinearity == "relu":
        y = relu(y)
    return y


def _as_batch(x) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, 1, *x.shape)
    if x.ndim != 4:
        raise ValueError(f"expected an image or a (B, C, H, W) batch, got shape {x.shape}")
    return x


def encode(params: NetworkParams, x, mode: str = "eval") -> CoeffPyramid:
    """Encoder: image(s) to coefficient pyramid.

    ``x`` may be a 2-D image or a (B, C, H, W) batch, as array or Tensor.
    """
    cfg = params.config
    x = _as_batch(x)
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, network expects {cfg.in_channels}")
    cfg.check_size(*x.shape[2:])
    high, bypass = [], []
    cur = x
    for lvl in range(cfg.levels):
        bypass.append(cur)
        f = _block(params, f"enc{lvl}.conv", f"enc{lvl}.bn", cur, mode)
        low, h, v, d = haar.analysis(f)
        high.append((h, v, d))
        cur = low
    return CoeffPyramid(high, cur, bypass if cfg.bypass else None)


def decode(params: NetworkParams, xi: CoeffPyramid, mode: str = "eval") -> Tensor:
    """Decoder: coefficient pyramid to (B, 1, H, W) images."""
    cfg = params.config
    if xi.levels != cfg.levels:
        raise ValueError(f"pyramid has {xi.levels} levels, network expects {cfg.levels}")
    if xi.has_bypass != cfg.bypass:
        raise ValueError("bypass stacks present/absent contrary to the network configuration")
    B = xi.coarse.shape[0]
    s = 2**cfg.levels
    H, W = xi.coarse.shape[2] * s, xi.coarse.shape[3] * s
    expected = coefficient_shapes(cfg, H, W, B)
    for (name, t), shape in zip(xi.entries(), expected):
        if t.shape != shape:
            raise ValueError(f"coefficient stack {name} has shape {t.shape}, expected {shape}")
    low = xi.coarse
    for lvl in reversed(range(cfg.levels)):
        h, v, d = xi.high[lvl]
        z = haar.synthesis_bands(low, h, v, d)
        if cfg.bypass:
            z = concat([z, xi.bypass[lvl]], axis=1)
        low = _block(params, f"dec{lvl}.conv", f"dec{lvl}.bn", z, mode)
    pad = cfg.kernel_size // 2
    out = conv2d_transpose(low, params["out.deconv.weight"], stride=1, padding=pad)
    if cfg.batchnorm:
        out = batchnorm(out, params["out.bn.gamma"], params["out.bn.beta"], params.bn["out.bn"], mode)
    return out


def autoencode(params: NetworkParams, x, mode: str = "eval") -> Tensor:
    return decode(params, encode(params, x, mode), mode)


def identity_params(config: ArchConfig) -> NetworkParams:
    """Delta-kernel parameters realising exact recovery in the linear harness.

    Requires ``nonlinearity="identity"`` and ``batchnorm=False``. Encoder
    convolutions copy channel ``i`` to ``i``; decoder convolutions sum the
    four bands of channel ``i`` (and ignore bypass stacks), which inverts the
    tight frame split.
    """
    if config.nonlinearity != "identity" or config.batchnorm:
        raise ValueError("identity parameters need nonlinearity='identity' and batchnorm=False")
    k = config.kernel_size
    c = k // 2
    tensors = {}
    for spec in param_specs(config):
        w = np.zeros(spec.shape)
        if spec.kind == "weight":
            name = spec.name
            if name.startswith("enc"):
                for i in range(min(spec.shape[0], spec.shape[1])):
                    w[i, i, c, c] = 1.0
            elif name.startswith("dec"):
                lvl = int(name[3])
                for i in range(config.features(lvl)):
                    if i < spec.shape[0]:
                        w[i, 4 * i : 4 * i + 4, c, c] = 1.0
            else:
                w[0, 0, c, c] = 1.0
        tensors[spec.name] = Tensor(w, name=spec.name)
    return NetworkParams(config, tensors, {})
