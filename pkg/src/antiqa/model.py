"""The text-quality network: a compact multi-scale CNN regressor.

Topology: a 3x3 stem, then three stages of residual strip-convolution
blocks (1xk then kx1) with GroupNorm, each stage followed by an SE
channel-gating block. The gated stage outputs are tapped at three
resolutions; each tap goes through an adaptive avg+max grid-pooling
block (APB) with a linear projection, the three projections are
concatenated and an MLP head regresses the scalar score. Stage
transitions are stride-2 3x3 convolutions that double the channel
count and halve the resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """The architecture configuration violates an invariant."""


@dataclass(frozen=True)
class ArchConfig:
    """Hyperparameters of the quality network.

    The defaults reproduce the reference topology: stages at 64/128/256
    channels with two blocks each, strip kernel length 3, SE reduction
    16, a 2x2 pooling grid, 64-d per-scale projections and a
    192-256-128-32-1 regression head on 2-channel 256x256 inputs.
    """
    stage_channels: tuple = (64, 128, 256)
    blocks_per_stage: int = 2
    strip_kernel_k: int = 3
    se_reduction: int = 16
    grid_size: int = 2
    proj_dim: int = 64
    mlp_dims: tuple = (192, 256, 128, 32, 1)
    groupnorm_groups: int = 8
    dropout_rate: float = 0.1
    input_channels: int = 2
    input_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "mlp_dims", tuple(self.mlp_dims))
        self.validate()

    def validate(self):
        cs = self.stage_channels
        if len(cs) != 3:
            raise ConfigError("expected exactly three stages")
        for a, b in zip(cs, cs[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage channels must double: {cs}")
        if self.mlp_dims[0] != 3 * self.proj_dim:
            raise ConfigError(
                f"mlp input {self.mlp_dims[0]} must equal 3*proj_dim={3 * self.proj_dim}")
        if self.mlp_dims[-1] != 1:
            raise ConfigError("mlp must end in a single output")
        if self.strip_kernel_k < 1 or self.strip_kernel_k % 2 == 0:
            raise ConfigError(f"strip kernel length must be odd, got {self.strip_kernel_k}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0,1), got {self.dropout_rate}")
        for c in cs:
            if c % self.groupnorm_groups != 0:
                raise ConfigError(
                    f"{c} channels not divisible by {self.groupnorm_groups} groups")
        if self.blocks_per_stage < 1:
            raise ConfigError("need at least one block per stage")
        if self.se_reduction < 1:
            raise ConfigError("se_reduction must be >= 1")
        if self.grid_size < 1:
            raise ConfigError("grid_size must be >= 1")
        if self.input_size < 4 * self.grid_size:
            raise ConfigError("input too small for the pooling grid after downsampling")

    def proj_in_features(self, scale: int) -> int:
        """Flattened avg+max descriptor length at a given scale."""
        return 2 * self.stage_channels[scale] * self.grid_size ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["mlp_dims"] = list(self.mlp_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class AntiqaNet:
    """Parameter container plus forward pass.

    Parameters are named tensors keyed by a stable dotted path (e.g.
    ``stage1.block0.conv_h.weight``); the names drive checkpointing and
    the optimizer's weight-decay exclusions. Frozen-parameter inference
    (eval mode, no tape) is safe from multiple threads; training steps
    are single-threaded over their tape.
    """

    def __init__(self, config: ArchConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- construction -------------------------------------------------

    @classmethod
    def build(cls, config: ArchConfig, rng: np.random.Generator,
              dtype=np.float64) -> "AntiqaNet":
        """Initialize parameters: He-uniform conv/linear weights, zero
        biases, unit GroupNorm gains. Deterministic given the rng state."""
        config.validate()
        p: Dict[str, Tensor] = {}

        def conv(name, cin, cout, kh, kw):
            fan_in = cin * kh * kw
            p[f"{name}.weight"] = Tensor(
                _he_uniform(rng, (cout, cin, kh, kw), fan_in, dtype), requires_grad=True)
            p[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

        def gn(name, c):
            p[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
            p[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)

        def lin(name, fin, fout):
            p[f"{name}.weight"] = Tensor(
                _he_uniform(rng, (fout, fin), fin, dtype), requires_grad=True)
            p[f"{name}.bias"] = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True)

        k = config.strip_kernel_k
        c0 = config.stage_channels[0]
        conv("stem.conv", config.input_channels, c0, 3, 3)
        gn("stem.gn", c0)

        for s, cs in enumerate(config.stage_channels):
            for b in range(config.blocks_per_stage):
                base = f"stage{s + 1}.block{b}"
                conv(f"{base}.conv_h", cs, cs, 1, k)
                gn(f"{base}.gn1", cs)
                conv(f"{base}.conv_v", cs, cs, k, 1)
                gn(f"{base}.gn2", cs)
            hidden = max(1, cs // config.se_reduction)
            lin(f"stage{s + 1}.se.fc1", cs, hidden)
            lin(f"stage{s + 1}.se.fc2", hidden, cs)
            if s < 2:
                conv(f"down{s + 1}.conv", cs, config.stage_channels[s + 1], 3, 3)
                gn(f"down{s + 1}.gn", config.stage_channels[s + 1])

        for s in range(3):
            lin(f"apb{s}.proj", config.proj_in_features(s), config.proj_dim)

        dims = config.mlp_dims
        for i in range(len(dims) - 1):
            lin(f"head.fc{i}", dims[i], dims[i + 1])

        return cls(config, p)

    # -- forward ------------------------------------------------------

    def forward(self, x: Tensor, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Score a batch: (B, 2, S, S) -> (B,).

        ``train`` enables dropout, which then draws from ``rng``; eval
        mode is deterministic and never touches the rng.
        """
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != cfg.input_channels:
            raise T.ShapeError(
                f"expected (B, {cfg.input_channels}, H, W) input, got {x.shape}")
        p = self.params
        k = cfg.strip_kernel_k
        pad = k // 2
        g = cfg.groupnorm_groups
        rate = cfg.dropout_rate

        h = T.conv2d(x, p["stem.conv.weight"], p["stem.conv.bias"], padding=(1, 1))
        h = T.relu(T.group_norm(h, g, p["stem.gn.gamma"], p["stem.gn.beta"]))

        taps = []
        for s in range(3):
            for b in range(cfg.blocks_per_stage):
                base = f"stage{s + 1}.block{b}"
                r = T.conv2d(h, p[f"{base}.conv_h.weight"], p[f"{base}.conv_h.bias"],
                             padding=(0, pad))
                r = T.relu(T.group_norm(r, g, p[f"{base}.gn1.gamma"], p[f"{base}.gn1.beta"]))
                r = T.conv2d(r, p[f"{base}.conv_v.weight"], p[f"{base}.conv_v.bias"],
                             padding=(pad, 0))
                r = T.relu(T.group_norm(r, g, p[f"{base}.gn2.gamma"], p[f"{base}.gn2.beta"]))
                r = T.dropout(r, rate, rng, train)
                skip = h
                if f"{base}.proj.weight" in p:  # only present when channels change
                    skip = T.conv2d(h, p[f"{base}.proj.weight"], p[f"{base}.proj.bias"])
                h = T.relu(r + skip)
            h = self._se(h, f"stage{s + 1}.se")
            taps.append(h)
            if s < 2:
                h = T.conv2d(h, p[f"down{s + 1}.conv.weight"], p[f"down{s + 1}.conv.bias"],
                             stride=(2, 2), padding=(1, 1))
                h = T.relu(T.group_norm(h, g, p[f"down{s + 1}.gn.gamma"],
                                        p[f"down{s + 1}.gn.beta"]))

        feats = [self._apb(t, s) for s, t in enumerate(taps)]
        f = T.concat(feats, axis=1)

        n_fc = len(cfg.mlp_dims) - 1
        for i in range(n_fc):
            f = T.linear(f, p[f"head.fc{i}.weight"], p[f"head.fc{i}.bias"])
            if i < n_fc - 1:
                f = T.dropout(T.relu(f), rate, rng, train)
        return T.reshape(f, (x.shape[0],))

    def _se(self, x: Tensor, base: str) -> Tensor:
        """Squeeze-and-excitation: pooled stats gate each channel in (0,1)."""
        p = self.params
        z = T.global_avg_pool(x)
        z = T.relu(T.linear(z, p[f"{base}.fc1.weight"], p[f"{base}.fc1.bias"]))
        w = T.sigmoid(T.linear(z, p[f"{base}.fc2.weight"], p[f"{base}.fc2.bias"]))
        n, c = w.shape
        return x * T.reshape(w, (n, c, 1, 1))

    def _apb(self, x: Tensor, scale: int) -> Tensor:
        """Adaptive pooling block: avg+max grid descriptors, projected."""
        cfg = self.config
        p = self.params
        g = cfg.grid_size
        n = x.shape[0]
        avg = T.reshape(T.adaptive_avg_pool(x, g), (n, -1))
        mx = T.reshape(T.adaptive_max_pool(x, g), (n, -1))
        desc = T.concat([avg, mx], axis=1)
        return T.linear(desc, p[f"apb{scale}.proj.weight"], p[f"apb{scale}.proj.bias"])

    # -- convenience --------------------------------------------------

    def score(self, inputs: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Eval-mode scores for a stack of (2, S, S) inputs."""
        dtype = next(iter(self.params.values())).data.dtype
        arr = np.asarray(inputs, dtype=dtype)
        if arr.ndim == 3:
            arr = arr[None]
        out = np.empty(arr.shape[0], dtype=np.float64)
        for lo in range(0, arr.shape[0], batch_size):
            batch = Tensor(arr[lo:lo + batch_size])
            out[lo:lo + batch.shape[0]] = self.forward(batch).data
        return out

    def param_dtype(self):
        return next(iter(self.params.values())).data.dtype


def count_params(params: Dict[str, Tensor]) -> int:
    """Total number of scalar parameters."""
    return int(sum(t.data.size for t in params.values()))


def conv_param_count(cin: int, cout: int, kh: int, kw: int, bias: bool = True) -> int:
    return cin * cout * kh * kw + (cout if bias else 0)


def conv_flops(cin: int, cout: int, kh: int, kw: int, h_out: int, w_out: int) -> int:
    """Multiply-adds x2 for one convolution at the given output size."""
    return 2 * cin * cout * kh * kw * h_out * w_out


def linear_flops(fin: int, fout: int) -> int:
    return 2 * fin * fout


def estimate_flops(config: ArchConfig) -> int:
    """FLOPs (multiply-adds x2, conv and linear layers only) for one crop.

    Normalization, activations and pooling are excluded; they contribute
    a negligible share next to the convolutions.
    """
    k = config.strip_kernel_k
    size = config.input_size
    total = conv_flops(config.input_channels, config.stage_channels[0], 3, 3, size, size)
    for s, cs in enumerate(config.stage_channels):
        total += config.blocks_per_stage * (
            conv_flops(cs, cs, 1, k, size, size) + conv_flops(cs, cs, k, 1, size, size))
        hidden = max(1, cs // config.se_reduction)
        total += linear_flops(cs, hidden) + linear_flops(hidden, cs)
        if s < 2:
            size = (size + 2 - 3) // 2 + 1
            total += conv_flops(cs, config.stage_channels[s + 1], 3, 3, size, size)
    for s in range(3):
        total += linear_flops(config.proj_in_features(s), config.proj_dim)
    for a, b in zip(config.mlp_dims, config.mlp_dims[1:]):
        total += linear_flops(a, b)
    return total
