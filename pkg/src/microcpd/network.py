"""3D convolutional attention network over microenvironment grids.

Default layout::

    Stem -> iRMB x2 -> Down -> iRMB x2 -> Down -> MHSA-iRMB x2 -> Down -> MHSA-iRMB x2 -> MLP head

with spatial sizes 20 -> 10 -> 5 -> 3. Attention therefore runs on at most
125 tokens. Every width is configurable through :class:`ModelConfig`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .autograd import Module, Parameter, Tensor, functional as F
from .exceptions import ConfigError, ShapeError

NORMS = ("batch", "layer", "none")
STAGE_KINDS = ("irmb", "mhsa")


@dataclass(frozen=True)
class ModelConfig:
    """Network hyper-parameters.

    ``widths[i]`` is the channel count carried through stage ``i``;
    ``expansions[i]`` is the inner width (f for iRMB, f1 for the stage's
    DownSample and MHSA-iRMB blocks). For attention stages the inner width
    must equal ``heads * head_dim``.
    """

    in_channels: int = 7
    input_size: int = 20
    stem_f1: int = 16
    stem_f2: int = 16
    widths: tuple = (16, 32, 64, 64)
    expansions: tuple = (16, 32, 64, 64)
    blocks: tuple = (2, 2, 2, 2)
    kinds: tuple = ("irmb", "irmb", "mhsa", "mhsa")
    heads: int = 4
    head_dim: int = 16
    mlp_hidden: int = 720
    n_classes: int = 20
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("widths", "expansions", "blocks", "kinds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        n = len(self.widths)
        if not n or any(len(getattr(self, k)) != n for k in ("expansions", "blocks", "kinds")):
            raise ConfigError("widths, expansions, blocks and kinds must have the same nonzero length")
        if self.n_classes != 20:
            raise ConfigError("n_classes must be 20")
        ints = [self.in_channels, self.input_size, self.stem_f1, self.stem_f2, self.heads,
                self.head_dim, self.mlp_hidden, *self.widths, *self.expansions]
        if any(int(v) != v or v < 1 for v in ints) or any(b < 0 for b in self.blocks):
            raise ConfigError("all widths, sizes and counts must be positive integers")
        for i, kind in enumerate(self.kinds):
            if kind not in STAGE_KINDS:
                raise ConfigError(f"stage {i}: unknown kind {kind!r}")
            if kind == "mhsa" and self.heads * self.head_dim != self.expansions[i]:
                raise ConfigError(
                    f"stage {i}: heads*head_dim = {self.heads * self.head_dim} "
                    f"must equal the attention width {self.expansions[i]}"
                )
        if self.kinds[0] == "irmb" and self.blocks[0] and self.stem_f2 != self.widths[0]:
            raise ConfigError("stem_f2 must equal widths[0] when stage 0 is an iRMB stage")

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v, tuple) else v) for f in fields(self) for v in [getattr(self, f.name)]}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def spatial_trace(self) -> list:
        """Spatial size of each stage: stride-2, kernel-1 downsampling gives ceil(n / 2)."""
        sizes = [self.input_size]
        for _ in self.widths[1:]:
            sizes.append((sizes[-1] - 1) // 2 + 1)
        return sizes


def tiny_config(**overrides) -> ModelConfig:
    """A narrow configuration for tests and desk-scale training."""
    base = dict(stem_f1=4, stem_f2=4, widths=(4, 8, 8, 8), expansions=(4, 8, 8, 8),
                heads=2, head_dim=4, mlp_hidden=720)
    base.update(overrides)
    return ModelConfig(**base)


def _trunc_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Conv3d(Module):
    def __init__(self, cin, cout, kernel=1, stride=1, bias=True, rng=None, std=0.02):
        super().__init__()
        if kernel not in (1, 3) or stride not in (1, 2):
            raise ConfigError(f"unsupported conv: kernel {kernel}, stride {stride}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, kernel // 2
        self.weight = Parameter(_trunc_normal(rng, (cout, cin, kernel, kernel, kernel), std))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels):
        super().__init__()
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var, self.training)


class LayerNorm(Module):
    def __init__(self, channels):
        super().__init__()
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, cin, cout, rng=None, std=0.02):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_trunc_normal(rng, (cout, cin), std))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class CNA(Module):
    """conv -> optional norm -> optional activation."""

    def __init__(self, cin, filters, kernel=1, norm="none", act="none", stride=1, rng=None, std=0.02):
        super().__init__()
        if norm not in NORMS:
            raise ConfigError(f"unknown norm {norm!r}")
        if act not in ("relu", "silu", "sigmoid", "none"):
            raise ConfigError(f"unknown activation {act!r}")
        self.act = act
        self.conv = Conv3d(cin, filters, kernel, stride, rng=rng, std=std)
        self.norm = {"batch": BatchNorm, "layer": LayerNorm}.get(norm, lambda c: None)(filters)

    def forward(self, x):
        y = self.conv(x)
        if self.norm is not None:
            y = self.norm(y)
        return F.activation(y, self.act)


class SqueezeExcite(Module):
    """Channel gate in (0, 1): max-pool, relu 1x1 CNA, sigmoid 1x1 CNA."""

    def __init__(self, channels, rng=None, std=0.02):
        super().__init__()
        self.reduce = CNA(channels, channels, 1, "none", "relu", rng=rng, std=std)
        self.expand = CNA(channels, channels, 1, "none", "sigmoid", rng=rng, std=std)

    def forward(self, x):
        return self.expand(self.reduce(F.global_max_pool(x)))


class Stem(Module):
    """y = skip(x) + conv1(B + SE(B) * B),  B = CNA_silu,3x3x3,bn(bn(x))."""

    def __init__(self, cin, f1, f2, rng=None, std=0.02):
        super().__init__()
        self.bn = BatchNorm(cin)
        self.cna = CNA(cin, f1, 3, "batch", "silu", rng=rng, std=std)
        self.se = SqueezeExcite(f1, rng=rng, std=std)
        self.proj = Conv3d(f1, f2, 1, rng=rng, std=std)
        self.skip = Conv3d(cin, f2, 1, bias=False, rng=rng, std=std) if f2 != cin else None

    def forward(self, x):
        b = self.cna(self.bn(x))
        branch = b + self.se(b) * b
        shortcut = self.skip(x) if self.skip is not None else x
        return shortcut + self.proj(branch)


class IRMB(Module):
    """Channel-preserving inverted residual: y = x + conv1(CNA_silu,3(B) + B),  B = CNA_relu,1(bn(x))."""

    def __init__(self, channels, f, rng=None, std=0.02):
        super().__init__()
        self.bn = BatchNorm(channels)
        self.expand = CNA(channels, f, 1, "none", "relu", rng=rng, std=std)
        self.mix = CNA(f, f, 3, "batch", "silu", rng=rng, std=std)
        self.proj = Conv3d(f, channels, 1, rng=rng, std=std)

    def forward(self, x):
        b = self.expand(self.bn(x))
        return x + self.proj(self.mix(b) + b)


class DownSample(Module):
    """bn -> CNA_relu,1 -> CNA_silu,3,bn -> stride-2 1x1x1 conv; spatial n -> ceil(n/2)."""

    def __init__(self, cin, f1, f2, rng=None, std=0.02):
        super().__init__()
        self.bn = BatchNorm(cin)
        self.expand = CNA(cin, f1, 1, "none", "relu", rng=rng, std=std)
        self.mix = CNA(f1, f1, 3, "batch", "silu", rng=rng, std=std)
        self.proj = Conv3d(f1, f2, 1, stride=2, rng=rng, std=std)

    def forward(self, x):
        if min(x.shape[2:]) < 2:
            raise ShapeError(f"DownSample needs spatial dims >= 2, got {x.shape[2:]}")
        return self.proj(self.mix(self.expand(self.bn(x))))


class MultiHeadSelfAttention(Module):
    """Self-attention over spatial tokens of a (B, C, D, H, W) map.

    Queries and keys are linear 1x1x1 projections to ``heads * head_dim``;
    values come from the relu 1x1x1 CNA (``width`` channels, split evenly
    across heads). Head outputs are concatenated and mixed by ``out``.
    """

    def __init__(self, cin, width, heads, head_dim, rng=None, std=0.02):
        super().__init__()
        if heads * head_dim != width:
            raise ConfigError(f"heads*head_dim ({heads * head_dim}) != attention width ({width})")
        self.heads, self.head_dim, self.width = heads, head_dim, width
        self.query = CNA(cin, heads * head_dim, 1, "none", "none", rng=rng, std=std)
        self.key = CNA(cin, heads * head_dim, 1, "none", "none", rng=rng, std=std)
        self.value = CNA(cin, width, 1, "none", "relu", rng=rng, std=std)
        self.out = Conv3d(width, width, 1, rng=rng, std=std)
        self.last_attention = None

    def attend(self, a):
        """Concatenated head outputs before the output projection, (B, width, D, H, W)."""
        B, _, D, H, W = a.shape
        n, h, dk = D * H * W, self.heads, self.head_dim
        dv = self.width // h
        q = self.query(a).reshape(B, h, dk, n).transpose(0, 1, 3, 2)
        k = self.key(a).reshape(B, h, dk, n)
        scores = (q @ k) * (1.0 / np.sqrt(dk))
        weights = F.softmax(scores, axis=-1)
        self.last_attention = weights.data
        v = self.value(a).reshape(B, h, dv, n).transpose(0, 1, 3, 2)
        heads = weights @ v
        return heads.transpose(0, 1, 3, 2).reshape(B, self.width, D, H, W)

    def forward(self, a):
        return self.out(self.attend(a))


class MHSAIRMB(Module):
    """y = ln(x) + conv1(CNA_silu,3,bn(Att) + Att),  Att = MHSA(ln(x)).

    The residual is taken from the layer-normed input; a 1x1x1 projection is
    inserted on it when ``f2`` differs from the input width.
    """

    def __init__(self, cin, f1, f2, heads, head_dim, rng=None, std=0.02):
        super().__init__()
        self.ln = LayerNorm(cin)
        self.attn = MultiHeadSelfAttention(cin, f1, heads, head_dim, rng=rng, std=std)
        self.mix = CNA(f1, f1, 3, "batch", "silu", rng=rng, std=std)
        self.proj = Conv3d(f1, f2, 1, rng=rng, std=std)
        self.skip = Conv3d(cin, f2, 1, bias=False, rng=rng, std=std) if f2 != cin else None

    def forward(self, x):
        a = self.ln(x)
        att = self.attn(a)
        shortcut = self.skip(a) if self.skip is not None else a
        return shortcut + self.proj(self.mix(att) + att)


class MLPHead(Module):
    """max-pool -> flatten -> linear(hidden) -> relu -> linear(classes)."""

    def __init__(self, cin, hidden=720, classes=20, rng=None, std=0.02):
        super().__init__()
        self.fc1 = Linear(cin, hidden, rng=rng, std=std)
        self.fc2 = Linear(hidden, classes, rng=rng, std=std)

    def forward(self, x):
        flat = F.flatten(F.global_max_pool(x))
        if flat.shape[1] != self.fc1.weight.shape[1]:
            raise ConfigError(f"flattened width {flat.shape[1]} != classifier input {self.fc1.weight.shape[1]}")
        return self.fc2(F.relu(self.fc1(flat)))


class MicroEnvNet(Module):
    """Full classifier: (B, 7, 20, 20, 20) grids -> (B, 20) logits."""

    def __init__(self, config: Optional[ModelConfig] = None, dtype=np.float32):
        super().__init__()
        cfg = config if config is not None else ModelConfig()
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        std = cfg.init_std
        self.stem = Stem(cfg.in_channels, cfg.stem_f1, cfg.stem_f2, rng=rng, std=std)
        self.stages = []
        channels = cfg.stem_f2
        for i, (width, f, nblocks, kind) in enumerate(zip(cfg.widths, cfg.expansions, cfg.blocks, cfg.kinds)):
            if i > 0:
                down = DownSample(channels, f, width, rng=rng, std=std)
                setattr(self, f"down{i}", down)
                self.stages.append(down)
                channels = width
            for j in range(nblocks):
                if kind == "irmb":
                    block = IRMB(channels, f, rng=rng, std=std)
                else:
                    block = MHSAIRMB(channels, f, width, cfg.heads, cfg.head_dim, rng=rng, std=std)
                    channels = width
                setattr(self, f"stage{i}_block{j}", block)
                self.stages.append(block)
        self.head = MLPHead(channels, cfg.mlp_hidden, cfg.n_classes, rng=rng, std=std)
        self.astype(dtype)

    @property
    def dtype(self):
        return self.stem.proj.weight.dtype

    def forward(self, x, trace: Optional[list] = None):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        cfg = self.config
        s = cfg.input_size
        expected = (cfg.in_channels, s, s, s)
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected input (B, {', '.join(map(str, expected))}), got {x.shape}")
        y = self.stem(x)
        if trace is not None:
            trace.append(("stem", y.shape))
        for name, mod in self.named_children_in_order():
            y = mod(y)
            if trace is not None:
                trace.append((name, y.shape))
        logits = self.head(y)
        if trace is not None:
            trace.append(("head", logits.shape))
        return logits

    def named_children_in_order(self):
        names = {id(m): n for n, m in self._modules.items()}
        return [(names[id(m)], m) for m in self.stages]


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count (see README for the derivation)."""

    def conv(cin, cout, k, bias=True):
        return cout * cin * k ** 3 + (cout if bias else 0)

    def cna(cin, cout, k, norm):
        return conv(cin, cout, k) + (2 * cout if norm != "none" else 0)

    total = 2 * cfg.in_channels + cna(cfg.in_channels, cfg.stem_f1, 3, "batch")
    total += 2 * cna(cfg.stem_f1, cfg.stem_f1, 1, "none") + conv(cfg.stem_f1, cfg.stem_f2, 1)
    if cfg.stem_f2 != cfg.in_channels:
        total += conv(cfg.in_channels, cfg.stem_f2, 1, bias=False)
    c = cfg.stem_f2
    for i, (w, f, nb, kind) in enumerate(zip(cfg.widths, cfg.expansions, cfg.blocks, cfg.kinds)):
        if i > 0:
            total += 2 * c + cna(c, f, 1, "none") + cna(f, f, 3, "batch") + conv(f, w, 1)
            c = w
        for _ in range(nb):
            if kind == "irmb":
                total += 2 * c + cna(c, f, 1, "none") + cna(f, f, 3, "batch") + conv(f, c, 1)
            else:
                qk = cfg.heads * cfg.head_dim
                total += 2 * c + 2 * conv(c, qk, 1) + conv(c, f, 1) + conv(f, f, 1)
                total += cna(f, f, 3, "batch") + conv(f, w, 1)
                if w != c:
                    total += conv(c, w, 1, bias=False)
                c = w
    total += c * cfg.mlp_hidden + cfg.mlp_hidden + cfg.mlp_hidden * cfg.n_classes + cfg.n_classes
    return total
