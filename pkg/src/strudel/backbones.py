"""Dropout-instrumented U-Net and OctSE-Net segmentation backbones.

Both networks share one contract: a ``(B, 1, H, W)`` batch goes in, a
``(B, 1, H, W)`` map of foreground probabilities comes out. Every
convolutional block is ``(conv, group norm, ReLU) x 2`` followed by spatial
dropout, so MC dropout sampling works the same way on either backbone.

OctSE-Net swaps every 3x3 convolution for an octave convolution (a
full-resolution "high" branch and a half-resolution "low" branch with four
exchange paths) and recalibrates each block with a concurrent channel and
spatial squeeze-and-excitation gate.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, ConfigError, ShapeError

CHECKPOINT_FORMAT_VERSION = 1
KINDS = ("unet", "octse")


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "unet"
    depth: int = 3
    base_channels: int = 16
    dropout_rate: float = 0.2
    octave_alpha: float = 0.5
    se_reduction: int = 2
    norm: str = "group"
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0 <= self.octave_alpha < 1:
            raise ConfigError(f"octave_alpha must be in [0, 1), got {self.octave_alpha}")
        if self.se_reduction < 1:
            raise ConfigError(f"se_reduction must be >= 1, got {self.se_reduction}")
        if self.norm not in ("group", "none"):
            raise ConfigError(f"unsupported norm {self.norm!r}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _norm(channels, kind):
    if kind == "none" or channels == 0:
        return nn.Identity()
    return nn.GroupNorm(math.gcd(channels, 4), channels)


# ---------------------------------------------------------------------------
# plain U-Net


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, dropout, norm="group"):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            _norm(c_out, norm),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            _norm(c_out, norm),
            nn.ReLU(inplace=True),
        )
        self.drop = nn.Dropout2d(dropout)

    def forward(self, x):
        return self.drop(self.body(x))


class UNet(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.depth = spec.depth
        widths = [spec.base_channels * 2**i for i in range(spec.depth + 1)]
        p, nk = spec.dropout_rate, spec.norm
        self.down = nn.ModuleList()
        c_in = 1
        for w in widths[:-1]:
            self.down.append(ConvBlock(c_in, w, p, nk))
            c_in = w
        self.bottleneck = ConvBlock(widths[-2], widths[-1], p, nk)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(spec.depth)):
            self.up.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.dec.append(ConvBlock(2 * widths[i], widths[i], p, nk))
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


# ---------------------------------------------------------------------------
# octave convolution


def split_channels(channels, alpha):
    """Return ``(high, low)`` channel counts for a low-frequency fraction ``alpha``."""
    low = int(alpha * channels)
    return channels - low, low


def octave_conv(high, low, w_hh, w_hl=None, w_lh=None, w_ll=None, b_h=None, b_l=None):
    """Four-path octave convolution on a (high, low) feature pair.

    ``w_xy`` maps branch x to branch y. High-to-low reads a 2x average-pooled
    copy of ``high``; low-to-high is upsampled by nearest neighbour. Missing
    weights (``None``) drop their path; ``low`` may be ``None`` when no
    low-frequency input channels exist. Returns ``(high_out, low_out)``
    where ``low_out`` is ``None`` if no path produces it.
    """
    if high.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W) high branch, got {tuple(high.shape)}")
    if high.shape[-1] % 2 or high.shape[-2] % 2:
        raise ShapeError(f"high branch spatial size {tuple(high.shape[-2:])} must be even")
    if low is not None:
        h, w = high.shape[-2:]
        if tuple(low.shape[-2:]) != (h // 2, w // 2):
            raise ShapeError(
                f"low branch must be half the high resolution: high {(h, w)}, low {tuple(low.shape[-2:])}"
            )
    pad_h = w_hh.shape[-1] // 2

    out_h = F.conv2d(high, w_hh, b_h, padding=pad_h)
    if low is not None and w_lh is not None:
        out_h = out_h + F.interpolate(F.conv2d(low, w_lh, padding=w_lh.shape[-1] // 2), scale_factor=2, mode="nearest")

    out_l = None
    if w_hl is not None:
        out_l = F.conv2d(F.avg_pool2d(high, 2), w_hl, b_l, padding=w_hl.shape[-1] // 2)
    if low is not None and w_ll is not None:
        ll = F.conv2d(low, w_ll, b_l if out_l is None else None, padding=w_ll.shape[-1] // 2)
        out_l = ll if out_l is None else out_l + ll
    return out_h, out_l


class OctaveConv2d(nn.Module):
    """3x3 octave convolution; ``alpha_in=0`` accepts a plain tensor."""

    def __init__(self, c_in, c_out, alpha_in, alpha_out, kernel_size=3):
        super().__init__()
        self.hi_in, self.lo_in = split_channels(c_in, alpha_in)
        self.hi_out, self.lo_out = split_channels(c_out, alpha_out)
        k = kernel_size

        def weight(ci, co):
            if ci == 0 or co == 0:
                return None
            return nn.Parameter(torch.empty(co, ci, k, k))

        self.w_hh = weight(self.hi_in, self.hi_out)
        self.w_hl = weight(self.hi_in, self.lo_out)
        self.w_lh = weight(self.lo_in, self.hi_out)
        self.w_ll = weight(self.lo_in, self.lo_out)
        self.b_h = nn.Parameter(torch.zeros(self.hi_out))
        self.b_l = nn.Parameter(torch.zeros(self.lo_out)) if self.lo_out else None

    def forward(self, x):
        high, low = x if isinstance(x, tuple) else (x, None)
        return octave_conv(high, low, self.w_hh, self.w_hl, self.w_lh, self.w_ll, self.b_h, self.b_l)


# ---------------------------------------------------------------------------
# concurrent spatial and channel squeeze-excitation


def scse_gate(x, w1, b1, w2, b2, ws, bs):
    """Functional scSE: element-wise max of channel- and spatially-gated ``x``.

    ``w1 (C/r, C)``, ``w2 (C, C/r)`` form the channel bottleneck MLP and
    ``ws (C,)`` the 1x1 spatial projection.
    """
    squeezed = x.mean(dim=(2, 3))
    channel = torch.sigmoid(F.linear(F.relu(F.linear(squeezed, w1, b1)), w2, b2))
    spatial = torch.sigmoid(torch.einsum("bchw,c->bhw", x, ws) + bs)
    return torch.maximum(x * channel[:, :, None, None], x * spatial[:, None])


class SCSE(nn.Module):
    def __init__(self, channels, reduction=2):
        super().__init__()
        if channels % reduction:
            raise ShapeError(f"{channels} channels not divisible by se_reduction {reduction}")
        hidden = channels // reduction
        self.channels = channels
        self.w1 = nn.Parameter(torch.empty(hidden, channels))
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.w2 = nn.Parameter(torch.empty(channels, hidden))
        self.b2 = nn.Parameter(torch.zeros(channels))
        self.ws = nn.Parameter(torch.empty(channels))
        self.bs = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[1]}")
        return scse_gate(x, self.w1, self.b1, self.w2, self.b2, self.ws, self.bs)


def scse_block(features, reduction=2, block=None):
    """Apply an scSE gate, building a freshly-initialized one if none is given."""
    if features.shape[1] % reduction:
        raise ShapeError(f"{features.shape[1]} channels not divisible by se_reduction {reduction}")
    if block is None:
        block = SCSE(features.shape[1], reduction)
        _init_module(block, torch.Generator().manual_seed(0))
    return block(features)


# ---------------------------------------------------------------------------
# OctSE-Net


def _pair(fn, x):
    high, low = x
    return fn(high), (None if low is None else fn(low))


class OctBranchOp(nn.Module):
    """Separate per-branch modules (norm, SE, up-convolution)."""

    def __init__(self, high, low):
        super().__init__()
        self.high = high
        self.low = low

    def forward(self, x):
        h, l = x
        return self.high(h), (None if self.low is None or l is None else self.low(l))


class OctConvBlock(nn.Module):
    def __init__(self, c_in, c_out, alpha_in, alpha, spec: BackboneSpec, alpha_out=None):
        super().__init__()
        alpha_out = alpha if alpha_out is None else alpha_out
        self.conv1 = OctaveConv2d(c_in, c_out, alpha_in, alpha_out)
        self.conv2 = OctaveConv2d(c_out, c_out, alpha_out, alpha_out)
        hi, lo = split_channels(c_out, alpha_out)
        self.norm1 = OctBranchOp(_norm(hi, spec.norm), _norm(lo, spec.norm) if lo else None)
        self.norm2 = OctBranchOp(_norm(hi, spec.norm), _norm(lo, spec.norm) if lo else None)
        self.se = OctBranchOp(SCSE(hi, spec.se_reduction), SCSE(lo, spec.se_reduction) if lo else None)
        self.drop = nn.Dropout2d(spec.dropout_rate)

    def forward(self, x):
        x = _pair(F.relu, self.norm1(self.conv1(x)))
        x = _pair(F.relu, self.norm2(self.conv2(x)))
        x = self.se(x)
        return _pair(self.drop, x)


class OctSENet(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        a = spec.octave_alpha
        widths = [spec.base_channels * 2**i for i in range(spec.depth + 1)]
        self.down = nn.ModuleList()
        c_in, a_in = 1, 0.0
        for w in widths[:-1]:
            self.down.append(OctConvBlock(c_in, w, a_in, a, spec))
            c_in, a_in = w, a
        self.bottleneck = OctConvBlock(widths[-2], widths[-1], a, a, spec)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(spec.depth)):
            hi_in, lo_in = split_channels(widths[i + 1], a)
            hi_out, lo_out = split_channels(widths[i], a)
            self.up.append(
                OctBranchOp(
                    nn.ConvTranspose2d(hi_in, hi_out, 2, stride=2),
                    nn.ConvTranspose2d(lo_in, lo_out, 2, stride=2) if lo_out else None,
                )
            )
            last = i == 0
            self.dec.append(OctConvBlock(2 * widths[i], widths[i], a, a, spec, alpha_out=0.0 if last else a))
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        x = (x, None)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = _pair(lambda t: F.max_pool2d(t, 2), x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            uh, ul = up(x)
            sh, sl = skip
            x = dec((torch.cat([uh, sh], 1), None if ul is None else torch.cat([ul, sl], 1)))
        return self.head(x[0])


# ---------------------------------------------------------------------------
# parameters, init, forward


class ModelParams:
    """Learnable weights of one backbone, with its BackboneSpec and creation seed."""

    def __init__(self, spec: BackboneSpec, seed: int, net: nn.Module):
        self.spec = spec
        self.seed = int(seed)
        self.net = net

    def named_tensors(self) -> OrderedDict:
        return OrderedDict((k, v.detach()) for k, v in self.net.state_dict().items())

    def num_parameters(self):
        return sum(p.numel() for p in self.net.parameters())

    def clone(self) -> "ModelParams":
        net = build_network(self.spec)
        net.load_state_dict(self.net.state_dict())
        net.to(dtype=next(self.net.parameters()).dtype)
        return ModelParams(self.spec, self.seed, net)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.named_tensors().items():
            h.update(name.encode())
            h.update(t.cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.named_tensors(), other.named_tensors()
        return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)

    def __repr__(self):
        return f"ModelParams(kind={self.spec.kind!r}, seed={self.seed}, n_params={self.num_parameters()})"


def build_network(spec: BackboneSpec) -> nn.Module:
    if spec.kind == "unet":
        return UNet(spec)
    return OctSENet(spec)


def _init_module(net: nn.Module, gen: torch.Generator):
    """Fan-in scaled normal weights (He), zero biases, unit norm gains."""
    with torch.no_grad():
        for name, p in net.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            parent = net.get_submodule(name.rsplit(".", 1)[0]) if "." in name else net
            if isinstance(parent, nn.GroupNorm):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif p.dim() <= 1 and leaf != "ws":
                p.zero_()
            else:
                if isinstance(parent, nn.ConvTranspose2d):
                    fan_in = p.shape[0] * p[0, 0].numel()
                elif p.dim() == 1:
                    fan_in = p.shape[0]
                else:
                    fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))


def init_model(spec: BackboneSpec, seed: int) -> ModelParams:
    if not isinstance(spec, BackboneSpec):
        raise ConfigError("init_model needs a BackboneSpec")
    net = build_network(spec)
    _init_module(net, torch.Generator().manual_seed(int(seed)))
    net.eval()
    return ModelParams(spec, seed, net)


def as_batch(images) -> torch.Tensor:
    """Stack 2D numpy grids or tensors into a ``(B, 1, H, W)`` float tensor."""
    if isinstance(images, torch.Tensor):
        t = images
    else:
        import numpy as np

        t = torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32)))
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[:, None]
    return t


def check_input(spec: BackboneSpec, batch: torch.Tensor):
    if batch.dim() != 4 or batch.shape[1] != 1:
        raise ShapeError(f"expected a (B, 1, H, W) batch, got {tuple(batch.shape)}")
    step = 2**spec.depth
    h, w = batch.shape[-2:]
    if h % step or w % step:
        raise ShapeError(f"spatial size {(h, w)} not divisible by 2**depth = {step}")


def logits(params: ModelParams, batch: torch.Tensor, dropout_active: bool = False) -> torch.Tensor:
    """Raw pre-sigmoid outputs; uses the global torch RNG when dropout is on."""
    check_input(params.spec, batch)
    params.net.train(dropout_active)
    return params.net(batch)


def forward(params: ModelParams, batch, dropout_active: bool = False, draw=None) -> torch.Tensor:
    """Foreground probabilities for a batch, shape preserved.

    ``draw`` seeds the dropout masks (an int or a ``torch.Generator``'s
    initial seed); it is ignored when ``dropout_active`` is false.
    """
    batch = as_batch(batch).to(next(params.net.parameters()).dtype)
    with torch.no_grad():
        if not dropout_active:
            return torch.sigmoid(logits(params, batch, False))
        seed = draw.initial_seed() if isinstance(draw, torch.Generator) else int(draw or 0)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return torch.sigmoid(logits(params, batch, True))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path, extra=None):
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": params.spec.to_dict(),
        "seed": params.seed,
        "tensors": OrderedDict((k, v.clone()) for k, v in params.named_tensors().items()),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> ModelParams:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version!r}, expected {CHECKPOINT_FORMAT_VERSION}")
    spec = BackboneSpec.from_dict(payload["spec"])
    net = build_network(spec)
    net.load_state_dict(payload["tensors"])
    net.eval()
    return ModelParams(spec, payload["seed"], net)
