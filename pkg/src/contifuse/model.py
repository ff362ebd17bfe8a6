"""Conti-Fuse network: shared encoders, continuous decomposition modules, decoders."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange


class ConfigError(ValueError):
    """Invalid model or training configuration."""


class CheckpointError(RuntimeError):
    """Checkpoint archive does not match the configuration it declares."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 3
    num_states: int = 7
    base_width: int = 8
    channel_schedule: tuple[int, ...] | None = None
    heads: int = 4
    gdfn_expansion: float = 2.0

    def __post_init__(self):
        errors = []
        for name in ("num_layers", "num_states", "base_width", "heads"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                errors.append(f"{name} must be a positive integer, got {value!r}")
        if self.gdfn_expansion <= 0:
            errors.append(f"gdfn_expansion must be positive, got {self.gdfn_expansion!r}")
        if errors:
            raise ConfigError("; ".join(errors))

        schedule = self.channel_schedule
        if schedule is None:
            schedule = tuple(self.base_width * 2**l for l in range(self.num_layers + 1))
        schedule = tuple(int(c) for c in schedule)
        object.__setattr__(self, "channel_schedule", schedule)

        if len(schedule) != self.num_layers + 1:
            errors.append(
                f"channel_schedule needs {self.num_layers + 1} entries, got {len(schedule)}"
            )
        elif schedule[0] != self.base_width:
            errors.append("channel_schedule[0] must equal base_width")
        if any(c < 1 for c in schedule):
            errors.append("channel_schedule entries must be positive")
        # Heads split C*H*W; requiring h | C keeps it valid for every padded size.
        for l, c in enumerate(schedule[1:], start=1):
            if c % self.heads:
                errors.append(f"channel_schedule[{l}]={c} is not divisible by heads={self.heads}")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def stride(self) -> int:
        return 2**self.num_layers

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["channel_schedule"] = list(self.channel_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        if d.get("channel_schedule") is not None:
            d["channel_schedule"] = tuple(d["channel_schedule"])
        return cls(**d)


# ---------------------------------------------------------------------------
# padding


class CropRecord(NamedTuple):
    height: int
    width: int


def reflect_indices(n: int, target: int) -> np.ndarray:
    """Indices extending an axis of length ``n`` to ``target`` by mirror reflection.

    The edge sample is not repeated; reflection wraps as often as needed, and a
    length-1 axis simply repeats its only sample.
    """
    if n < 1:
        raise ValueError("cannot pad an empty axis")
    idx = np.arange(target)
    if n == 1:
        return np.zeros(target, dtype=np.int64)
    period = 2 * (n - 1)
    idx = idx % period
    return np.where(idx >= n, period - idx, idx).astype(np.int64)


def _padded_size(n: int, stride: int) -> int:
    return -(-n // stride) * stride


def pad_to_stride(image: np.ndarray, num_layers: int) -> tuple[np.ndarray, CropRecord]:
    """Reflect-pad the bottom/right of a 2-D image up to multiples of ``2**num_layers``."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    h, w = image.shape
    if h == 0 or w == 0:
        raise ValueError("empty image")
    stride = 2**num_layers
    rows = reflect_indices(h, _padded_size(h, stride))
    cols = reflect_indices(w, _padded_size(w, stride))
    return image[np.ix_(rows, cols)], CropRecord(h, w)


def crop(image, record: CropRecord):
    return image[..., : record.height, : record.width]


def _pad_tensor(x: torch.Tensor, stride: int) -> tuple[torch.Tensor, CropRecord]:
    h, w = x.shape[-2:]
    record = CropRecord(h, w)
    ph, pw = _padded_size(h, stride), _padded_size(w, stride)
    if (ph, pw) != (h, w):
        rows = torch.from_numpy(reflect_indices(h, ph)).to(x.device)
        cols = torch.from_numpy(reflect_indices(w, pw)).to(x.device)
        x = x.index_select(-2, rows).index_select(-1, cols)
    return x, record


# ---------------------------------------------------------------------------
# blocks


def conv3x3(cin: int, cout: int, groups: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1, groups=groups)


def conv1x1(cin: int, cout: int, groups: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 1, groups=groups)


class EncoderBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = conv3x3(cin, cout)
        self.conv2 = conv3x3(cout, cout)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return F.avg_pool2d(x, 2)


class PreliminaryStates(nn.Module):
    """Linear map of [V; I] to K*C channels, refined by two K-group 3x3 convs."""

    def __init__(self, channels: int, num_states: int):
        super().__init__()
        self.num_states = num_states
        width = channels * num_states
        self.linear = conv1x1(2 * channels, width)
        self.gconv1 = conv3x3(width, width, groups=num_states)
        self.gconv2 = conv3x3(width, width, groups=num_states)

    def forward(self, v, i):
        if v.shape != i.shape:
            raise ValueError(f"visible/infrared feature shapes differ: {v.shape} vs {i.shape}")
        x = self.linear(torch.cat([v, i], dim=1))
        x = F.relu(self.gconv1(x))
        x = F.relu(self.gconv2(x))
        return rearrange(x, "b (k c) h w -> b k c h w", k=self.num_states)


class StateAttention(nn.Module):
    """Multi-head self-attention whose tokens are the transition states."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = conv3x3(channels, channels)
        self.to_k = conv3x3(channels, channels)
        self.to_v = conv3x3(channels, channels)
        self.proj = conv1x1(channels, channels)

    def forward(self, s):
        b, k, c, h, w = s.shape
        flat = s.reshape(b * k, c, h, w)

        def heads(t):
            t = rearrange(t, "(b k) c h w -> b k (c h w)", b=b)
            return rearrange(t, "b k (n e) -> b n k e", n=self.heads)

        q, key, v = heads(self.to_q(flat)), heads(self.to_k(flat)), heads(self.to_v(flat))
        scale = 1.0 / math.sqrt(q.shape[-1])
        attn = torch.softmax(q @ key.transpose(-2, -1) * scale, dim=-1)
        out = attn @ v
        out = rearrange(out, "b n k e -> (b k) (n e)").reshape(b * k, c, h, w)
        out = self.proj(out).reshape(b, k, c, h, w)
        return out + s, attn


class ChannelLayerNorm(nn.Module):
    """Layer norm over the channel axis of an NCHW tensor, per pixel."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = x.var(1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class GDFN(nn.Module):
    """Gated depth-wise conv feed-forward network with its own residual."""

    def __init__(self, channels: int, expansion: float = 2.0):
        super().__init__()
        hidden = max(1, int(channels * expansion))
        self.norm = ChannelLayerNorm(channels)
        self.project_in = conv1x1(channels, 2 * hidden)
        self.dwconv = conv3x3(2 * hidden, 2 * hidden, groups=2 * hidden)
        self.project_out = conv1x1(hidden, channels)

    def branch(self, x):
        x = self.dwconv(self.project_in(self.norm(x)))
        x1, x2 = x.chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)

    def forward(self, u):
        # state axis folds into the batch
        b, k, c, h, w = u.shape
        flat = u.reshape(b * k, c, h, w)
        return (self.branch(flat) + flat).reshape(b, k, c, h, w)


class StateTransformer(nn.Module):
    def __init__(self, channels: int, heads: int, expansion: float):
        super().__init__()
        self.attention = StateAttention(channels, heads)
        self.ffn = GDFN(channels, expansion)

    def forward(self, s):
        u, attn = self.attention(s)
        return self.ffn(u), attn


@dataclass
class StateStack:
    """The K+2 states of one layer: visible, K transitions, infrared.

    ``visible`` and ``infrared`` are the encoder outputs themselves; index 0
    and K+1 return those objects unchanged.
    """

    visible: torch.Tensor  # B x C x H x W
    transitions: torch.Tensor  # B x K x C x H x W
    infrared: torch.Tensor  # B x C x H x W
    layer: int = 0

    @property
    def num_states(self) -> int:
        return self.transitions.shape[1]

    def __len__(self) -> int:
        return self.num_states + 2

    def __getitem__(self, i: int) -> torch.Tensor:
        n = len(self)
        if i < 0:
            i += n
        if i == 0:
            return self.visible
        if i == n - 1:
            return self.infrared
        if 0 < i < n - 1:
            return self.transitions[:, i - 1]
        raise IndexError(f"state index {i} out of range for {n} states")

    @property
    def states(self) -> list[torch.Tensor]:
        return [self[i] for i in range(len(self))]

    def as_tensor(self) -> torch.Tensor:
        """B x (K+2) x C x H x W copy of the stack."""
        return torch.cat(
            [self.visible[:, None], self.transitions, self.infrared[:, None]], dim=1
        )


class ContinuousDecomposition(nn.Module):
    def __init__(self, channels: int, num_states: int, heads: int, expansion: float):
        super().__init__()
        self.prelim = PreliminaryStates(channels, num_states)
        self.transformer = StateTransformer(channels, heads, expansion)

    def forward(self, v, i, layer: int = 0):
        t, attn = self.transformer(self.prelim(v, i))
        return StateStack(v, t, i, layer), attn


class DecoderBlock(nn.Module):
    def __init__(self, channels: int, num_states: int, out_channels: int):
        super().__init__()
        self.fuse = conv3x3((num_states + 2) * channels, channels)
        self.conv1 = conv3x3(2 * channels, out_channels)
        self.conv2 = conv3x3(out_channels, out_channels)

    def forward(self, f_in, z: StateStack):
        stacked = z.as_tensor()
        elementary = self.fuse(stacked.flatten(1, 2))
        if f_in.shape[-2:] != elementary.shape[-2:]:
            raise ValueError(
                f"decoder scale mismatch: f_in {tuple(f_in.shape[-2:])} vs "
                f"states {tuple(elementary.shape[-2:])}"
            )
        x = torch.cat([elementary, f_in], dim=1)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.relu(self.conv1(x))
        return F.relu(self.conv2(x))


# convs whose output passes through a ReLU
_RELU_FOLLOWED = {"conv1", "conv2", "gconv1", "gconv2"}


@dataclass
class FusionOutput:
    fused: torch.Tensor  # B x 1 x H x W, cropped to the input size
    stacks: list[StateStack]
    attention: list[torch.Tensor] = field(default_factory=list)  # per layer, B x h x K x K


class ContiFuse(nn.Module):
    def __init__(self, config: ModelConfig | None = None, seed: int | None = 0):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        ch = cfg.channel_schedule
        self.input_proj = conv1x1(1, cfg.base_width)
        self.encoders = nn.ModuleList(
            EncoderBlock(ch[l - 1], ch[l]) for l in range(1, cfg.num_layers + 1)
        )
        self.cdms = nn.ModuleList(
            ContinuousDecomposition(ch[l], cfg.num_states, cfg.heads, cfg.gdfn_expansion)
            for l in range(1, cfg.num_layers + 1)
        )
        self.decoders = nn.ModuleList(
            DecoderBlock(ch[l], cfg.num_states, ch[l - 1]) for l in range(1, cfg.num_layers + 1)
        )
        self.output_proj = conv1x1(cfg.base_width, 1)
        if seed is not None:
            self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("norm.weight"):
                    p.fill_(1.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    gain = "relu" if name.rsplit(".", 2)[-2] in _RELU_FOLLOWED else "linear"
                    nn.init.kaiming_normal_(p, mode="fan_in", nonlinearity=gain, generator=gen)

    def encode(self, ir, vis):
        """Shared-weight encoding; returns per-layer lists of (V, I)."""
        b = ir.shape[0]
        x = self.input_proj(torch.cat([vis, ir], dim=0))
        feats = []
        for enc in self.encoders:
            x = enc(x)
            feats.append((x[:b], x[b:]))
        return feats

    def forward(self, ir: torch.Tensor, vis: torch.Tensor) -> FusionOutput:
        if ir.shape != vis.shape:
            raise ValueError(f"infrared/visible shapes differ: {tuple(ir.shape)} vs {tuple(vis.shape)}")
        if ir.dim() != 4 or ir.shape[1] != 1:
            raise ValueError(f"expected B x 1 x H x W input, got {tuple(ir.shape)}")
        ir, record = _pad_tensor(ir, self.config.stride)
        vis, _ = _pad_tensor(vis, self.config.stride)

        feats = self.encode(ir, vis)
        stacks, attention = [], []
        for l, ((v, i), cdm) in enumerate(zip(feats, self.cdms), start=1):
            z, attn = cdm(v, i, layer=l)
            stacks.append(z)
            attention.append(attn)

        v_n, i_n = feats[-1]
        f = i_n + v_n
        for l in range(self.config.num_layers, 0, -1):
            f = self.decoders[l - 1](f, stacks[l - 1])
        fused = crop(self.output_proj(f), record)
        if not self.training:
            fused = fused.clamp(0.0, 1.0)
        return FusionOutput(fused, stacks, attention)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "contifuse-checkpoint/1"


def save_checkpoint(path, model: ContiFuse, extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": json.dumps(model.config.to_dict(), sort_keys=True),
        "weights": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict[str, Any]:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None
    except Exception as exc:  # torch raises several unrelated types for corrupt files
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    return payload


def load_checkpoint(path, dtype: torch.dtype | None = None) -> tuple[ContiFuse, dict[str, Any]]:
    payload = read_checkpoint(path)
    config = ModelConfig.from_dict(json.loads(payload["config"]))
    model = ContiFuse(config, seed=None)
    expected = model.state_dict()
    weights = payload["weights"]
    problems = [f"missing {k}" for k in expected if k not in weights]
    problems += [f"unexpected {k}" for k in weights if k not in expected]
    problems += [
        f"{k}: shape {tuple(weights[k].shape)} != {tuple(v.shape)}"
        for k, v in expected.items()
        if k in weights and weights[k].shape != v.shape
    ]
    if problems:
        raise CheckpointError(f"{path}: " + "; ".join(problems))
    if dtype is not None:
        model.to(dtype)
    model.load_state_dict({k: w.to(expected[k].dtype if dtype is None else dtype) for k, w in weights.items()})
    return model, payload.get("extra", {})


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def fuse_array(model: ContiFuse, ir: np.ndarray, vis: np.ndarray) -> np.ndarray:
    """Fuse two 2-D [0,1] arrays with ``model`` in inference mode."""
    dtype = next(model.parameters()).dtype
    to = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)[None, None]
    model.eval()
    with torch.no_grad():
        out = model(to(ir), to(vis))
    return out.fused[0, 0].cpu().numpy()


def state_images(stack: StateStack, sample: int = 0) -> list[np.ndarray]:
    """Channel-mean of each state, min-max scaled to 0..255 per state."""
    images = []
    for state in stack.states:
        m = state[sample].detach().mean(0).cpu().double().numpy()
        lo, hi = m.min(), m.max()
        scaled = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
        images.append(np.round(scaled * 255).astype(np.uint8))
    return images
