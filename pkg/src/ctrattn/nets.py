"""Network building blocks shared by the autoencoder, CTR, TIOA and the agents."""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "ctrattn-ckpt/1"
SLOPE = 0.01


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Arch:
    """Layer sizes. Defaults follow the full-scale layout; see :meth:`toy`."""

    in_channels: int = 4
    frame_size: int = 84
    feature_channels: int = 32
    antialias: bool = True
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    pointwise: tuple[int, ...] = (32, 16)
    decoder_channels: tuple[int, ...] = (16, 16)
    ap_channels: tuple[int, ...] = (64, 64)
    ap_hidden: int = 512
    q_channels: tuple[int, ...] = (64, 64)
    q_hidden: int = 512
    q_stride: int = 1
    n_actions: int = 3
    lambda_offset: bool = True
    context_channels: int | None = None  # width of the dilated stack; None keeps feature_channels

    @property
    def feature_size(self) -> int:
        return self.frame_size // 4

    @classmethod
    def toy(cls, **overrides) -> "Arch":
        """Narrow predictor/Q heads that keep toy training within CPU budgets."""
        kw = dict(
            context_channels=16, ap_channels=(16, 16), ap_hidden=128, q_channels=(16, 16), q_hidden=128, q_stride=2
        )
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)


def binomial_kernel() -> torch.Tensor:
    k1 = torch.tensor([1.0, 2.0, 1.0])
    k = torch.outer(k1, k1)
    return k / k.sum()


class BlurPool2d(nn.Module):
    """Anti-aliased stride-2 downsampling with a fixed binomial filter."""

    def __init__(self, channels: int, stride: int = 2):
        super().__init__()
        self.channels = channels
        self.stride = stride
        self.register_buffer("kernel", binomial_kernel()[None, None].repeat(channels, 1, 1, 1))

    def forward(self, x):
        return F.conv2d(x, self.kernel.to(x.dtype), stride=self.stride, padding=1, groups=self.channels)


class Subsample2d(nn.Module):
    """Plain stride-2 decimation (the aliasing ablation of :class:`BlurPool2d`)."""

    def forward(self, x):
        return x[..., ::2, ::2]


class Encoder(nn.Module):
    """conv -> down -> conv -> down -> conv, each conv 3x3 with leaky ReLU."""

    def __init__(self, in_channels: int = 4, channels: int = 32, antialias: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv3 = nn.Conv2d(channels, channels, 3, padding=1)
        down = (lambda: BlurPool2d(channels)) if antialias else Subsample2d
        self.down1 = down()
        self.down2 = down()

    def forward(self, x):
        x = self.down1(F.leaky_relu(self.conv1(x), SLOPE))
        x = self.down2(F.leaky_relu(self.conv2(x), SLOPE))
        return F.leaky_relu(self.conv3(x), SLOPE)


class Decoder(nn.Module):
    """Mirror of the encoder with nearest-neighbour upsampling."""

    def __init__(self, channels: int = 32, widths: tuple[int, ...] = (16, 16), out_channels: int = 4):
        super().__init__()
        self.up1 = nn.Conv2d(channels, widths[0], 3, padding=1)
        self.up2 = nn.Conv2d(widths[0], widths[1], 3, padding=1)
        self.out = nn.Conv2d(widths[1], out_channels, 3, padding=1)

    def forward(self, f):
        x = F.leaky_relu(self.up1(F.interpolate(f, scale_factor=2, mode="nearest")), SLOPE)
        x = F.leaky_relu(self.up2(F.interpolate(x, scale_factor=2, mode="nearest")), SLOPE)
        return self.out(x)


def coordinate_planes(h: int, w: int, like: torch.Tensor) -> torch.Tensor:
    ys = torch.linspace(-1.0, 1.0, h, dtype=like.dtype, device=like.device)
    xs = torch.linspace(-1.0, 1.0, w, dtype=like.dtype, device=like.device)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx, yy])


class ContextHead(nn.Module):
    """Dilated context stack, pooled/coordinate/lambda planes, pointwise head.

    Returns one logit plane (B, 1, H, W).
    """

    def __init__(
        self,
        channels: int = 32,
        dilations: tuple[int, ...] = (1, 2, 4, 8),
        pointwise: tuple[int, ...] = (32, 16),
        use_lambda: bool = True,
        width: int | None = None,
    ):
        super().__init__()
        if list(dilations) != sorted(set(dilations)):
            raise ValueError("dilation rates must be strictly increasing")
        self.use_lambda = use_lambda
        width = width or channels
        ins = [channels] + [width] * (len(dilations) - 1)
        self.dilated = nn.ModuleList(nn.Conv2d(i, width, 3, padding=d, dilation=d) for i, d in zip(ins, dilations))
        widths = [3 * width + 2 + int(use_lambda), *pointwise, 1]
        self.pointwise = nn.ModuleList(nn.Conv2d(a, b, 1) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, f, lam=None):
        x = f
        for conv in self.dilated:
            x = F.leaky_relu(conv(x), SLOPE)
        b, c, h, w = x.shape
        planes = [
            x,
            x.amax(dim=(2, 3), keepdim=True).expand(b, c, h, w),
            x.mean(dim=(2, 3), keepdim=True).expand(b, c, h, w),
            coordinate_planes(h, w, x).expand(b, 2, h, w),
        ]
        if self.use_lambda:
            lam = torch.as_tensor(lam, dtype=x.dtype, device=x.device).reshape(-1, 1, 1, 1)
            planes.append(lam.expand(b, 1, h, w))
        x = torch.cat(planes, dim=1)
        for i, conv in enumerate(self.pointwise):
            x = conv(x)
            if i < len(self.pointwise) - 1:
                x = F.leaky_relu(x, SLOPE)
        return x


LAMBDA_CLIP = 1e-4


def check_lambda(lam) -> None:
    arr = np.asarray(lam.detach().cpu() if torch.is_tensor(lam) else lam, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"sparsity input lambda must lie in [0, 1], got {arr}")


class CTRNet(nn.Module):
    """State + lambda -> attention map in [0, 1], shape (B, 1, 21, 21)."""

    def __init__(self, arch: Arch = Arch()):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch.in_channels, arch.feature_channels, arch.antialias)
        self.head = ContextHead(arch.feature_channels, arch.dilations, arch.pointwise, True, arch.context_channels)

    def attend(self, features, lam):
        check_lambda(lam)
        logits = self.head(features, lam)
        if self.arch.lambda_offset:
            # shift by logit(lambda) so an untrained head already sits at the requested mean
            lam = torch.as_tensor(lam, dtype=logits.dtype, device=logits.device).reshape(-1, 1, 1, 1)
            lam = lam.clamp(LAMBDA_CLIP, 1.0 - LAMBDA_CLIP)
            logits = logits + torch.log(lam) - torch.log1p(-lam)
        return torch.sigmoid(logits)

    def forward(self, states, lam):
        return self.attend(self.encoder(states), lam)


class TIOANet(nn.Module):
    """State -> probability map over the 21x21 feature cells."""

    def __init__(self, arch: Arch = Arch()):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch.in_channels, arch.feature_channels, arch.antialias)
        self.head = ContextHead(arch.feature_channels, arch.dilations, arch.pointwise, False, arch.context_channels)

    def log_probs_from_features(self, features):
        logits = self.head(features)
        b, _, h, w = logits.shape
        return F.log_softmax(logits.reshape(b, h * w), dim=1).reshape(b, h, w)

    def predict_from_features(self, features):
        return self.log_probs_from_features(features).exp()

    def forward(self, states):
        return self.predict_from_features(self.encoder(states))


class ConvTrunk(nn.Module):
    def __init__(self, in_channels: int, channels: tuple[int, ...], hidden: int, spatial: int, stride: int = 1):
        super().__init__()
        layers, c, s = [], in_channels, spatial
        for i, out in enumerate(channels):
            st = stride if i == 0 else 1
            layers.append(nn.Conv2d(c, out, 3, padding=1, stride=st))
            c, s = out, (s - 1) // st + 1
        self.convs = nn.ModuleList(layers)
        self.fc = nn.Linear(c * s * s, hidden)

    def forward(self, f):
        x = f
        for conv in self.convs:
            x = F.leaky_relu(conv(x), SLOPE)
        return F.leaky_relu(self.fc(x.flatten(1)), SLOPE)


class ActionPredictor(nn.Module):
    """Feature tensor -> action logits."""

    def __init__(self, arch: Arch = Arch()):
        super().__init__()
        self.trunk = ConvTrunk(arch.feature_channels, arch.ap_channels, arch.ap_hidden, arch.feature_size)
        self.out = nn.Linear(arch.ap_hidden, arch.n_actions)

    def forward(self, f):
        return self.out(self.trunk(f))

    def probs(self, f):
        return torch.softmax(self.forward(f), dim=1)


def dueling_combine(value, advantage):
    return value + advantage - advantage.mean(dim=1, keepdim=True)


class DuelingQNet(nn.Module):
    def __init__(self, arch: Arch = Arch()):
        super().__init__()
        self.trunk = ConvTrunk(arch.feature_channels, arch.q_channels, arch.q_hidden, arch.feature_size, arch.q_stride)
        self.value = nn.Linear(arch.q_hidden, 1)
        self.advantage = nn.Linear(arch.q_hidden, arch.n_actions)

    def forward(self, f):
        h = self.trunk(f)
        return dueling_combine(self.value(h), self.advantage(h))


class Autoencoder(nn.Module):
    def __init__(self, arch: Arch = Arch()):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch.in_channels, arch.feature_channels, arch.antialias)
        self.decoder = Decoder(arch.feature_channels, arch.decoder_channels, arch.in_channels)

    def forward(self, states):
        return self.decoder(self.encoder(states))


def check_finite(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericError(f"non-finite parameter {name}")


def encode(states, encoder: Encoder, batch_size: int = 256) -> torch.Tensor:
    """Features for a batch of states (array or tensor), no gradient."""
    check_finite(encoder)
    x = torch.as_tensor(np.asarray(states) if not torch.is_tensor(states) else states, dtype=torch.float32)
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(encoder(x[i : i + batch_size]))
    return torch.cat(out) if out else torch.zeros(0)


def param_checksum(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, modules: dict[str, nn.Module], meta: dict | None = None) -> Path:
    """Single-file ``.npz``: named arrays ``<module>/<tensor>`` plus a JSON manifest."""
    arrays, shapes = {}, {}
    for mname, mod in modules.items():
        for k, v in mod.state_dict().items():
            key = f"{mname}/{k}"
            arrays[key] = v.detach().cpu().numpy()
            shapes[key] = list(v.shape)
    manifest = {"format": CHECKPOINT_FORMAT, "shapes": shapes, "meta": meta or {}}
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, dict[str, torch.Tensor]], dict]:
    with np.load(Path(path)) as z:
        manifest = json.loads(z["__manifest__"].tobytes().decode())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
        states: dict[str, dict[str, torch.Tensor]] = {}
        for key, shape in manifest["shapes"].items():
            mname, tname = key.split("/", 1)
            arr = z[key]
            if list(arr.shape) != shape:
                raise ValueError(f"shape mismatch for {key}")
            states.setdefault(mname, {})[tname] = torch.from_numpy(arr.copy())
    return states, manifest["meta"]
