"""Multi-exit CRNN over raw waveforms.

The network is a learnable band-pass front end followed by three
convolutional stages. A classification exit hangs off every stage: the
frequency axis is averaged away, a bidirectional LSTM (one parameter set
shared by all exits) aggregates the frame sequence, and a per-exit
two-layer head emits 3-class frame logits. Stages either chain plainly or
use dense connections (channel concatenation of the front-end output and
all earlier stage outputs).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

CHECKPOINT_FORMAT_VERSION = 1

# Fixed pooling factorization of the front end: 2x2 on the frequency axis,
# 3x2 on the time axis. It pins frames = ceil(chunk/stride) / 6 and
# frequency bins = sinc_filters / 4.
_FREQ_POOL_TOTAL = 4
_TIME_POOL_TOTAL = 6


class ConfigError(ValueError):
    """A model configuration whose shape contract cannot be met."""


class CheckpointError(RuntimeError):
    """A checkpoint file that cannot be loaded as requested."""


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the multi-exit CRNN.

    Defaults reproduce the published 1.5 s / 16 kHz configuration that
    emits 50 frame decisions (30 ms each) per chunk.
    """

    sample_rate_hz: int = 16000
    chunk_samples: int = 24000
    sinc_filters: int = 128
    sinc_kernel: int = 251
    sinc_stride: int = 80
    extractor_conv_channels: tuple[int, int] = (32, 64)
    se_reduction: int = 4
    stage_channels: int = 64
    num_stages: int = 3
    dc_enabled: bool = False
    dc_widths: tuple[int, int, int] = (320, 80, 64)
    plain_widths: tuple[int, int] = (256, 64)
    lstm_hidden: int = 128
    lstm_layers: int = 2
    mlp_hidden: int = 128
    num_classes: int = 3
    num_exits: int = 3
    frames_per_chunk: int = 50
    batch_norm: bool = True

    def __post_init__(self) -> None:
        for name in (
            "sample_rate_hz", "chunk_samples", "sinc_filters", "sinc_kernel",
            "sinc_stride", "se_reduction", "stage_channels", "num_stages",
            "lstm_hidden", "lstm_layers", "mlp_hidden", "num_classes",
            "num_exits", "frames_per_chunk",
        ):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be strictly positive, got {getattr(self, name)}")
        for name in ("extractor_conv_channels", "dc_widths", "plain_widths"):
            if any(int(v) <= 0 for v in getattr(self, name)):
                raise ConfigError(f"{name} entries must be strictly positive, got {getattr(self, name)}")
        if len(self.extractor_conv_channels) != 2:
            raise ConfigError("extractor_conv_channels must hold exactly two channel counts")
        if len(self.plain_widths) != 2 or len(self.dc_widths) != 3:
            raise ConfigError("plain_widths must hold 2 widths and dc_widths 3")
        if self.num_exits != self.num_stages:
            raise ConfigError(
                f"num_exits ({self.num_exits}) must equal num_stages ({self.num_stages}): one exit per stage"
            )
        if self.sinc_kernel % 2 == 0:
            raise ConfigError(f"sinc_kernel must be odd, got {self.sinc_kernel}")
        if self.sinc_filters % _FREQ_POOL_TOTAL != 0:
            raise ConfigError(
                f"sinc_filters must be divisible by {_FREQ_POOL_TOTAL} "
                f"(frequency pooling), got {self.sinc_filters}"
            )
        steps = self.sinc_steps
        if steps % _TIME_POOL_TOTAL != 0:
            raise ConfigError(
                f"chunk_samples/sinc_stride must yield a multiple of {_TIME_POOL_TOTAL} "
                f"time steps (time pooling), got {steps} from chunk_samples={self.chunk_samples}"
            )
        if steps // _TIME_POOL_TOTAL != self.frames_per_chunk:
            raise ConfigError(
                f"frames_per_chunk ({self.frames_per_chunk}) inconsistent with "
                f"chunk_samples/sinc_stride: derived {steps // _TIME_POOL_TOTAL} frames"
            )

    @property
    def sinc_steps(self) -> int:
        """Front-end time steps: ceil(chunk_samples / sinc_stride)."""
        return -(-self.chunk_samples // self.sinc_stride)

    @property
    def freq_bins(self) -> int:
        return self.sinc_filters // _FREQ_POOL_TOTAL

    @property
    def frame_ms(self) -> float:
        return 1000.0 * self.chunk_samples / self.sample_rate_hz / self.frames_per_chunk

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        fields = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - fields
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        clean = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**clean)


@dataclass
class ExitOutputs:
    """Per-exit frame logits and latent features for one forward pass.

    logits[i] has shape (batch, frames, classes); features[i] has shape
    (batch, frames, mlp_hidden). Index 0 is the earliest exit, the last
    entry the final exit.
    """

    logits: list[Tensor]
    features: list[Tensor]

    @property
    def num_exits(self) -> int:
        return len(self.logits)


def _hz_to_mel(hz: Tensor) -> Tensor:
    return 2595.0 * torch.log10(1.0 + hz / 700.0)


def _mel_to_hz(mel: Tensor) -> Tensor:
    return 700.0 * (torch.pow(10.0, mel / 2595.0) - 1.0)


class SincConv(nn.Module):
    """Band-pass filterbank with learned cut-off frequencies.

    Each output channel is a windowed sinc band-pass filter parameterized
    by two scalars (low cut-off and bandwidth), initialized on the mel
    scale. Input is padded so the output length is ceil(T / stride).
    """

    def __init__(
        self,
        out_channels: int,
        kernel_size: int,
        stride: int,
        sample_rate: int,
        min_low_hz: float = 50.0,
        min_band_hz: float = 50.0,
    ) -> None:
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"sinc_kernel must be odd, got {kernel_size}")
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.sample_rate = sample_rate
        self.min_low_hz = min_low_hz
        self.min_band_hz = min_band_hz

        low_hz = 30.0
        high_hz = sample_rate / 2 - (min_low_hz + min_band_hz)
        mel = torch.linspace(
            _hz_to_mel(torch.tensor(low_hz)).item(),
            _hz_to_mel(torch.tensor(high_hz)).item(),
            out_channels + 1,
        )
        hz = _mel_to_hz(mel)
        self.low_hz_ = nn.Parameter(hz[:-1].view(-1, 1))
        self.band_hz_ = nn.Parameter((hz[1:] - hz[:-1]).view(-1, 1))

        half = (kernel_size - 1) // 2
        n = 2 * math.pi * torch.arange(-half, 0.0).view(1, -1) / sample_rate
        self.register_buffer("n_", n)
        window = 0.54 - 0.46 * torch.cos(
            2 * math.pi * torch.arange(half) / kernel_size
        )
        self.register_buffer("window_", window)

    def forward(self, x: Tensor) -> Tensor:
        # x: (B, 1, T) -> (B, out_channels, ceil(T / stride))
        low = self.min_low_hz + torch.abs(self.low_hz_)
        high = torch.clamp(
            low + self.min_band_hz + torch.abs(self.band_hz_),
            self.min_low_hz,
            self.sample_rate / 2,
        )
        band = (high - low)[:, 0]

        f_low = torch.matmul(low, self.n_)
        f_high = torch.matmul(high, self.n_)
        left = ((torch.sin(f_high) - torch.sin(f_low)) / (self.n_ / 2)) * self.window_
        center = 2 * band.view(-1, 1)
        filters = torch.cat([left, center, torch.flip(left, dims=[1])], dim=1)
        filters = filters / (2 * band[:, None])
        filters = filters.view(self.out_channels, 1, self.kernel_size)

        length = x.shape[-1]
        out_steps = -(-length // self.stride)
        pad_total = max(0, (out_steps - 1) * self.stride + self.kernel_size - length)
        x = F.pad(x, (pad_total // 2, pad_total - pad_total // 2))
        return F.conv1d(x, filters, stride=self.stride)


class SqueezeExcite(nn.Module):
    """Channel attention: global average squeeze, bottleneck excitation."""

    def __init__(self, channels: int, reduction: int) -> None:
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: Tensor) -> Tensor:
        s = x.mean(dim=(2, 3))
        g = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return x * g[:, :, None, None]


def _conv3x3(in_ch: int, out_ch: int, batch_norm: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)]
    if batch_norm:
        layers.append(nn.BatchNorm2d(out_ch))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def _conv1x1(in_ch: int, out_ch: int, batch_norm: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(in_ch, out_ch, kernel_size=1)]
    if batch_norm:
        layers.append(nn.BatchNorm2d(out_ch))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class WaveformExtractor(nn.Module):
    """Front end: sinc filterbank viewed as a single-channel 2D map, then
    two conv pairs with squeeze-excite gates, average-pooled down to
    (conv channels, freq_bins, frames)."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        a, b = cfg.extractor_conv_channels
        self.sinc = SincConv(
            cfg.sinc_filters, cfg.sinc_kernel, cfg.sinc_stride, cfg.sample_rate_hz
        )
        self.conv1 = _conv3x3(1, a, cfg.batch_norm)
        self.conv2 = _conv3x3(a, a, cfg.batch_norm)
        self.se1 = SqueezeExcite(a, cfg.se_reduction)
        self.pool1 = nn.AvgPool2d(kernel_size=(2, 3))
        self.conv3 = _conv3x3(a, b, cfg.batch_norm)
        self.conv4 = _conv3x3(b, b, cfg.batch_norm)
        self.se2 = SqueezeExcite(b, cfg.se_reduction)
        self.pool2 = nn.AvgPool2d(kernel_size=(2, 2))

    def forward(self, waveforms: Tensor) -> Tensor:
        # (B, T) -> (B, C, freq_bins, frames)
        x = self.sinc(waveforms.unsqueeze(1))  # (B, filters, steps)
        x = x.unsqueeze(1)                     # (B, 1, filters, steps)
        x = self.pool1(self.se1(self.conv2(self.conv1(x))))
        x = self.pool2(self.se2(self.conv4(self.conv3(x))))
        return x


class PlainStage(nn.Module):
    """Conv stage: 1x1 expansion then 3x3 projection back to the stage width."""

    def __init__(self, in_ch: int, cfg: ModelConfig) -> None:
        super().__init__()
        wide, out = cfg.plain_widths
        self.net = nn.Sequential(
            _conv1x1(in_ch, wide, cfg.batch_norm),
            _conv3x3(wide, out, cfg.batch_norm),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class DenseStage(nn.Module):
    """Conv stage for dense wiring: projects however many concatenated
    channels arrive down to the stage width."""

    def __init__(self, in_ch: int, cfg: ModelConfig) -> None:
        super().__init__()
        wide, mid, out = cfg.dc_widths
        self.net = nn.Sequential(
            _conv1x1(in_ch, wide, cfg.batch_norm),
            _conv3x3(wide, mid, cfg.batch_norm),
            _conv1x1(mid, out, cfg.batch_norm),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class SharedRecurrent(nn.Module):
    """Frequency-averaged Bi-LSTM aggregator shared by every exit."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.lstm = nn.LSTM(
            input_size=cfg.stage_channels,
            hidden_size=cfg.lstm_hidden,
            num_layers=cfg.lstm_layers,
            batch_first=True,
            bidirectional=True,
        )

    def forward(self, x: Tensor) -> Tensor:
        # (B, C, F, T) -> (B, T, 2 * hidden)
        x = x.mean(dim=2)        # collapse the frequency axis
        x = x.permute(0, 2, 1)   # (B, T, C)
        out, _ = self.lstm(x)
        return out


class ExitHead(nn.Module):
    """Two-layer exit head: dimension reduction then classification."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.reduce = nn.Linear(2 * cfg.lstm_hidden, cfg.mlp_hidden)
        self.classify = nn.Linear(cfg.mlp_hidden, cfg.num_classes)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        features = F.relu(self.reduce(x))
        logits = self.classify(features)
        return logits, features


class MultiExitCRNN(nn.Module):
    """The full network: extractor -> stage 1 -> exit 1 -> ... -> final exit.

    Parameters are immutable during forward evaluation; a frozen (eval
    mode) model may be evaluated concurrently from several threads.
    Training updates must come from a single context.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.extractor = WaveformExtractor(config)
        stages: list[nn.Module] = []
        for k in range(config.num_stages):
            if config.dc_enabled:
                in_ch = config.stage_channels * (k + 1)
                stages.append(DenseStage(in_ch, config))
            else:
                stages.append(PlainStage(config.stage_channels, config))
        self.stages = nn.ModuleList(stages)
        self.recurrent = SharedRecurrent(config)
        self.heads = nn.ModuleList(ExitHead(config) for _ in range(config.num_exits))

    def forward(self, waveforms: Tensor) -> ExitOutputs:
        cfg = self.config
        if waveforms.dim() != 2 or waveforms.shape[1] != cfg.chunk_samples:
            raise ValueError(
                f"shape error: expected waveforms of shape (batch, {cfg.chunk_samples}), "
                f"got {tuple(waveforms.shape)}"
            )
        if not torch.isfinite(waveforms).all():
            raise ValueError("input error: waveforms contain non-finite values")

        base = self.extractor(waveforms)
        logits: list[Tensor] = []
        features: list[Tensor] = []
        collected = [base]
        x = base
        for stage, head in zip(self.stages, self.heads):
            if cfg.dc_enabled:
                x = stage(torch.cat(collected, dim=1))
                collected.append(x)
            else:
                x = stage(x)
            agg = self.recurrent(x)
            z, f = head(agg)
            logits.append(z)
            features.append(f)
        return ExitOutputs(logits=logits, features=features)


def build_model(config: ModelConfig, seed: int = 0) -> MultiExitCRNN:
    """Construct a model with deterministic initialization for a seed.

    The surrounding RNG state is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MultiExitCRNN(config)
    return model


def count_parameters(model: MultiExitCRNN) -> dict[str, int]:
    """Trainable parameter counts grouped by module family."""

    def total(module: nn.Module) -> int:
        return sum(p.numel() for p in module.parameters() if p.requires_grad)

    counts = {
        "extractor": total(model.extractor),
        "conv_stages": total(model.stages),
        "recurrent": total(model.recurrent),
        "heads": total(model.heads),
    }
    counts["total"] = sum(counts.values())
    return counts


def save_checkpoint(
    model: MultiExitCRNN,
    path,
    training_state: Optional[dict] = None,
) -> None:
    """Serialize config + parameters (and optional optimizer state) to one file."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "training_state": training_state,
    }
    torch.save(payload, path)


def load_checkpoint(
    path,
    expected_config: Optional[ModelConfig] = None,
) -> tuple[MultiExitCRNN, Optional[dict]]:
    """Rebuild a model from a checkpoint file.

    Raises CheckpointError on version mismatch, corrupt content, or (when
    expected_config is given, e.g. on training resume) a config mismatch.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unpickling error types
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"corrupt checkpoint {path}: missing header")
    version = payload["format_version"]
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {version} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    try:
        config = ModelConfig.from_dict(payload["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: bad config ({exc})") from exc
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            "checkpoint config does not match the requested configuration"
        )
    model = MultiExitCRNN(config)
    try:
        model.load_state_dict(payload["state_dict"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: bad parameters ({exc})") from exc
    # Frozen by default: safe for concurrent evaluation; training code
    # switches modes itself.
    model.eval()
    return model, payload.get("training_state")
