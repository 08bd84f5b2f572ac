"""Style and content encoders for audio, motion and speaker identity.

The audio side runs on log-mel frames.  ``log_mel`` is fixed signal
processing; everything after it is trainable.  Motion encoders consume the
graph features produced by ``mesh_graph.GATEncoder``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .errors import ConfigError, InputError

N_FFT = 400  # 25 ms at 16 kHz
HOP = 160  # 10 ms
LOG_FLOOR = 1e-8
IN_EPS = 1e-6  # small enough that normalised channels have variance 1 within 1e-4


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.samples.size == 0:
            raise InputError("empty audio clip")
        if not np.all(np.abs(self.samples) <= 1.0):
            raise InputError("audio samples must be finite and lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise InputError("sample_rate must be positive")

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class IdentityLabel:
    one_hot: np.ndarray
    index: int

    def __post_init__(self):
        self.one_hot = np.asarray(self.one_hot)
        validate_one_hot(self.one_hot[None], np.array([self.index]))

    @classmethod
    def from_index(cls, index: int, num_identities: int) -> "IdentityLabel":
        if not 0 <= index < num_identities:
            raise InputError(f"identity {index} outside [0, {num_identities})")
        v = np.zeros(num_identities, dtype=np.float32)
        v[index] = 1.0
        return cls(v, index)


def validate_one_hot(one_hot, index=None) -> None:
    oh = np.asarray(one_hot.detach().cpu() if isinstance(one_hot, torch.Tensor) else one_hot)
    if oh.ndim != 2:
        raise InputError("one-hot labels must be a (B, K) array")
    binary = np.all((oh == 0) | (oh == 1))
    if not binary or np.any((oh != 0).sum(axis=1) != 1):
        raise InputError("each identity label needs exactly one nonzero entry equal to 1")
    if index is not None:
        idx = np.asarray(index.detach().cpu() if isinstance(index, torch.Tensor) else index).reshape(-1)
        if np.any(oh.argmax(axis=1) != idx):
            raise InputError("identity index disagrees with its one-hot vector")


# -- fixed front end ---------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, sample_rate: int = 16000, n_fft: int = N_FFT) -> np.ndarray:
    """Triangular HTK-mel filters, ``(n_fft // 2 + 1, n_mels)``, unit peak."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs[None] - lo) / (mid - lo)
    fall = (hi - freqs[None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rise, fall)).T.copy()


def log_mel(samples: torch.Tensor, n_mels: int = 40, sample_rate: int = 16000) -> torch.Tensor:
    """``(..., L)`` waveform -> ``(..., F, n_mels)`` log10 mel power, F = 1 + (L - 400) // 160."""
    if samples.shape[-1] < N_FFT:
        raise InputError(f"clip of {samples.shape[-1]} samples is shorter than one {N_FFT}-sample window")
    frames = samples.unfold(-1, N_FFT, HOP)
    window = torch.hann_window(N_FFT, periodic=True, dtype=samples.dtype, device=samples.device)
    power = torch.fft.rfft(frames * window, dim=-1).abs() ** 2
    fb = torch.as_tensor(mel_filterbank(n_mels, sample_rate), dtype=samples.dtype, device=samples.device)
    return torch.log10(torch.clamp(power @ fb, min=LOG_FLOOR))


def sinusoidal_encoding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos table for integer ``positions``: ``(len, dim)``."""
    pos = positions.to(torch.float64).unsqueeze(-1)
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    pe = torch.zeros(*positions.shape, dim, dtype=torch.float64)
    pe[..., 0::2] = torch.sin(pos * freq)
    pe[..., 1::2] = torch.cos(pos * freq)[..., : dim // 2]
    return pe


def _positional(x: torch.Tensor) -> torch.Tensor:
    pe = sinusoidal_encoding(torch.arange(x.shape[-2]), x.shape[-1])
    return x + pe.to(dtype=x.dtype, device=x.device)


def transformer_encoder(cfg: ModelConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        cfg.d_model, cfg.n_heads, dim_feedforward=cfg.ff_mult * cfg.d_model,
        dropout=0.0, activation="gelu", batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, cfg.enc_layers, enable_nested_tensor=False)


class ConvFrontend(nn.Module):
    """Temporal conv stack over log-mel frames, ``(B, F, n_mels) -> (B, F, C)``.

    Replicate padding keeps constant inputs constant.  With ``instance_norm`` each
    conv output is normalised per channel over time.
    """

    def __init__(self, n_mels: int, channels: int, layers: int, kernel: int,
                 instance_norm: bool = False):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError("frontend kernel must be odd")
        dims = [n_mels] + [channels] * layers
        self.convs = nn.ModuleList(
            nn.Conv1d(a, b, kernel, padding=kernel // 2, padding_mode="replicate")
            for a, b in zip(dims[:-1], dims[1:]))
        self.instance_norm = instance_norm

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        x = mel.transpose(1, 2)
        for conv in self.convs:
            x = conv(x)
            if self.instance_norm:
                x = F.instance_norm(x, eps=IN_EPS)
            x = F.gelu(x)
        return x.transpose(1, 2)


def resample_frames(x: torch.Tensor, target_frames: int) -> torch.Tensor:
    """Linear interpolation along time, ``(B, F, C) -> (B, T, C)``; endpoints kept."""
    if target_frames < 1:
        raise InputError("target frame count must be >= 1")
    if x.shape[1] == target_frames:
        return x
    return F.interpolate(x.transpose(1, 2), size=target_frames, mode="linear",
                         align_corners=True).transpose(1, 2)


def audio_frontend(mel: torch.Tensor, target_frames: int, frontend: ConvFrontend) -> torch.Tensor:
    """Trainable part of the audio front end plus alignment to the motion frame rate."""
    return resample_frames(frontend(mel), target_frames)


def clip_frontend(clip: AudioClip, target_frames: int, frontend: ConvFrontend,
                  n_mels: int = 40) -> torch.Tensor:
    """Waveform convenience wrapper: ``AudioClip -> (T, C)``."""
    dtype = next(frontend.parameters()).dtype
    mel = log_mel(torch.as_tensor(clip.samples, dtype=dtype), n_mels, clip.sample_rate)
    return audio_frontend(mel[None], target_frames, frontend)[0]


# -- audio encoders ----------------------------------------------------------

class AudioContentEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.frontend = ConvFrontend(cfg.n_mels, cfg.frontend_channels, cfg.frontend_layers,
                                     cfg.frontend_kernel, instance_norm=True)
        self.proj_in = nn.Linear(cfg.frontend_channels, cfg.d_model)
        self.encoder = transformer_encoder(cfg)
        self.proj_out = nn.Linear(cfg.d_model, cfg.d_audio)

    def forward(self, mel: torch.Tensor, target_frames: int) -> torch.Tensor:
        x = audio_frontend(mel, target_frames, self.frontend)
        x = self.encoder(_positional(self.proj_in(x)))
        return self.proj_out(x)


class AudioStyleEncoder(nn.Module):
    """Speaker and affect branches, mean-pooled and projected to one style code."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        args = (cfg.n_mels, cfg.frontend_channels, cfg.frontend_layers, cfg.frontend_kernel)
        self.speaker = ConvFrontend(*args)
        self.affect = ConvFrontend(*args)
        self.proj = nn.Linear(2 * cfg.frontend_channels, cfg.d_style)

    def forward(self, mel: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(s_a, tokens)``: the pooled code and its per-frame tokens."""
        tokens = self.proj(torch.cat([self.speaker(mel), self.affect(mel)], dim=-1))
        return tokens.mean(dim=1), tokens


def encode_audio_content(mel: torch.Tensor, target_frames: int, encoder: AudioContentEncoder) -> torch.Tensor:
    return encoder(mel, target_frames)


def encode_audio_style(mel: torch.Tensor, encoder: AudioStyleEncoder) -> torch.Tensor:
    return encoder(mel)[0]


# -- motion encoders ---------------------------------------------------------

class MotionStyleEncoder(nn.Module):
    """Linear down-projection, valid temporal convolutions, transformer, mean pool.

    No positional encoding: a time-constant input yields the same code for any
    length.
    """

    def __init__(self, cfg: ModelConfig, vertex_count: int):
        super().__init__()
        self.down = nn.Linear(vertex_count * cfg.d_graph, cfg.d_model)
        self.tcn = nn.ModuleList(nn.Conv1d(cfg.d_model, cfg.d_model, cfg.tcn_kernel)
                                 for _ in range(cfg.tcn_layers))
        self.encoder = transformer_encoder(cfg)
        self.proj = nn.Linear(cfg.d_model, cfg.d_style)
        self.min_frames = cfg.min_frames

    def forward(self, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, t = g.shape[:2]
        if t < self.min_frames:
            raise InputError(f"motion style encoder needs >= {self.min_frames} frames, got {t}")
        x = self.down(g.reshape(b, t, -1)).transpose(1, 2)
        for conv in self.tcn:
            x = F.gelu(conv(x))
        tokens = self.proj(self.encoder(x.transpose(1, 2)))
        return tokens.mean(dim=1), tokens


class ConvIN(nn.Module):
    """Conv1d -> instance norm -> GELU, length preserving."""

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError("instance-normalised conv kernel must be odd")
        self.conv = nn.Conv1d(channels, channels, kernel, padding=kernel // 2, padding_mode="replicate")

    def normalized(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-activation output, ``(B, C, T)``."""
        return F.instance_norm(self.conv(x), eps=IN_EPS)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.gelu(self.normalized(x))


class MotionContentEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, vertex_count: int):
        super().__init__()
        self.down = nn.Linear(vertex_count * cfg.d_graph, cfg.d_model)
        self.blocks = nn.ModuleList(ConvIN(cfg.d_model, cfg.conv_in_kernel) for _ in range(cfg.conv_in_layers))
        self.hidden = nn.Linear(cfg.d_model, cfg.d_model)
        self.encoder = transformer_encoder(cfg)
        self.proj = nn.Linear(cfg.d_model, cfg.d_motion)

    def forward(self, g: torch.Tensor, return_norms: bool = False):
        b, t = g.shape[:2]
        if t < 2:
            raise InputError("motion content encoder needs at least 2 frames")
        x = self.down(g.reshape(b, t, -1)).transpose(1, 2)
        norms = []
        for block in self.blocks:
            z = block.normalized(x)
            norms.append(z)
            x = F.gelu(z)
        x = self.encoder(_positional(self.hidden(x.transpose(1, 2))))
        c = self.proj(x)
        return (c, norms) if return_norms else c


def encode_motion_style(g: torch.Tensor, encoder: MotionStyleEncoder) -> torch.Tensor:
    return encoder(g)[0]


def encode_motion_content(g: torch.Tensor, encoder: MotionContentEncoder) -> torch.Tensor:
    return encoder(g)


# -- identity ----------------------------------------------------------------

class IdentityStyleEncoder(nn.Module):
    """Personalised (linear on one-hot) and common (table lookup) embeddings,
    combined by single-head attention with a residual to the personalised one."""

    def __init__(self, num_identities: int, d_style: int):
        super().__init__()
        self.num_identities = num_identities
        self.personal = nn.Linear(num_identities, d_style, bias=False)
        self.common = nn.Embedding(num_identities, d_style)
        self.q = nn.Linear(d_style, d_style)
        self.k = nn.Linear(d_style, d_style)
        self.v = nn.Linear(d_style, d_style)
        self.out = nn.Linear(d_style, d_style)

    def forward(self, one_hot: torch.Tensor, index: torch.Tensor, check: bool = True) -> torch.Tensor:
        if one_hot.shape[-1] != self.num_identities:
            raise InputError(f"one-hot width {one_hot.shape[-1]} != {self.num_identities} identities")
        if check:
            validate_one_hot(one_hot, index)
        p = self.personal(one_hot)
        pair = torch.stack([p, self.common(index)], dim=1)  # (B, 2, D)
        q = self.q(p).unsqueeze(1)
        scores = q @ self.k(pair).transpose(1, 2) / math.sqrt(p.shape[-1])
        context = (torch.softmax(scores, dim=-1) @ self.v(pair)).squeeze(1)
        return p + self.out(context)


def encode_identity(one_hot: torch.Tensor, index: torch.Tensor, encoder: IdentityStyleEncoder) -> torch.Tensor:
    return encoder(one_hot, index)


def fuse_styles(s_a: torch.Tensor, s_m: torch.Tensor, s_p: torch.Tensor) -> torch.Tensor:
    if not (s_a.shape == s_m.shape == s_p.shape):
        raise ConfigError(f"style codes differ in shape: {tuple(s_a.shape)}, {tuple(s_m.shape)}, {tuple(s_p.shape)}")
    return s_a + s_m + s_p
