"""Autoregressive motion decoder.

Predictions are per-frame vertex displacements added to a neutral template.
The self-attention history for frame ``i`` is the template (as a zero
displacement) followed by frames ``0 .. i-1``; cross-attention reads audio
content and motion content as one memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .encoders import sinusoidal_encoding
from .errors import ConfigError, SequenceLengthError


def periodic_positional_encoding(t, period: int, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of ``t mod period``; accepts an int or an integer tensor."""
    if period < 1:
        raise ConfigError("period must be positive")
    t = torch.as_tensor(t, dtype=torch.int64)
    return sinusoidal_encoding(torch.remainder(t, period), dim)


def biased_causal_mask(t_q: int, t_k: int, period: int, slope: float = 1.0) -> torch.Tensor:
    """``-inf`` above the diagonal, ``-slope * floor((i - j) / period)`` elsewhere."""
    i = torch.arange(t_q, dtype=torch.float64)[:, None]
    j = torch.arange(t_k, dtype=torch.float64)[None, :]
    bias = -slope * torch.floor((i - j) / period)
    return bias.masked_fill(j > i, -math.inf)


def alignment_bias(t_q: int, t_k: int, slope: float = 1.0) -> torch.Tensor:
    """``-slope * |j - floor(i * t_k / t_q)|``: zero at the proportionally aligned key."""
    i = torch.arange(t_q, dtype=torch.int64)[:, None]
    j = torch.arange(t_k, dtype=torch.int64)[None, :]
    aligned = torch.div(i * t_k, t_q, rounding_mode="floor")
    return -slope * (j - aligned).abs().to(torch.float64)


def alibi_slopes(n_heads: int) -> list[float]:
    def pow2(n):
        start = 2.0 ** (-8.0 / n)
        return [start ** (h + 1) for h in range(n)]

    if math.log2(n_heads).is_integer():
        return pow2(n_heads)
    closest = 2 ** math.floor(math.log2(n_heads))
    return pow2(closest) + pow2(2 * closest)[0::2][: n_heads - closest]


@dataclass
class DecoderState:
    """Rollout state; ``frames`` holds absolute vertex positions ``(B, t, N_v, 3)``."""

    frames: torch.Tensor
    template: torch.Tensor  # (B, N_v, 3)

    @classmethod
    def start(cls, template: torch.Tensor) -> "DecoderState":
        b, n, _ = template.shape
        return cls(template.new_zeros(b, 0, n, 3), template)

    @property
    def step(self) -> int:
        return self.frames.shape[1]

    def append(self, frame: torch.Tensor) -> None:
        self.frames = torch.cat([self.frames, frame.unsqueeze(1)], dim=1)


class MotionDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, vertex_count: int):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.vertex_count = vertex_count
        self.motion_in = nn.Linear(3 * vertex_count, d)
        self.style_in = nn.Linear(cfg.d_style, d)
        self.audio_in = nn.Linear(cfg.d_audio, d)
        self.content_in = nn.Linear(cfg.d_motion, d)
        self.source_type = nn.Parameter(torch.zeros(2, d))
        layer = nn.TransformerDecoderLayer(d, cfg.n_heads, dim_feedforward=cfg.ff_mult * d,
                                           dropout=0.0, activation="gelu", batch_first=True,
                                           norm_first=True)
        self.layers = nn.TransformerDecoder(layer, cfg.dec_layers)
        self.out = nn.Linear(d, 3 * vertex_count)
        nn.init.normal_(self.source_type, std=0.02)
        self.register_buffer("head_slopes", torch.tensor(alibi_slopes(cfg.n_heads)), persistent=False)

    def _self_mask(self, length: int, batch: int, dtype) -> torch.Tensor:
        base = biased_causal_mask(length, length, self.cfg.period)
        finite = torch.where(torch.isinf(base), torch.zeros_like(base), base)
        per_head = finite[None] * self.head_slopes.to(torch.float64)[:, None, None]
        per_head = per_head.masked_fill(torch.isinf(base)[None], -math.inf)
        return per_head.to(dtype).repeat(batch, 1, 1)

    def _memory_mask(self, length: int, total: int, t_a: int, t_c: int,
                     content_mask: torch.Tensor | None, dtype) -> torch.Tensor:
        slope = self.cfg.align_slope
        parts = [alignment_bias(total, t_a, slope)[:length]]
        if t_c:
            parts.append(alignment_bias(total, t_c, slope)[:length])
        bias = torch.cat(parts, dim=1).to(dtype)
        b = 1 if content_mask is None else content_mask.shape[0]
        bias = bias.expand(b, -1, -1).clone()
        if content_mask is not None and t_c:
            bias[content_mask, :, t_a:] = -math.inf
        return bias.repeat_interleave(self.cfg.n_heads, dim=0)

    def forward(self, history: torch.Tensor, a: torch.Tensor, c: torch.Tensor | None,
                s: torch.Tensor, content_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Parallel pass over ``L`` history tokens.

        history: ``(B, L, N_v, 3)`` displacements, token 0 is the template (zeros).
        a: ``(B, T, D_a)``; c: ``(B, T_c, D_m)`` or None; s: ``(B, D_s)``.
        content_mask: ``(B,)`` bool, True hides the motion-content memory.
        Returns ``(B, L, N_v, 3)`` displacements for frames ``0 .. L-1``.
        """
        b, length = history.shape[:2]
        total = a.shape[1]
        if length > total:
            raise SequenceLengthError(f"requested {length} frames but audio covers only {total}")
        if history.shape[2] != self.vertex_count:
            raise ConfigError(f"history has {history.shape[2]} vertices, decoder expects {self.vertex_count}")
        ppe = periodic_positional_encoding(torch.arange(length), self.cfg.period, self.cfg.d_model)
        tokens = (self.motion_in(history.reshape(b, length, -1))
                  + self.style_in(s).unsqueeze(1)
                  + ppe.to(history.dtype))
        memory = [self.audio_in(a) + self.source_type[0]]
        t_c = 0
        if c is not None:
            memory.append(self.content_in(c) + self.source_type[1])
            t_c = c.shape[1]
        memory = torch.cat(memory, dim=1)
        if content_mask is None:
            mem_mask = self._memory_mask(length, total, total, t_c, None, tokens.dtype).repeat(b, 1, 1)
        else:
            mem_mask = self._memory_mask(length, total, total, t_c, content_mask, tokens.dtype)
        x = self.layers(tokens, memory, tgt_mask=self._self_mask(length, b, tokens.dtype),
                        memory_mask=mem_mask)
        return self.out(x).reshape(b, length, self.vertex_count, 3)


def teacher_forced_history(frames: torch.Tensor, template: torch.Tensor) -> torch.Tensor:
    """Shift ground-truth positions right by one, template first, as displacements."""
    disp = frames - template.unsqueeze(1)
    return torch.cat([torch.zeros_like(disp[:, :1]), disp[:, :-1]], dim=1)


def decode_step(state: DecoderState, a, c, s, decoder: MotionDecoder, content_mask=None) -> torch.Tensor:
    """Predict and append the next frame; returns its absolute positions ``(B, N_v, 3)``."""
    if state.step >= a.shape[1]:
        raise SequenceLengthError(f"step {state.step} is beyond the {a.shape[1]} available audio frames")
    zero = torch.zeros_like(state.template).unsqueeze(1)
    history = torch.cat([zero, state.frames - state.template.unsqueeze(1)], dim=1)
    disp = decoder(history, a, c, s, content_mask)[:, -1]
    frame = state.template + disp
    state.append(frame)
    return frame


def decode_sequence(a, c, s, num_frames: int, decoder: MotionDecoder, template: torch.Tensor,
                    gt: torch.Tensor | None = None, content_mask=None) -> torch.Tensor:
    """``(B, T, N_v, 3)`` positions.

    With ``gt`` the pass is teacher-forced and parallel; otherwise predictions
    are fed back one frame at a time.
    """
    if num_frames > a.shape[1]:
        raise SequenceLengthError(f"requested {num_frames} frames but audio covers only {a.shape[1]}")
    if gt is not None:
        history = teacher_forced_history(gt[:, :num_frames], template)
        return template.unsqueeze(1) + decoder(history, a, c, s, content_mask)
    state = DecoderState.start(template)
    for _ in range(num_frames):
        decode_step(state, a, c, s, decoder, content_mask)
    return state.frames
