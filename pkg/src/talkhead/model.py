"""The full talking-head network and its training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import losses as L
from .config import Ablations, LossWeights, ModelConfig
from .decoder import DecoderState, MotionDecoder, decode_sequence, decode_step
from .encoders import (AudioContentEncoder, AudioStyleEncoder, IdentityStyleEncoder,
                       MotionContentEncoder, MotionStyleEncoder, fuse_styles)
from .errors import ConfigError, NumericError
from .mesh_graph import GATEncoder, MeshTopology


@dataclass
class Batch:
    mel: torch.Tensor  # (B, F, n_mels)
    frames: torch.Tensor  # (B, T, N_v, 3) absolute positions
    identity: torch.Tensor  # (B,) long

    @property
    def size(self) -> int:
        return self.frames.shape[0]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]

    def to(self, dtype) -> "Batch":
        return Batch(self.mel.to(dtype), self.frames.to(dtype), self.identity)


class StyleClassifier(nn.Sequential):
    """MLP over per-feature standardised input, so that low-variance style cues
    in pooled content are as visible to it as to a standardised linear probe."""

    def __init__(self, d_in: int, hidden: int, classes: int):
        super().__init__(nn.BatchNorm1d(d_in, affine=False), nn.Linear(d_in, hidden), nn.LeakyReLU(0.2),
                         nn.Linear(hidden, classes))


class TalkingHeadModel(nn.Module):
    def __init__(self, cfg: ModelConfig, topology: MeshTopology, templates: np.ndarray,
                 disable_e_g: bool = False):
        super().__init__()
        templates = np.asarray(templates, dtype=np.float32)
        if templates.ndim != 3 or templates.shape[1:] != (topology.vertex_count, 3):
            raise ConfigError(f"templates must be K x {topology.vertex_count} x 3, got {templates.shape}")
        self.cfg = cfg
        self.topology = topology
        n, k = topology.vertex_count, templates.shape[0]
        self.num_identities = k
        self.graph = GATEncoder(topology, cfg.d_graph, cfg.gat_layers, self_loops_only=disable_e_g)
        self.audio_content = AudioContentEncoder(cfg)
        self.audio_style = AudioStyleEncoder(cfg)
        self.motion_style = MotionStyleEncoder(cfg, n)
        self.motion_content = MotionContentEncoder(cfg, n)
        self.identity_style = IdentityStyleEncoder(k, cfg.d_style)
        self.decoder = MotionDecoder(cfg, n)
        self.audio_classifier = StyleClassifier(cfg.d_audio, cfg.classifier_hidden, k)
        self.motion_classifier = StyleClassifier(cfg.d_motion, cfg.classifier_hidden, k)
        self.register_buffer("templates", torch.from_numpy(templates))
        self.register_buffer("lip_mask", torch.from_numpy(topology.lip_mask.copy()), persistent=False)

    def style_encoders(self) -> list[nn.Module]:
        return [self.audio_style, self.motion_style, self.identity_style]

    def one_hot(self, identity: torch.Tensor) -> torch.Tensor:
        return F.one_hot(identity, self.num_identities).to(self.templates.dtype)

    def encode_motion(self, frames: torch.Tensor, identity: torch.Tensor):
        g = self.graph(frames - self.templates[identity].unsqueeze(1))
        s_m, s_m_tokens = self.motion_style(g)
        c = self.motion_content(g)
        return c, s_m, s_m_tokens

    def encode(self, batch: Batch) -> dict[str, torch.Tensor]:
        t = batch.num_frames
        a = self.audio_content(batch.mel, t)
        s_a, s_a_tokens = self.audio_style(batch.mel)
        c, s_m, s_m_tokens = self.encode_motion(batch.frames, batch.identity)
        s_p = self.identity_style(self.one_hot(batch.identity), batch.identity, check=False)
        return {"a": a, "s_a": s_a, "s_a_tokens": s_a_tokens, "c": c, "s_m": s_m,
                "s_m_tokens": s_m_tokens, "s_p": s_p, "s": fuse_styles(s_a, s_m, s_p)}

    def losses(self, batch: Batch, weights: LossWeights, ablations: Ablations, alpha_c: float,
               generator: torch.Generator | None = None) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """Teacher-forced pass; returns the weighted total and every term."""
        enc = self.encode(batch)
        a, c, s_a, s_m, s_p = enc["a"], enc["c"], enc["s_a"], enc["s_m"], enc["s_p"]
        template = self.templates[batch.identity]

        drop = None
        s = enc["s"]
        if self.training and self.cfg.content_dropout > 0:
            u = torch.rand(batch.size, generator=generator)
            drop = (u < self.cfg.content_dropout).to(a.device)
            s = s_a + s_m * (~drop).to(s_m.dtype)[:, None] + s_p
        pred = decode_sequence(a, c, s, batch.num_frames, self.decoder, template,
                               gt=batch.frames, content_mask=drop)
        rec, mou, vel, motion = L.motion_losses(pred, batch.frames, self.lip_mask,
                                                weights.alpha1, weights.alpha2, weights.alpha3)
        zero = pred.new_zeros(())
        audio_on = not ablations.disable_audio_disent
        motion_on = not ablations.disable_motion_disent
        ids = batch.identity

        adv = zero
        if audio_on:
            adv = adv + L.adversarial_loss(a, ids, self.audio_classifier, alpha_c)
        if motion_on:
            adv = adv + L.adversarial_loss(c, ids, self.motion_classifier, alpha_c)
        orth = zero
        if audio_on:
            orth = orth + L.orthogonality_loss(a, enc["s_a_tokens"])
        if motion_on:
            orth = orth + L.orthogonality_loss(c, enc["s_m_tokens"])
        info = zero
        if audio_on:
            info = info + L.mutual_info_loss(s_a, a.mean(1), weights.tau, weights.info_sign)
        if motion_on:
            info = info + L.mutual_info_loss(s_m, c.mean(1), weights.tau, weights.info_sign)
        cos = L.style_similarity_loss(s_a, s_m, s_p, weights.w1, weights.w2, weights.w3)
        cts, parts = L.contrastive_total(a, c, weights)

        terms = {"rec": rec, "mou": mou, "vel": vel, "motion": motion, "adv": adv,
                 "cos": cos, "orth": orth, "info": info, "cts": cts,
                 "topk": parts["topk"], "kl": parts["kl"]}
        betas = (weights.beta1,
                 0.0 if ablations.disable_adv else weights.beta2,
                 0.0 if ablations.disable_orth else weights.beta3,
                 0.0 if ablations.disable_info else weights.beta4,
                 0.0 if ablations.disable_cts else weights.beta5)
        beta_cos = 0.0 if ablations.disable_cos else weights.beta_cos
        total = L.total_loss(motion, adv, orth, info, cts, betas, cos, beta_cos)
        if not torch.isfinite(total):
            raise NumericError(f"non-finite training loss: { {k: float(v) for k, v in terms.items()} }")
        terms["total"] = total
        return total, terms

    @torch.no_grad()
    def generate(self, mel: torch.Tensor, identity: torch.Tensor, num_frames: int,
                 style_reference: torch.Tensor | None = None,
                 refresh_every: int | None = None) -> torch.Tensor:
        """Inference from audio and identity alone, ``(B, T, N_v, 3)``.

        The first pass sees no motion history beyond the template and no motion
        style; motion content and style are then re-encoded from the generated
        frames.  With ``refresh_every`` the re-encoding happens every R steps
        during a single rollout instead of as a second pass.  A style reference
        sequence, when given, fixes the motion style throughout.
        """
        refresh_every = refresh_every if refresh_every is not None else self.cfg.refresh_every
        a = self.audio_content(mel, num_frames)
        s_a, _ = self.audio_style(mel)
        s_p = self.identity_style(self.one_hot(identity), identity, check=False)
        template = self.templates[identity]
        if style_reference is not None:
            _, s_m, _ = self.encode_motion(style_reference, identity)
        else:
            s_m = torch.zeros_like(s_a)

        def reencode(frames):
            c, s_m_new, _ = self.encode_motion(frames, identity)
            return c, (s_m if style_reference is not None else s_m_new)

        if refresh_every is None:
            first = decode_sequence(a, None, fuse_styles(s_a, s_m, s_p), num_frames, self.decoder, template)
            if num_frames < max(2, self.cfg.min_frames):
                return first
            c, s_m2 = reencode(first)
            return decode_sequence(a, c, fuse_styles(s_a, s_m2, s_p), num_frames, self.decoder, template)

        state = DecoderState.start(template)
        c, s_cur = None, s_m
        for t in range(num_frames):
            if t and t % refresh_every == 0:
                pad = state.frames[:, -1:].expand(-1, num_frames - t, -1, -1)
                c, s_cur = reencode(torch.cat([state.frames, pad], dim=1))
            decode_step(state, a, c, fuse_styles(s_a, s_cur, s_p), self.decoder)
        return state.frames
