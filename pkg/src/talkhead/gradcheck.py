"""Finite-difference checks of every loss and of the custom layers.

Each check builds a small double-precision fixture (B <= 4, T <= 8, D <= 16)
and hands it to ``torch.autograd.gradcheck``.  The gradient reversal layer is
the one deliberate mismatch with finite differences, so it is checked against
``-alpha_c`` times a central difference of the un-reversed path, and the
adversarial loss is checked with ``alpha_c = -1`` (which makes reversal a plain
identity) on top of that.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import torch

from . import losses as L
from .config import LossWeights, ModelConfig
from .decoder import DecoderState, MotionDecoder, decode_step
from .encoders import (AudioContentEncoder, AudioStyleEncoder, ConvIN, IdentityStyleEncoder,
                       MotionContentEncoder, MotionStyleEncoder)
from .mesh_graph import GATWeights, MeshTopology, gat_layer

RTOL = 1e-4
ATOL = 1e-7
EPS = 1e-6
DTYPE = torch.float64


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: str = ""


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _randn(*shape, g, scale=1.0, grad=True):
    return (scale * torch.randn(*shape, generator=g, dtype=DTYPE)).requires_grad_(grad)


def _gradcheck(fn, inputs) -> bool:
    return torch.autograd.gradcheck(fn, inputs, eps=EPS, atol=ATOL, rtol=RTOL, raise_exception=False)


def tiny_model_config() -> ModelConfig:
    return ModelConfig(n_mels=8, frontend_channels=4, frontend_layers=1, frontend_kernel=3,
                       d_graph=4, gat_layers=1, d_model=8, d_style=8, d_audio=8, d_motion=8,
                       n_heads=2, enc_layers=1, dec_layers=1, ff_mult=2, tcn_layers=1,
                       tcn_kernel=3, conv_in_layers=1, conv_in_kernel=3, classifier_hidden=8,
                       period=2)


def _module_check(module: torch.nn.Module, build_inputs, call) -> bool:
    """Check gradients with respect to both the inputs and every parameter."""
    module = module.to(DTYPE)
    params = [p for p in module.parameters() if p.requires_grad]
    names = [n for n, p in module.named_parameters() if p.requires_grad]
    inputs = build_inputs()

    def fn(*args):
        xs, ps = args[:len(inputs)], args[len(inputs):]
        state = dict(zip(names, ps))
        return call(lambda *a: torch.func.functional_call(module, state, a), *xs)

    return _gradcheck(fn, (*inputs, *[p.detach().clone().requires_grad_(True) for p in params]))


# -- losses ------------------------------------------------------------------

def check_adversarial() -> bool:
    g = _gen(1)
    content = _randn(3, 5, 6, g=g)
    w1, b1 = _randn(6, 5, g=g), _randn(5, g=g)
    labels = torch.tensor([0, 3, 4])

    def fn(x, w, b):
        return L.adversarial_loss(x, labels, lambda h: h @ w + b, alpha_c=-1.0)

    return _gradcheck(fn, (content, w1, b1))


def check_style_similarity() -> bool:
    g = _gen(2)
    return _gradcheck(lambda a, m, p: L.style_similarity_loss(a, m, p, 1.0, 0.7, 0.3),
                      tuple(_randn(4, 6, g=g) for _ in range(3)))


def check_orthogonality() -> bool:
    g = _gen(3)
    # unequal lengths exercise the pooling path
    return _gradcheck(L.orthogonality_loss, (_randn(2, 7, 5, g=g, scale=0.5), _randn(2, 5, 4, g=g, scale=0.5)))


def check_mutual_info() -> bool:
    g = _gen(4)
    return _gradcheck(lambda u, v: L.mutual_info_loss(u, v, 0.1), (_randn(4, 6, g=g), _randn(4, 6, g=g)))


def check_topk_contrastive() -> bool:
    g = _gen(5)
    return _gradcheck(lambda x, y: L.topk_contrastive_loss(x, y, 2, 1.3, 0.8, 0.4),
                      (_randn(4, 4, g=g, scale=3.0), _randn(4, 4, g=g, scale=3.0)))


def check_kl_alignment() -> bool:
    g = _gen(6)

    def fn(mu_a, lv_a, mu_c, lv_c):
        return L.kl_alignment_loss((mu_a, lv_a.exp()), (mu_c, lv_c.exp()))

    return _gradcheck(fn, tuple(_randn(5, g=g) for _ in range(4)))


def check_contrastive_total() -> bool:
    g = _gen(7)
    w = LossWeights(tau=0.5)
    return _gradcheck(lambda a, c: L.contrastive_total(a, c, w)[0], (_randn(4, 6, 5, g=g), _randn(4, 6, 5, g=g)))


def _motion_fixture(seed: int):
    g = _gen(seed)
    pred, gt = _randn(2, 5, 6, 3, g=g), _randn(2, 5, 6, 3, g=g, grad=False)
    lip = torch.tensor([False, True, True, False, True, False])
    return pred, gt, lip


def _motion_check(index: int, seed: int) -> bool:
    pred, gt, lip = _motion_fixture(seed)
    return _gradcheck(lambda p: L.motion_losses(p, gt, lip, 1.0, 0.8, 0.5)[index], (pred,))


def check_reconstruction() -> bool:
    return _motion_check(0, 8)


def check_mouth() -> bool:
    return _motion_check(1, 9)


def check_velocity() -> bool:
    return _motion_check(2, 10)


def check_motion() -> bool:
    return _motion_check(3, 11)


def check_total() -> bool:
    g = _gen(12)
    terms = tuple(_randn((), g=g) for _ in range(6))
    return _gradcheck(lambda m, a, o, i, c, s: L.total_loss(m, a, o, i, c, (1.0, 0.1, 0.2, 0.3, 0.4), s, 0.5),
                      terms)


def check_grl() -> bool:
    """Reversed gradient equals ``-alpha_c`` times a central difference of the plain path."""
    g = _gen(13)
    x = _randn(3, 4, g=g)
    w = torch.randn(4, generator=g, dtype=DTYPE)
    alpha = 0.7

    def plain(v):
        return torch.tanh(v @ w).sum()

    analytic, = torch.autograd.grad(torch.tanh(L.grl(x, alpha) @ w).sum(), x)
    numeric = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    for i in range(flat.numel()):
        up, down = flat.clone(), flat.clone()
        up[i] += EPS
        down[i] -= EPS
        numeric.view(-1)[i] = (plain(up.view_as(x)) - plain(down.view_as(x))) / (2 * EPS)
    return bool(torch.allclose(analytic, -alpha * numeric, rtol=RTOL, atol=ATOL))


# -- layers ------------------------------------------------------------------

def _path_topology(n: int = 6) -> MeshTopology:
    faces = [(i, i + 1, i + 2) for i in range(n - 2)]
    return MeshTopology.from_faces(n, faces)


def check_gat_layer() -> bool:
    g = _gen(14)
    src, dst = _path_topology().message_index()
    h = _randn(2, 3, 6, 4, g=g)
    w, a_s, a_d = _randn(4, 5, g=g), _randn(5, g=g), _randn(5, g=g)
    return _gradcheck(lambda h, w, a_s, a_d: gat_layer(h, src, dst, GATWeights(w, a_s, a_d)), (h, w, a_s, a_d))


def check_audio_content_encoder() -> bool:
    torch.manual_seed(15)
    cfg = tiny_model_config()
    g = _gen(15)
    return _module_check(AudioContentEncoder(cfg), lambda: (_randn(2, 12, cfg.n_mels, g=g),),
                         lambda m, mel: m(mel, 6))


def check_audio_style_encoder() -> bool:
    torch.manual_seed(16)
    cfg = tiny_model_config()
    g = _gen(16)
    return _module_check(AudioStyleEncoder(cfg), lambda: (_randn(2, 12, cfg.n_mels, g=g),),
                         lambda m, mel: m(mel)[0])


def check_motion_style_encoder() -> bool:
    torch.manual_seed(17)
    cfg = tiny_model_config()
    g = _gen(17)
    return _module_check(MotionStyleEncoder(cfg, 6), lambda: (_randn(2, 6, 6, cfg.d_graph, g=g),),
                         lambda m, x: m(x)[0])


def check_conv_in_block() -> bool:
    torch.manual_seed(18)
    g = _gen(18)
    return _module_check(ConvIN(5, 3), lambda: (_randn(2, 5, 8, g=g),), lambda m, x: m(x))


def check_motion_content_encoder() -> bool:
    torch.manual_seed(19)
    cfg = tiny_model_config()
    g = _gen(19)
    return _module_check(MotionContentEncoder(cfg, 6), lambda: (_randn(2, 6, 6, cfg.d_graph, g=g),),
                         lambda m, x: m(x))


def check_identity_encoder() -> bool:
    torch.manual_seed(20)
    idx = torch.tensor([0, 2, 1])
    one_hot = torch.nn.functional.one_hot(idx, 3).to(DTYPE)
    return _module_check(IdentityStyleEncoder(3, 8), lambda: (), lambda m: m(one_hot, idx))


def check_decoder_step() -> bool:
    """One autoregressive step on 2 frames of a 6-vertex mesh."""
    torch.manual_seed(21)
    cfg = tiny_model_config()
    g = _gen(21)
    dec = MotionDecoder(cfg, 6)
    template = torch.randn(2, 6, 3, generator=g, dtype=DTYPE)
    prev = torch.randn(2, 1, 6, 3, generator=g, dtype=DTYPE)

    def call(m, a, c, s):
        state = DecoderState(prev, template)
        return decode_step(state, a, c, s, m)

    return _module_check(dec, lambda: (_randn(2, 2, cfg.d_audio, g=g), _randn(2, 2, cfg.d_motion, g=g),
                                       _randn(2, cfg.d_style, g=g)), call)


CHECKS: dict[str, Callable[[], bool]] = {
    "adversarial": check_adversarial,
    "style_similarity": check_style_similarity,
    "orthogonality": check_orthogonality,
    "mutual_info": check_mutual_info,
    "topk_contrastive": check_topk_contrastive,
    "kl_alignment": check_kl_alignment,
    "contrastive_total": check_contrastive_total,
    "reconstruction": check_reconstruction,
    "mouth": check_mouth,
    "velocity": check_velocity,
    "motion": check_motion,
    "total": check_total,
    "grl": check_grl,
    "gat_layer": check_gat_layer,
    "audio_content_encoder": check_audio_content_encoder,
    "audio_style_encoder": check_audio_style_encoder,
    "motion_style_encoder": check_motion_style_encoder,
    "conv_in_block": check_conv_in_block,
    "motion_content_encoder": check_motion_content_encoder,
    "identity_encoder": check_identity_encoder,
    "decoder_step": check_decoder_step,
}


def missing_losses() -> list[str]:
    return [name for name in L.LOSS_REGISTRY if name not in CHECKS]


class _BrokenSquare(torch.autograd.Function):
    """``x**2`` with a backward that is off by ten percent."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * 2.2 * x


def negative_control() -> bool:
    """True when the checker rejects a corrupted analytic gradient."""
    x = _randn(5, g=_gen(99))
    return not _gradcheck(lambda v: _BrokenSquare.apply(v).sum(), (x,))


def run_all(names=None) -> list[CheckResult]:
    out = []
    for name in names or CHECKS:
        start = time.perf_counter()
        try:
            ok, detail = bool(CHECKS[name]()), ""
        except Exception as exc:  # reported as a failed row
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, ok, time.perf_counter() - start, detail))
    return out


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<26}{'result':>8}{'seconds':>10}"]
    for r in results:
        lines.append(f"{r.name:<26}{'PASS' if r.passed else 'FAIL':>8}{r.seconds:>10.3f}"
                     + (f"  {r.detail}" if r.detail else ""))
    caught = negative_control()
    lines.append(f"{'negative_control':<26}{'PASS' if caught else 'FAIL':>8}")
    gaps = missing_losses()
    lines.append(f"loss coverage: {len(L.LOSS_REGISTRY) - len(gaps)}/{len(L.LOSS_REGISTRY)}"
                 + (f" missing {', '.join(gaps)}" if gaps else ""))
    return "\n".join(lines)
