import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from talkhead.config import ModelConfig
from talkhead.encoders import (HOP, LOG_FLOOR, N_FFT, AudioClip, AudioContentEncoder, AudioStyleEncoder,
                               ConvFrontend, ConvIN, IdentityLabel, IdentityStyleEncoder, MotionContentEncoder,
                               MotionStyleEncoder, audio_frontend, clip_frontend, encode_identity, fuse_styles,
                               log_mel, mel_filterbank, resample_frames, validate_one_hot)
from talkhead.errors import ConfigError, InputError


def small_cfg(**kw):
    base = dict(n_mels=16, frontend_channels=8, d_graph=4, d_model=16, d_style=8, d_audio=8, d_motion=8,
                n_heads=2, enc_layers=1, classifier_hidden=8)
    base.update(kw)
    return ModelConfig(**base)


def oracle_mel_energies(x, n_mels, sr=16000):
    """Explicit DFT sums per analysis frame and textbook HTK triangles."""
    n = np.arange(N_FFT)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / N_FFT)
    bins = np.arange(N_FFT // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(bins, n) / N_FFT)

    def mel(f):
        return 2595 * np.log10(1 + f / 700)

    def inv(m):
        return 700 * (10 ** (m / 2595) - 1)

    centres = inv(np.linspace(0, mel(sr / 2), n_mels + 2))
    freqs = bins * sr / N_FFT
    fb = np.zeros((len(bins), n_mels))
    for m in range(n_mels):
        lo, mid, hi = centres[m], centres[m + 1], centres[m + 2]
        for b, f in enumerate(freqs):
            if lo <= f <= mid:
                fb[b, m] = (f - lo) / (mid - lo)
            elif mid < f <= hi:
                fb[b, m] = (hi - f) / (hi - mid)
    out = []
    for start in range(0, len(x) - N_FFT + 1, HOP):
        spec = basis @ (x[start:start + N_FFT] * window)
        out.append(np.abs(spec) ** 2 @ fb)
    return np.array(out), centres


def test_filterbank_shape_and_peaks():
    fb = mel_filterbank(40)
    assert fb.shape == (N_FFT // 2 + 1, 40)
    assert np.all(fb >= 0) and np.all(fb.max(axis=0) <= 1.0 + 1e-12)


def test_sine_440_matches_dft_oracle():
    sr, n_mels = 16000, 40
    t = np.arange(sr) / sr
    x = 0.5 * np.sin(2 * np.pi * 440 * t)
    ours = 10 ** log_mel(torch.from_numpy(x), n_mels).numpy()
    ref, centres = oracle_mel_energies(x, n_mels)
    ref = np.maximum(ref, LOG_FLOOR)
    np.testing.assert_allclose(ours, ref, rtol=1e-8, atol=1e-12)
    band = int(np.argmax(ours.mean(axis=0)))
    assert centres[band] <= 440 <= centres[band + 2]
    assert ours.mean(axis=0)[band] > 0.5 * ours.mean(axis=0).sum()
    # after the resampling contract: T = 25 frames per second
    feats = resample_frames(torch.from_numpy(np.log10(ref))[None], 25)
    assert feats.shape == (1, 25, n_mels)


def test_silence_is_log_floor():
    mel = log_mel(torch.zeros(16000, dtype=torch.float64), 40)
    assert torch.all(mel == np.log10(LOG_FLOOR))
    torch.manual_seed(0)
    fe = ConvFrontend(40, 6, 2, 5, instance_norm=False).double()
    out = audio_frontend(mel[None], 25, fe)[0]
    assert out.shape == (25, 6)
    torch.testing.assert_close(out, out[:1].expand_as(out), rtol=0, atol=1e-12)


def test_short_clip_rejected():
    with pytest.raises(InputError):
        log_mel(torch.zeros(N_FFT - 1), 40)


@settings(max_examples=20, deadline=None)
@given(st.integers(N_FFT, 8000), st.integers(1, 60))
def test_frontend_frame_count(length, target):
    torch.manual_seed(0)
    fe = ConvFrontend(16, 4, 1, 3)
    clip = AudioClip(np.random.default_rng(length).uniform(-1, 1, length).astype(np.float32), 16000)
    assert clip_frontend(clip, target, fe, 16).shape == (target, 4)


def test_audio_clip_invariants():
    with pytest.raises(InputError):
        AudioClip(np.zeros(0, np.float32), 16000)
    with pytest.raises(InputError):
        AudioClip(np.full(10, 2.0, np.float32), 16000)


def test_audio_content_shape_and_determinism():
    torch.manual_seed(1)
    cfg = small_cfg()
    enc = AudioContentEncoder(cfg).eval()
    mel = torch.randn(2, 50, cfg.n_mels)
    a = enc(mel, 13)
    assert a.shape == (2, 13, cfg.d_audio)
    assert torch.equal(a, enc(mel, 13))


def test_audio_style_fixed_size_and_reversal():
    torch.manual_seed(2)
    cfg = small_cfg()
    enc = AudioStyleEncoder(cfg).eval()
    short, long = torch.randn(1, 48, cfg.n_mels), torch.randn(1, 298, cfg.n_mels)
    assert enc(short)[0].shape == enc(long)[0].shape == (1, cfg.d_style)
    const = torch.randn(1, 1, cfg.n_mels).expand(1, 40, cfg.n_mels)
    torch.testing.assert_close(enc(const)[0], enc(const.flip(1))[0], rtol=0, atol=1e-6)


def test_motion_style_fixed_size_and_constant_input():
    torch.manual_seed(3)
    cfg = small_cfg()
    enc = MotionStyleEncoder(cfg, 5).eval()
    frame = torch.randn(1, 1, 5, cfg.d_graph)
    codes = [enc(frame.expand(1, t, 5, cfg.d_graph))[0] for t in (cfg.min_frames, 12, 31)]
    for c in codes:
        assert c.shape == (1, cfg.d_style)
        torch.testing.assert_close(c, codes[0], rtol=0, atol=1e-5)
    with pytest.raises(InputError):
        enc(torch.randn(1, cfg.min_frames - 1, 5, cfg.d_graph))


def test_motion_content_shape_and_instance_norm():
    torch.manual_seed(4)
    cfg = small_cfg()
    enc = MotionContentEncoder(cfg, 5).double().eval()
    g = torch.randn(3, 17, 5, cfg.d_graph, dtype=torch.float64)
    c, norms = enc(g, return_norms=True)
    assert c.shape == (3, 17, cfg.d_motion)
    for z in norms:
        torch.testing.assert_close(z.mean(-1), torch.zeros_like(z.mean(-1)), rtol=0, atol=1e-4)
        var = z.var(-1, unbiased=False)
        torch.testing.assert_close(var, torch.ones_like(var), rtol=0, atol=1e-4)


def test_conv_in_shift_invariance():
    torch.manual_seed(5)
    block = ConvIN(6, 3).double()
    x = torch.randn(2, 6, 11, dtype=torch.float64)
    torch.testing.assert_close(block(x + 3.7), block(x), rtol=0, atol=1e-5)


def test_identity_degenerate_attention():
    k, d = 4, 4
    enc = IdentityStyleEncoder(k, d).double()
    with torch.no_grad():
        # linear map = identity; the table row is read through the W column of the one-hot
        enc.personal.weight.copy_(torch.eye(d, dtype=torch.float64))
        enc.common.weight.copy_(torch.randn(k, d, dtype=torch.float64))
        enc.out.weight.zero_()
        enc.out.bias.zero_()
    idx = torch.tensor([2])
    one_hot = torch.nn.functional.one_hot(idx, k).double()
    s_p = encode_identity(one_hot, idx, enc)
    torch.testing.assert_close(s_p[0], enc.personal.weight[:, 2], rtol=0, atol=0)


def test_identity_distinct_codes():
    torch.manual_seed(6)
    k = 6
    enc = IdentityStyleEncoder(k, 8).double()
    idx = torch.arange(k)
    s = enc(torch.nn.functional.one_hot(idx, k).double(), idx)
    dist = torch.cdist(s, s)
    off = dist[~torch.eye(k, dtype=torch.bool)]
    assert torch.all(off > 1e-6)


def test_malformed_one_hot():
    with pytest.raises(InputError):
        validate_one_hot(np.array([[1, 1, 0]]))
    with pytest.raises(InputError):
        validate_one_hot(np.array([[0, 1, 0]]), index=[2])
    with pytest.raises(InputError):
        IdentityLabel(np.array([0.0, 0.0]), 0)
    assert IdentityLabel.from_index(2, 4).one_hot.tolist() == [0, 0, 1, 0]


def test_fuse_styles():
    e = torch.eye(3)
    assert torch.equal(fuse_styles(torch.zeros(3), torch.zeros(3), torch.zeros(3)), torch.zeros(3))
    assert torch.equal(fuse_styles(e[0], e[1], e[2]), torch.ones(3))
    a, b, c = torch.randn(3, 5).unbind(0)
    assert torch.equal(fuse_styles(a, b, c), fuse_styles(c, a, b))
    with pytest.raises(ConfigError):
        fuse_styles(torch.zeros(3), torch.zeros(4), torch.zeros(3))
