"""Synthetic paired audio/motion corpus with planted style factors, plus
reading and writing corpora on disk (manifest, topology, PTKM, WAV).
"""

from __future__ import annotations

import json
import wave
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .config import DataConfig
from .encoders import AudioClip, IdentityLabel, log_mel
from .errors import ConfigError, DataIOError, HeaderError, MissingFileError, VertexCountError
from .mesh_graph import (MeshTopology, MotionSequence, read_ptkm, read_topology, write_ptkm,
                         write_topology)

VOCASET_VERTICES = 5023
BIWI_VERTICES = 23370
SAMPLE_RATE = 16000
PCM_SCALE = 32767.0

# (F1 Hz, F2 Hz, mouth opening mm, lip rounding 0..1, voicing gain)
PHONEMES = (
    (800, 1200, 10.0, 0.0, 1.0),   # a
    (500, 1900, 6.0, 0.0, 1.0),    # e
    (300, 2300, 3.0, 0.0, 1.0),    # i
    (500, 900, 7.0, 1.0, 1.0),     # o
    (320, 800, 3.0, 1.0, 1.0),     # u
    (700, 1700, 9.0, 0.0, 1.0),    # ae
    (250, 1000, 0.0, 0.0, 0.4),    # m
    (300, 1100, 0.0, 0.3, 0.6),    # b
    (400, 1500, 1.5, 0.0, 0.5),    # f
    (350, 2600, 2.0, 0.0, 0.5),    # s
    (300, 700, 2.0, 1.0, 0.8),     # w
    (0, 0, 0.0, 0.0, 0.0),         # silence
)
N_PHONEMES = len(PHONEMES)

# grid face: rows top to bottom, 5 columns
GRID_ROWS, GRID_COLS, GRID_SPACING = 6, 5, 15.0
UPPER_LIP_ROW, LOWER_LIP_ROW, CHIN_ROW = 3, 4, 5
LIP_COLS = (1, 2, 3)


@dataclass(frozen=True)
class SyntheticStyleSpec:
    style_id: int
    mouth_amplitude: float = 1.0
    lip_protrusion: float = 0.0  # mm along +z
    articulation_sharpness: float = 1.0  # 1 = no smoothing
    pitch_hz: float = 120.0
    spectral_tilt: float = 1.0

    def validate(self) -> None:
        if not self.mouth_amplitude > 0:
            raise ConfigError(f"mouth_amplitude must be > 0, got {self.mouth_amplitude}")
        if not 0 < self.articulation_sharpness <= 1:
            raise ConfigError(f"articulation_sharpness must lie in (0, 1], got {self.articulation_sharpness}")
        if not 40 <= self.pitch_hz <= 1000:
            raise ConfigError(f"pitch_hz must lie in [40, 1000], got {self.pitch_hz}")
        if not np.isfinite(self.lip_protrusion) or self.spectral_tilt < 0:
            raise ConfigError("lip_protrusion must be finite and spectral_tilt >= 0")


def default_styles(n: int = 8) -> list[SyntheticStyleSpec]:
    """Deterministic style bank; factors are permuted so none is a function of another."""
    amp = np.linspace(0.6, 2.0, n)
    prot = np.linspace(-3.0, 3.0, n)[np.argsort((np.arange(n) * 3) % n)]
    sharp = np.linspace(0.35, 1.0, n)[np.argsort((np.arange(n) * 5 + 2) % n)]
    return [SyntheticStyleSpec(i, float(amp[i]), float(prot[i]), float(sharp[i]),
                               pitch_hz=95.0 + 17.0 * i, spectral_tilt=0.6 + 0.15 * ((3 * i) % n))
            for i in range(n)]


def synthetic_topology() -> MeshTopology:
    faces = []
    idx = lambda r, c: r * GRID_COLS + c  # noqa: E731
    for r in range(GRID_ROWS - 1):
        for c in range(GRID_COLS - 1):
            faces.append((idx(r, c), idx(r, c + 1), idx(r + 1, c)))
            faces.append((idx(r, c + 1), idx(r + 1, c + 1), idx(r + 1, c)))
    lips = [idx(r, c) for r in (UPPER_LIP_ROW, LOWER_LIP_ROW) for c in LIP_COLS]
    upper = [idx(r, c) for r in (0, 1) for c in range(GRID_COLS)]
    return MeshTopology.from_faces(GRID_ROWS * GRID_COLS, faces, lips, upper)


def synthetic_template() -> np.ndarray:
    r, c = np.meshgrid(np.arange(GRID_ROWS), np.arange(GRID_COLS), indexing="ij")
    x = (c - (GRID_COLS - 1) / 2) * GRID_SPACING
    y = ((GRID_ROWS - 1) / 2 - r) * GRID_SPACING
    z = -0.01 * x ** 2
    return np.stack([x, y, z], axis=-1).reshape(-1, 3).astype(np.float32)


def phoneme_track(content_seed: int, num_frames: int) -> np.ndarray:
    """Per-frame phoneme ids drawn from ``content_seed``; segments last 3..7 frames."""
    rng = np.random.default_rng(content_seed)
    track = np.empty(num_frames, dtype=np.int64)
    t = 0
    while t < num_frames:
        ph = rng.integers(N_PHONEMES)
        dur = int(rng.integers(3, 8))
        track[t:t + dur] = ph
        t += dur
    return track


def raw_opening(track: np.ndarray, style: SyntheticStyleSpec) -> np.ndarray:
    """Mouth opening in mm before articulation smoothing."""
    targets = np.array([p[2] for p in PHONEMES])
    return style.mouth_amplitude * targets[track]


def smooth(x: np.ndarray, sharpness: float) -> np.ndarray:
    """First-order lag: ``y_t = y_{t-1} + k (x_t - y_{t-1})`` from rest."""
    y = np.empty_like(x, dtype=np.float64)
    prev = 0.0
    for t, v in enumerate(x):
        prev = prev + sharpness * (v - prev)
        y[t] = prev
    return y


def synthesize_motion(track: np.ndarray, style: SyntheticStyleSpec) -> np.ndarray:
    """``(T, N_v, 3)`` absolute vertex positions on the synthetic grid."""
    opening = smooth(raw_opening(track, style), style.articulation_sharpness)
    rounding = smooth(np.array([p[3] for p in PHONEMES])[track], style.articulation_sharpness)
    t = len(track)
    disp = np.zeros((t, GRID_ROWS, GRID_COLS, 3))
    lip = list(LIP_COLS)
    disp[:, UPPER_LIP_ROW, lip, 1] = 0.3 * opening[:, None]
    disp[:, LOWER_LIP_ROW, lip, 1] = -0.7 * opening[:, None]
    disp[:, UPPER_LIP_ROW, lip, 2] = style.lip_protrusion + 1.5 * rounding[:, None]
    disp[:, LOWER_LIP_ROW, lip, 2] = style.lip_protrusion + 1.5 * rounding[:, None]
    disp[:, UPPER_LIP_ROW, lip, 0] = np.array([1.0, 0.0, -1.0]) * 1.0 * rounding[:, None]
    disp[:, LOWER_LIP_ROW, lip, 0] = np.array([1.0, 0.0, -1.0]) * 1.0 * rounding[:, None]
    disp[:, CHIN_ROW, :, 1] = -np.array([0.25, 0.5, 0.5, 0.5, 0.25]) * opening[:, None]
    disp[:, 0, :, 1] = 0.15 * opening[:, None]
    frames = synthetic_template()[None] + disp.reshape(t, -1, 3)
    return frames.astype(np.float32)


def synthesize_audio(track: np.ndarray, style: SyntheticStyleSpec, fps: float,
                     sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Harmonic source at the speaker pitch, shaped per frame by the phoneme formants."""
    n = int(round(len(track) / fps * sample_rate))
    f0 = style.pitch_hz
    harmonics = np.arange(1, int(3800 // f0) + 1)
    freqs = harmonics * f0
    table = np.zeros((N_PHONEMES, len(harmonics)))
    for i, (f1, f2, _, _, gain) in enumerate(PHONEMES):
        if gain == 0:
            continue
        env = np.exp(-((freqs - f1) / 180.0) ** 2) + 0.7 * np.exp(-((freqs - f2) / 220.0) ** 2)
        table[i] = gain * (env + 0.05) * harmonics ** (-style.spectral_tilt)
    amps = table[track].astype(np.float32)  # (T, H)
    # linear interpolation of harmonic amplitudes between frame centres
    pos = np.clip(np.arange(n) / sample_rate * fps - 0.5, 0, len(track) - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, len(track) - 1)
    w = (pos - i0).astype(np.float32)[:, None]
    amp_t = amps[i0] * (1 - w) + amps[i1] * w
    # fundamental phase wrapped in float64, harmonics multiply the wrapped phase
    base = np.mod(np.arange(n) * (f0 / sample_rate), 1.0).astype(np.float32)
    phase = np.float32(2 * np.pi) * np.outer(base, harmonics.astype(np.float32))
    signal = np.einsum("nh,nh->n", amp_t, np.sin(phase)).astype(np.float64)
    signal = np.clip(0.3 * signal, -1.0, 1.0)
    # same arithmetic as read_wav, so an on-disk corpus reloads bit-identically
    pcm = np.round(signal * PCM_SCALE) + 0.0  # no negative zeros
    return pcm.astype(np.float32) / np.float32(PCM_SCALE)


def generate_synthetic_pair(content_seed: int, style: SyntheticStyleSpec, num_frames: int,
                            topology: MeshTopology | None = None, fps: float = 25.0,
                            num_identities: int = 8):
    """Deterministic ``(AudioClip, MotionSequence, IdentityLabel)`` for one utterance.

    The style id doubles as the identity index.
    """
    style.validate()
    if num_frames < 2:
        raise ConfigError("synthetic sequences need at least 2 frames")
    if topology is not None and topology.vertex_count != GRID_ROWS * GRID_COLS:
        raise ConfigError(f"synthetic motion is defined on the {GRID_ROWS * GRID_COLS}-vertex grid")
    track = phoneme_track(content_seed, num_frames)
    clip = AudioClip(synthesize_audio(track, style, fps), SAMPLE_RATE)
    motion = MotionSequence(synthesize_motion(track, style), fps)
    return clip, motion, IdentityLabel.from_index(style.style_id, num_identities)


# -- WAV ---------------------------------------------------------------------

def write_wav(path: str | Path, clip: AudioClip) -> None:
    pcm = np.round(np.clip(clip.samples, -1, 1) * PCM_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> AudioClip:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"audio file {p} not found")
    try:
        with wave.open(str(p), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise HeaderError(f"{p}: expected mono 16-bit PCM")
            rate = fh.getframerate()
            pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    except (wave.Error, EOFError) as exc:
        raise HeaderError(f"{p}: unreadable WAV ({exc})") from exc
    return AudioClip(pcm.astype(np.float32) / np.float32(PCM_SCALE), rate)


# -- corpus on disk ----------------------------------------------------------

@dataclass
class ManifestEntry:
    audio: str
    mesh: str
    identity: int
    split: str


@dataclass
class CorpusManifest:
    topology: str
    templates: dict[int, str]
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def to_dict(self) -> dict:
        return {"topology": self.topology,
                "templates": {str(k): v for k, v in sorted(self.templates.items())},
                "entries": [asdict(e) for e in self.entries]}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        p = Path(path)
        if not p.exists():
            raise MissingFileError(f"manifest {p} not found")
        try:
            doc = json.loads(p.read_text())
            entries = [ManifestEntry(str(e["audio"]), str(e["mesh"]), int(e["identity"]), str(e["split"]))
                       for e in doc.get("entries", [])]
            templates = {int(k): str(v) for k, v in doc.get("templates", {}).items()}
            topo = str(doc["topology"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise HeaderError(f"manifest {p} is malformed: {exc}") from exc
        for e in entries:
            if e.split not in ("train", "val", "test"):
                raise ConfigError(f"manifest {p}: unknown split {e.split!r}")
        k = len(templates)
        if sorted(templates) != list(range(k)):
            raise ConfigError(f"manifest {p}: template identities must be dense in [0, {k})")
        for e in entries:
            if not 0 <= e.identity < k:
                raise ConfigError(f"manifest {p}: identity {e.identity} outside [0, {k})")
        return cls(topo, templates, entries, p.parent)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    @property
    def num_identities(self) -> int:
        return len(self.templates)


@dataclass
class Example:
    audio: AudioClip
    motion: MotionSequence
    identity: IdentityLabel
    template: np.ndarray


def load_topology_and_templates(manifest: CorpusManifest) -> tuple[MeshTopology, np.ndarray]:
    topo = read_topology(manifest.resolve(manifest.topology))
    temps = []
    for k in range(manifest.num_identities):
        seq = read_ptkm(manifest.resolve(manifest.templates[k]), expected_vertices=topo.vertex_count)
        temps.append(seq.frames[0])
    return topo, np.stack(temps) if temps else np.zeros((0, topo.vertex_count, 3), np.float32)


def load_corpus(manifest: CorpusManifest | str | Path, split: str | None = None) -> Iterator[Example]:
    """Yield validated examples; vertex counts are checked against the topology."""
    if not isinstance(manifest, CorpusManifest):
        manifest = CorpusManifest.load(manifest)
    if not manifest.entries:
        return iter(())
    topo, templates = load_topology_and_templates(manifest)

    def gen():
        for e in manifest.entries:
            if split is not None and e.split != split:
                continue
            motion = read_ptkm(manifest.resolve(e.mesh), expected_vertices=topo.vertex_count)
            audio = read_wav(manifest.resolve(e.audio))
            yield Example(audio, motion, IdentityLabel.from_index(e.identity, manifest.num_identities),
                          templates[e.identity])

    return gen()


def write_synthetic_corpus(out_dir: str | Path, cfg: DataConfig) -> CorpusManifest:
    """Generate the default synthetic corpus on disk; returns the saved manifest."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "mesh").mkdir(exist_ok=True)
    (out / "templates").mkdir(exist_ok=True)
    topo = synthetic_topology()
    write_topology(out / "topology.json", topo)
    styles = default_styles(cfg.n_styles)
    templates = {}
    for s in styles:
        rel = f"templates/identity_{s.style_id:03d}.ptkm"
        write_ptkm(out / rel, MotionSequence(synthetic_template()[None], cfg.fps))
        templates[s.style_id] = rel
    entries = []
    num_frames = int(round(cfg.seconds * cfg.fps))
    for spec in synthetic_specs(cfg):
        clip, motion, label = generate_synthetic_pair(spec.content_seed, styles[spec.style_id], num_frames,
                                                      fps=cfg.fps, num_identities=cfg.n_styles)
        stem = f"s{spec.style_id:03d}_{spec.index:05d}"
        write_wav(out / "audio" / f"{stem}.wav", clip)
        write_ptkm(out / "mesh" / f"{stem}.ptkm", motion)
        entries.append(ManifestEntry(f"audio/{stem}.wav", f"mesh/{stem}.ptkm", label.index, spec.split))
    manifest = CorpusManifest("topology.json", templates, entries, out)
    manifest.save(out / "manifest.json")
    return manifest


@dataclass(frozen=True)
class SequenceSpec:
    index: int
    style_id: int
    content_seed: int
    split: str


def synthetic_specs(cfg: DataConfig) -> list[SequenceSpec]:
    """Deterministic listing of every synthetic sequence and its split."""
    rng = np.random.default_rng(cfg.seed)
    out = []
    n_test = int(round(cfg.seqs_per_style * cfg.test_fraction))
    n_val = int(round(cfg.seqs_per_style * cfg.val_fraction))
    for style in range(cfg.n_styles):
        order = rng.permutation(cfg.seqs_per_style)
        for j in range(cfg.seqs_per_style):
            rank = order[j]
            split = "test" if rank < n_test else ("val" if rank < n_test + n_val else "train")
            seed = int(rng.integers(2 ** 31))
            out.append(SequenceSpec(style * cfg.seqs_per_style + j, style, seed, split))
    return out


# -- in-memory tensors for training -----------------------------------------

@dataclass
class TensorCorpus:
    """Precomputed log-mel features and motion, one entry per sequence."""

    mel: list[torch.Tensor]
    frames: list[torch.Tensor]
    identity: torch.Tensor
    split: np.ndarray
    topology: MeshTopology
    templates: np.ndarray
    fps: float

    def __len__(self) -> int:
        return len(self.frames)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def batch(self, idx, dtype=torch.float32):
        from .model import Batch

        idx = list(int(i) for i in idx)
        t = min(self.frames[i].shape[0] for i in idx)
        f = min(self.mel[i].shape[0] for i in idx)
        return Batch(torch.stack([self.mel[i][:f] for i in idx]).to(dtype),
                     torch.stack([self.frames[i][:t] for i in idx]).to(dtype),
                     self.identity[idx])

    @classmethod
    def from_examples(cls, examples, split_labels, topology, templates, n_mels: int = 40) -> "TensorCorpus":
        mel, frames, ids, fps = [], [], [], None
        for ex in examples:
            if ex.audio.sample_rate != SAMPLE_RATE:
                raise DataIOError(f"audio must be sampled at {SAMPLE_RATE} Hz, got {ex.audio.sample_rate}")
            mel.append(log_mel(torch.from_numpy(ex.audio.samples), n_mels))
            frames.append(torch.from_numpy(ex.motion.frames))
            ids.append(ex.identity.index)
            fps = ex.motion.fps
        return cls(mel, frames, torch.tensor(ids, dtype=torch.long), np.asarray(split_labels),
                   topology, np.asarray(templates, np.float32), fps or 25.0)

    @classmethod
    def from_manifest(cls, path: str | Path, n_mels: int = 40) -> "TensorCorpus":
        manifest = CorpusManifest.load(path)
        if not manifest.entries:
            raise ConfigError(f"manifest {path} has no entries")
        topo, templates = load_topology_and_templates(manifest)
        examples = list(load_corpus(manifest))
        return cls.from_examples(examples, [e.split for e in manifest.entries], topo, templates, n_mels)

    @classmethod
    def synthetic(cls, cfg: DataConfig, n_mels: int = 40) -> "TensorCorpus":
        """The on-disk synthetic corpus, built directly in memory (identical values)."""
        styles = default_styles(cfg.n_styles)
        num_frames = int(round(cfg.seconds * cfg.fps))
        specs = synthetic_specs(cfg)
        examples = []
        for spec in specs:
            clip, motion, label = generate_synthetic_pair(spec.content_seed, styles[spec.style_id], num_frames,
                                                          fps=cfg.fps, num_identities=cfg.n_styles)
            examples.append(Example(clip, motion, label, synthetic_template()))
        templates = np.stack([synthetic_template()] * cfg.n_styles)
        return cls.from_examples(examples, [s.split for s in specs], synthetic_topology(), templates, n_mels)
