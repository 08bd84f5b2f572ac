"""Face mesh as a graph, sparse graph attention, and the mesh file formats.

Attention is evaluated edge-wise with scatter operations, so memory grows with
the edge count rather than with ``N_v ** 2``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (ConfigError, HeaderError, MissingFileError, NumericError,
                     TopologyError, VertexCountError)

LEAKY_SLOPE = 0.2
PTKM_MAGIC = b"PTKM"
PTKM_VERSION = 1
_PTKM_HEADER = struct.Struct("<IIf")


def derive_edges(faces, vertex_count: int | None = None) -> set[tuple[int, int]]:
    """Undirected, deduplicated edge set of a triangle list as ``(lo, hi)`` pairs."""
    edges: set[tuple[int, int]] = set()
    for face in faces:
        if len(face) != 3:
            raise TopologyError(f"face {tuple(face)} is not a triangle")
        idx = [int(i) for i in face]
        for i in idx:
            if i < 0 or (vertex_count is not None and i >= vertex_count):
                raise TopologyError(f"face {tuple(idx)} references vertex {i} outside [0, {vertex_count})")
        for a, b in ((idx[0], idx[1]), (idx[1], idx[2]), (idx[0], idx[2])):
            if a != b:
                edges.add((min(a, b), max(a, b)))
    return edges


def _index_mask(indices, n: int, name: str) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    for i in indices:
        if not 0 <= int(i) < n:
            raise TopologyError(f"{name} index {i} outside [0, {n})")
        mask[int(i)] = True
    return mask


@dataclass
class MeshTopology:
    vertex_count: int
    edges: np.ndarray  # (E, 2) int64, lo < hi, sorted, unique
    faces: np.ndarray | None = None
    lip_mask: np.ndarray = field(default=None)
    upper_face_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.vertex_count < 1:
            raise TopologyError("vertex_count must be positive")
        n = self.vertex_count
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise TopologyError(f"edge index outside [0, {n})")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise TopologyError("self-loops must not be stored")
            edges = np.sort(edges, axis=1)
            uniq = np.unique(edges, axis=0)
            if len(uniq) != len(edges):
                raise TopologyError("duplicate edges")
            edges = uniq
        self.edges = edges
        if self.faces is not None:
            self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        for name in ("lip_mask", "upper_face_mask"):
            m = getattr(self, name)
            m = np.zeros(n, dtype=bool) if m is None else np.asarray(m, dtype=bool)
            if m.shape != (n,):
                raise TopologyError(f"{name} must have length {n}")
            setattr(self, name, m)
        if np.any(self.lip_mask & self.upper_face_mask):
            raise TopologyError("lip_mask and upper_face_mask overlap")

    @classmethod
    def from_faces(cls, vertex_count: int, faces, lip_indices=(), upper_face_indices=()) -> "MeshTopology":
        edges = sorted(derive_edges(faces, vertex_count))
        return cls(
            vertex_count=vertex_count,
            edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
            faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
            lip_mask=_index_mask(lip_indices, vertex_count, "lip_mask"),
            upper_face_mask=_index_mask(upper_face_indices, vertex_count, "upper_face_mask"),
        )

    def message_index(self, self_loops_only: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
        """Directed (source, target) arrays over both edge directions plus self-loops."""
        loops = np.arange(self.vertex_count, dtype=np.int64)
        if self_loops_only or not len(self.edges):
            src, dst = loops, loops
        else:
            e = self.edges
            src = np.concatenate([e[:, 0], e[:, 1], loops])
            dst = np.concatenate([e[:, 1], e[:, 0], loops])
        return torch.from_numpy(src.copy()), torch.from_numpy(dst.copy())

    def to_dict(self) -> dict:
        out = {"vertex_count": int(self.vertex_count)}
        if self.faces is not None:
            out["faces"] = self.faces.tolist()
        else:
            out["edges"] = self.edges.tolist()
        out["lip_mask"] = np.flatnonzero(self.lip_mask).tolist()
        out["upper_face_mask"] = np.flatnonzero(self.upper_face_mask).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MeshTopology":
        if "vertex_count" not in d:
            raise TopologyError("topology document lacks vertex_count")
        n = int(d["vertex_count"])
        if "faces" in d:
            return cls.from_faces(n, d["faces"], d.get("lip_mask", ()), d.get("upper_face_mask", ()))
        return cls(
            vertex_count=n,
            edges=np.asarray(d.get("edges", []), dtype=np.int64).reshape(-1, 2),
            lip_mask=_index_mask(d.get("lip_mask", ()), n, "lip_mask"),
            upper_face_mask=_index_mask(d.get("upper_face_mask", ()), n, "upper_face_mask"),
        )


@dataclass
class MotionSequence:
    frames: np.ndarray  # (T, N_v, 3) millimetres
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[-1] != 3:
            raise ConfigError(f"frames must be T x N_v x 3, got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ConfigError("a motion sequence needs at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise NumericError("motion sequence contains non-finite coordinates")
        if not self.fps > 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def vertex_count(self) -> int:
        return self.frames.shape[1]


# -- graph attention ---------------------------------------------------------

@dataclass
class GATWeights:
    """One layer: projection ``W`` (D_in x D_out) and the two halves of the attention vector."""

    weight: torch.Tensor
    att_src: torch.Tensor
    att_dst: torch.Tensor


def gat_layer(node_states: torch.Tensor, src: torch.Tensor, dst: torch.Tensor,
              weights: GATWeights, return_attention: bool = False):
    """Single-head graph attention over ``(..., N_v, D_in)`` node states.

    ``src``/``dst`` are directed message indices that already contain self-loops
    (see ``MeshTopology.message_index``).  Attention logits are
    ``leaky(a_dst . W h_v + a_src . W h_u)`` normalised over the incoming edges of
    each target ``v``.
    """
    if torch.isnan(node_states).any():
        raise NumericError("NaN in graph attention input")
    if node_states.shape[-1] != weights.weight.shape[0]:
        raise ConfigError(
            f"node feature width {node_states.shape[-1]} does not match layer input {weights.weight.shape[0]}")
    n = node_states.shape[-2]
    lead = node_states.shape[:-2]
    # node-major layout: gathers and scatters then move whole contiguous rows
    h = node_states.movedim(-2, 0).reshape(n, -1, node_states.shape[-1])
    wh = h @ weights.weight  # (N, M, D_out)
    score_src = wh @ weights.att_src  # (N, M)
    score_dst = wh @ weights.att_dst
    logits = F.leaky_relu(score_dst[dst] + score_src[src], LEAKY_SLOPE)  # (E, M)

    # max-shift for stability; softmax is invariant to it so no gradient needed
    index = dst[:, None].expand_as(logits)
    peak = torch.full((n, logits.shape[1]), -torch.inf, dtype=logits.dtype, device=logits.device)
    peak = peak.scatter_reduce(0, index, logits.detach(), reduce="amax", include_self=True)
    ex = torch.exp(logits - peak[dst])
    denom = torch.zeros_like(peak).index_add(0, dst, ex)
    alpha = ex / denom[dst]

    out = torch.zeros_like(wh).index_add(0, dst, alpha.unsqueeze(-1) * wh[src])
    out = F.leaky_relu(out, LEAKY_SLOPE)
    out = out.reshape(n, *lead, wh.shape[-1]).movedim(0, -2)
    alpha = alpha.reshape(-1, *lead).movedim(0, -1)
    if return_attention:
        return out, alpha
    return out


class GATLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out))
        self.att_src = nn.Parameter(torch.empty(d_out))
        self.att_dst = nn.Parameter(torch.empty(d_out))
        nn.init.xavier_uniform_(self.weight)
        nn.init.normal_(self.att_src, std=d_out ** -0.5)
        nn.init.normal_(self.att_dst, std=d_out ** -0.5)

    def weights(self) -> GATWeights:
        return GATWeights(self.weight, self.att_src, self.att_dst)

    def forward(self, h, src, dst):
        return gat_layer(h, src, dst, self.weights())


class GATEncoder(nn.Module):
    """Stacked graph attention applied to every frame independently.

    Input frames are vertex displacements from the template; with
    ``self_loops_only`` the neighbourhood collapses to the vertex itself
    (the graph-encoder ablation).
    """

    def __init__(self, topology: MeshTopology, d_graph: int, layers: int = 2,
                 self_loops_only: bool = False):
        super().__init__()
        self.vertex_count = topology.vertex_count
        self.d_graph = d_graph
        src, dst = topology.message_index(self_loops_only)
        self.register_buffer("src", src, persistent=False)
        self.register_buffer("dst", dst, persistent=False)
        dims = [3] + [d_graph] * layers
        self.layers = nn.ModuleList(GATLayer(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-2:] != (self.vertex_count, 3):
            raise ConfigError(
                f"motion frames have shape {tuple(frames.shape[-2:])}, expected ({self.vertex_count}, 3)")
        h = frames
        for layer in self.layers:
            h = layer(h, self.src, self.dst)
        return h


def encode_motion(frames: torch.Tensor | MotionSequence, encoder: GATEncoder) -> torch.Tensor:
    """``(..., T, N_v, 3)`` displacements -> ``(..., T, N_v, D_g)`` graph features."""
    if isinstance(frames, MotionSequence):
        frames = torch.from_numpy(frames.frames)
    return encoder(frames.to(encoder.layers[0].weight.dtype))


# -- file formats ------------------------------------------------------------

def write_topology(path: str | Path, topology: MeshTopology) -> None:
    Path(path).write_text(json.dumps(topology.to_dict()))


def read_topology(path: str | Path) -> MeshTopology:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"topology file {p} not found")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise TopologyError(f"topology file {p} is not valid JSON: {exc}") from exc
    return MeshTopology.from_dict(doc)


def write_ptkm(path: str | Path, seq: MotionSequence) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    t, n, _ = frames.shape
    with open(path, "wb") as fh:
        fh.write(PTKM_MAGIC)
        fh.write(bytes([PTKM_VERSION]))
        fh.write(_PTKM_HEADER.pack(n, t, float(seq.fps)))
        fh.write(frames.tobytes())


def read_ptkm(path: str | Path, expected_vertices: int | None = None) -> MotionSequence:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"mesh sequence {p} not found")
    blob = p.read_bytes()
    head = len(PTKM_MAGIC) + 1 + _PTKM_HEADER.size
    if len(blob) < head or blob[:4] != PTKM_MAGIC:
        raise HeaderError(f"{p}: not a PTKM mesh sequence")
    if blob[4] != PTKM_VERSION:
        raise HeaderError(f"{p}: unsupported PTKM version {blob[4]}")
    n, t, fps = _PTKM_HEADER.unpack_from(blob, 5)
    if t < 1 or n < 1 or not fps > 0:
        raise HeaderError(f"{p}: invalid header (N_v={n}, T={t}, fps={fps})")
    if len(blob) - head != t * n * 3 * 4:
        raise HeaderError(f"{p}: payload holds {len(blob) - head} bytes, header implies {t * n * 12}")
    if expected_vertices is not None and n != expected_vertices:
        raise VertexCountError(f"{p}: {n} vertices, topology has {expected_vertices}")
    frames = np.frombuffer(blob, dtype="<f4", offset=head).reshape(t, n, 3).astype(np.float32)
    return MotionSequence(frames, float(fps))
