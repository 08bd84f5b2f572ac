"""Two-stage optimisation, checkpoints (PTKC files) and the loss log.

Stage 1 trains everything except the three style encoders; stage 2 unfreezes
them.  Batch selection and content dropout draw from generators seeded by
``(seed, step)``, so a run resumed from a checkpoint continues exactly as an
uninterrupted one would.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import GlobalConfig, TrainConfig, config_from_dict
from .data import TensorCorpus
from .errors import ConfigError, HeaderError, MissingFileError
from .mesh_graph import MeshTopology
from .model import TalkingHeadModel

PTKC_MAGIC = b"PTKC"
PTKC_VERSION = 1
LOG_COLUMNS = ("rec", "mou", "vel", "motion", "adv", "cos", "orth", "info", "topk", "kl", "cts", "total")


def param_groups(model: TalkingHeadModel, tc: TrainConfig) -> list[dict]:
    """Split classifier parameters into their own optimizer group."""
    heads = {id(p) for m in (model.audio_classifier, model.motion_classifier) for p in m.parameters()}
    rest = [p for p in model.parameters() if id(p) not in heads]
    cls = [p for p in model.parameters() if id(p) in heads]
    return [{"params": rest}, {"params": cls, "lr": tc.lr * tc.classifier_lr_scale}]


def grl_schedule(step: int, total_steps: int, alpha_max: float = 1.0, ramp: float = 0.2) -> float:
    """Linear ramp from 0 to ``alpha_max`` over the first ``ramp`` fraction of steps."""
    ramp_steps = ramp * total_steps
    if ramp_steps <= 0:
        return alpha_max
    return alpha_max * min(1.0, step / ramp_steps)


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]  # "model.<name>" and "optim.<name>.<slot>"
    step: int
    config: dict
    topology: dict
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_from_dict(self.config).digest()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    entries, offset, payload = [], 0, []
    for name, arr in ckpt.arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        payload.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"step": ckpt.step, "config": ckpt.config, "config_hash": ckpt.config_hash,
                         "topology": ckpt.topology, "meta": ckpt.meta, "arrays": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(PTKC_MAGIC)
        fh.write(bytes([PTKC_VERSION]))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in payload:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"checkpoint {p} not found")
    blob = p.read_bytes()
    if len(blob) < 9 or blob[:4] != PTKC_MAGIC:
        raise HeaderError(f"{p}: not a PTKC checkpoint")
    if blob[4] != PTKC_VERSION:
        raise HeaderError(f"{p}: unsupported PTKC version {blob[4]}")
    (hlen,) = struct.unpack_from("<I", blob, 5)
    try:
        header = json.loads(blob[9:9 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise HeaderError(f"{p}: corrupt checkpoint header") from exc
    base = 9 + hlen
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if start + 4 * count > len(blob):
            raise HeaderError(f"{p}: array {e['name']} runs past the end of the file")
        arrays[e["name"]] = np.frombuffer(blob, "<f4", count, start).reshape(e["shape"]).copy()
    ckpt = Checkpoint(arrays, int(header["step"]), header["config"], header["topology"], header.get("meta", {}))
    if ckpt.config_hash != header["config_hash"]:
        raise HeaderError(f"{p}: config hash mismatch")
    return ckpt


def build_model(cfg: GlobalConfig, topology: MeshTopology, templates: np.ndarray,
                dtype=torch.float32) -> TalkingHeadModel:
    torch.manual_seed(cfg.train.seed)
    model = TalkingHeadModel(cfg.model, topology, templates,
                             disable_e_g=cfg.train.ablations.disable_e_g)
    return model.to(dtype)


def model_from_checkpoint(ckpt: Checkpoint, dtype=torch.float32) -> TalkingHeadModel:
    cfg = config_from_dict(ckpt.config).validate()
    topo = MeshTopology.from_dict(ckpt.topology)
    templates = ckpt.arrays["model.templates"]
    model = TalkingHeadModel(cfg.model, topo, templates, disable_e_g=cfg.train.ablations.disable_e_g).to(dtype)
    state = {k[len("model."):]: torch.from_numpy(v).to(dtype)
             for k, v in ckpt.arrays.items() if k.startswith("model.")}
    model.load_state_dict(state)
    model.eval()
    return model


class Trainer:
    """Owns the model, the optimiser and the step counter."""

    def __init__(self, cfg: GlobalConfig, corpus: TensorCorpus, model: TalkingHeadModel | None = None,
                 dtype=torch.float32, log_path: str | Path | None = None):
        cfg.validate()
        self.cfg = cfg
        self.corpus = corpus
        self.dtype = dtype
        self.train_idx = corpus.indices("train")
        if len(self.train_idx) < cfg.train.batch_size:
            raise ConfigError(f"train.batch_size={cfg.train.batch_size} exceeds the "
                              f"{len(self.train_idx)} training sequences")
        self.model = model if model is not None else build_model(cfg, corpus.topology, corpus.templates, dtype)
        self.names = {p: n for n, p in self.model.named_parameters()}
        self.optimizer = torch.optim.Adam(param_groups(self.model, cfg.train), lr=cfg.train.lr, foreach=False)
        self.step = 0
        self.history: list[dict] = []
        self.log_path = Path(log_path) if log_path else None
        if self.log_path and not self.log_path.exists():
            with open(self.log_path, "w") as fh:
                fh.write(f"# ablations: {','.join(cfg.train.ablations.active()) or 'none'}\n")
                fh.write(f"# config_hash: {cfg.digest()}\n")
                fh.write("step\t" + "\t".join(LOG_COLUMNS) + "\n")

    @property
    def stage(self) -> int:
        return 1 if self.step < self.cfg.train.stage1_steps else 2

    def _set_style_trainable(self, flag: bool) -> None:
        for module in self.model.style_encoders():
            for p in module.parameters():
                p.requires_grad_(flag)

    def train_step(self) -> dict:
        tc = self.cfg.train
        self._set_style_trainable(self.stage == 2)
        rng = np.random.default_rng([tc.seed, self.step])
        idx = rng.choice(self.train_idx, size=tc.batch_size, replace=False)
        batch = self.corpus.batch(idx, self.dtype)
        gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
        alpha_c = grl_schedule(self.step, tc.total_steps, tc.weights.alpha_c, tc.weights.grl_ramp)

        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        total, terms = self.model.losses(batch, tc.weights, tc.ablations, alpha_c, gen)
        total.backward()
        params = [p for p in self.model.parameters() if p.grad is not None]
        torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
        self.optimizer.step()

        record = {"step": self.step, **{k: float(v.detach()) for k, v in terms.items()}}
        self.history.append(record)
        if self.log_path and (self.step % tc.log_every == 0 or self.step == tc.total_steps - 1):
            with open(self.log_path, "a") as fh:
                fh.write(f"{self.step}\t" + "\t".join(f"{record[c]:.6g}" for c in LOG_COLUMNS) + "\n")
        self.step += 1
        return record

    def run(self, until: int) -> list[dict]:
        out = []
        while self.step < until:
            out.append(self.train_step())
        return out

    def checkpoint(self) -> Checkpoint:
        arrays = {f"model.{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        for p, state in self.optimizer.state.items():
            name = self.names[p]
            for slot, value in state.items():
                arrays[f"optim.{name}.{slot}"] = torch.as_tensor(value).detach().cpu().numpy()
        return Checkpoint(arrays, self.step, self.cfg.to_dict(), self.corpus.topology.to_dict(),
                          {"stage": self.stage})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, corpus: TensorCorpus, cfg: GlobalConfig | None = None,
                        dtype=torch.float32, log_path=None) -> "Trainer":
        cfg = cfg or config_from_dict(ckpt.config)
        model = model_from_checkpoint(ckpt, dtype)
        trainer = cls(cfg, corpus, model=model, dtype=dtype, log_path=log_path)
        by_name = dict(model.named_parameters())
        for key, value in ckpt.arrays.items():
            if not key.startswith("optim."):
                continue
            name, slot = key[len("optim."):].rsplit(".", 1)
            p = by_name[name]
            trainer.optimizer.state[p][slot] = torch.from_numpy(value).to(
                torch.float32 if slot == "step" else dtype)
        trainer.step = ckpt.step
        return trainer


def train_stage1(cfg: GlobalConfig, corpus: TensorCorpus, trainer: Trainer | None = None,
                 log_path=None) -> Checkpoint:
    """Run the frozen-style stage up to ``train.stage1_steps``."""
    cfg.validate()
    trainer = trainer or Trainer(cfg, corpus, log_path=log_path)
    trainer.run(cfg.train.stage1_steps)
    return trainer.checkpoint()


def train_stage2(ckpt: Checkpoint, cfg: GlobalConfig, corpus: TensorCorpus,
                 log_path=None, until: int | None = None) -> Checkpoint:
    """Resume from ``ckpt`` with every parameter trainable until the run ends."""
    trainer = Trainer.from_checkpoint(ckpt, corpus, cfg, log_path=log_path)
    trainer.run(until if until is not None else cfg.train.total_steps)
    return trainer.checkpoint()
