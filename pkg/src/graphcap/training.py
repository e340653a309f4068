"""Training loop and checkpointing.

Training is plain teacher forcing: per-token cross entropy accumulated
over a shuffled mini-batch, one Adam step per batch, gradients zeroed
explicitly between batches.  Everything is seeded, so a run is a pure
function of (config, dataset).

A checkpoint is a directory: ``manifest.json`` + ``weights.bin`` (the
numeric-core weight format), ``train_config.json``, and ``vocab.json``.
Reloading reproduces bit-identical forward passes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import assign_weights, load_weights, save_weights
from .errors import NumericError, ShapeError
from .grammar import Vocab
from .graph import SceneGraph
from .model import CaptionModel, ModelConfig
from .optim import OptimizerState, adam_step
from .worldgen import Scene, WorldConfig, features_for

__all__ = ["TrainConfig", "Checkpoint", "train", "Dataset", "Instance"]


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 64
    n_layers: int = 2
    lr: float = 2e-3
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    max_len: int = 20
    beam: int = 5
    max_attrs: int = 4
    use_role_embed: bool = True
    use_mrgcn: bool = True
    use_content_attention: bool = True
    use_flow_attention: bool = True
    use_graph_update: bool = True
    use_beam_search: bool = True

    def __post_init__(self):
        if self.dim < 1 or self.batch_size < 1 or self.max_len < 1 or self.beam < 1:
            raise ShapeError("train config numerics must be positive")
        if self.lr <= 0 or self.epochs < 0:
            raise ShapeError("bad learning rate or epoch count")
        if not (self.use_content_attention or self.use_flow_attention):
            raise ShapeError("at least one attention branch must stay enabled")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            n_layers=self.n_layers,
            max_attrs=self.max_attrs,
            use_role_embed=self.use_role_embed,
            use_mrgcn=self.use_mrgcn,
            use_content_attention=self.use_content_attention,
            use_flow_attention=self.use_flow_attention,
            use_graph_update=self.use_graph_update,
        )

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "n_layers": self.n_layers,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "max_len": self.max_len,
            "beam": self.beam,
            "max_attrs": self.max_attrs,
            "use_role_embed": self.use_role_embed,
            "use_mrgcn": self.use_mrgcn,
            "use_content_attention": self.use_content_attention,
            "use_flow_attention": self.use_flow_attention,
            "use_graph_update": self.use_graph_update,
            "use_beam_search": self.use_beam_search,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class Instance:
    """One training/evaluation row resolved against its scene."""

    scene_id: int
    graph: SceneGraph
    caption: list[str]


@dataclass
class Dataset:
    world: WorldConfig
    scenes: list[Scene]
    instances: list[Instance]
    vocab: Vocab

    def features(self, inst: Instance):
        return features_for(self.scenes[inst.scene_id], inst.graph, self.world)


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: Vocab
    model: CaptionModel

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_weights(directory, self.model.named_parameters())
        with open(directory / "train_config.json", "w") as fh:
            json.dump(self.config.to_json(), fh, indent=1)
        self.vocab.save(directory / "vocab.json")

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        directory = Path(directory)
        with open(directory / "train_config.json") as fh:
            config = TrainConfig.from_json(json.load(fh))
        vocab = Vocab.load(directory / "vocab.json")
        model = CaptionModel(config.model_config(), vocab, seed=config.seed)
        assign_weights(model.named_parameters(), load_weights(directory))
        return cls(config=config, vocab=vocab, model=model)


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    log=None,
) -> tuple[Checkpoint, list[float]]:
    """Returns the trained checkpoint and the per-epoch mean loss curve
    (nats per token)."""
    if not dataset.instances:
        raise ShapeError("empty dataset")
    model = CaptionModel(cfg.model_config(), dataset.vocab, seed=cfg.seed)
    params = model.parameters()
    opt = OptimizerState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    encoded = [
        (inst.graph, dataset.features(inst), dataset.vocab.encode(inst.caption))
        for inst in dataset.instances
    ]
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(encoded))
        epoch_nats = 0.0
        epoch_tokens = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            ad.zero_grads(params)
            batch_nats = 0.0
            for idx in batch:
                g, feats, ids = encoded[idx]
                with ad.record() as tape:
                    loss, n_tok = model.loss(g, feats, ids)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"training diverged at epoch {epoch}: loss {value}")
                ad.backward(tape, loss)
                batch_nats += value * n_tok
                epoch_nats += value * n_tok
                epoch_tokens += n_tok
            scale = 1.0 / len(batch)
            grads = [p.grad * scale if p.grad is not None else np.zeros_like(p.data) for p in params]
            adam_step(opt, params, grads)
        curve.append(epoch_nats / max(1, epoch_tokens))
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs}: {curve[-1]:.4f} nats/token")
    return Checkpoint(config=cfg, vocab=dataset.vocab, model=model), curve
