"""Graph-controlled caption generation on synthetic grounded scenes.

A self-contained reference stack: a reverse-mode numeric core, the
scene-graph control-signal data model, a role-aware relational graph
encoder, a flow-attention language decoder with graph memory updates, a
synthetic grounded-scene corpus generator, and the evaluation metrics
for controllability and diversity.
"""

__version__ = "0.1.0"

from .graph import (  # noqa: F401
    FlowGraph,
    MultiRelGraph,
    Node,
    NodeRole,
    SceneGraph,
    build_flow,
    build_multirel,
    flow_step,
    sample_subgraph,
    validate_asg,
)
from .model import CaptionModel, ModelConfig  # noqa: F401
from .training import Checkpoint, Dataset, Instance, TrainConfig, train  # noqa: F401
from .worldgen import Scene, WorldConfig, gen_scene  # noqa: F401
