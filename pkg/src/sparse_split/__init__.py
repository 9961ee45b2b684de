"""Structured predefined sparsity for MLPs, with split computing and early exit."""

from .core import (
    AdamState,
    SparseMlp,
    TrainConfig,
    TrainHistory,
    adam_step,
    evaluate,
    forward,
    init_model,
    loss_and_grad,
    train,
    weight_histogram,
)
from .data import Dataset, batches, load_idx, load_mnist, preprocess
from .errors import *  # noqa: F401,F403
from .split_ee import (
    ExitBranch,
    ExitPolicy,
    PipelineMetrics,
    SplitPlan,
    attach_exit,
    evaluate_pipeline,
    gate,
    split_model,
    train_exit,
)
from .topology import (
    JunctionSpec,
    JunctionTopology,
    NeuronalConfig,
    build_topology,
    count_parameters,
    enumerate_degree_pairs,
    junction_density,
    network_density,
    validate_config,
)

__version__ = "0.1.0"
