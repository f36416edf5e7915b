"""Pseudo-labeled graph condensation toolkit.

Label-free graph condensation via balanced Sinkhorn assignment and swapped
view prediction, representation-matching condensation, backbone
reconstruction, noise-robust downstream evaluation, and a Monte Carlo
validator for the concentration and separation guarantees.
"""

from .condense import (
    CondensedGraph,
    LabeledCondensedGraph,
    condense,
    init_condensed,
    reconstruct_backbone,
    supervised_baseline_condense,
)
from .config import ConfigError, ExperimentConfig, k_from_ratio, load_config
from .downstream import (
    EvalReport,
    HeadParams,
    auroc,
    evaluate_link,
    evaluate_node,
    finetune_link_head,
    finetune_node_head,
    sample_few_shot,
    train_supervised_encoder,
)
from .encoder import EncoderConfig, EncoderParams, encode, identity_adjacency, init_encoder
from .graph import (
    EdgeSplit,
    Graph,
    SbmConfig,
    augment,
    generate_sbm,
    inject_label_noise,
    load_graph,
    normalize_adjacency,
    partition_sources,
    save_graph,
    split_edges,
)
from .harness import run_noise_sweep, run_pipeline
from .pseudo import (
    Assignment,
    PrototypeBank,
    PseudoLabelResult,
    SinkhornConfig,
    normalize_bank,
    round_assignment,
    sinkhorn_assign,
    swapped_loss,
    train_pseudo_labels,
)
from .tensor import Matrix, Tape, finite_difference_check
from .theory import (
    TheoremParams,
    default_theorem_params,
    epsilon_k,
    net_size_bound,
    run_concentration_trial,
    sample_complexity,
    validate_stationarity,
    validate_theorem,
)

__version__ = "0.1.0"
