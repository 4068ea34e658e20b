"""Federated embedding training with private per-client classifier heads.

Clients share a feature-extractor backbone but keep their class-embedding
columns local; the server optionally applies a gradient-correction step on
the stacked embedding matrix to push different clients' classes apart.
"""

from .data import (
    ClientData,
    Dataset,
    PartitionSpec,
    SyntheticSpec,
    VerificationPairs,
    generate,
    load_samples,
    partition_balanced,
    partition_lognormal,
    partition_shared,
    save_samples,
)
from .evaluation import (
    RoundMetrics,
    best_threshold_accuracy,
    embedding_similarity_stats,
    finite_diff_check,
    grad_direction_diagnostic,
    mean_anchor_feature_distance,
    verification_accuracy,
)
from .experiments import (
    Cell,
    CellResult,
    ExperimentSpec,
    default_spec,
    parse_config,
    run_cell,
    run_experiment,
    validate_config,
    verification_suite,
)
from .federation import (
    ClientState,
    FederationConfig,
    ServerState,
    aggregate_theta,
    build_federation,
    centralized_train,
    client_update,
    combined_objective,
    correction_step,
    load_checkpoint,
    merge_shared_identities,
    run_round,
    save_checkpoint,
)
from .losses import LossGrad, LossSpec, batch_loss_and_grad, global_softmax_grad, local_loss_and_grad
from .nn import (
    BackboneParams,
    SgdState,
    backward,
    forward,
    init_backbone,
    read_tensors,
    sgd_step,
    write_tensors,
)
from .regularizers import (
    RegGrad,
    StackedEmbeddings,
    cosine_reg,
    masked_softmax_reg,
    softmax_reg,
    softmax_reg_naive,
)

__all__ = [name for name in dir() if not name.startswith("_")]
