"""Federated learning simulator with classifier calibration on virtual representations."""

__version__ = "0.1.0"

from .ccvr import (  # noqa: E402
    CcvrResult,
    ClassStats,
    GlobalClassStats,
    RetrainConfig,
    VirtualSet,
    allocate_counts,
    calibrate_ccvr,
    calibrate_oracle,
    client_upload,
    generate_virtual_set,
    local_class_stats,
    merge_class_stats,
    merge_uploads,
    read_stats,
    run_ccvr_pipeline,
    sample_virtual,
    server_calibrate,
    write_stats,
)
from .config import ExperimentConfig, config_from_dict, load_config  # noqa: E402
from .datakit import (  # noqa: E402
    Dataset,
    Partition,
    label_histogram,
    largest_remainder,
    make_blob_splits,
    make_blobs,
    partition_dirichlet,
    partition_iid,
)
from .diagnostics import (  # noqa: E402
    CkaReport,
    SeparabilityReport,
    cka_across_clients,
    classifier_norms,
    linear_cka,
    separability_report,
    sliced_wasserstein,
)
from .errors import (  # noqa: E402
    ArgumentError,
    CcvrError,
    ConfigError,
    DegenerateCovarianceError,
    DegenerateInputError,
    EmptyClassError,
    NumericError,
)
from .fedsim import FedConfig, FederatedResult, RoundRecord, aggregate, evaluate, run_federated  # noqa: E402
from .neuralcore import LossConfig, ModelParams, init_model, loss_and_grads, predict  # noqa: E402
from .transform import TransformCfg, transform_features  # noqa: E402

__all__ = [name for name in dir() if not name.startswith("_")]
