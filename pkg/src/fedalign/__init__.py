"""Optimal-transport colour alignment as preprocessing for federated learning.

Agents summarise their images as per-channel Wasserstein barycenters, a
server averages those into a global target, and every image is projected
onto it before ordinary FedAvg training.
"""

from .align import (
    AgentState,
    AlignConfig,
    AlignmentReport,
    LabeledImages,
    ServerState,
    align_network,
    partition_dataset,
    project_held_out,
)
from .barycenter import BarycenterConfig, bregman_barycenter, quantile_barycenter_1d
from .channels import ChannelTriplet, MeasureMode, image_to_channel_measures, project_image
from .errors import ConvergenceError, DatasetFormatError, FedAlignError, NumericalError, ValidationError
from .learner import TrainConfig, fedavg_aggregate, local_train, run_federated_training
from .ot import (
    CostMatrix,
    DiscreteMeasure,
    SinkhornConfig,
    TransportPlan,
    build_cost,
    exact_1d_wasserstein,
    sinkhorn,
    wasserstein_distance,
)

__version__ = "0.1.0"
