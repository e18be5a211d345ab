"""Boundary-of-support generation for anomaly detection on top of a density model."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .anomaly import (AnomalyVerdict, ModeSet, assign_boundary_cluster, assign_clusters,
                      classify, classify_batch, generate_strong_anomalies, ood_score,
                      separation_check)
from .boundary import (BdsgHyperparams, BoundaryModel, LossBreakdown, bdsg_loss,
                       sample_boundary, train_boundary)
from .density import (FlowModel, FlowTrainOptions, GaussianMixture, build_flow, flow_forward,
                      flow_inverse, flow_log_density, train_flow)
from .errors import (BdsgError, ConfigurationError, InversionError, NumericError, ParseError,
                     ShapeError, TrainingAborted, UndefinedMetricError)
from .evaluation import (EvalReport, GridSpec, auprc, auroc, bp1, bp2, dispersion,
                         grid_metrics)

__version__ = "0.1.0"
