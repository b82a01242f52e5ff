"""Online censored quantile regression for right-censored data arriving in batches."""

from .core import (
    BetaPath,
    DomainError,
    GammaPath,
    QuantileGrid,
    RecordBatch,
    SubjectRecord,
    counting_indicator,
    eval_path,
    h_transform,
)
from .batch import (
    BatchLossContext,
    SolverError,
    UnboundedLossError,
    batch_loss,
    batch_score,
    fit_batch,
    minimize_batch_level,
)
from .gamma import RelsConfig, per_batch_gamma, rels_gamma
from .variance import CovarianceReport, VarianceAccumulator, combine_covariance, resample_batch_variance
from .online import (
    MmConfig,
    OnlineConfig,
    SummaryState,
    covariance_report,
    ingest_batch,
    ingest_batch_with_diagnostics,
    mm_minimize,
    online_loss,
    online_score,
)
from .kernels import BACKEND

__version__ = "0.1.0"
