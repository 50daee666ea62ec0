"""Perturbation-guided adversarial alignment for few-shot learning under
support-query shift, at desk scale.

The functional layer lives in the submodules; the estimator classes wrap it
with the usual ``fit`` / ``transform`` / ``predict`` surface.
"""

from pgada.core import (
    DegeneratePlanError,
    DomainError,
    NumericError,
    RngStream,
    ShapeError,
    UsageError,
    finite_diff_grad,
    gaussian_sample,
    pairwise_sq_dist,
)
from pgada.transport import (
    SinkhornTransport,
    TransportPlan,
    barycentric_map,
    exact_ot_small,
    sinkhorn,
    wasserstein_estimate,
)
from pgada.episodes import (
    Episode,
    EvalConfig,
    FeatureNormalizer,
    MatchingClassifier,
    PrototypeClassifier,
    ShiftSpec,
    evaluate_episode,
    gen_task,
    matching_classify,
    normalize_features,
    proto_classify,
)
from pgada.diffnet import ModelStack
from pgada.experiments import (
    PGADA,
    RunReport,
    TrainConfig,
    aggregate_ci,
    run_ablation_suite,
    train_pgada,
    verify_lemma1,
    verify_theorem1,
)

__version__ = "0.1.0"
