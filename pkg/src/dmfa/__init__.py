"""Bayesian deep mixtures of factor analyzers for high-dimensional
clustering: sparsity-inducing shrinkage priors, a closed-form variational
bound optimized by stochastic natural gradients, overfitted-mixture
pruning, and short-run architecture selection."""

from .data_io import (
    ScenarioSpec,
    Trajectory,
    canonicalize_direction,
    generate_scenario,
    load_csv,
    resample_trajectory,
    save_csv,
    standardize_rows,
)
from .metrics import (
    adjusted_mutual_information,
    adjusted_rand_index,
    misclassification_rate,
)
from .model import (
    Architecture,
    Dataset,
    DmfaParams,
    GmmComponent,
    arch_to_string,
    assign_clusters,
    cluster_scores,
    collapse_to_gmm,
    log_density,
    parse_arch_string,
    sample_dataset,
    validate_architecture,
)
from .optimizer import (
    FitConfig,
    FitResult,
    FitTrace,
    draw_minibatch,
    estimate_gradient,
    fit,
    load_checkpoint,
    save_checkpoint,
)
from .selection import (
    enumerate_architectures,
    prune_components,
    score_architecture,
    select_model,
)
from .variational import (
    GlobalFactorSet,
    LocalFactorSet,
    PriorHyperparams,
    elbo,
    init_variational,
    local_step,
    point_estimates,
    update_global_factor,
    update_local_categorical,
)

__version__ = "0.1.0"
