"""Distribution-preference counterfactual explanations for dense image classifiers.

The pipeline: fit per-class activation distributions over a classifier's
layers, score class separation per neuron by Wasserstein distance, fold that
into a preference-weighted Mahalanobis metric, solve for the closest feature
vector the head labels as the target class, and invert it to an image through
a trained generator. Four published baselines and a benchmark harness ride
along for comparison.
"""

from .bench import MetricRecord, aggregate, compute_metrics, run_benchmark, run_fit_report
from .data import Dataset, load_idx, load_model, save_idx, save_model, synthesize_digits
from .distributions import FittedDistribution, fit_neuron_distribution, ks_p_value
from .engine import (
    CfResult,
    ExplainContext,
    SolverConfig,
    baseline_cem,
    baseline_min_edit,
    baseline_piece,
    baseline_proto_cf,
    explain,
    invert_latent,
    make_context,
    solve_feature_cf,
)
from .featstat import (
    LayerSelection,
    StatsFile,
    build_stats,
    collect_class_activations,
    load_stats,
    passing_rate,
    save_stats,
    select_feature_layers,
)
from .fusion import FusionConfig, merge_weighted, pool_to_common
from .importance import (
    DpmdMetric,
    ImportanceVector,
    build_importance,
    dpmd_distance,
    estimate_precision,
    wasserstein_1d,
)
from .nn import DenseNet, Layer, check_gradients, init_dense_net
from .targets import TargetChoice, strategy1_distribution, strategy2_proto
from .zoo import (
    GanConfig,
    TrainConfig,
    evaluate_accuracy,
    train_autoencoder,
    train_blackbox,
    train_gan,
)

__version__ = "0.1.0"
