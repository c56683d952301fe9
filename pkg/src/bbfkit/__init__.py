"""bbfkit: linear-complexity block basis factorization of kernel matrices,
with Nystrom-family baselines and spectral diagnostics."""

from .analysis import SpectralStats, relative_error, spectral_stats
from .baselines import (
    LowRankFactor,
    leverage_scores_exact,
    nystrom_kmeans,
    nystrom_leverage,
    nystrom_uniform,
    rks_features,
    truncated_svd_baseline,
)
from .bbf import (
    BBFactorization,
    RankProfile,
    build_bbf,
    derive_seed,
    estimate_frobenius,
    estimate_ranks,
    fixed_rank_profile,
    inner_from_samples,
    load_bbf,
    memory_cost,
    save_bbf,
    select_k,
)
from .cluster import Clustering, kcenter_farthest, kmeans, permute_vector
from .colsample import SampleResult, sample_columns
from .data import DataMatrix, load_csv, standardize, synth_blobs
from .kernels import (
    GAUSSIAN,
    LAPLACIAN,
    KernelAccessor,
    KernelSpec,
    envelope,
    eval_kernel,
    kernel_block,
    kernel_cross,
)
from .rla import (
    SVDResult,
    exact_svd,
    pinv_truncated,
    pivot_columns_qr,
    pivot_rows_lq,
    randomized_svd,
)

__version__ = "0.1.0"

__all__ = [
    "BBFactorization",
    "Clustering",
    "DataMatrix",
    "GAUSSIAN",
    "KernelAccessor",
    "KernelSpec",
    "LAPLACIAN",
    "LowRankFactor",
    "RankProfile",
    "SVDResult",
    "SampleResult",
    "SpectralStats",
    "build_bbf",
    "derive_seed",
    "envelope",
    "estimate_frobenius",
    "estimate_ranks",
    "eval_kernel",
    "exact_svd",
    "fixed_rank_profile",
    "inner_from_samples",
    "kcenter_farthest",
    "kernel_block",
    "kernel_cross",
    "kmeans",
    "leverage_scores_exact",
    "load_bbf",
    "load_csv",
    "memory_cost",
    "nystrom_kmeans",
    "nystrom_leverage",
    "nystrom_uniform",
    "permute_vector",
    "pinv_truncated",
    "pivot_columns_qr",
    "pivot_rows_lq",
    "randomized_svd",
    "relative_error",
    "rks_features",
    "sample_columns",
    "save_bbf",
    "select_k",
    "spectral_stats",
    "standardize",
    "synth_blobs",
    "truncated_svd_baseline",
    "__version__",
]
