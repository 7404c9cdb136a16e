"""Dataset loading, synthetic testbeds and client partitioning."""

from .datasets import (CsvSchema, Dataset, load_csv, load_idx, load_uci_credit, read_idx,
                       standardize, stratified_holdout)
from .splits import (ShardAssignment, SplitSpec, dirichlet_split, homogeneous_split,
                     largest_remainder, make_split, uci_credit_fixed_split)
from .synthetic import (BlobsSpec, QuadraticClientsSpec, QuadraticLoss, gaussian_blobs,
                        generate_synthetic, quadratic_clients, quadratic_optimum, rescaled)

__all__ = [
    "BlobsSpec", "CsvSchema", "Dataset", "QuadraticClientsSpec", "QuadraticLoss",
    "ShardAssignment", "SplitSpec", "dirichlet_split", "gaussian_blobs", "generate_synthetic",
    "homogeneous_split", "largest_remainder", "load_csv", "load_idx", "load_uci_credit",
    "make_split", "quadratic_clients", "quadratic_optimum", "read_idx", "rescaled", "standardize",
    "stratified_holdout", "uci_credit_fixed_split",
]
