from ..metrics import auroc, auroc_from_probs, auroc_pairs, information_quantity, label_entropy, mean_ci
from .report import MetricsReport
from .baselines import Base1Model, Base2Model, train_base1, train_base2
from .experiments import (
    VARIANTS,
    information_report,
    latent_pca_projection,
    missing_rate_sweep,
    pca_2d,
    run_ablation,
    view_count_auroc,
)

__all__ = [
    "Base1Model", "Base2Model", "MetricsReport", "VARIANTS",
    "auroc", "auroc_from_probs", "auroc_pairs", "information_quantity", "information_report",
    "label_entropy", "latent_pca_projection", "mean_ci", "missing_rate_sweep", "pca_2d",
    "run_ablation", "train_base1", "train_base2", "view_count_auroc",
]
