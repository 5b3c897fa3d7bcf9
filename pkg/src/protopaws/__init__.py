"""Frozen-backbone semi-supervised learning on precomputed embedding datasets."""

from .dataset import (EmbeddingDataset, ViewBatch, load_dataset, load_manifest,
                      sample_view_batch, save_dataset, save_manifest,
                      subset_dataset)
from .errors import (ConfigError, ContractError, FormatError, NumericError,
                     ProtopawsError)
from .estimators import (PawsClassifier, PrototypeSelector, VmfSneProjector,
                         WeightedKnnClassifier)
from .history import TrainHistory
from .knn import KnnConfig, evaluate_knn, knn_predict
from .nn import (HeadGrads, LarsState, LrSchedule, ProjectionHead,
                 backward_gradients, forward_project, init_head, lars_update,
                 load_head, lr_at, make_warmup_cosine, save_head, softmax)
from .paws import (PawsConfig, PawsLossResult, PrototypeSet, joint_sharpen,
                   paws_loss, predict_classes, prototype_accuracy, sharpen,
                   smooth_labels, stratified_batch, train_paws)
from .selection import (KMeansResult, SelectionReport, class_coverage,
                        coverage_bench, lloyd_kmeans, random_select,
                        select_prototypes, simple_kmeans_select,
                        usl_lite_select)
from .synth import MixtureSpec, gen_mixture, sample_vmf, sample_vmf_many
from .vmfsne import (KappaResult, PMatrix, QMatrix, VmfSneConfig, bisect_kappa,
                     build_p_matrix, build_q_matrix, kl_loss, kl_loss_and_grad,
                     pretrain_vmfsne)

__version__ = "0.1.0"

__all__ = [
    "EmbeddingDataset", "ViewBatch", "load_dataset", "save_dataset",
    "load_manifest", "save_manifest", "subset_dataset", "sample_view_batch",
    "ProtopawsError", "ConfigError", "ContractError", "FormatError", "NumericError",
    "ProjectionHead", "HeadGrads", "LarsState", "LrSchedule",
    "init_head", "forward_project", "backward_gradients", "lars_update",
    "lr_at", "make_warmup_cosine", "softmax", "save_head", "load_head",
    "VmfSneConfig", "PMatrix", "QMatrix", "KappaResult", "bisect_kappa",
    "build_p_matrix", "build_q_matrix", "kl_loss", "kl_loss_and_grad",
    "pretrain_vmfsne",
    "PawsConfig", "PawsLossResult", "PrototypeSet", "sharpen", "joint_sharpen",
    "predict_classes", "paws_loss", "smooth_labels", "stratified_batch",
    "train_paws", "prototype_accuracy",
    "KMeansResult", "SelectionReport", "lloyd_kmeans", "simple_kmeans_select",
    "usl_lite_select", "random_select", "class_coverage", "select_prototypes",
    "coverage_bench",
    "KnnConfig", "knn_predict", "evaluate_knn",
    "MixtureSpec", "gen_mixture", "sample_vmf", "sample_vmf_many",
    "TrainHistory",
    "VmfSneProjector", "PawsClassifier", "WeightedKnnClassifier",
    "PrototypeSelector",
]
