"""Top-down hierarchical classification with inconsistent node flattening."""
from .baselines import CodeBook, ECOCClassifier, ecoc_predict, ecoc_train
from .data import (Dataset, TfidfL2Transformer, parse_svmlight, read_svmlight,
                   split_train_validation, tfidf_l2)
from .inf import (InconsistentNodeFlattening, ThresholdSpec, fstar, select_global_inf,
                  select_level_inf, sweep_psi, threshold)
from .io import Bundle, load_bundle, save_bundle
from .linreg import BinaryLogisticRegression, TrainConfig
from .metrics import (EvaluationReport, evaluate, hier_f1, levelwise_error, macro_f1,
                      micro_f1, tree_error)
from .synthetic import make_planted
from .taxonomy import (FlatteningPlan, Method, Taxonomy, fanout_profile, flatten,
                       level_flatten, load_hierarchy, read_hierarchy)
from .topdown import (FlatLogisticRegression, HierModel, NodeModel, TopDownClassifier,
                      predict_flat, predict_topdown, train_hierarchy)

__version__ = "0.1.0"

__all__ = [
    "BinaryLogisticRegression", "Bundle", "CodeBook", "Dataset", "ECOCClassifier",
    "EvaluationReport", "FlatLogisticRegression", "FlatteningPlan", "HierModel",
    "InconsistentNodeFlattening", "Method", "NodeModel", "Taxonomy",
    "TfidfL2Transformer", "ThresholdSpec", "TopDownClassifier", "TrainConfig",
    "ecoc_predict", "ecoc_train", "evaluate", "fanout_profile", "flatten", "fstar",
    "hier_f1", "level_flatten", "levelwise_error", "load_bundle", "load_hierarchy",
    "macro_f1", "make_planted", "micro_f1", "parse_svmlight", "predict_flat",
    "predict_topdown", "read_hierarchy", "read_svmlight", "save_bundle",
    "select_global_inf", "select_level_inf", "split_train_validation", "sweep_psi",
    "tfidf_l2", "threshold", "train_hierarchy", "tree_error",
]
