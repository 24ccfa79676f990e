"""Two-tower retrieval training with uniform, in-batch, mixed and cross-batch negatives."""

from ._twotower import (
    ConfigError,
    DataError,
    Dataset,
    Model,
    NumericError,
    all_items_sampled_softmax,
    corrected_logit,
    evaluate,
    feature_drift,
    full_softmax_oracle,
    ndcg_at_k,
    recall_at_k,
    settings_defaults,
    topk_retrieve,
    train,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Dataset",
    "Model",
    "NumericError",
    "all_items_sampled_softmax",
    "corrected_logit",
    "evaluate",
    "feature_drift",
    "full_softmax_oracle",
    "ndcg_at_k",
    "recall_at_k",
    "settings_defaults",
    "topk_retrieve",
    "train",
]
