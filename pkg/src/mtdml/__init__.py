"""Multi-threshold deep metric learning on sliced embeddings, in plain numpy."""

from .datagen import ClusterSpec, LabeledDataset, load_csv, split, synth_clusters
from .losses import dual_triplet_loss, softmax_cross_entropy, total_loss, triplet_loss
from .mining import audit_incomplete, batch_hard, mine, plan_batches
from .model import SlicedModel, backward, forward, fuse_embedding, forward_fused, init_model, predict
from .trainer import ThresholdSchedule, make_strategy, sample_thresholds, train

__version__ = "0.1.0"

__all__ = [
    "ClusterSpec", "LabeledDataset", "load_csv", "split", "synth_clusters",
    "dual_triplet_loss", "softmax_cross_entropy", "total_loss", "triplet_loss",
    "audit_incomplete", "batch_hard", "mine", "plan_batches",
    "SlicedModel", "backward", "forward", "fuse_embedding", "forward_fused", "init_model", "predict",
    "ThresholdSchedule", "make_strategy", "sample_thresholds", "train",
]
