"""Self-similarity grouping for unsupervised cross-domain identity matching."""

from .embedder import EmbedderConfig, embed_grids, forward, forward_batch, backward
from .evaluation import cmc_map, evaluate, rank_gallery, test_features
from .grouping import DbscanConfig, build_label_table, dbscan, select_eps
from .losses import (TripletConfig, loss_baseline, loss_jointly, loss_semi, loss_ssg,
                     pk_sample, softmax_ce, triplet_batch_hard)
from .pipeline import (Adam, PipelineConfig, TrainConfig, annotate, assign_semi_labels,
                       direct_transfer_eval, pretrain, run_semi, run_ssg, ssg_iteration,
                       stepwise_schedule)
from .reranking import KReciprocalConfig, k_reciprocal_jaccard, nearest_dictionary_assign, pairwise_euclidean
from .synth import SynthSpec, generate
from .types import (Dataset, DistanceMatrix, FeatureViews, LabelTable, ModelParams, Sample,
                    load_dataset, save_dataset, validate_dataset)

__version__ = "0.1.0"
