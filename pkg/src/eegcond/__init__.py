"""Target/distractor EEG decoding conditioned on subject profile traits."""
from .analysis import TsneConfig, cluster_report, collect_embeddings, run_tsne, tsne
from .conditioning import ProfileEmbedder, encode_profile, fuse
from .dataset import (Dataset, DatasetError, EffectRule, SubjectProfile, SyntheticSpec,
                      generate_synthetic, load_dataset, oracle_accuracy, save_dataset,
                      split_subjects)
from .models import ModelSpec, build_model, load_checkpoint, save_checkpoint
from .preprocess import PreprocessConfig, preprocess_pipeline
from .training import TrainConfig, ablation_table, evaluate, train

__version__ = "0.1.0"
