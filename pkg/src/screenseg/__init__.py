"""Classifier pre-screening in front of a segmentation network, trained from
three-rater labels, with the matching evaluation protocol."""

from .losses import bce, class_weights, dice_bce, dice_loss, soft_dice, w_bce
from .models import SegNetSpec, ClassifierSpec, build_classifier, build_segmenter, normalize_frame
from .sampling import (
    LabelStrategy,
    frame_consensus_positive,
    sample_combination,
    sample_labels,
    sample_mean,
    sample_random,
    sample_vote,
)
from .screen_eval import dice_coefficient, evaluate, pipeline_predict, screen_frame, threshold_sweep, welch_t_test
from .synthdata import PhantomConfig, generate_dataset, generate_frames, load_dataset, simulate_raters
from .train import (
    AugmentationConfig,
    EnsembleModel,
    TrainConfig,
    augment,
    ensemble_predict,
    kfold_split,
    train_classifier,
    train_segmenter,
)

__version__ = "0.1.0"
