"""Learning binary segmentation from multiple noisy annotation sources.

The package trains a small U-shaped segmentation network against several
imperfect annotations per image. A jointly-trained uncertainty estimator
assigns each annotation a per-pixel reliability map that reweights the
segmentation losses; derived calibration maps yield image-level confidence
and agreement scores that route each sample to either the deployed primary
head or an auxiliary head that absorbs low-quality samples.
"""

from .autodiff import DiffArray, ShapeError, Tape
from .corpus import (
    Corpus,
    NoiseSpec,
    Sample,
    apply_noise,
    build_corpus,
    calibrate_noise,
    generate_clean,
    load_corpus,
    majority_vote,
    save_corpus,
)
from .losses import (
    CalibrationSet,
    LossWeights,
    calibration_maps,
    consistency_loss,
    dice_loss,
    sigmoid_ramp,
    total_loss,
    weighted_ce,
    weighted_dice,
)
from .metrics import MetricReport, dice, evaluate_masks, jaccard, surface_distances
from .models import (
    Checkpoint,
    SegBackboneConfig,
    SegmentationNet,
    SegOutput,
    UncertaintyNet,
    UncertaintyNetConfig,
    UncertaintySet,
    load_checkpoint,
    save_checkpoint,
)
from .quality import (
    QualityVerdict,
    agreement_score,
    confidence_score,
    route_sample,
)
from .training import (
    Adam,
    RunRecord,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    run_annotation_count_sweep,
    train_majority_vote,
    train_uncertainty_guided,
)

__version__ = "0.1.0"
