"""modguard: detector + classifier NSFW moderation ensemble and its evaluation tools."""

__version__ = "0.1.0"

from .backends import (  # noqa: E402
    BackendDescriptor, RecordedBackend, RecordingBackend, SyntheticClassifier, SyntheticDetector,
    image_digest, invoke, record, synthesize_detector_output,
)
from .classifier import (  # noqa: E402
    ClassScores, LabeledSample, LinearHead, LossWeights, OptimizerConfig, ScoreMode,
    loss_gradient, precision_recall_dial, sigmoid_scores, softmax_scores, train_toy,
    weighted_bce_loss,
)
from .detector import (  # noqa: E402
    AnchorConfig, BodyPartClass, BoundingBox, Detection, count_distinct_people, decode_boxes,
    detect, generate_anchors, iou, nms,
)
from .imageops import (  # noqa: E402
    ImageTensor, LetterboxTransform, crop, decode_image, gaussian_blur, resize_antialias,
    resize_letterbox, rotate,
)
from .labels import Label  # noqa: E402
from .metrics import (  # noqa: E402
    ConfusionCounts, DatasetManifest, MetricsReport, average_precision, confusion, evaluate, f1,
    fpr, mean_average_precision, precision, recall,
)
from .pipeline import (  # noqa: E402
    EnsembleVerdict, Pipeline, PipelineConfig, Route, iter_scan, run_pipeline, scan_batch,
)
