from .correlation import (
    AnnotationFile,
    DegenerateCorrelation,
    average_ranks,
    meta_eval,
    meta_eval_repeated,
    read_annotations,
    spearman,
)
from .metrics import (
    METRIC_FIELDS,
    EvaluationError,
    ImageMetric,
    ImageMetricResult,
    IncompleteReport,
    MetricReport,
    MetricValue,
    eval_context_precision,
    eval_faithfulness,
    eval_fluency,
    eval_image_metric,
    eval_image_recall,
    eval_relevance,
    evaluate_response,
    overall_score,
    parse_claims,
    proportion,
    round_half_up,
    slot_contexts,
)
from .training import TRAINING_METRICS, TrainingCandidate, export_training, filter_training_samples, training_row

__all__ = [
    "AnnotationFile",
    "DegenerateCorrelation",
    "EvaluationError",
    "ImageMetric",
    "ImageMetricResult",
    "IncompleteReport",
    "METRIC_FIELDS",
    "MetricReport",
    "MetricValue",
    "TRAINING_METRICS",
    "TrainingCandidate",
    "average_ranks",
    "eval_context_precision",
    "eval_faithfulness",
    "eval_fluency",
    "eval_image_metric",
    "eval_image_recall",
    "eval_relevance",
    "evaluate_response",
    "export_training",
    "filter_training_samples",
    "meta_eval",
    "meta_eval_repeated",
    "overall_score",
    "parse_claims",
    "proportion",
    "read_annotations",
    "round_half_up",
    "slot_contexts",
    "spearman",
    "training_row",
]
