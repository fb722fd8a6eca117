from medimp.downstream.evaluate import (
    EvalReport,
    HorizonScores,
    build_sequences,
    encoder_from_checkpoint,
    evaluate_downstream,
    extract_embeddings,
    kfold_split,
    shuffled_label_control,
    untrained_encoder,
)
from medimp.downstream.labels import build_creat_label, horizon_labels
from medimp.downstream.metrics import f1_score, roc_auc
from medimp.downstream.sequence import ExamSequence, SequenceHead, sequence_forward

__all__ = [
    "EvalReport",
    "ExamSequence",
    "HorizonScores",
    "SequenceHead",
    "build_creat_label",
    "build_sequences",
    "encoder_from_checkpoint",
    "evaluate_downstream",
    "extract_embeddings",
    "f1_score",
    "horizon_labels",
    "kfold_split",
    "roc_auc",
    "sequence_forward",
    "shuffled_label_control",
    "untrained_encoder",
]
