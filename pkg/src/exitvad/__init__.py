"""Joint voice-activity and overlapped-speech detection with a multi-exit
CRNN over raw waveforms: model, joint distillation loss, data pipeline,
training loop, sliding-window inference, and detection metrics."""

from .data import (
    ChunkSample,
    ManifestEntry,
    SegmentAnnotation,
    apply_augmentation,
    frame_labels,
    label_histogram,
    load_manifest,
    load_rttm,
    make_chunks,
    parse_rttm,
    read_wav,
    synth_mix,
    write_manifest,
    write_rttm,
    write_wav,
)
from .inference import (
    FramePrediction,
    InferenceConfig,
    SegmentOutput,
    Vote,
    frames_to_segments,
    majority_vote,
    predict_chunk,
    predict_recording,
)
from .losses import (
    ClassWeights,
    LossBreakdown,
    LossWeights,
    class_weights_from_histogram,
    ensemble_teacher,
    joint_loss,
    weighted_cross_entropy,
)
from .metrics import (
    DetectionReport,
    ExitRateReport,
    detection_metrics,
    exit_rates,
    render_report,
)
from .model import (
    CheckpointError,
    ConfigError,
    ExitOutputs,
    ModelConfig,
    MultiExitCRNN,
    build_model,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    EpochRecord,
    FitResult,
    PlateauScheduler,
    TrainConfig,
    evaluate_dev,
    fit,
)

__version__ = "0.1.0"
