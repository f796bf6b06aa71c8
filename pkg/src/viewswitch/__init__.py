"""Weakly supervised ego/exo view-switch detection and best-view selection."""

from .data import (
    NarrationSegment,
    Sample,
    SelectorSample,
    VideoRecord,
    ViewKind,
    ViewLabel,
    ViewSpan,
    WindowConfig,
    build_detection_samples,
    build_selector_samples,
    extract_sample,
    extract_selector_sample,
    load_manifest,
    narration_view,
    write_manifest,
)
from .detector import (
    AggregatorConfig,
    DetectorTrainConfig,
    HeadConfig,
    PredictMode,
    Prediction,
    TrainSettings,
    ViewPredictor,
    load_checkpoint,
    loss_detector,
    predict_sequence,
    save_checkpoint,
    train_detector,
)
from .encoders import (
    EncoderBank,
    EncoderBankConfig,
    InputMask,
    TokenRole,
    TokenSequence,
    assemble_tokens,
    build_vocab,
)
from .metrics import (
    AnnotationInstance,
    EvalReport,
    auc,
    average_precision,
    balanced_report,
    cohen_kappa,
    filter_instances,
    significance,
)
from .pseudolabel import (
    PseudoLabelMode,
    PseudoLabelSet,
    Shot,
    detect_shots,
    label_shot,
    pseudo_label_video,
)
from .selector import (
    JointFinetuneConfig,
    LimitedLabelSet,
    finetune_selector,
    init_from_detector,
    narration_pseudo_label,
)
from .synth import SwitchGrammar, generate_corpus

__version__ = "0.1.0"
