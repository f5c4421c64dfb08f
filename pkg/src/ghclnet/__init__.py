"""Hierarchical two-expert contact-lens detection on a residual backbone."""

from .backbone import (
    FULL_POLICY,
    STAGE3_5_POLICY,
    SMALL_DATA_POLICY,
    BackboneConfig,
    ExpertModel,
    FreezePolicy,
    apply_freeze,
    build_backbone,
    extract_activations,
    feature_shapes,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .cascade import CascadeDecision, CascadeThresholds, cascade_decide, cascade_predict
from .datamodel import (
    BinaryLabel,
    DatasetManifest,
    ExpertKind,
    LabelClass,
    SampleRecord,
    Split,
    load_manifest,
    relabel_for_expert,
    save_manifest,
    validate_manifest,
)
from .evaluation import (
    CCRReport,
    ConfusionMatrix,
    ProtocolKind,
    ProtocolSpec,
    build_protocol_splits,
    compute_ccr,
    evaluate,
    render_report,
    run_protocol,
)
from .ingestion import ImageTensor, SynthSpec, prepare_input, synth_generate
from .training import OptimizerConfig, TrainConfig, make_batches, train_expert

__version__ = "0.1.0"
