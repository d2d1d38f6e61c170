from .blocks import (
    ANet,
    ConvSet,
    DilatedResidualBlock,
    JPU,
    MixedDepthwiseConv,
    SELayer,
    attention_combine,
    receptive_field,
    split_channels,
)
from .classifier import DRN, Classifier, MixNet, build_classifier, classifier_forward, n_parameters
from .config import (
    Arch,
    ClassifierConfig,
    MixStage,
    Scale,
    SegmenterConfig,
    TensorSpec,
    classifier_config_from_dict,
    classifier_preset,
    config_hash,
    segmenter_config_from_dict,
    segmenter_preset,
)
from .segmenter import ARUXNet, build_segmenter, segmenter_forward
