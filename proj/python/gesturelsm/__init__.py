"""GestureLSM desk-scale toolkit: RVQ motion codecs, a speech-conditioned
spatial-temporal generator trained with shortcut flow matching, and the
FGD / beat-constancy / diversity evaluation suite."""

from ._core import (
    Codecs,
    ConfigError,
    CorpusSample,
    FeatureExtractor,
    FlowModel,
    RunConfig,
    ablate_steps,
    bc_gap,
    beat_constancy,
    evaluate,
    fgd,
    filter_split,
    gesture_beats,
    l1_diversity,
    make_corpus,
    parse_config,
    preset,
    preset_names,
    read_corpus,
    sample,
    test_windows,
    train_codecs,
    train_features,
    train_flow,
    write_corpus,
)

__all__ = [
    "Codecs",
    "ConfigError",
    "CorpusSample",
    "FeatureExtractor",
    "FlowModel",
    "RunConfig",
    "ablate_steps",
    "bc_gap",
    "beat_constancy",
    "evaluate",
    "fgd",
    "filter_split",
    "gesture_beats",
    "l1_diversity",
    "make_corpus",
    "parse_config",
    "preset",
    "preset_names",
    "read_corpus",
    "sample",
    "test_windows",
    "train_codecs",
    "train_features",
    "train_flow",
    "write_corpus",
]
