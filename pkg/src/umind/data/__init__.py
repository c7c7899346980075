from .io import default_montage, load_channel_groups, load_trialset, save_trialset
from .preprocess import (
    Whitener,
    average_repetitions,
    baseline_correct,
    crop_time_window,
    downsample,
    noise_normalize,
    preprocess,
    select_channels,
)
from .synthetic import SyntheticOracle, generate_synthetic
from .types import (
    ChannelGroupMap,
    NeuralTrial,
    PreprocessConfig,
    StimulusRecord,
    SyntheticSpec,
    TrialSet,
    check_zero_shot,
)
