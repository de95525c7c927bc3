from .app import DDFusionApp
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    DDFusionError,
    ImageIOError,
    InvalidInputError,
    NumericError,
)
from .models import BlockConfig, DegradationSpec, LossWeights, PathsConfig, ProjectConfig, TrainConfig
