from .models import (
    ActivationMap,
    BinaryMask,
    CaseBundle,
    FeatureSchema,
    LabelMap,
    Volume,
    VolumeHeader,
)
from .constants import DEFAULT_SEED, FEATURE_GROUPS, FEATURE_SCHEMA, SCHEMA_VERSION
from .errors import TriageError
from .features import CaseGeometry, ExtractConfig, FeatureTable, FeatureVector, extract_features
from .learn import Ensemble, ModelParams, ensemble_proba, train_model
from .config import RunConfig, resolve_config
from . import evaluation
from . import morphology
from . import phantom
from . import utils
from . import volume_io

__all__ = [
    "ActivationMap",
    "BinaryMask",
    "CaseBundle",
    "FeatureSchema",
    "LabelMap",
    "Volume",
    "VolumeHeader",
    "DEFAULT_SEED",
    "FEATURE_GROUPS",
    "FEATURE_SCHEMA",
    "SCHEMA_VERSION",
    "TriageError",
    "CaseGeometry",
    "ExtractConfig",
    "FeatureTable",
    "FeatureVector",
    "extract_features",
    "Ensemble",
    "ModelParams",
    "ensemble_proba",
    "train_model",
    "RunConfig",
    "resolve_config",
    "evaluation",
    "morphology",
    "phantom",
    "utils",
    "volume_io",
]
