from .models import FeatureSchema, FeatureSpec
from typing import Dict, List, Tuple

SCHEMA_VERSION = "1"

DEFAULT_SEED = 1234
""" int: seed used whenever none is configured; runs are reproducible by default. """

DEFAULT_FOLDS = 5

# (token, lungs label values, lobes label values); an empty lobes tuple means any lobe
ANATOMICAL_STRUCTURES: List[Tuple[str, Tuple[int, ...], Tuple[int, ...]]] = [
    ("lungs", (1, 2), ()),
    ("left_lung", (1,), ()),
    ("right_lung", (2,), ()),
    ("lobe1", (1, 2), (1,)),
    ("lobe2", (1, 2), (2,)),
    ("lobe3", (1, 2), (3,)),
    ("lobe4", (1, 2), (4,)),
    ("lobe5", (1, 2), (5,)),
]
""" List: the 8 anatomical structures; lobes are always restricted to the lungs mask. """

STRUCTURE_TOKENS: List[str] = [s[0] for s in ANATOMICAL_STRUCTURES]

# name -> (lower, upper, lower_inclusive); upper bound is always inclusive
HU_WINDOWS: Dict[str, Tuple[int, int, bool]] = {
    "low": (-1000, -950, True),
    "functional": (-950, -600, False),
    "high": (-600, -250, False),
}

HU_CLIP_RANGE: Tuple[int, int] = (-1000, 0)

TEXTURE_CLASSES: Dict[str, int] = {"GGO": 1, "consolidation": 2}
""" Dict[str, int]: texture label-map value per opacity class. """

GROUP_LUNGS = "LungsStats"
GROUP_OPACITY = "OpacityStats"
GROUP_TEXTURE = "OpacityTexture"
GROUP_SHAPE = "ShapeLocation"

FEATURE_GROUPS: List[str] = [GROUP_LUNGS, GROUP_OPACITY, GROUP_TEXTURE, GROUP_SHAPE]

GROUP_ABLATION_LABELS: Dict[str, str] = {
    GROUP_LUNGS: "W/O Lungs statistics",
    GROUP_OPACITY: "W/O Opacities statistics",
    GROUP_TEXTURE: "W/O Opacities texture",
    GROUP_SHAPE: "W/O Location & Shape",
}

GROUP_ALIASES: Dict[str, str] = {
    "lungs": GROUP_LUNGS,
    "lungsstats": GROUP_LUNGS,
    "opacity": GROUP_OPACITY,
    "opacitystats": GROUP_OPACITY,
    "texture": GROUP_TEXTURE,
    "opacitytexture": GROUP_TEXTURE,
    "shape": GROUP_SHAPE,
    "location": GROUP_SHAPE,
    "shapelocation": GROUP_SHAPE,
}
""" Dict[str, str]: lower-case names accepted by --mask-group besides the group names. """

MODEL_LABELS: Dict[str, str] = {"adaboost-dt": "AdaBoost - DT", "rf": "RF"}

DEFAULT_KDE_FEATURES: List[str] = [
    "pos_ratio",
    "GGO_total_ratio",
    "peripheral_ratio",
    "activation_sum",
]


def resolve_group(name: str) -> str:
    if name in FEATURE_GROUPS:
        return name
    key = name.replace("_", "").replace("-", "").replace(" ", "").lower()
    if key in GROUP_ALIASES:
        return GROUP_ALIASES[key]
    raise KeyError(f"Unknown feature group {name!r}; expected one of {FEATURE_GROUPS}")


def initialize_feature_schema() -> FeatureSchema:
    features: List[FeatureSpec] = []

    for token in STRUCTURE_TOKENS:
        features.append(FeatureSpec(f"{token}_volume", GROUP_LUNGS))
    for token in STRUCTURE_TOKENS:
        for window in HU_WINDOWS:
            features.append(FeatureSpec(f"{token}_{window}_hu_volume", GROUP_LUNGS))
            features.append(FeatureSpec(f"{token}_{window}_hu_ratio", GROUP_LUNGS))

    for token in STRUCTURE_TOKENS:
        features.append(FeatureSpec(f"{token}_opacity_volume", GROUP_OPACITY))
        features.append(FeatureSpec(f"{token}_opacity_ratio", GROUP_OPACITY))
    features.append(FeatureSpec("pos_ratio", GROUP_OPACITY))
    features.append(FeatureSpec("activation_sum", GROUP_OPACITY))
    features.append(FeatureSpec("activation_volume_weighted", GROUP_OPACITY))

    for texture in TEXTURE_CLASSES:
        for token in STRUCTURE_TOKENS:
            name = "total" if token == "lungs" else token
            features.append(FeatureSpec(f"{texture}_{name}_volume", GROUP_TEXTURE))
            features.append(FeatureSpec(f"{texture}_{name}_ratio", GROUP_TEXTURE))
    for texture in TEXTURE_CLASSES:
        features.append(FeatureSpec(f"{texture}_dominance", GROUP_TEXTURE))

    features.append(FeatureSpec("focal_GGO", GROUP_SHAPE, "binary"))
    features.append(FeatureSpec("unilateral_left", GROUP_SHAPE, "binary"))
    features.append(FeatureSpec("unilateral_right", GROUP_SHAPE, "binary"))
    features.append(FeatureSpec("bilateral", GROUP_SHAPE, "binary"))
    features.append(FeatureSpec("peripheral_ratio", GROUP_SHAPE))

    return FeatureSchema(tuple(features), SCHEMA_VERSION)


FEATURE_SCHEMA = initialize_feature_schema()
""" FeatureSchema: the 114 clinical features in extraction order (56 + 19 + 34 + 5). """
