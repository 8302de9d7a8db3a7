"""
Enumerations shared by schemas, models and services.
"""

from enum import Enum

from protoguard.utils.aliases import EnumAliasMapper


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class Axis(str, Enum):
    HEIGHT = "height"
    WIDTH = "width"


class AttentionLayout(str, Enum):
    """How the two axial attentions of a block are combined."""
    PARALLEL = "parallel"
    STACKED = "stacked"


class VariantName(str, Enum):
    XS = "XS"
    S = "S"
    M = "M"
    L = "L"


class TransformKind(str, Enum):
    IDENTITY = "identity"
    HORIZONTAL_FLIP = "horizontal_flip"
    CROP_RESIZE = "crop_resize"
    ROTATION = "rotation"
    COLOR_JITTER = "color_jitter"
    GRAYSCALE = "grayscale"
    GAUSSIAN_NOISE = "gaussian_noise"


class PairSelection(str, Enum):
    ADVERSARIAL = "adversarial"
    UNIFORM = "uniform"


class ContrastiveObjective(str, Enum):
    PM = "pm"
    INFONCE = "infonce"


class LossTerm(str, Enum):
    PM = "pm"
    PCE = "pce"
    ICL = "icl"


class AttackAlgorithm(str, Enum):
    FGSM = "fgsm"
    PGD = "pgd"
    BIM = "bim"
    DEEPFOOL = "deepfool"
    CW = "cw"
    JSMA = "jsma"


class Verdict(str, Enum):
    CLEAN = "clean"
    ATTACKED = "attacked"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Shape(str, Enum):
    CIRCLE = "circle"
    SQUARE = "square"
    TRIANGLE = "triangle"
    CROSS = "cross"


attack_algorithm_mapper = EnumAliasMapper(
    AttackAlgorithm,
    {
        "c&w": "cw",
        "carlini-wagner": "cw",
        "cw-l2": "cw",
        "deep-fool": "deepfool",
        "i-fgsm": "bim",
        "basic-iterative": "bim",
        "projected-gradient-descent": "pgd",
        "saliency-map": "jsma",
    },
)

transform_kind_mapper = EnumAliasMapper(
    TransformKind,
    {
        "flip": "horizontal_flip",
        "hflip": "horizontal_flip",
        "random-crop-resize": "crop_resize",
        "crop": "crop_resize",
        "rotate": "rotation",
        "jitter": "color_jitter",
        "gray": "grayscale",
        "noise": "gaussian_noise",
    },
)

verdict_mapper = EnumAliasMapper(Verdict, {"adversarial": "attacked", "adv": "attacked"})
