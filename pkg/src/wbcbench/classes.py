"""Class codes, dataset tags and the published dataset statistics."""
from __future__ import annotations

from enum import Enum, IntEnum
from typing import Dict, Tuple


class WbcClass(IntEnum):
    # Codes are frozen: serialized reports from different runs must stay comparable.
    LYMPHOCYTE = 0
    MONOCYTE = 1
    NEUTROPHIL = 2
    EOSINOPHIL = 3
    BASOPHIL = 4

    @classmethod
    def parse(cls, value: str) -> "WbcClass":
        try:
            return cls[value.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown WBC class: {value!r}") from None

    @property
    def short(self) -> str:
        return _SHORT_NAMES[self]


_SHORT_NAMES = {
    WbcClass.LYMPHOCYTE: "Lymp.",
    WbcClass.MONOCYTE: "Mono.",
    WbcClass.NEUTROPHIL: "Neut.",
    WbcClass.EOSINOPHIL: "Eos.",
    WbcClass.BASOPHIL: "Bas.",
}

NUM_CLASSES = len(WbcClass)


class DatasetTag(str, Enum):
    RAABIN_TRAIN = "RAABIN_TRAIN"
    RAABIN_TEST_A = "RAABIN_TEST_A"
    RAABIN_TEST_B = "RAABIN_TEST_B"
    LISC = "LISC"
    SYNTH_SOURCE = "SYNTH_SOURCE"
    SYNTH_SHIFTED = "SYNTH_SHIFTED"


class RaabinSplit(str, Enum):
    TRAIN = "TRAIN"
    TEST_A = "TEST_A"
    TEST_B = "TEST_B"

    @property
    def tag(self) -> DatasetTag:
        return {
            RaabinSplit.TRAIN: DatasetTag.RAABIN_TRAIN,
            RaabinSplit.TEST_A: DatasetTag.RAABIN_TEST_A,
            RaabinSplit.TEST_B: DatasetTag.RAABIN_TEST_B,
        }[self]


def _counts(lymph: int, mono: int, neut: int, eos: int, bas: int) -> Dict[WbcClass, int]:
    return {
        WbcClass.LYMPHOCYTE: lymph,
        WbcClass.MONOCYTE: mono,
        WbcClass.NEUTROPHIL: neut,
        WbcClass.EOSINOPHIL: eos,
        WbcClass.BASOPHIL: bas,
    }


EXPECTED_COUNTS: Dict[DatasetTag, Dict[WbcClass, int]] = {
    DatasetTag.RAABIN_TRAIN: _counts(2427, 561, 6231, 744, 212),
    DatasetTag.RAABIN_TEST_A: _counts(1034, 234, 2660, 322, 89),
    DatasetTag.RAABIN_TEST_B: _counts(148, 0, 1971, 0, 0),
    DatasetTag.LISC: _counts(59, 48, 56, 39, 55),
}

# One color per class, indexed by class code.
CLASS_COLORS: Tuple[Tuple[float, float, float], ...] = (
    (0.12157, 0.46667, 0.70588),
    (1.00000, 0.49804, 0.05490),
    (0.17255, 0.62745, 0.17255),
    (0.83922, 0.15294, 0.15686),
    (0.58039, 0.40392, 0.74118),
)

# CLI spelling of evaluation datasets.
DATASET_ALIASES: Dict[str, DatasetTag] = {
    "raabin-train": DatasetTag.RAABIN_TRAIN,
    "raabin-a": DatasetTag.RAABIN_TEST_A,
    "raabin-b": DatasetTag.RAABIN_TEST_B,
    "lisc": DatasetTag.LISC,
    "synth-source": DatasetTag.SYNTH_SOURCE,
    "synth-shifted": DatasetTag.SYNTH_SHIFTED,
}
