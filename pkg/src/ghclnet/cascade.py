"""Hierarchical fusion of the two experts into a three-class verdict."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .backbone import ExpertModel, forward
from .datamodel import ExpertKind, LabelClass
from .ingestion import ImageTensor


@dataclass(frozen=True)
class CascadeThresholds:
    t_textured: float = 0.5
    t_lens: float = 0.5

    def __post_init__(self):
        for name in ("t_textured", "t_lens"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass(frozen=True)
class CascadeDecision:
    label: LabelClass
    p_textured: float
    p_lens: float
    deciding_expert: ExpertKind

    def to_json(self) -> dict:
        return {
            "label": self.label.value,
            "p_textured": self.p_textured,
            "p_lens": self.p_lens,
            "deciding_expert": self.deciding_expert.value,
        }


def _check_prob(name: str, p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:  # also rejects NaN
        raise ValueError(f"{name} must be a probability in [0, 1], got {p}")
    return p


def cascade_decide(p_textured: float, p_lens: float,
                   th: CascadeThresholds = CascadeThresholds()) -> CascadeDecision:
    """Textured expert first; the lens expert only decides non-textured inputs.

    A score exactly at its threshold counts as positive.
    """
    p_textured = _check_prob("p_textured", p_textured)
    p_lens = _check_prob("p_lens", p_lens)
    if p_textured >= th.t_textured:
        return CascadeDecision(LabelClass.COSMETIC_LENS, p_textured, p_lens, ExpertKind.TEXTURED_DETECTOR)
    label = LabelClass.SOFT_LENS if p_lens >= th.t_lens else LabelClass.NO_LENS
    return CascadeDecision(label, p_textured, p_lens, ExpertKind.LENS_DETECTOR)


class ExpertKindMismatch(ValueError):
    pass


def cascade_predict(expert_t: ExpertModel, expert_l: ExpertModel, batch: Sequence[ImageTensor],
                    th: CascadeThresholds = CascadeThresholds()) -> list[CascadeDecision]:
    if expert_t.kind != ExpertKind.TEXTURED_DETECTOR or expert_l.kind != ExpertKind.LENS_DETECTOR:
        raise ExpertKindMismatch(
            f"expected (textured, lens) experts, got ({expert_t.kind.value}, {expert_l.kind.value})"
        )
    if len(batch) == 0:
        return []
    # both experts see every input, even where the lens score goes unused
    pt = forward(expert_t, batch)[:, 1]
    pl = forward(expert_l, batch)[:, 1]
    return [cascade_decide(a, b, th) for a, b in zip(pt, pl)]
