import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ghclnet.backbone import BackboneConfig, build_backbone, forward
from ghclnet.cascade import (
    CascadeThresholds,
    ExpertKindMismatch,
    cascade_decide,
    cascade_predict,
)
from ghclnet.datamodel import ExpertKind, LabelClass
from ghclnet.ingestion import ImageTensor

N, S, C = LabelClass.NO_LENS, LabelClass.SOFT_LENS, LabelClass.COSMETIC_LENS
T, L = ExpertKind.TEXTURED_DETECTOR, ExpertKind.LENS_DETECTOR
prob = st.floats(0.0, 1.0)


@pytest.mark.parametrize("pt,pl,label,decider", [
    (0.9, 0.1, C, T),
    (0.9, 0.9, C, T),
    (0.1, 0.9, S, L),
    (0.1, 0.1, N, L),
    (0.5, 0.0, C, T),  # ties go to the positive class
    (0.4999, 0.5, S, L),
])
def test_truth_table(pt, pl, label, decider):
    d = cascade_decide(pt, pl)
    assert (d.label, d.deciding_expert) == (label, decider)
    assert (d.p_textured, d.p_lens) == (pt, pl)


@given(prob, prob, prob)
def test_textured_verdict_ignores_lens_score(pt, pl1, pl2):
    a, b = cascade_decide(pt, pl1), cascade_decide(pt, pl2)
    if pt >= 0.5:
        assert a.label == b.label == C
    else:
        assert C not in (a.label, b.label)


@given(prob, prob, st.floats(0.0, 1.0))
def test_raising_textured_score_never_leaves_cosmetic(pt, pl, bump):
    hi = min(1.0, pt + bump)
    if cascade_decide(pt, pl).label == C:
        assert cascade_decide(hi, pl).label == C


@given(prob, prob, st.floats(0.0, 1.0))
def test_raising_lens_score_below_textured_threshold(pt, pl, bump):
    hi = min(1.0, pl + bump)
    if cascade_decide(pt, pl).label == S:
        assert cascade_decide(pt, hi).label == S


@given(prob, prob, st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_custom_thresholds(pt, pl, tt, tl):
    d = cascade_decide(pt, pl, CascadeThresholds(tt, tl))
    expected = C if pt >= tt else (S if pl >= tl else N)
    assert d.label == expected


@pytest.mark.parametrize("pt,pl", [(-0.1, 0.5), (0.5, 1.2), (math.nan, 0.5), (0.5, math.nan)])
def test_out_of_range_scores(pt, pl):
    with pytest.raises(ValueError):
        cascade_decide(pt, pl)


@pytest.mark.parametrize("tt", [0.0, 1.0, -1.0])
def test_threshold_bounds(tt):
    with pytest.raises(ValueError):
        CascadeThresholds(tt, 0.5)


def test_decision_json():
    assert cascade_decide(0.2, 0.7).to_json() == {
        "label": "soft_lens", "p_textured": 0.2, "p_lens": 0.7, "deciding_expert": "lens",
    }


@pytest.fixture(scope="module")
def experts():
    cfg = BackboneConfig(width_scale=0.25, pretrained=False, seed=2)
    return build_backbone(cfg, T), build_backbone(BackboneConfig(width_scale=0.25, pretrained=False, seed=3), L)


def test_predict_matches_pointwise_rule(experts, rng):
    et, el = experts
    batch = [ImageTensor(rng.normal(0, 1, (224, 224, 3)).astype(np.float32), f"r{i}") for i in range(5)]
    th = CascadeThresholds(0.45, 0.55)
    got = cascade_predict(et, el, batch, th)
    pt, pl = forward(et, batch)[:, 1], forward(el, batch)[:, 1]
    assert got == [cascade_decide(a, b, th) for a, b in zip(pt, pl)]


def test_predict_empty_batch(experts):
    assert cascade_predict(*experts, []) == []


def test_predict_rejects_swapped_experts(experts):
    et, el = experts
    with pytest.raises(ExpertKindMismatch):
        cascade_predict(el, et, [])
    with pytest.raises(ExpertKindMismatch):
        cascade_predict(et, et, [])
