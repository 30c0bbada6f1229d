import itertools
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from exitvad import build_model
from exitvad.data import frame_labels, SegmentAnnotation
from exitvad.inference import (
    InferenceConfig,
    Vote,
    frames_to_segments,
    majority_exit,
    majority_vote,
    predict_chunk,
    predict_recording,
    select_exits,
)

from conftest import toy_config

TOY_WINDOW_S = 0.3  # toy models run on 0.3 s / 10-frame chunks


def toy_inference(**overrides) -> InferenceConfig:
    base = dict(mode="normal", hop_s=0.09, window_s=TOY_WINDOW_S)
    base.update(overrides)
    return InferenceConfig(**base)


def constant_class_model(label: int):
    """Tiny model whose every exit predicts `label` with high confidence."""
    model = build_model(toy_config(), seed=0)
    with torch.no_grad():
        for head in model.heads:
            head.classify.weight.zero_()
            head.classify.bias.zero_()
            head.classify.bias[label] = 10.0
    return model.eval()


# ---------------------------------------------------------------------------
# exit selection policy
# ---------------------------------------------------------------------------

def test_confident_first_exit_wins():
    probs = np.zeros((1, 3, 1, 3))
    probs[0, 0, 0] = [0.95, 0.03, 0.02]
    probs[0, 1, 0] = [0.2, 0.5, 0.3]
    probs[0, 2, 0] = [0.1, 0.1, 0.8]
    labels, exits, conf = select_exits(probs, toy_inference(mode="exiting", gamma=0.9))
    assert labels[0, 0] == 0 and exits[0, 0] == 1
    assert conf[0, 0] == pytest.approx(0.95)


def test_unconfident_exits_fall_through_to_final():
    probs = np.zeros((1, 3, 1, 3))
    probs[0, 0, 0] = [0.5, 0.3, 0.2]
    probs[0, 1, 0] = [0.6, 0.2, 0.2]
    probs[0, 2, 0] = [0.1, 0.2, 0.7]
    labels, exits, _ = select_exits(probs, toy_inference(mode="exiting", gamma=0.9))
    assert labels[0, 0] == 2 and exits[0, 0] == 3


def test_middle_exit_can_take_the_decision():
    probs = np.zeros((1, 3, 1, 3))
    probs[0, 0, 0] = [0.5, 0.3, 0.2]
    probs[0, 1, 0] = [0.02, 0.95, 0.03]
    probs[0, 2, 0] = [0.1, 0.2, 0.7]
    labels, exits, _ = select_exits(probs, toy_inference(mode="exiting", gamma=0.9))
    assert labels[0, 0] == 1 and exits[0, 0] == 2


def test_gamma_above_one_equals_normal_mode(tiny_model):
    wave = np.random.default_rng(0).standard_normal(4800).astype(np.float32) * 0.1
    normal = predict_chunk(tiny_model, wave, toy_inference())
    exiting = predict_chunk(tiny_model, wave, toy_inference(mode="exiting", gamma=1.1))
    assert [v.label for v in normal] == [v.label for v in exiting]
    assert all(v.exit_index == 3 for v in exiting)


def test_gamma_zero_always_exits_first(tiny_model):
    wave = np.random.default_rng(0).standard_normal(4800).astype(np.float32) * 0.1
    votes = predict_chunk(tiny_model, wave, toy_inference(mode="exiting", gamma=0.0))
    assert all(v.exit_index == 1 for v in votes)  # max prob >= 1/3 > 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), g1=st.floats(0, 1), g2=st.floats(0, 1))
def test_lowering_gamma_never_moves_exits_later(seed, g1, g2):
    lo, hi = sorted((g1, g2))
    rng = np.random.default_rng(seed)
    raw = rng.random((2, 3, 5, 3))
    probs = raw / raw.sum(axis=-1, keepdims=True)
    _, exits_lo, _ = select_exits(probs, toy_inference(mode="exiting", gamma=lo))
    _, exits_hi, _ = select_exits(probs, toy_inference(mode="exiting", gamma=hi))
    assert np.all(exits_lo <= exits_hi)


def test_normal_mode_reports_final_exit(tiny_model):
    wave = np.zeros(4800, dtype=np.float32)
    votes = predict_chunk(tiny_model, wave, toy_inference())
    assert all(v.exit_index == 3 for v in votes)
    assert all(0 <= v.label <= 2 and 0 < v.confidence <= 1 for v in votes)


def test_config_validation():
    with pytest.raises(ValueError, match="mode"):
        InferenceConfig(mode="bogus")
    with pytest.raises(ValueError, match="gamma"):
        InferenceConfig(gamma=-0.1)
    with pytest.raises(ValueError, match="hop"):
        InferenceConfig(hop_s=0.05)
    with pytest.raises(ValueError, match="hop_s"):
        InferenceConfig(hop_s=0.6, window_s=0.3)


# ---------------------------------------------------------------------------
# majority voting
# ---------------------------------------------------------------------------

def test_majority_clear_winner():
    assert majority_vote([2, 2, 1, 0, 2]) == 2


def test_majority_tie_goes_to_higher_class():
    assert majority_vote([1, 2]) == 2
    assert majority_vote([0, 0, 1, 1]) == 1
    assert majority_vote([0, 1, 2]) == 2


def test_majority_empty_rejected():
    with pytest.raises(ValueError):
        majority_vote([])


def test_majority_matches_bruteforce_over_all_tuples():
    for length in range(1, 6):
        for labels in itertools.product((0, 1, 2), repeat=length):
            counts = Counter(labels)
            top = max(counts.values())
            expected = max(k for k, v in counts.items() if v == top)
            assert majority_vote(list(labels)) == expected, labels


def test_majority_exit_tie_goes_to_earlier_exit():
    votes = [Vote(0, 1, 0.5), Vote(0, 3, 0.5)]
    assert majority_exit(votes) == 1
    votes = [Vote(0, 2, 0.5), Vote(0, 2, 0.5), Vote(0, 3, 0.5)]
    assert majority_exit(votes) == 2


# ---------------------------------------------------------------------------
# recording-level prediction
# ---------------------------------------------------------------------------

def test_single_window_recording_has_one_vote_per_frame(tiny_model):
    audio = np.random.default_rng(1).standard_normal(4800).astype(np.float32) * 0.1
    preds = predict_recording(tiny_model, audio, toy_inference())
    assert len(preds) == 10
    for p in preds:
        assert len(p.votes) == 1
        assert p.final_label == p.votes[0].label


def test_interior_frames_collect_full_vote_count(tiny_model):
    # window 0.3 s, hop 0.06 s: the window/hop ratio is 5, like the
    # full-scale 1.5 s / 0.3 s geometry, so interior frames get 5 votes.
    audio = np.random.default_rng(1).standard_normal(4800 * 3).astype(np.float32) * 0.1
    preds = predict_recording(tiny_model, audio, toy_inference(hop_s=0.06))
    counts = [len(p.votes) for p in preds]
    assert max(counts) == 5
    assert min(counts) >= 1
    assert counts[len(counts) // 2] == 5


def test_constant_model_yields_constant_labels():
    model = constant_class_model(1)
    audio = np.random.default_rng(2).standard_normal(4800 * 3 + 173).astype(np.float32)
    for hop in (0.09, 0.3):
        preds = predict_recording(model, audio, toy_inference(hop_s=hop))
        assert all(p.final_label == 1 for p in preds)


def test_prediction_grid_matches_label_grid(tiny_model):
    # ceil(duration / 30 ms) frames even when the tail is partial
    n = 4800 * 2 + 481
    audio = np.zeros(n, dtype=np.float32)
    preds = predict_recording(tiny_model, audio, toy_inference())
    assert len(preds) == -(-n // 480)
    assert [p.frame_index for p in preds] == list(range(len(preds)))
    assert all(p.votes for p in preds)


def test_median_filter_smooths_isolated_frames():
    model = constant_class_model(2)
    audio = np.zeros(4800, dtype=np.float32)
    smooth = predict_recording(model, audio, toy_inference(median_filter=3))
    rough = predict_recording(model, audio, toy_inference())
    assert [p.final_label for p in smooth] == [p.final_label for p in rough] == [2] * 10


# ---------------------------------------------------------------------------
# segments
# ---------------------------------------------------------------------------

def test_segments_hand_case():
    out = frames_to_segments([1, 1, 2, 2, 0])
    assert out.vad_segments == [(0.0, pytest.approx(0.12))]
    assert out.osd_segments == [(pytest.approx(0.06), pytest.approx(0.12))]


def test_segments_all_zero_empty():
    out = frames_to_segments([0, 0, 0])
    assert out.vad_segments == [] and out.osd_segments == []


def test_segments_all_overlap():
    out = frames_to_segments([2] * 7)
    assert out.vad_segments == out.osd_segments == [(0.0, pytest.approx(0.21))]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=120))
def test_segment_round_trip_is_identity(labels):
    out = frames_to_segments(labels)
    segments = [
        SegmentAnnotation("r", "speech", onset, offset - onset)
        for onset, offset in out.vad_segments
    ] + [
        SegmentAnnotation("r", "overlap", onset, offset - onset)
        for onset, offset in out.osd_segments
    ]
    rebuilt = frame_labels(segments, len(labels) * 0.03)
    assert rebuilt.tolist() == labels


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=120))
def test_every_overlap_segment_sits_inside_speech(labels):
    out = frames_to_segments(labels)
    for o_start, o_end in out.osd_segments:
        assert any(
            v_start <= o_start and o_end <= v_end
            for v_start, v_end in out.vad_segments
        )
