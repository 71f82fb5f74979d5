import math

import numpy as np
import pytest

from tracegrad import tensor_core as tc
from tracegrad.model import ATTENTION, MLP, Attention, ModelConfig, Mlp, init_model
from tracegrad.profiler import (
    MEAN_GRADIENT,
    PER_EXAMPLE,
    GradientProfile,
    ProfileConfig,
    ProfileEntry,
    ProfilingError,
    combine,
    export_profile,
    group_grad_norms,
    import_profile,
    model_groups,
    parse_profile,
    plot_data_csv,
    profile_csv,
    relative_profile,
    sample_examples,
    validate_against,
)
from tracegrad.tensor_core import Tensor

SMALL = ModelConfig(vocab_size=19, context_length=16, n_blocks=2, d_model=16, n_heads=2, d_ff=32, seed=5)


@pytest.fixture(scope="module")
def model():
    return init_model(SMALL, dtype=np.float64)


@pytest.fixture(scope="module")
def sequences():
    rng = np.random.default_rng(2)
    return [rng.integers(0, SMALL.vocab_size, size=n) for n in (6, 9, 12)]


def test_one_parameter_toy():
    p = Tensor(np.array([0.7]), requires_grad=True)
    norms = group_grad_norms(lambda x: tc.sum_all(p * float(x)), [1.0, 2.0], {p: "g"})
    # gradient of p*x is x: norms 1 and 2, mean 1.5
    assert norms == {"g": 1.5}


def test_two_group_toy_profile_exact():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    groups = {a: Attention(0), b: Mlp(0)}
    probe = group_grad_norms(lambda _: tc.sum_all(a * 6.0 + b * 2.0), [0], groups)
    base = group_grad_norms(lambda _: tc.sum_all(a * 2.0 + b * 2.0), [0], groups)
    prof = combine(probe, base, [Attention(0), Mlp(0)])
    assert prof.relative() == {Attention(0): 3.0, Mlp(0): 1.0}


def test_duplicated_examples_same_norms(model, sequences):
    groups = model_groups(model)
    once = group_grad_norms(model.lm_loss, sequences, groups)
    twice = group_grad_norms(model.lm_loss, sequences + sequences, groups)
    for g in once:
        assert twice[g] == pytest.approx(once[g], rel=1e-12)


def test_scaled_loss_scales_norms(model, sequences):
    groups = model_groups(model)
    base = group_grad_norms(model.lm_loss, sequences, groups)
    scaled = group_grad_norms(lambda s: model.lm_loss(s) * 3.0, sequences, groups)
    for g in base:
        assert scaled[g] == pytest.approx(3.0 * base[g], rel=1e-10)


def test_nonparticipating_group_contributes_zero():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    norms = group_grad_norms(lambda x: tc.sum_all(a * x), [2.0, 4.0], {a: "a", b: "b"})
    assert norms == {"a": 3.0, "b": 0.0}


def test_probes_equal_baseline_gives_ones(model, sequences):
    spans = [(s, (1, len(s))) for s in sequences]
    prof = relative_profile(model, spans, sequences)
    assert set(prof.relative().values()) == {1.0}


def test_profile_covers_exactly_layer_groups(model, sequences):
    prof = relative_profile(model, [(sequences[2], (8, 11))], sequences[:2])
    assert set(prof.entries) == {Attention(0), Mlp(0), Attention(1), Mlp(1)}
    assert all(e.probe_norm > 0 and e.baseline_norm > 0 and math.isfinite(e.relative_norm) for e in prof.entries.values())


def test_scale_property(model, sequences):
    spans = [(sequences[2], (8, 11))]
    ref = relative_profile(model, spans, sequences)
    c = 2.5
    scaled_probe = relative_profile(model, spans, sequences, probe_loss=lambda ex: model.span_loss(*ex) * c)
    both = relative_profile(
        model, spans, sequences, probe_loss=lambda ex: model.span_loss(*ex) * c, baseline_loss=lambda s: model.lm_loss(s) * c
    )
    for g, e in ref.entries.items():
        assert scaled_probe.entries[g].relative_norm == pytest.approx(c * e.relative_norm, rel=1e-10)
        assert both.entries[g].relative_norm == pytest.approx(e.relative_norm, rel=1e-10)


def test_norm_of_mean_at_most_mean_of_norms(model, sequences):
    groups = model_groups(model)
    per = group_grad_norms(model.lm_loss, sequences, groups, PER_EXAMPLE)
    mean = group_grad_norms(model.lm_loss, sequences, groups, MEAN_GRADIENT)
    for g in per:
        assert mean[g] <= per[g] * (1 + 1e-12)


def test_profile_deterministic(model, sequences):
    spans = [(sequences[1], (4, 8))]
    a = relative_profile(model, spans, sequences)
    b = relative_profile(model, spans, sequences)
    assert profile_csv(a) == profile_csv(b)


def test_zero_baseline_norm_names_group():
    with pytest.raises(ProfilingError, match=r"mlp\[0\]"):
        combine({Mlp(0): 1.0}, {Mlp(0): 0.0}, [Mlp(0)])


def test_empty_examples_rejected(model, sequences):
    with pytest.raises(ProfilingError):
        relative_profile(model, [], sequences)


def test_sample_examples_deterministic():
    items = list(range(100))
    assert sample_examples(items, 10, 3) == sample_examples(items, 10, 3)
    assert sample_examples(items, 500, 3) == items


# -- files ----------------------------------------------------------------------


def _profile():
    vals = {Attention(0): (2.5, 0.5), Mlp(0): (1.25, 0.625), Attention(1): (3.0, 0.75), Mlp(1): (0.1, 0.2)}
    return GradientProfile({g: ProfileEntry(p, b, p / b) for g, (p, b) in vals.items()})


def test_profile_csv_roundtrip(tmp_path):
    prof = _profile()
    export_profile(prof, tmp_path / "p.csv")
    back = import_profile(tmp_path / "p.csv")
    assert back.entries == prof.entries
    assert profile_csv(back) == (tmp_path / "p.csv").read_text()


def test_profile_csv_nine_significant_digits(tmp_path):
    prof = GradientProfile({Attention(0): ProfileEntry(1 / 3, 1 / 7, 7 / 3)})
    text = profile_csv(prof)
    assert "0.333333333" in text and "2.33333333" in text
    back = parse_profile(text)
    assert profile_csv(back) == text


def test_profile_csv_header_and_columns():
    lines = profile_csv(_profile()).splitlines()
    assert lines[0] == "block,component,probe_norm,baseline_norm,relative_norm"
    assert len(lines) == 5


def test_missing_column_is_parse_error():
    with pytest.raises(ProfilingError, match=":2:"):
        parse_profile("block,component,probe_norm,baseline_norm,relative_norm\n0,attention,1,2\n")
    with pytest.raises(ProfilingError, match=":1:"):
        parse_profile("block,component,probe_norm\n0,attention,1\n")
    with pytest.raises(ProfilingError, match=":2:"):
        parse_profile("block,component,probe_norm,baseline_norm,relative_norm\n0,attention,x,2,3\n")


def test_group_count_mismatch_on_use(model):
    with pytest.raises(ProfilingError):
        validate_against(GradientProfile({Attention(0): ProfileEntry(1, 1, 1)}), model)
    validate_against(_profile(), model)


def test_plot_data_and_summary():
    prof = _profile()
    rows = plot_data_csv(prof).splitlines()
    assert rows[0] == "block,attention_relative_norm,mlp_relative_norm"
    assert rows[1] == "0,5,2"
    s = prof.summary()
    assert s[ATTENTION] == {"min": 4.0, "mean": 4.5, "max": 5.0}
    assert s[MLP]["max"] == 2.0


def test_lora_model_profiled_through_merged_weights(sequences):
    from tracegrad.model import attach_lora

    base = init_model(SMALL, dtype=np.float64)
    spans = [(sequences[2], (8, 11))]
    ref = relative_profile(base, spans, sequences)
    adapted = base.copy()
    attach_lora(adapted, rank=2)
    prof = relative_profile(adapted, spans, sequences)
    assert all(prof.entries[g].relative_norm == pytest.approx(e.relative_norm, rel=1e-9) for g, e in ref.entries.items())
