import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracegrad.model import ModelConfig, Attention, Mlp, init_model
from tracegrad.profiler import GradientProfile, ProfileEntry
from tracegrad.tgl import PlanError, UpdatePlan, alr_scales, make_plan, select_frozen


def profile_of(values):
    groups = [Attention(0), Mlp(0), Attention(1), Mlp(1), Attention(2), Mlp(2)][: len(values)]
    return GradientProfile({g: ProfileEntry(v, 1.0, v) for g, v in zip(groups, values)})


def test_select_frozen_strict_below_mean():
    p = profile_of([2.0, 4.0, 6.0])
    assert select_frozen(p) == {Attention(0)}


def test_select_frozen_uniform_freezes_nothing():
    assert select_frozen(profile_of([3.0, 3.0, 3.0, 3.0])) == frozenset()


def test_select_frozen_two_low_groups():
    # mean of {1, 1, 10} is 4
    assert select_frozen(profile_of([1.0, 1.0, 10.0])) == {Attention(0), Mlp(0)}


def test_alr_scales_formula():
    scales = alr_scales(profile_of([2.0, 4.0, 8.0]))
    assert scales == {Attention(0): 0.25, Mlp(0): 0.5, Attention(1): 1.0}
    rates = {g: 1e-4 * s for g, s in scales.items()}
    assert rates[Attention(0)] == pytest.approx(2.5e-5) and rates[Mlp(0)] == pytest.approx(5e-5)


def test_alr_uniform_and_single():
    assert set(alr_scales(profile_of([5.0, 5.0])).values()) == {1.0}
    assert alr_scales(profile_of([0.3])) == {Attention(0): 1.0}


def test_alr_all_zero_rejected():
    with pytest.raises(PlanError):
        alr_scales(profile_of([0.0, 0.0]))


def test_make_plan_modes():
    none = make_plan(profile_of([2.0, 4.0, 6.0]), "none")
    assert none.frozen == frozenset() and dict(none.lr_scale) == {}
    fp = make_plan(profile_of([2.0, 4.0, 6.0]), "fp")
    assert fp.frozen == {Attention(0)} and all(fp.scale(g) == 1.0 for g in (Attention(0), Mlp(0), Attention(1)))
    alr = make_plan(profile_of([2.0, 4.0, 8.0]), "alr")
    assert alr.frozen == frozenset() and dict(alr.lr_scale) == {Attention(0): 0.25, Mlp(0): 0.5, Attention(1): 1.0}


def test_fp_alr_composition_scales_survivors():
    plan = make_plan(profile_of([2.0, 4.0, 8.0]), "fp+alr")
    # mean 14/3: 2 and 4 are frozen, 8 keeps scale 1
    assert plan.frozen == {Attention(0), Mlp(0)}
    assert dict(plan.lr_scale) == {Attention(1): 1.0}


def test_make_plan_unknown_mode():
    with pytest.raises(PlanError):
        make_plan(profile_of([1.0]), "sometimes")


def test_make_plan_group_mismatch_with_model():
    model = init_model(ModelConfig(vocab_size=10, n_blocks=3, d_model=8, n_heads=2, d_ff=8))
    with pytest.raises(PlanError):
        make_plan(profile_of([1.0, 2.0, 3.0, 4.0]), "fp", model=model)
    assert make_plan(profile_of([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), "fp", model=model).frozen


def test_plan_json_roundtrip(tmp_path):
    plan = make_plan(profile_of([1.0, 2.0, 3.0, 7.0]), "fp+alr")
    plan.save(tmp_path / "plan.json")
    loaded = UpdatePlan.load(tmp_path / "plan.json")
    assert loaded == plan


def test_plan_json_layout():
    d = make_plan(profile_of([2.0, 4.0, 6.0]), "fp").to_json()
    assert d["mode"] == "fp"
    assert d["frozen"] == [{"block": 0, "component": "attention"}]
    assert set(d) == {"mode", "frozen", "lr_scale", "profile_fingerprint"}


def test_corrupt_plan_file(tmp_path):
    path = tmp_path / "plan.json"
    path.write_text('{"mode": "fp", "frozen": [{"block": 0}]}')
    with pytest.raises(PlanError):
        UpdatePlan.load(path)
    path.write_text("{")
    with pytest.raises(PlanError):
        UpdatePlan.load(path)


positive = st.floats(0.01, 100.0, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(positive, min_size=1, max_size=6), st.sampled_from([0.5, 2.0, 4.0, 0.125]))
def test_argmax_invariance_under_positive_scaling(values, c):
    # powers of two keep the floating-point ratios exact
    p, q = profile_of(values), profile_of([v * c for v in values])
    assert select_frozen(p) == select_frozen(q)
    assert alr_scales(p) == alr_scales(q)


@settings(max_examples=50, deadline=None)
@given(st.lists(positive, min_size=1, max_size=6), positive)
def test_argmax_invariance_any_positive_factor(values, c):
    p, q = profile_of(values), profile_of([v * c for v in values])
    sp, sq = alr_scales(p), alr_scales(q)
    assert all(sq[g] == pytest.approx(sp[g], rel=1e-12) for g in sp)
    assert max(sp.values()) == 1.0
