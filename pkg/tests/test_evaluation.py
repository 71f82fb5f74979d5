import math

import numpy as np
import pytest

from tracegrad.data import NEW_ENTITY, POPULAR, UPDATE, ProbeExample, build_tokenizer
from tracegrad.evaluation import (
    MICRO,
    EvalResult,
    EvaluationError,
    ProbeScore,
    aggregate,
    compare_report,
    evaluate,
    forgetting,
    skip_list,
    span_nll,
    span_perplexity,
)
from tracegrad.model import ModelConfig, init_model
from tracegrad.tensor_core import Tensor

PROBES = [
    ProbeExample("p1", 1, POPULAR, "test", "alpha lives in", "red town"),
    ProbeExample("p2", 1, POPULAR, "test", "beta lives in", "blue town"),
    ProbeExample("n1", 1, NEW_ENTITY, "test", "gamma works for", "red firm"),
    ProbeExample("u1", 1, UPDATE, "test", "delta works for", "blue firm"),
    ProbeExample("u2", 1, UPDATE, "test", "alpha works for", "red firm"),
]


@pytest.fixture(scope="module")
def tok():
    return build_tokenizer([p.left_context + " " + p.answer for p in PROBES])


@pytest.fixture(scope="module")
def model(tok):
    return init_model(ModelConfig(vocab_size=len(tok), context_length=12, n_blocks=2, d_model=16, n_heads=2, d_ff=32, seed=2))


class FixedModel:
    """Stand-in whose next-token distribution is given row by row."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)

    def forward_logits(self, tokens):
        return Tensor(np.log(self.probs[: len(tokens)]))


def test_uniform_model_perplexity_is_vocab(tok, model):
    uniform = model.copy()
    uniform.params["wte"].data[:] = 0.0
    for p in PROBES:
        _, ppl = span_perplexity(uniform, p, tok)
        assert ppl == pytest.approx(len(tok), rel=1e-6)


def test_answer_probs_half_and_eighth_give_four():
    # positions 1 and 2 predict the answer tokens 1 and 2
    probs = np.full((3, 4), 1e-3)
    probs[1, 1], probs[1, 0] = 0.5, 0.5 - 2e-3
    probs[2, 2], probs[2, 0] = 0.125, 0.875 - 2e-3
    nll = span_nll(FixedModel(probs), [0, 3, 1, 2], (2, 4))
    assert nll == pytest.approx([math.log(2), math.log(8)])
    assert math.exp(nll.mean()) == pytest.approx(4.0)
    assert aggregate([ProbeScore("a", UPDATE, float(nll.mean()), 2)]) == pytest.approx(4.0)


def test_trailing_text_does_not_change_score(tok, model):
    ids, span = tok.encode_probe(PROBES[0])
    assert np.array_equal(span_nll(model, ids, span), span_nll(model, ids + [5, 6, 7], span))


def test_batched_evaluation_matches_single_scoring(tok, model):
    res = evaluate(model, PROBES, tok, batch_size=2)
    for r in res.records:
        probe = next(p for p in PROBES if p.id == r.id)
        nll, _ = span_perplexity(model, probe, tok)
        assert r.nll == pytest.approx(float(nll.mean()), abs=1e-5)


def test_identical_models_identical_results(tok, model):
    a = evaluate(model, PROBES, tok)
    b = evaluate(model.copy(), PROBES, tok)
    assert a.to_json() == b.to_json()


def test_subset_matches_category(tok, model):
    full = evaluate(model, PROBES, tok)
    sub = evaluate(model, [p for p in PROBES if p.category == UPDATE], tok)
    assert sub.per_category == {UPDATE: full.per_category[UPDATE]}


def test_order_independent(tok, model):
    assert evaluate(model, PROBES, tok).to_json() == evaluate(model, PROBES[::-1], tok).to_json()


def test_aggregation_properties():
    scores = [ProbeScore("a", UPDATE, 1.0, 2), ProbeScore("b", UPDATE, 2.0, 4)]
    base = aggregate(scores)
    assert base == pytest.approx(math.exp(1.5))
    assert aggregate(scores + scores) == pytest.approx(base)
    assert aggregate([ProbeScore(s.id, s.category, s.nll + 0.1, s.n_tokens) for s in scores]) > base
    assert aggregate(scores, MICRO) == pytest.approx(math.exp(10 / 6))


def test_overlong_probe_skipped_and_listed(tok, model):
    long = ProbeExample("zz", 1, UPDATE, "test", " ".join(["alpha"] * 20), "red firm")
    skip = skip_list(PROBES + [long], tok, model.cfg.context_length)
    assert [s[0] for s in skip] == ["zz"]
    res = evaluate(model, PROBES + [long], tok)
    assert [s[0] for s in res.skipped] == ["zz"]
    assert len(res.records) == len(PROBES)
    with pytest.raises(EvaluationError):
        span_perplexity(model, long, tok)


def test_empty_category_flagged(tok, model):
    long = ProbeExample("zz", 1, NEW_ENTITY, "test", " ".join(["alpha"] * 20), "red firm")
    res = evaluate(model, [PROBES[0], long], tok)
    assert res.flagged == [NEW_ENTITY] and NEW_ENTITY not in res.per_category


def test_empty_probe_set_rejected(tok, model):
    with pytest.raises(EvaluationError):
        evaluate(model, [], tok)


def test_eval_result_roundtrip(tmp_path, tok, model):
    res = evaluate(model, PROBES, tok, year=1)
    res.save(tmp_path / "r.json")
    assert EvalResult.load(tmp_path / "r.json") == res
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(EvaluationError):
        EvalResult.load(tmp_path / "bad.json")


def test_forgetting_sign():
    before = EvalResult({POPULAR: 10.0})
    after = EvalResult({POPULAR: 12.5})
    assert forgetting(before, after) == 2.5


# -- reports ----------------------------------------------------------------------


def _result(pop, new, upd, fp="x", year=1):
    return EvalResult({POPULAR: pop, NEW_ENTITY: new, UPDATE: upd}, probe_fingerprint=fp, year=year)


def test_table_two_rendering():
    rep = compare_report([("Continual Pretrain", _result(64.13, 72.42, 83.39)), ("+ TGL with FP", _result(57.75, 65.08, 74.55))])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "method,Popular,NewEntity,Update,delta_Popular,delta_NewEntity,delta_Update,best"
    assert lines[1] == "Continual Pretrain,64.1300,72.4200,83.3900,+0.0000,+0.0000,+0.0000,"
    assert lines[2] == "+ TGL with FP,57.7500,65.0800,74.5500,-6.3800,-7.3400,-8.8400,Popular;NewEntity;Update"
    text = rep.to_text()
    assert "74.55*" in text and "83.39 " in text
    assert text.splitlines()[0].split()[:4] == ["Method", "Popular", "NewEntity", "Update"]


def test_single_row_has_no_deltas():
    rep = compare_report([("Vanilla", _result(1.0, 2.0, 3.0))])
    assert rep.to_csv().splitlines()[0] == "method,Popular,NewEntity,Update,best"
    assert "*" not in rep.to_text()


def test_duplicate_method_zero_deltas():
    rep = compare_report([("a", _result(5.0, 6.0, 7.0)), ("b", _result(5.0, 6.0, 7.0))])
    assert all(v == 0.0 for d in rep.deltas for v in d.values())


def test_three_row_report_with_baseline():
    rep = compare_report(
        [("Vanilla", _result(3.0, 4.0, 5.0)), ("+ TGL with FP", _result(2.0, 4.5, 5.0)), ("+ TGL with ALR", _result(3.5, 3.0, 6.0))],
        baseline="Vanilla",
    )
    assert len(rep.to_csv().splitlines()) == 4
    assert rep.deltas[0] == {POPULAR: 0.0, NEW_ENTITY: 0.0, UPDATE: 0.0}
    assert rep.best(NEW_ENTITY) == "+ TGL with ALR"


def test_report_rejects_mismatched_inputs():
    with pytest.raises(EvaluationError, match="probe sets"):
        compare_report([("a", _result(1, 1, 1, fp="x")), ("b", _result(1, 1, 1, fp="y"))])
    with pytest.raises(EvaluationError, match="years"):
        compare_report([("a", _result(1, 1, 1, year=1)), ("b", _result(1, 1, 1, year=2))])
    with pytest.raises(EvaluationError):
        compare_report([("a", _result(1, 1, 1)), ("a", _result(1, 1, 1))])
    with pytest.raises(EvaluationError):
        compare_report([("a", _result(1, 1, 1))], baseline="zzz")
