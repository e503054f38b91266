import csv
import io
import logging
import random

import pytest
from hypothesis import given, strategies as st

from cedar.evaluation import (CATEGORIES, ErrorCase, GoldMention, PredictionRecord, categorize_error,
                              categorize_errors, category_counts, classification_errors, dumps_error_csv,
                              evaluate, frequency_groups, frequency_quartile_analysis, per_stage_report,
                              score_hit_at_k, score_tc, score_ti)
from cedar.ontology import Ontology, RolesetMapping
from helpers import small_ontology
from oracles import error_category_by_rules, hit_at_k_by_counting, prf_by_counting


def pred(sid, start, end, *types):
    return PredictionRecord(sid, (start, end), tuple((t, 1.0 - 0.1 * k) for k, t in enumerate(types)))


def gold(sid, start, end, tid, mid=None, roleset=None, cands=()):
    return GoldMention(sid, (start, end), tid, mid, roleset, tuple(cands))


class TestSpanScores:
    def test_hand_counts(self):
        preds = [pred("s1", 0, 0, "A"), pred("s1", 3, 4, "B")]
        golds = [gold("s1", 0, 0, "A"), gold("s1", 2, 2, "B"), gold("s2", 1, 1, "C"), gold("s2", 4, 4, "A")]
        ti = score_ti(preds, golds)
        assert (ti.precision, ti.recall) == (0.5, 0.25) and ti.f1 == pytest.approx(1 / 3)

    def test_tc_decoupled_from_ranking(self):
        # right span, wrong type: a TI hit but a TC miss
        golds = [gold("s", 1, 1, "A")]
        assert score_ti([pred("s", 1, 1, "B", "A")], golds).f1 == 1.0
        assert score_tc([pred("s", 1, 1, "B", "A")], golds).f1 == 0.0

    def test_near_miss_span_is_wrong(self):
        assert score_ti([pred("s", 1, 2, "A")], [gold("s", 1, 1, "A")]).true_positives == 0

    def test_duplicates_scored_once(self, caplog):
        with caplog.at_level(logging.WARNING):
            ti = score_ti([pred("s", 0, 0, "A"), pred("s", 0, 0, "B")], [gold("s", 0, 0, "A")])
        assert ti.n_predicted == 1 and ti.precision == 1.0 and "duplicate" in caplog.text

    def test_empty_inputs(self):
        assert score_ti([], []).f1 == 0.0
        assert score_tc([pred("s", 0, 0, "A")], []).precision == 0.0

    def test_chosen_type_must_head_ranking(self):
        with pytest.raises(ValueError):
            PredictionRecord("s", (0, 0), (("A", 0.9), ("B", 0.1)), chosen_type="B")
        p = PredictionRecord("s", (0, 0), (("A", 0.9), ("B", 0.1)), chosen_type="B", flagged=True)
        assert PredictionRecord.from_record("s", p.to_record()) == p


class TestHitAtK:
    def test_rank_three(self):
        preds = [pred("s", 0, 0, "A", "B", "C", "D")]
        hits = score_hit_at_k(preds, [gold("s", 0, 0, "C")], ks=(1, 2, 3, 5, 50))
        assert hits == {1: 0.0, 2: 0.0, 3: 1.0, 5: 1.0, 50: 1.0}

    def test_unmatched_gold_is_miss(self):
        hits = score_hit_at_k([pred("s", 0, 0, "A")], [gold("s", 0, 0, "A"), gold("s", 5, 5, "A")], ks=(1,))
        assert hits == {1: 0.5}

    def test_bad_k(self):
        with pytest.raises(ValueError):
            score_hit_at_k([], [gold("s", 0, 0, "A")], ks=(0,))

    def test_report_keys(self):
        rep = evaluate([pred("s", 0, 0, "A")], [gold("s", 0, 0, "A")], ks=(1, 10)).to_dict()
        assert rep["hit_at"] == {"1": 1.0, "10": 1.0} and rep["tc_f1"] == 1.0


@st.composite
def prediction_sets(draw):
    rng = random.Random(draw(st.integers(0, 10 ** 6)))
    types = [f"T{k}" for k in range(6)]
    golds, preds = [], []
    for s in range(rng.randint(1, 4)):
        for start in rng.sample(range(6), rng.randint(0, 3)):
            golds.append(gold(f"s{s}", start, start, rng.choice(types)))
        for start in rng.sample(range(6), rng.randint(0, 3)):
            preds.append(pred(f"s{s}", start, start + rng.randint(0, 1), *rng.sample(types, rng.randint(1, 6))))
    return preds, golds


class TestProperties:
    @given(prediction_sets())
    def test_oracle_and_invariants(self, data):
        preds, golds = data
        ti, tc = score_ti(preds, golds), score_tc(preds, golds)
        want_ti, want_tc = prf_by_counting([(p.sent_id, *p.span, p.chosen_type) for p in preds],
                                           [(g.sent_id, *g.span, g.type_id) for g in golds])
        assert (ti.precision, ti.recall, ti.f1) == pytest.approx(want_ti)
        assert (tc.precision, tc.recall, tc.f1) == pytest.approx(want_tc)
        assert tc.f1 <= ti.f1 + 1e-12
        hits = score_hit_at_k(preds, golds, ks=(1, 2, 3, 6))
        assert hits[1] <= hits[2] <= hits[3] <= hits[6]
        orders = {(p.sent_id, *p.span): p.type_order for p in preds}
        for k in (1, 2, 3, 6):
            assert hits[k] == pytest.approx(hit_at_k_by_counting(orders, [(g.sent_id, *g.span, g.type_id)
                                                                          for g in golds], k))

    @given(prediction_sets(), st.randoms())
    def test_permutation_invariant(self, data, rnd):
        preds, golds = data
        before = evaluate(preds, golds).to_dict()
        preds, golds = list(preds), list(golds)
        rnd.shuffle(preds)
        rnd.shuffle(golds)
        assert evaluate(preds, golds).to_dict() == before


class TestPerStage:
    def test_covered_subset(self):
        ranked = {"m1": ["A", "B", "C"], "m2": ["B", "C", "A"], "m3": ["C", "B", "D"]}
        classified = {"m1": ["B", "A"], "m2": ["A", "B"], "m3": ["B", "C"]}
        gold_types = {"m1": "A", "m2": "A", "m3": "A"}
        rep = per_stage_report(ranked, classified, gold_types, ranking_ks=(1, 3), classification_ks=(1, 2),
                               cover_k=3)
        assert rep.ranking_hit == {1: pytest.approx(1 / 3), 3: pytest.approx(2 / 3)}
        assert rep.n_covered == 2 and rep.classification_hit == {1: 0.5, 2: 1.0}

    def test_none_covered_is_undefined(self, caplog):
        with caplog.at_level(logging.WARNING):
            rep = per_stage_report({"m": ["B"]}, {"m": ["B"]}, {"m": "A"}, cover_k=1)
        assert rep.classification_hit is None and not rep.to_dict()["classification_defined"]

    def test_missing_ranking(self):
        with pytest.raises(KeyError):
            per_stage_report({}, {}, {"m": "A"})


class TestFrequency:
    def test_uniform_split(self):
        freq = {f"T{k:02d}": float(k + 1) for k in range(20)}
        groups, unseen = frequency_groups(freq, freq)
        assert [len(g) for g in groups] == [5, 5, 5, 5] and unseen == 0
        assert groups[0][0] == "T00" and groups[3][-1] == "T19"

    def test_all_equal_is_deterministic(self):
        freq = {t: 1.0 for t in "DCBA"}
        groups, _ = frequency_groups(freq, freq)
        assert groups == [["A"], ["B"], ["C"], ["D"]]

    def test_unseen_join_lowest(self):
        groups, unseen = frequency_groups({"A": 3.0, "B": 1.0}, ["A", "B", "Z"])
        assert unseen == 1 and groups[0][0] == "Z"

    def test_quartile_f1(self):
        freq = {"A": 1.0, "B": 2.0, "C": 3.0, "D": 4.0}
        golds = [gold("s", k, k, t) for k, t in enumerate("ABCD")]
        preds = [pred("s", 0, 0, "A"), pred("s", 1, 1, "C"), pred("s", 2, 2, "C"), pred("s", 3, 3, "D")]
        rep = frequency_quartile_analysis(preds, golds, freq)
        assert rep.f1[0] == 1.0 and rep.f1[1] == 0.0 and rep.f1[3] == 1.0
        assert rep.f1[2] == pytest.approx(2 / 3)


def extended_ontology():
    ont = small_ontology()
    mappings = dict(ont.mappings)
    mappings["clash.01"] = RolesetMapping("clash.01", ("Q2",))
    return Ontology(dict(ont.types), mappings)


class TestErrorCategories:
    @pytest.mark.parametrize("predicted, gold_t, roleset, want, want_prior", [
        ("Q3", "Q2", "fight.01", "candidate_set", "candidate_set"),
        ("Q1", "Q2", "fight.01", "extended_roleset", "parent"),
        ("Q5", "Q4", "want.01", "child", "child"),
        ("Q1", "Q2", "clash.01", "parent", "parent"),
        ("Q3", "Q2", "clash.01", "sibling", "sibling"),
        ("Q6", "Q5", "work.01", "other", "other"),
        ("Q4", "Q5", "work.01", "extended_roleset", "parent"),
    ])
    def test_cases(self, predicted, gold_t, roleset, want, want_prior):
        err = ErrorCase("m", predicted, gold_t, roleset)
        ont = extended_ontology()
        assert categorize_error(err, ont) == want
        assert categorize_error(err, ont, prioritize_hierarchy=True) == want_prior

    def test_unknown_roleset_other(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert categorize_error(ErrorCase("m", "Q1", "Q2", "zap.01"), small_ontology()) == "other"
        assert "unknown gold roleset" in caplog.text

    def test_not_an_error(self):
        with pytest.raises(ValueError):
            categorize_error(ErrorCase("m", "Q1", "Q1", "fight.02"), small_ontology())

    def test_csv_and_counts(self):
        golds = [gold("s", 0, 0, "Q2", "m2", "fight.01", ("Q2", "Q3")), gold("s", 2, 2, "Q5", "m1", "work.01")]
        preds = [pred("s", 0, 0, "Q3"), pred("s", 2, 2, "Q6")]
        cats = categorize_errors(classification_errors(preds, golds), small_ontology())
        rows = list(csv.reader(io.StringIO(dumps_error_csv(cats))))
        assert rows == [["mention_id", "predicted", "gold", "category"], ["m1", "Q6", "Q5", "other"],
                        ["m2", "Q3", "Q2", "candidate_set"]]
        counts = category_counts(cats)
        assert tuple(counts) == CATEGORIES and counts["other"] == 1 and counts["candidate_set"] == 1

    @given(st.sampled_from(sorted(small_ontology().types)), st.sampled_from(sorted(small_ontology().types)),
           st.sampled_from(sorted(extended_ontology().mappings)), st.booleans())
    def test_oracle(self, predicted, gold_t, roleset, prior):
        if predicted == gold_t:
            return
        ont = extended_ontology()
        parents = {t.type_id: t.parent_id for t in ont.types.values() if t.parent_id}
        records = [(r, m.candidate_type_ids) for r, m in ont.mappings.items()]
        got = categorize_error(ErrorCase("m", predicted, gold_t, roleset), ont, prior)
        assert got == error_category_by_rules(predicted, gold_t, roleset, records, parents, prior)
