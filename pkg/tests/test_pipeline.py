import json
import math

import pytest

from cedar.corpus import read_corpus
from cedar.fixture import FixtureSpec, generate_fixture
from cedar.io import read_json
from cedar.pipeline import (STAGES, ConfigError, DependencyError, LockError, PipelineConfig, Predictor,
                            StalenessError, lock_run, predict_end_to_end, read_manifest, run_paths, run_stage,
                            with_overrides)
from helpers import FIXTURE_CONFIG, TINY_TRAINING, fixture_config


class TestConfig:
    def test_defaults_and_overrides(self):
        cfg = PipelineConfig.from_dict({}, overrides=["ranker.topk=20", ("trigger.threshold", 0.7)])
        assert cfg["ranker.topk"] == 20 and cfg["trigger.threshold"] == 0.7
        assert cfg.train_config("classifier").batch_size == 32
        assert cfg.train_config("ranker").seed == cfg.seed

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="ranker.top_k"):
            PipelineConfig.from_dict({"ranker": {"top_k": 3}})

    def test_backend_section_open(self):
        cfg = PipelineConfig.from_dict({"backend": {"kind": "transformers", "model_name": "bert-base-uncased"}})
        assert cfg["backend.model_name"] == "bert-base-uncased"

    @pytest.mark.parametrize("override", ["trigger.threshold=1.5", "evaluate.split=train",
                                          "self_label.rounds=0", "classifier.train.momentum=0.9",
                                          "ranker.topk=0"])
    def test_invalid_values(self, override):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({}, overrides=[override])

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({}, overrides=["ranker.topk"])

    def test_paths_relative_to_config(self):
        cfg = PipelineConfig.load(FIXTURE_CONFIG)
        assert cfg.path("ontology") == FIXTURE_CONFIG.parent / "../fixture/ontology.jsonl"

    def test_stage_hash_scoped(self):
        a = PipelineConfig.from_dict({})
        b = with_overrides(a, ranker__topk=20)
        assert a.stage_hash("train-ti") == b.stage_hash("train-ti")
        assert a.stage_hash("predict") != b.stage_hash("predict")


@pytest.fixture
def fresh(tiny_fixture_paths, tmp_path):
    return fixture_config(tiny_fixture_paths, tmp_path / "run", TINY_TRAINING)


class TestStageControl:
    def test_missing_upstream_named(self, fresh):
        run_stage(fresh, "build-data")
        with pytest.raises(DependencyError) as err:
            run_stage(fresh, "predict")
        assert err.value.missing == "train-ti"
        assert err.value.to_dict()["missing_stage"] == "train-ti"

    def test_nothing_built(self, fresh):
        with pytest.raises(DependencyError) as err:
            run_stage(fresh, "train-rank")
        assert err.value.missing == "build-data"

    def test_tampered_output_is_stale(self, fresh):
        run_stage(fresh, "build-data")
        path = run_paths(fresh.work_dir)["train"]
        path.write_text(path.read_text() + "\n")
        with pytest.raises(StalenessError):
            run_stage(fresh, "train-ti")

    def test_config_change_is_stale(self, fresh):
        run_stage(fresh, "build-data")
        with pytest.raises(StalenessError, match="configuration"):
            run_stage(with_overrides(fresh, data__min_tokens=4), "train-ti")

    def test_source_change_is_stale(self, fresh, tiny_fixture_paths, tmp_path):
        corpus = tmp_path / "corpus.jsonl"
        corpus.write_text(tiny_fixture_paths["corpus"].read_text())
        cfg = with_overrides(fresh, paths__corpus=str(corpus))
        run_stage(cfg, "build-data")
        lines = corpus.read_text().splitlines(keepends=True)
        corpus.write_text("".join(lines[:-1]))
        with pytest.raises(StalenessError, match="source"):
            run_stage(cfg, "train-ti")

    def test_rerun_upstream_clears_staleness(self, fresh):
        run_stage(fresh, "build-data")
        changed = with_overrides(fresh, data__min_tokens=4)
        run_stage(changed, "build-data")
        run_stage(changed, "train-rank")

    def test_lock(self, fresh):
        lock = lock_run(fresh.work_dir)
        try:
            with pytest.raises(LockError):
                run_stage(fresh, "build-data")
        finally:
            lock.release()

    def test_unknown_stage(self, fresh):
        with pytest.raises(Exception, match="unknown stage"):
            run_stage(fresh, "train-everything")

    def test_build_data_deterministic(self, fresh, tmp_path):
        other = with_overrides(fresh, paths__work_dir=str(tmp_path / "again"))
        run_stage(fresh, "build-data")
        run_stage(other, "build-data")
        for name in ("ontology", "train", "dev", "test", "data_report"):
            a, b = run_paths(fresh.work_dir)[name], run_paths(other.work_dir)[name]
            assert a.read_bytes() == b.read_bytes()
        assert (fresh.work_dir / "build-data" / "manifest.json").read_bytes() == \
            (other.work_dir / "build-data" / "manifest.json").read_bytes()

    def test_train_split_has_no_gold(self, fresh):
        run_stage(fresh, "build-data")
        train = read_corpus(run_paths(fresh.work_dir)["train"])
        assert all(m.gold_type_id is None for s in train for m in s.mentions)
        assert all(m.candidate_type_ids for s in train for m in s.mentions)


class TestFullTinyRun:
    def test_every_stage_has_manifest(self, tiny_run):
        assert [r.stage for r in tiny_run.results] == list(STAGES)
        for stage in STAGES:
            man = read_manifest(tiny_run.cfg.work_dir, stage)
            assert set(man) >= {"stage", "config", "config_hash", "inputs", "outputs", "metrics", "versions"}
            assert "time" not in json.dumps(man).lower()
        assert "external_inputs" in read_manifest(tiny_run.cfg.work_dir, "build-data")

    def test_report_sections(self, tiny_run):
        report = read_json(run_paths(tiny_run.cfg.work_dir)["report"])
        assert set(report) >= {"end_to_end", "hit_at_clean", "hit_at_noisy", "per_stage", "frequency_quartiles"}
        assert set(report["per_stage"]) == {"all", "clean", "noisy"}
        assert report["end_to_end"]["tc_f1"] <= report["end_to_end"]["ti_f1"] + 1e-12

    def test_error_csv_header(self, tiny_run):
        text = run_paths(tiny_run.cfg.work_dir)["errors"].read_text()
        assert text.splitlines()[0] == "mention_id,predicted,gold,category"

    def test_pseudo_label_audit(self, tiny_run):
        for line in run_paths(tiny_run.cfg.work_dir)["pseudo"].read_text().splitlines():
            rec = json.loads(line)
            cands = [c["type_id"] for c in rec["candidates"]]
            assert rec["pseudo_label"] is None or rec["pseudo_label"] in cands
            assert rec["selected"] == (rec["pseudo_label"] is not None)

    def test_one_ranking_call_per_sentence_with_triggers(self, tiny_run, monkeypatch):
        predictor = Predictor.from_run(tiny_run.cfg)
        predictor.threshold = 0.01  # every sentence gets triggers
        calls = []
        original = Predictor.rank

        def counting(self, batch, topk=None):
            calls.append(len(batch))
            return original(self, batch, topk)

        monkeypatch.setattr(Predictor, "rank", counting)
        out = predictor.predict([("a", ["x", "y", "z"]), ("b", ["p", "q"])])
        assert calls == [2] and all(sp.events for sp in out)

    def test_no_triggers_no_ranking(self, tiny_run, monkeypatch):
        predictor = Predictor.from_run(tiny_run.cfg)
        predictor.threshold = 0.999999

        def fail(*a, **k):
            raise AssertionError("ranker called for a sentence without triggers")

        monkeypatch.setattr(Predictor, "classify", lambda self, items: [] if not items else fail())
        monkeypatch.setattr("cedar.pipeline.rank_types_batch", fail)
        out = predictor.predict([("a", ["x", "y", "z"])])
        assert out[0].events == []

    def test_event_order_matches_chosen(self, tiny_run):
        preds = predict_end_to_end(tiny_run.cfg, [("a", ["the", "x", "was", "y"])])
        for e in preds[0].events:
            assert e.chosen_type == e.ranked_types[0][0]
            assert len(e.ranked_types) <= tiny_run.cfg["ranker.topk"]


def test_end_to_end_planted_sentences(fixture_run):
    # one fresh sentence per type: a non-definition trigger word plus context words not in the definition
    truth = read_json(fixture_run.paths["truth"])
    sents = []
    for t in sorted(truth["trigger_words"]):
        ctx = truth["context_words"][t]
        sents.append((t, ["the", truth["trigger_words"][t][1], "of", ctx[4], "and", ctx[5], "was", "then"]))
    preds = predict_end_to_end(fixture_run.cfg, sents)
    chosen = [[e.chosen_type for e in p.events if e.span == (1, 1)] for p in preds]
    assert all(len(c) == 1 for c in chosen)
    correct = sum(c[0] == t for c, (t, _) in zip(chosen, sents))
    assert correct / len(sents) >= 0.8


class TestFixture:
    def test_counts(self):
        fx = generate_fixture(FixtureSpec(), seed=0)
        assert sum(len(s.mentions) for s in fx.sentences) == 1000
        assert len(fx.ontology.types) == 20

    def test_no_noise_all_clean(self):
        fx = generate_fixture(FixtureSpec(noise_rate=0.0), seed=2)
        assert all(fx.ontology.mappings[m.roleset_id].is_clean for s in fx.sentences for m in s.mentions)

    def test_noise_rate_within_three_sigma(self):
        fx = generate_fixture(FixtureSpec(noise_rate=0.5), seed=3)
        noisy = sum(not fx.ontology.mappings[m.roleset_id].is_clean for s in fx.sentences for m in s.mentions)
        assert abs(noisy - 500) <= 3 * math.sqrt(1000 * 0.25)

    def test_deterministic(self):
        a, b = generate_fixture(FixtureSpec(), seed=5), generate_fixture(FixtureSpec(), seed=5)
        assert a.sentences == b.sentences and a.ontology.dumps() == b.ontology.dumps()

    def test_gold_is_in_candidates(self):
        fx = generate_fixture(FixtureSpec(), seed=0)
        for s in fx.sentences:
            for m in s.mentions:
                assert m.gold_type_id in fx.ontology.candidates(m.roleset_id)
                assert s.tokens[m.start] in fx.trigger_words[m.gold_type_id]

    def test_too_few_types(self):
        with pytest.raises(ValueError):
            generate_fixture(FixtureSpec(n_types=1))
