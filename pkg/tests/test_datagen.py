import numpy as np
import pytest

from canlm.datagen import (
    IMPACT_CLASSES,
    IMPACT_PROBS,
    NO_COLLISION,
    EventLabel,
    generate_corpus,
    inject_collisions,
    read_labels,
    rebalance,
    single_feature_oracle_f1,
    write_labels,
)
from canlm.errors import TaskError
from canlm.tokenizer import tokenize_corpus
from canlm.trips import VALID


class TestGenerateCorpus:
    def test_counts(self, ref_schema):
        corpus = generate_corpus(ref_schema, 4, 3, 120, seed=7)
        assert len(corpus) == 12
        assert all(t.n_frames == 120 for t in corpus)

    def test_speed_within_static_range(self, small_assets):
        spec = small_assets["schema"].by_name["speed_kmh"]
        for trip in small_assets["corpus"]:
            v = trip.cont["speed_kmh"]
            assert (v >= spec.static_min).all() and (v <= spec.static_max).all()

    def test_all_continuous_within_static(self, small_assets):
        schema = small_assets["schema"]
        for trip in small_assets["corpus"][:6]:
            for spec in schema.continuous_features():
                vals = trip.cont[spec.name]
                ok = trip.flags[spec.name] == VALID
                assert (vals[ok] >= spec.static_min).all() and (vals[ok] <= spec.static_max).all()

    def test_deterministic(self, ref_schema):
        a = generate_corpus(ref_schema, 2, 2, 100, seed=3)
        b = generate_corpus(ref_schema, 2, 2, 100, seed=3)
        for ta, tb in zip(a, b):
            for name in ta.cont:
                assert (ta.cont[name] == tb.cont[name]).all()
            for name in ta.enum:
                assert (ta.enum[name] == tb.enum[name]).all()
            for name in ta.flags:
                assert (ta.flags[name] == tb.flags[name]).all()

    def test_seed_changes_output(self, ref_schema):
        a = generate_corpus(ref_schema, 1, 1, 100, seed=3)[0]
        b = generate_corpus(ref_schema, 1, 1, 100, seed=4)[0]
        assert not (a.cont["speed_kmh"] == b.cont["speed_kmh"]).all()

    def test_sentinel_markers_injected(self, small_assets):
        total = sum(int((t.flags["speed_kmh"] > 0).sum()) for t in small_assets["corpus"])
        assert total > 0

    def test_doors_closed_while_moving(self, small_assets):
        for trip in small_assets["corpus"][:8]:
            moving = trip.cont["speed_kmh"] > 1.0
            assert (trip.enum["door_driver"][moving] == 0).all()

    def test_bad_counts_rejected(self, ref_schema):
        with pytest.raises(TaskError):
            generate_corpus(ref_schema, 0, 1, 100, seed=0)


class TestInjectCollisions:
    def test_label_count_matches_rate(self, ref_schema):
        corpus = generate_corpus(ref_schema, 5, 4, 200, seed=11)
        n_windows = sum(t.n_frames // 10 for t in corpus)
        _, labels = inject_collisions(corpus, ref_schema, 0.05, seed=11)
        assert len(labels) == n_windows
        positives = [l for l in labels if l.is_collision]
        assert len(positives) == round(0.05 * n_windows)

    def test_rate_zero(self, ref_schema):
        corpus = generate_corpus(ref_schema, 2, 2, 100, seed=11)
        _, labels = inject_collisions(corpus, ref_schema, 0.0, seed=11)
        assert all(l.kind == NO_COLLISION for l in labels)

    def test_class_distribution(self, ref_schema):
        corpus = generate_corpus(ref_schema, 20, 5, 300, seed=2)
        _, labels = inject_collisions(corpus, ref_schema, 0.2, seed=2)
        kinds = [l.kind for l in labels if l.is_collision]
        n = len(kinds)
        for cls, p in IMPACT_PROBS.items():
            freq = kinds.count(cls) / n
            assert freq == pytest.approx(p, abs=0.05)

    def test_deterministic(self, ref_schema):
        c1 = generate_corpus(ref_schema, 3, 2, 150, seed=5)
        c2 = generate_corpus(ref_schema, 3, 2, 150, seed=5)
        _, l1 = inject_collisions(c1, ref_schema, 0.1, seed=5)
        _, l2 = inject_collisions(c2, ref_schema, 0.1, seed=5)
        assert l1 == l2

    def test_airbag_only_on_collisions(self, small_assets):
        schema = small_assets["schema"]
        by_key = {t.key: t for t in small_assets["corpus"]}
        w = schema.frames_per_window
        for l in small_assets["labels"]:
            trip = by_key[(l.vehicle_id, l.trip_id)]
            deployed = (trip.enum["airbag_deployed"][l.window_start : l.window_start + w] == 1).any()
            if not l.is_collision:
                assert not deployed

    def test_oracle_separability(self, ref_schema):
        corpus = generate_corpus(ref_schema, 25, 5, 300, seed=31)
        corpus, labels = inject_collisions(corpus, ref_schema, 0.02, seed=31)
        f1 = single_feature_oracle_f1(corpus, ref_schema, labels)
        assert f1 > 0.95

    def test_outputs_tokenize_cleanly(self, small_assets):
        tts = tokenize_corpus(
            small_assets["corpus"][:6], small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        )
        for tt in tts:
            assert tt.ids.shape[1] == 450
            assert (tt.ids < small_assets["vocab"].size).all()


class TestRebalance:
    def make_labels(self, n_pos, n_neg):
        labels = [EventLabel("V0", "T0", 10 * i, IMPACT_CLASSES[i % 8]) for i in range(n_pos)]
        labels += [EventLabel("V1", "T0", 10 * i, NO_COLLISION) for i in range(n_neg)]
        return labels

    def test_ratio_ten(self):
        out = rebalance(self.make_labels(30, 700), ratio=10, seed=0)
        assert sum(l.is_collision for l in out) == 30
        assert sum(not l.is_collision for l in out) == 300

    def test_ratio_hundred_exact(self):
        out = rebalance(self.make_labels(5, 600), ratio=100, seed=0)
        assert sum(not l.is_collision for l in out) == 500

    def test_identity_at_equal_classes(self):
        labels = self.make_labels(20, 20)
        out = rebalance(labels, ratio=1, seed=0)
        assert sorted(out, key=str) == sorted(labels, key=str)

    def test_preserves_every_positive(self):
        labels = self.make_labels(17, 400)
        out = rebalance(labels, ratio=3, seed=9)
        assert {str(l) for l in labels if l.is_collision} <= {str(l) for l in out}

    def test_unattainable_ratio_reports_achievable(self):
        with pytest.raises(TaskError, match="achievable 5.0:1"):
            rebalance(self.make_labels(10, 50), ratio=10, seed=0)

    def test_deterministic(self):
        labels = self.make_labels(10, 300)
        a = rebalance(labels, ratio=5, seed=4)
        b = rebalance(labels, ratio=5, seed=4)
        assert a == b


class TestLabelsFile:
    def test_round_trip(self, small_assets, tmp_path):
        path = tmp_path / "labels.csv"
        write_labels(small_assets["labels"], path)
        assert read_labels(path) == small_assets["labels"]

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("nope\n")
        with pytest.raises(TaskError):
            read_labels(path)
