import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import dtw_exhaustive
from trajrec.dataio import SynthesisConfig, generate_synthetic
from trajrec.evaluation import (
    Classifier,
    ClassifierConfig,
    accuracy,
    attention_image,
    classifier_logits,
    classify,
    dtw_align,
    dtw_distance,
    evaluate_recovery,
    export_attention,
    export_svg,
    format_sweep_csv,
    fuse_scores,
    gamma_grid,
    gamma_sweep,
    load_classifier,
    predict_proba,
    raster_iou,
    read_scores,
    save_classifier,
    train_offline_classifier,
    write_scores,
)
from trajrec.ink import Trajectory, rasterize
from trajrec.training import build_dataset

point = st.tuples(st.floats(0, 63), st.floats(0, 63))
polylines = st.lists(point, min_size=1, max_size=8)


class TestDtw:
    def test_identical_is_zero(self):
        traj = Trajectory([[(0, 0), (3, 4)], [(5, 5)]])
        assert dtw_distance(traj, traj) == 0.0

    def test_single_points(self):
        assert dtw_distance([(0, 0)], [(3, 4)]) == 5.0

    def test_matches_exhaustive_alignment(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = rng.uniform(0, 10, (int(rng.integers(1, 7)), 2))
            b = rng.uniform(0, 10, (int(rng.integers(1, 7)), 2))
            assert dtw_distance(a, b) == pytest.approx(dtw_exhaustive(a, b), rel=1e-12, abs=1e-12)

    @given(polylines, polylines)
    def test_symmetric(self, a, b):
        assert dtw_distance(a, b) == pytest.approx(dtw_distance(b, a), rel=1e-12, abs=1e-12)

    def test_path_is_monotone_and_anchored(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(5, 2)), rng.uniform(size=(3, 2))
        total, path = dtw_align(a, b)
        assert path[0] == (0, 0) and path[-1] == (4, 2)
        for (i0, j0), (i1, j1) in zip(path, path[1:]):
            assert (i1 - i0, j1 - j0) in {(1, 0), (0, 1), (1, 1)}
        assert total == pytest.approx(sum(np.hypot(*(a[i] - b[j])) for i, j in path))
        assert dtw_distance(a, b, normalized=True) == pytest.approx(total / len(path))

    def test_pen_penalty(self):
        a = Trajectory([[(0, 0)], [(1, 0)]])
        b = Trajectory([[(0, 0), (1, 0)]])
        assert dtw_distance(a, b) == 0.0
        assert dtw_distance(a, b, pen_penalty=2.0) == 2.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            dtw_distance(np.zeros((0, 2)), [(0, 0)])


class TestRasterIou:
    def test_identity(self):
        traj = Trajectory([[(3, 3), (40, 50)], [(10, 60)]])
        assert raster_iou(traj, rasterize(traj, 64)) == 1.0

    def test_disjoint(self):
        image = rasterize(Trajectory([[(0, 0), (0, 63)]]), 64)
        assert raster_iou(Trajectory([[(63, 0), (63, 63)]]), image) == 0.0

    def test_half_overlap(self):
        # two 64-pixel lines on one row offset by 32 need a canvas wide enough to hold both
        image = rasterize(Trajectory([[(0, 5), (63, 5)]]), 128)
        assert raster_iou(Trajectory([[(32, 5), (95, 5)]]), image) == pytest.approx(1 / 3)

    def test_summary(self):
        gold = Trajectory([[(0, 0), (10, 0)], [(5, 5)]])
        image = rasterize(gold, 16)
        summary = evaluate_recovery([gold], [gold], [image])
        assert summary == {"samples": 1, "dtw": 0.0, "dtw_per_step": 0.0, "raster_iou": 1.0,
                           "stroke_count_accuracy": 1.0}


class TestVisualExports:
    def test_svg_polyline_count(self, tmp_path):
        gold = Trajectory([[(0, 0), (5, 5)], [(1, 1)], [(2, 2), (3, 3)]])
        rec = Trajectory([[(0, 0)], [(4, 4), (6, 6)]])
        export_svg(gold, rec, tmp_path / "a.svg")
        text = (tmp_path / "a.svg").read_text()
        assert text.count("<polyline") == 5
        assert text.count('stroke="red"') == 2

    def test_svg_gold_only(self, tmp_path):
        export_svg(Trajectory([[(0, 0), (5, 5)]]), None, tmp_path / "a.svg")
        assert (tmp_path / "a.svg").read_text().count("<polyline") == 1

    def test_svg_deterministic(self, tmp_path):
        gold = Trajectory([[(0.123456, 7), (5, 5)]])
        export_svg(gold, gold, tmp_path / "a.svg")
        export_svg(gold, gold, tmp_path / "b.svg")
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()

    def test_uniform_map_is_white(self):
        assert np.all(attention_image(np.full((4, 4), 1 / 16), 64) == 255)

    def test_one_hot_map_block(self):
        amap = np.zeros((4, 4))
        amap[1, 2] = 1.0
        img = attention_image(amap, 64)
        assert np.all(img[16:32, 32:48] == 255)
        assert img.sum() == 255 * 16 * 16

    def test_attention_files(self, tmp_path):
        maps = [np.full((4, 4), 1 / 16)] * 3
        partials = [Trajectory([[(0, 0)] * (k + 1)]) for k in range(3)]
        written = export_attention(maps, partials, tmp_path / "att")
        assert len(written) == 6
        assert len(list((tmp_path / "att").glob("*.pgm"))) == 3
        assert len(list((tmp_path / "att").glob("*.svg"))) == 3
        header = (tmp_path / "att" / "attention_0001.pgm").read_bytes()[:13]
        assert header == b"P5\n64 64\n255\n"


@pytest.fixture(scope="module")
def four_category():
    return build_dataset(generate_synthetic(SynthesisConfig(4, 4, (3, 5), 0.0, 0)))


class TestClassifier:
    def test_feature_grid_shape(self):
        from trajrec.numerics import ops
        from trajrec.numerics.tensor import Tensor

        clf = Classifier.init(ClassifierConfig(["a", "b"], conv_depths=(2, 3, 4, 5), fc_size=6))
        x = Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32))
        for k in range(1, 5):
            x = ops.maxpool2d(ops.relu(ops.conv2d(x, Tensor(clf.params[f"conv{k}.weight"]),
                                                  Tensor(clf.params[f"conv{k}.bias"]))))
        assert x.shape == (1, 5, 4, 4)
        assert clf.config.flat_size == 80
        assert classifier_logits(np.zeros((3, 64, 64)), clf).shape == (3, 2)

    def test_zero_weights_give_uniform_scores(self):
        clf = Classifier.zeros(ClassifierConfig(["a", "b", "c"], conv_depths=(2, 2, 2, 2), fc_size=4))
        np.testing.assert_allclose(predict_proba(np.ones((2, 64, 64)), clf), 1 / 3)

    def test_scores_sum_to_one_and_are_deterministic(self, rng):
        clf = Classifier.init(ClassifierConfig(list("abcd"), conv_depths=(2, 3, 4, 5), fc_size=8), seed=1)
        images = rng.integers(0, 2, (5, 64, 64))
        a = classify(images, clf, ids=list("vwxyz"))
        assert list(a) == list("vwxyz")
        for row in a.values():
            assert abs(sum(row.values()) - 1) <= 1e-6
        assert classify(images, clf, ids=list("vwxyz")) == a

    def test_side_mismatch(self):
        clf = Classifier.init(ClassifierConfig(["a", "b"], conv_depths=(2, 2, 2, 2), fc_size=4))
        with pytest.raises(ValueError, match="side"):
            predict_proba(np.zeros((1, 32, 32)), clf)

    def test_single_category_rejected(self):
        with pytest.raises(ValueError, match="two categories"):
            train_offline_classifier((np.zeros((2, 64, 64)), ["a", "a"]), epochs=1)

    def test_round_trip(self, tmp_path):
        clf = Classifier.init(ClassifierConfig(["a", "b"], conv_depths=(2, 2, 2, 2), fc_size=4), seed=2)
        save_classifier(clf, tmp_path / "c.ckpt")
        back = load_classifier(tmp_path / "c.ckpt")
        images = np.ones((2, 64, 64))
        np.testing.assert_array_equal(predict_proba(images, back), predict_proba(images, clf))

    def test_separable_set_learned(self, four_category):
        clf = train_offline_classifier(four_category, epochs=200, conv_depths=(8, 16, 32, 64), batch_size=16,
                                       max_steps=200, heldout=four_category, target_accuracy=1.0,
                                       eval_every=10)
        assert clf.step <= 200
        assert accuracy(clf, four_category.images, four_category.labels) == 1.0


class TestFusion:
    def test_worked_example(self):
        off = {"s": {"A": 0.8, "B": 0.2}}
        on = {"s": {"A": 0.3, "B": 0.7}}
        fused, preds = fuse_scores(off, on, 0.5)
        assert fused["s"]["A"] == pytest.approx(-0.7136, abs=1e-4)
        assert fused["s"]["B"] == pytest.approx(-0.9831, abs=1e-4)
        assert preds["s"] == "A"

    def test_gamma_one_is_offline_argmax(self, rng):
        off, on = self.random_scores(rng, 50), self.random_scores(rng, 50)
        _, preds = fuse_scores(off, on, 1.0)
        assert all(preds[s] == max(off[s], key=off[s].get) for s in off)
        _, preds = fuse_scores(off, on, 0.0)
        assert all(preds[s] == max(on[s], key=on[s].get) for s in on)

    def test_scaling_invariance(self, rng):
        off, on = self.random_scores(rng, 50), self.random_scores(rng, 50)
        scaled = {s: {k: 7.5 * v for k, v in row.items()} for s, row in off.items()}
        assert fuse_scores(off, on, 0.6)[1] == fuse_scores(scaled, on, 0.6)[1]

    def test_mismatch_lists_discrepancy(self):
        with pytest.raises(ValueError, match="only in online"):
            fuse_scores({"a": {"x": 1.0}}, {"a": {"x": 1.0}, "b": {"x": 1.0}}, 0.5)
        with pytest.raises(ValueError, match="label sets differ"):
            fuse_scores({"a": {"x": 1.0}}, {"a": {"y": 1.0}}, 0.5)

    def test_sweep(self, rng):
        off = self.random_scores(rng, 40)
        gold = {s: max(off[s], key=off[s].get) if k % 2 else "L0" for k, s in enumerate(off)}
        rows = gamma_sweep(off, off, gold, gamma_grid())
        assert [g for g, _ in rows] == [0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
        assert len({a for _, a in rows}) == 1
        only = gamma_sweep(off, self.random_scores(rng, 40), gold, [1.0])
        offline = np.mean([max(off[s], key=off[s].get) == gold[s] for s in off])
        assert only == [(1.0, pytest.approx(offline))]
        with pytest.raises(ValueError):
            gamma_sweep(off, off, gold, [])

    def test_csv_format(self):
        assert format_sweep_csv([(0.4, 0.5), (1.0, 0.975)]) == "gamma,accuracy\n0.4,0.500000\n1,0.975000\n"

    def test_score_file_round_trip(self, tmp_path, rng):
        scores = self.random_scores(rng, 5)
        write_scores(scores, tmp_path / "s.jsonl")
        assert read_scores(tmp_path / "s.jsonl") == scores

    def test_bad_score_file(self, tmp_path):
        (tmp_path / "s.jsonl").write_text('{"id": "a", "scores": {"x": -1}}\n')
        with pytest.raises(ValueError, match="line 1"):
            read_scores(tmp_path / "s.jsonl")

    @staticmethod
    def random_scores(rng, n, labels=("L0", "L1", "L2")):
        out = {}
        for k in range(n):
            p = rng.dirichlet(np.ones(len(labels)))
            out[f"s{k}"] = {lbl: float(v) for lbl, v in zip(labels, p)}
        return out


def test_log_floor_keeps_zero_probabilities_finite():
    fused, _ = fuse_scores({"a": {"x": 0.0, "y": 1.0}}, {"a": {"x": 1.0, "y": 0.0}}, 0.5)
    assert all(math.isfinite(v) for v in fused["a"].values())
