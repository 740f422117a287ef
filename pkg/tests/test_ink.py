import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import douglas_peucker_recursive
from trajrec.dataio import InkSample
from trajrec.ink import (
    PAD_RECORD,
    PointSequence,
    Trajectory,
    bresenham,
    encode_sequence,
    pad_sequences,
    preprocess,
    rasterize,
    reduce_points,
    rescale,
    simplify_stroke,
)

point = st.tuples(st.floats(0, 63), st.floats(0, 63))
trajectories = st.lists(st.lists(point, min_size=1, max_size=8), min_size=1, max_size=5).map(Trajectory)


def sample(strokes):
    return InkSample("s", "L", strokes)


class TestRescale:
    def test_square_box(self):
        t = rescale(sample([[(0, 0), (128, 128)]]))
        np.testing.assert_allclose(t.strokes[0], [[0, 0], [63, 63]])

    def test_single_point_to_center(self):
        t = rescale(sample([[(17.0, -4.0)]]))
        np.testing.assert_allclose(t.strokes[0], [[31.5, 31.5]])

    def test_wide_box_is_centered(self):
        t = rescale(sample([[(0, 0), (128, 64)]]))
        pts = t.points()
        assert pts[:, 0].min() == 0 and pts[:, 0].max() == 63
        assert pts[:, 1].min() == pytest.approx(15.75) and pts[:, 1].max() == pytest.approx(47.25)

    @given(st.lists(st.tuples(st.floats(-500, 500), st.floats(-500, 500)), min_size=2, max_size=12))
    def test_aspect_ratio_preserved(self, pts):
        pts_arr = np.array(pts)
        w, h = np.ptp(pts_arr, axis=0)
        if min(w, h) < 1e-3:
            return
        out = rescale(sample([pts])).points()
        w2, h2 = np.ptp(out, axis=0)
        assert w2 / h2 == pytest.approx(w / h, rel=1e-9)
        assert out.min() >= -1e-9 and out.max() <= 63 + 1e-9
        assert max(w2, h2) == pytest.approx(63)


class TestReducePoints:
    def test_collinear(self):
        out = simplify_stroke(np.array([[0, 0], [1, 0], [2, 0]], float), 0.1)
        np.testing.assert_array_equal(out, [[0, 0], [2, 0]])

    def test_corner_kept(self):
        stroke = np.array([[0, 0], [1, 1], [2, 0]], float)
        np.testing.assert_array_equal(simplify_stroke(stroke, 0.5), stroke)

    def test_short_strokes_unchanged(self):
        t = Trajectory([[(1, 1)], [(0, 0), (5, 5)]])
        out = reduce_points(t, 2.0)
        for a, b in zip(t.strokes, out.strokes):
            np.testing.assert_array_equal(a, b)

    def test_epsilon_must_be_positive(self):
        with pytest.raises(ValueError):
            reduce_points(Trajectory([[(0, 0)]]), 0.0)

    def test_matches_recursive_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(1000):
            n = int(rng.integers(1, 11))
            stroke = rng.uniform(0, 20, size=(n, 2))
            if trial % 3 == 0:
                stroke = np.round(stroke)  # integer grids produce exact ties
            eps = float(rng.uniform(0.1, 5.0))
            expected = douglas_peucker_recursive(stroke.tolist(), eps)
            got = [tuple(p) for p in simplify_stroke(stroke, eps).tolist()]
            assert got == expected, (stroke, eps)

    @given(trajectories, st.floats(0.1, 10))
    def test_subsequence_endpoints_idempotent(self, traj, eps):
        once = reduce_points(traj, eps)
        for src, out in zip(traj.strokes, once.strokes):
            np.testing.assert_array_equal(out[0], src[0])
            np.testing.assert_array_equal(out[-1], src[-1])
            pos = 0
            for p in out:
                while not np.array_equal(src[pos], p):
                    pos += 1
                pos += 1
        twice = reduce_points(once, eps)
        for a, b in zip(once.strokes, twice.strokes):
            np.testing.assert_array_equal(a, b)


class TestEncoding:
    def test_single_stroke(self):
        seq = encode_sequence(Trajectory([[(0, 0), (63, 63)]]), 64)
        np.testing.assert_array_equal(seq.points, [[0, 0, 1, 0, 0], [1, 1, 0, 0, 1]])
        assert seq.n_real == 2

    def test_two_single_point_strokes(self):
        seq = encode_sequence(Trajectory([[(3, 4)], [(5, 6)]]), 64)
        np.testing.assert_array_equal(seq.points[:, 2:], [[0, 1, 0], [0, 0, 1]])

    @given(trajectories)
    def test_pen_state_counts(self, traj):
        seq = encode_sequence(traj, 64)
        states = seq.points[:, 2:]
        assert np.all(states.sum(axis=1) == 1)
        assert states[:, 1].sum() == len(traj.strokes) - 1
        assert states[:, 2].sum() == 1 and states[-1, 2] == 1
        assert seq.n_real == traj.n_points

    @given(trajectories)
    def test_to_trajectory_inverts(self, traj):
        back = encode_sequence(traj, 64).to_trajectory(64)
        assert len(back.strokes) == len(traj.strokes)
        for a, b in zip(traj.strokes, back.strokes):
            np.testing.assert_allclose(a, b, atol=1e-9)


class TestPadding:
    def seq(self, n):
        return encode_sequence(Trajectory([[(k, k) for k in range(n)]]), 64)

    def test_lengths(self):
        batch = pad_sequences([self.seq(3), self.seq(5)])
        assert batch.points.shape == (2, 5, 5)
        np.testing.assert_array_equal(batch.points[0, 3:], [PAD_RECORD, PAD_RECORD])
        np.testing.assert_array_equal(batch.lengths, [3, 5])

    def test_single_unchanged(self):
        s = self.seq(4)
        np.testing.assert_array_equal(pad_sequences([s]).points[0], s.points)

    def test_random_batch(self):
        rng = np.random.default_rng(3)
        seqs = [self.seq(int(n)) for n in rng.integers(1, 30, size=64)]
        batch = pad_sequences(seqs)
        assert batch.steps == max(s.n_real for s in seqs)
        for s, row in zip(seqs, batch.points):
            assert np.all(row[s.n_real:, 4] == 1)
            assert np.all(row[s.n_real:, :4] == 0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pad_sequences([])


class TestRasterize:
    def test_horizontal_row(self):
        img = rasterize(Trajectory([[(0, 32), (63, 32)]]), 64)
        assert img.sum() == 64 and img[32].sum() == 64

    def test_single_point_rounds_half_up(self):
        img = rasterize(Trajectory([[(10.4, 20.6)]]), 64)
        assert img.sum() == 1 and img[21, 10] == 1

    def test_half_rounds_up(self):
        img = rasterize(Trajectory([[(2.5, 3.5)]]), 8)
        assert img[4, 3] == 1

    def test_diagonal_one_pixel_per_row(self):
        img = rasterize(Trajectory([[(0, 0), (63, 63)]]), 64)
        assert img.sum() == 64 and np.all(img.sum(axis=1) == 1)

    @given(st.integers(-20, 20), st.integers(-20, 20), st.integers(-20, 20), st.integers(-20, 20))
    def test_bresenham_properties(self, x0, y0, x1, y1):
        pixels = bresenham(x0, y0, x1, y1)
        assert pixels[0] == (x0, y0) and pixels[-1] == (x1, y1)
        assert len(pixels) == max(abs(x1 - x0), abs(y1 - y0)) + 1
        for (ax, ay), (bx, by) in zip(pixels, pixels[1:]):
            assert max(abs(bx - ax), abs(by - ay)) == 1
        # every pixel lies within half a pixel of the ideal line along the minor axis
        if (x0, y0) != (x1, y1):
            for px, py in pixels:
                if abs(x1 - x0) >= abs(y1 - y0):
                    ideal = y0 + (y1 - y0) * (px - x0) / (x1 - x0)
                    assert abs(py - ideal) <= 0.5 + 1e-9
                else:
                    ideal = x0 + (x1 - x0) * (py - y0) / (y1 - y0)
                    assert abs(px - ideal) <= 0.5 + 1e-9

    @given(trajectories)
    def test_stroke_order_invariant(self, traj):
        np.testing.assert_array_equal(rasterize(traj, 64), rasterize(traj.reversed_strokes(), 64))

    def test_out_of_range_pixels_dropped(self):
        img = rasterize(Trajectory([[(-3, 2), (3, 2)]]), 8)
        assert img[2].sum() == 4


def test_preprocess_pipeline():
    image, seq, traj = preprocess(sample([[(0, 0), (50, 0), (100, 0)], [(0, 100), (100, 100)]]), 64, 2.0)
    assert image.shape == (64, 64) and image.dtype == np.uint8
    assert [len(s) for s in traj.strokes] == [2, 2]
    assert isinstance(seq, PointSequence) and seq.n_real == 4
    np.testing.assert_array_equal(image, rasterize(seq.to_trajectory(64), 64))
