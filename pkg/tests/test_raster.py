"""Rasterizer: EWA projection, compositing vs a brute-force oracle, gradients.

The compositing oracle is a per-pixel python loop over every fragment sorted
front to back, with no tiles and no bounding boxes, evaluating the blending
sums directly.  The tiled renderer must agree to 1e-6.
"""

import numpy as np
import pytest

from splat4d.cameras import CameraView
from splat4d.field import GaussianField
from splat4d.raster import (
    FragmentBatch,
    RenderConfig,
    TileOverflowError,
    project_gaussians,
    render,
    render_backward,
    render_field,
    render_field_backward,
    sort_fragments,
)
from splat4d.field import slice_at_time


def make_camera(w=32, h=32, fx=40.0, fy=40.0):
    return CameraView(
        fx=fx, fy=fy, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, width=w, height=h,
        rotation=np.eye(3), translation=np.zeros(3),
    )


def composite_reference(frags: FragmentBatch, camera, config: RenderConfig):
    """Direct evaluation of the blending equations, one pixel at a time."""
    order = np.lexsort((frags.source, frags.depth))
    h, w = camera.height, camera.width
    bg = np.asarray(config.background, dtype=np.float64)
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    alpha = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int32)
    for v in range(h):
        for u in range(w):
            trans = 1.0
            c = np.zeros(3)
            d = 0.0
            m = 0
            for k in order:
                if trans < config.term_transmittance:
                    break
                delta = frags.mean2[k] - (u, v)
                conic = np.linalg.inv(frags.cov2[k])
                power = -0.5 * delta @ conic @ delta
                a = min(config.alpha_clamp, frags.opacity_base[k] * np.exp(power))
                c = c + frags.color[k] * a * trans
                d = d + frags.depth[k] * a * trans
                trans *= 1.0 - a
                m += 1
            color[v, u] = c + trans * bg
            depth[v, u] = d
            alpha[v, u] = 1.0 - trans
            count[v, u] = m
    return color, depth, alpha, count


def fragment_at_pixel(u, v, opacity, depth, color, width=5.0, source=0):
    """A fragment whose alpha at (u, v) is exactly ``opacity``."""
    return dict(
        mean2=np.array([[float(u), float(v)]]),
        cov2=np.array([[[width, 0.0], [0.0, width]]]),
        opacity_base=np.array([float(opacity)]),
        depth=np.array([float(depth)]),
        color=np.array([color], dtype=np.float64),
        source=np.array([source]),
    )


def stack_fragments(parts):
    return FragmentBatch(**{
        key: np.concatenate([p[key] for p in parts], axis=0)
        for key in ("mean2", "cov2", "opacity_base", "depth", "color", "source")
    })


def random_field(rng, n, dtype=np.float64, sh_degree=0):
    mean4 = np.column_stack([
        rng.uniform(-0.5, 0.5, n),
        rng.uniform(-0.5, 0.5, n),
        rng.uniform(2.0, 3.0, n),
        rng.uniform(0.2, 0.8, n),
    ])
    f = GaussianField(
        mean4=mean4,
        quat_l=rng.standard_normal((n, 4)),
        quat_r=rng.standard_normal((n, 4)),
        log_scales=np.column_stack([
            rng.uniform(np.log(0.08), np.log(0.25), (n, 3)),
            rng.uniform(np.log(0.8), np.log(1.5), n),
        ]),
        opacity_logit=rng.uniform(0.0, 1.2, n),
        color_dc=rng.uniform(-0.3, 1.0, (n, 3)),
        color_time=rng.uniform(-0.2, 0.2, (n, 3)),
        color_sh1=rng.uniform(-0.2, 0.2, (n, 3, 3)) if sh_degree else None,
    )
    return f.astype(dtype)


class TestProjection:
    def test_isotropic_gaussian_on_axis(self):
        # Sigma = r^2 I at depth z projects to (fx r / z)^2 I plus the blur floor
        cam = make_camera(fx=50.0, fy=50.0)
        r, z = 0.2, 2.5
        f = GaussianField(
            mean4=np.array([[0.0, 0.0, z, 0.0]]),
            quat_l=np.array([[1.0, 0, 0, 0]]),
            quat_r=np.array([[1.0, 0, 0, 0]]),
            log_scales=np.log([[r, r, r, 1.0]]),
            opacity_logit=np.array([2.0]),
            color_dc=np.zeros((1, 3)),
            color_time=np.zeros((1, 3)),
        )
        s = slice_at_time(f, 0.0)
        cfg = RenderConfig()
        frags, kept = project_gaussians(s, np.ones((1, 3)), cam, cfg)
        assert kept.tolist() == [0]
        want = (50.0 * r / z) ** 2
        assert np.allclose(frags.cov2[0], np.diag([want + 0.3, want + 0.3]), rtol=1e-10)
        assert np.allclose(frags.mean2[0], [cam.cx, cam.cy])
        assert frags.depth[0] == pytest.approx(z)

    def test_near_plane_culls(self):
        cam = make_camera()
        rng = np.random.default_rng(0)
        f = random_field(rng, 3)
        f.mean4[1, 2] = -1.0  # behind the camera
        s = slice_at_time(f, 0.5)
        _, kept = project_gaussians(s, np.ones((3, 3)), cam)
        assert 1 not in kept.tolist()

    def test_faded_opacity_culls(self):
        cam = make_camera()
        rng = np.random.default_rng(1)
        f = random_field(rng, 2)
        f.mean4[0, 3] = 0.5
        f.log_scales[0, 3] = np.log(0.02)  # tiny temporal extent
        # identity rotation keeps the temporal variance at exp(2 ls_t)
        f.quat_l[0] = f.quat_r[0] = (1.0, 0.0, 0.0, 0.0)
        s = slice_at_time(f, 0.95)  # far from its time center: decay ~ 0
        assert s.decay[0] < 1e-8
        _, kept = project_gaussians(s, np.ones((2, 3)), cam)
        assert 0 not in kept.tolist()


class TestCompositeExamples:
    def test_two_fragment_hand_example(self):
        # front: alpha 0.5, red, depth 1; back: alpha clamped to 0.99, green,
        # depth 2 -> C = (0.5, 0.495, 0), D = 0.5 + 0.99 * 0.5 * 2 = 1.49
        cam = make_camera(w=8, h=8)
        frags = stack_fragments([
            fragment_at_pixel(3, 3, 0.5, 1.0, (1.0, 0.0, 0.0), source=0),
            fragment_at_pixel(3, 3, 1.0, 2.0, (0.0, 1.0, 0.0), source=1),
        ])
        out = render(frags, cam)
        assert np.allclose(out.color[3, 3], [0.5, 0.495, 0.0], atol=1e-12)
        assert out.depth[3, 3] == pytest.approx(1.49, abs=1e-12)

    def test_single_opaque_fragment(self):
        cam = make_camera(w=8, h=8)
        frags = stack_fragments([fragment_at_pixel(4, 2, 0.99, 1.5, (0.2, 0.4, 0.8))])
        out = render(frags, cam)
        assert np.allclose(out.color[2, 4], np.array([0.2, 0.4, 0.8]) * 0.99)
        assert out.depth[2, 4] == pytest.approx(1.5 * 0.99)
        assert out.alpha[2, 4] == pytest.approx(0.99)
        assert out.n_contrib[2, 4] == 1

    def test_empty_scene_is_background(self):
        cam = make_camera(w=8, h=8)
        cfg = RenderConfig(background=(0.1, 0.2, 0.3))
        frags = FragmentBatch(
            mean2=np.zeros((0, 2)), cov2=np.zeros((0, 2, 2)),
            opacity_base=np.zeros(0), depth=np.zeros(0),
            color=np.zeros((0, 3)), source=np.zeros(0, dtype=np.int64),
        )
        out = render(frags, cam, cfg)
        assert np.allclose(out.color, [0.1, 0.2, 0.3])
        assert np.all(out.depth == 0.0)
        assert np.all(out.alpha == 0.0)
        assert np.all(out.n_contrib == 0)

    def test_alpha_is_clamped(self):
        cam = make_camera(w=4, h=4)
        frags = stack_fragments([fragment_at_pixel(1, 1, 5.0, 1.0, (1.0, 1.0, 1.0))])
        out = render(frags, cam)
        assert out.alpha[1, 1] == pytest.approx(0.99)

    def test_median_depth_picks_first_crossing(self):
        # three half-opacity layers: accumulated opacity after each is 0.5,
        # 0.75, 0.875; the first crossing of 0.5 is the front layer
        cam = make_camera(w=8, h=8)
        frags = stack_fragments([
            fragment_at_pixel(3, 3, 0.5, 1.0, (1.0, 0.0, 0.0), source=0),
            fragment_at_pixel(3, 3, 0.5, 2.0, (0.0, 1.0, 0.0), source=1),
            fragment_at_pixel(3, 3, 0.5, 3.0, (0.0, 0.0, 1.0), source=2),
        ])
        out = render(frags, cam)
        assert out.median_depth[3, 3] == pytest.approx(1.0, abs=1e-12)

    def test_median_depth_zero_when_never_opaque(self):
        cam = make_camera(w=8, h=8)
        frags = stack_fragments([fragment_at_pixel(3, 3, 0.3, 1.0, (1.0, 0.0, 0.0))])
        out = render(frags, cam)
        assert out.median_depth[3, 3] == 0.0
        assert out.alpha[3, 3] == pytest.approx(0.3)


class TestBruteForceEquivalence:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_scene_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cam = make_camera(w=24, h=24, fx=30.0, fy=30.0)
        f = random_field(rng, 8)
        t = 0.5
        s = slice_at_time(f, t)
        cfg = RenderConfig(background=(0.05, 0.1, 0.15))
        colors = np.maximum(
            0.5 + 0.28209479177387814 * f.color_dc + f.color_time * (t - f.mean4[:, 3:4]),
            0.0,
        )
        frags, _ = project_gaussians(s, colors, cam, cfg)
        out = render(frags, cam, cfg)
        c_ref, d_ref, a_ref, m_ref = composite_reference(frags, cam, cfg)
        assert np.abs(out.color - c_ref).max() < 1e-6
        assert np.abs(out.depth - d_ref).max() < 1e-6
        assert np.abs(out.alpha - a_ref).max() < 1e-6

    def test_opaque_stack_hits_early_termination(self):
        # five near-opaque layers: transmittance falls below 1e-4 before the
        # last fragments, and the oracle replays the same termination rule
        cam = make_camera(w=8, h=8)
        parts = [
            fragment_at_pixel(3, 3, 0.97, 1.0 + 0.2 * k, (0.1 * k, 0.5, 1.0 - 0.1 * k),
                              source=k)
            for k in range(5)
        ]
        frags = stack_fragments(parts)
        cfg = RenderConfig()
        out = render(frags, cam, cfg)
        c_ref, d_ref, a_ref, m_ref = composite_reference(frags, cam, cfg)
        assert m_ref[3, 3] < 5  # termination really kicked in
        assert np.abs(out.color - c_ref).max() < 1e-12
        assert np.abs(out.depth - d_ref).max() < 1e-12
        assert np.array_equal(out.n_contrib, m_ref)


class TestSortingAndTiles:
    def test_within_tile_order_is_depth_then_source(self):
        cam = make_camera(w=16, h=16)
        parts = [
            fragment_at_pixel(8, 8, 0.5, 2.0, (1, 0, 0), source=0),
            fragment_at_pixel(8, 8, 0.5, 1.0, (0, 1, 0), source=1),
            fragment_at_pixel(8, 8, 0.5, 2.0, (0, 0, 1), source=2),
        ]
        frags = stack_fragments(parts)
        tile_lists, _ = sort_fragments(frags, cam, RenderConfig())
        assert tile_lists[0].tolist() == [1, 0, 2]

    def test_tile_cap_strict_raises(self):
        cam = make_camera(w=16, h=16)
        parts = [fragment_at_pixel(8, 8, 0.3, 1.0 + k, (1, 1, 1), source=k)
                 for k in range(5)]
        frags = stack_fragments(parts)
        cfg = RenderConfig(tile_cap=3, strict_tile_cap=True)
        with pytest.raises(TileOverflowError):
            sort_fragments(frags, cam, cfg)

    def test_tile_cap_drops_farthest(self):
        cam = make_camera(w=16, h=16)
        parts = [fragment_at_pixel(8, 8, 0.3, 1.0 + k, (1, 1, 1), source=k)
                 for k in range(5)]
        frags = stack_fragments(parts)
        cfg = RenderConfig(tile_cap=3, strict_tile_cap=False)
        tile_lists, _ = sort_fragments(frags, cam, cfg)
        assert tile_lists[0].tolist() == [0, 1, 2]

    def test_thread_count_does_not_change_output(self):
        rng = np.random.default_rng(7)
        cam = make_camera(w=40, h=40, fx=45.0, fy=45.0)
        f = random_field(rng, 30)
        outs = []
        for threads in (1, 4, 8):
            cfg = RenderConfig(threads=threads)
            out = render_field(f, 0.4, cam, cfg)
            outs.append(out)
        for other in outs[1:]:
            assert np.array_equal(outs[0].color, other.color)
            assert np.array_equal(outs[0].depth, other.depth)
            assert np.array_equal(outs[0].alpha, other.alpha)


def relative_errors(analytic, fd, floor_scale=1e-3):
    floor = max(np.abs(fd).max(), 1e-12) * floor_scale
    return np.abs(analytic - fd) / np.maximum(np.abs(fd), floor)


class TestGradients:
    def fd_check(self, dtype, rtol, sh_degree=0, seed=11):
        rng = np.random.default_rng(seed)
        cam = make_camera(w=24, h=24, fx=30.0, fy=30.0)
        f64 = random_field(rng, 5, dtype=np.float64, sh_degree=sh_degree)
        t = 0.45
        # keep truncation far below the finite-difference step
        cfg = RenderConfig(radius_alpha_floor=1e-13)
        w_c = rng.standard_normal((24, 24, 3))
        w_d = rng.standard_normal((24, 24))

        def objective(field):
            out = render_field(field, t, cam, cfg)
            return float(np.sum(w_c * out.color) + np.sum(w_d * out.depth))

        f = f64.astype(dtype)
        out, ctx = render_field(f, t, cam, cfg, want_context=True)
        grads = render_field_backward(ctx, w_c.astype(dtype), w_d.astype(dtype))

        names = ["mean4", "quat_l", "quat_r", "log_scales", "opacity_logit",
                 "color_dc", "color_time"]
        if sh_degree:
            names.append("color_sh1")
        worst = 0.0
        h = 1e-5
        for name in names:
            arr = getattr(f64, name)
            got = np.asarray(getattr(grads, name), dtype=np.float64)
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = objective(f64)
                arr[idx] = orig - h
                dn = objective(f64)
                arr[idx] = orig
                fd[idx] = (up - dn) / (2 * h)
            rel = relative_errors(got, fd)
            worst = max(worst, float(rel.max()))
            assert rel.max() < rtol, (name, rel.max())
        return worst

    def test_float64_gradients_match_fd(self):
        self.fd_check(np.float64, 1e-5)

    def test_float32_gradients_match_fd(self):
        self.fd_check(np.float32, 1e-3)

    def test_sh1_gradients_match_fd(self):
        self.fd_check(np.float64, 1e-5, sh_degree=1, seed=13)

    def test_backward_threads_bit_identical(self):
        rng = np.random.default_rng(21)
        cam = make_camera(w=40, h=40, fx=45.0, fy=45.0)
        f = random_field(rng, 25)
        w_c = rng.standard_normal((40, 40, 3))
        w_d = rng.standard_normal((40, 40))
        results = []
        for threads in (1, 4):
            cfg = RenderConfig(threads=threads)
            _, ctx = render_field(f, 0.3, cam, cfg, want_context=True)
            g = render_field_backward(ctx, w_c, w_d)
            results.append(g)
        for name in ("mean4", "quat_l", "quat_r", "log_scales",
                      "opacity_logit", "color_dc", "color_time"):
            assert np.array_equal(getattr(results[0], name), getattr(results[1], name))
