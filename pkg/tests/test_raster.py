import numpy as np
import pytest

from evomap.geometry import SIGMA_CUTOFF, Camera, project_batch
from evomap.gmap import GaussianMap
from evomap.raster import backward, brute_force_render, render


def logit(p):
    return float(np.log(p / (1.0 - p)))


def make_camera(size=64, f=80.0, far=12.0):
    c = (size - 1) / 2.0
    return Camera(fx=f, fy=f, cx=c, cy=c, width=size, height=size, far=far)


def random_scene(seed, n=50, dtype=np.float64, z_range=(2.0, 5.0),
                 logit_range=(-1.0, 2.0)):
    rng = np.random.default_rng(seed)
    gm = GaussianMap(dtype=dtype)
    means = np.column_stack([
        rng.uniform(-1.5, 1.5, size=n),
        rng.uniform(-1.5, 1.5, size=n),
        rng.uniform(*z_range, size=n),
    ])
    colors = rng.uniform(0.05, 0.95, size=(n, 3))
    ls = rng.uniform(np.log(0.05), np.log(0.35), size=(n, 3))
    quats = rng.normal(size=(n, 4))
    logits = rng.uniform(*logit_range, size=n)
    gm.insert(means, colors, log_scales=ls, quats=quats,
              opacity_logits=logits)
    return gm


class TestForward:
    def test_empty_map_renders_background(self):
        gm = GaussianMap()
        cam = make_camera()
        out = render(gm, cam, background=(0.2, 0.4, 0.6))
        assert np.allclose(out.color, [0.2, 0.4, 0.6])
        assert np.allclose(out.alpha, 0.0)
        assert np.allclose(out.depth, cam.far)

    def test_single_gaussian_alpha_equals_opacity_at_center(self):
        # A splat centered exactly on a pixel has sigma = 0 there, so the
        # blended alpha is the activated opacity itself.
        gm = GaussianMap(dtype=np.float64)
        cam = Camera(fx=80, fy=80, cx=32, cy=32, width=64, height=64)
        gm.insert(np.array([[0.0, 0.0, 2.0]]), np.array([[1.0, 0.5, 0.25]]),
                  log_scales=np.log(0.1) * np.ones((1, 3)),
                  opacity_logits=np.array([logit(0.8)]))
        out = render(gm, cam, background=(1.0, 1.0, 1.0))
        assert out.alpha[32, 32] == pytest.approx(0.8, abs=1e-9)
        assert np.allclose(out.color[32, 32],
                           0.8 * np.array([1.0, 0.5, 0.25]) + 0.2, atol=1e-9)
        assert out.depth[32, 32] == pytest.approx(2.0)

    def test_two_overlapping_gaussians_composite(self):
        # Both splats have alpha 0.5 at the shared center pixel; front at
        # 1 m, back at 2 m: weights (0.5, 0.25), expected depth 4/3 m.
        gm = GaussianMap(dtype=np.float64)
        cam = Camera(fx=80, fy=80, cx=32, cy=32, width=64, height=64)
        c1 = np.array([0.9, 0.1, 0.1])
        c2 = np.array([0.1, 0.9, 0.1])
        gm.insert(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]),
                  np.stack([c1, c2]),
                  log_scales=np.log(0.08) * np.ones((2, 3)),
                  opacity_logits=np.array([logit(0.5), logit(0.5)]))
        bg = np.array([0.0, 0.0, 1.0])
        out = render(gm, cam, background=tuple(bg))
        assert np.allclose(out.color[32, 32],
                           0.5 * c1 + 0.25 * c2 + 0.25 * bg, atol=1e-9)
        assert out.alpha[32, 32] == pytest.approx(0.75, abs=1e-9)
        assert out.depth[32, 32] == pytest.approx(4.0 / 3.0, abs=1e-9)

    def test_single_gaussian_matches_brute_force_bitwise(self):
        gm = random_scene(0, n=1)
        cam = make_camera()
        out = render(gm, cam)
        ref = brute_force_render(gm, cam)
        assert np.abs(out.color - ref.color).max() < 1e-12
        assert np.abs(out.depth - ref.depth).max() < 1e-12
        assert np.abs(out.alpha - ref.alpha).max() < 1e-12

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force_on_random_scenes(self, seed):
        gm = random_scene(seed, n=50)
        cam = make_camera()
        out = render(gm, cam)
        ref = brute_force_render(gm, cam)
        assert np.abs(out.color - ref.color).max() < 1e-4
        assert np.abs(out.depth - ref.depth).max() < 1e-3
        assert out.alpha.min() >= 0.0 and out.alpha.max() <= 1.0 + 1e-9

    def test_exact_match_with_cutoff_disabled(self):
        gm = random_scene(3, n=120, logit_range=(1.0, 4.0))
        cam = make_camera()
        out = render(gm, cam, cutoff=0.0)
        ref = brute_force_render(gm, cam)
        assert np.abs(out.color - ref.color).max() < 1e-12
        assert np.abs(out.depth - ref.depth).max() < 1e-11

    def test_dense_scene_stays_within_oracle_tolerance(self):
        gm = random_scene(4, n=200, logit_range=(1.0, 5.0), z_range=(1.5, 4.0))
        cam = make_camera()
        out = render(gm, cam)
        ref = brute_force_render(gm, cam)
        assert np.abs(out.color - ref.color).max() < 1e-4
        assert np.abs(out.depth - ref.depth).max() < 1e-3

    def test_energy_conservation_per_pixel(self):
        # Recompute alpha at a few pixels straight from the projection and
        # check sum(w_j) + prod(1 - alpha_j) == 1.
        gm = random_scene(5, n=30)
        cam = make_camera()
        out = render(gm, cam, cutoff=0.0)
        m, q, ls, lo, _, ids = gm.gather()
        proj = project_batch(m, q, ls, cam)
        vis = np.flatnonzero(proj.visible)
        order = vis[np.lexsort((ids[vis], proj.depth[vis]))]
        rng = np.random.default_rng(0)
        for _ in range(20):
            py, px = rng.integers(0, 64, size=2)
            wsum = 0.0
            trans = 1.0
            for g in order:
                dx = px - proj.mean2d[g, 0]
                dy = py - proj.mean2d[g, 1]
                a, b, c = proj.conic[g]
                sigma = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                if sigma > SIGMA_CUTOFF:
                    continue
                alpha = min(1.0 / (1.0 + np.exp(-lo[g])) * np.exp(-sigma),
                            0.99)
                wsum += alpha * trans
                trans *= 1.0 - alpha
            assert wsum + trans == pytest.approx(1.0, abs=1e-6)
            assert out.alpha[py, px] == pytest.approx(wsum, abs=1e-6)

    def test_insertion_order_does_not_change_output(self):
        rng = np.random.default_rng(9)
        n = 30
        means = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n),
                                 rng.uniform(2, 5, n)])
        colors = rng.uniform(0, 1, size=(n, 3))
        ls = rng.uniform(-3, -1, size=(n, 3))
        quats = rng.normal(size=(n, 4))
        logits = rng.uniform(-1, 2, size=n)
        cam = make_camera()

        gm_a = GaussianMap(dtype=np.float64)
        gm_a.insert(means, colors, log_scales=ls, quats=quats,
                    opacity_logits=logits)
        perm = rng.permutation(n)
        gm_b = GaussianMap(dtype=np.float64)
        gm_b.insert(means[perm], colors[perm], log_scales=ls[perm],
                    quats=quats[perm], opacity_logits=logits[perm])
        out_a = render(gm_a, cam)
        out_b = render(gm_b, cam)
        assert np.abs(out_a.color - out_b.color).max() < 1e-12
        assert np.abs(out_a.depth - out_b.depth).max() < 1e-12

    def test_row_order_canonicalized_by_depth_sort(self):
        gm = random_scene(10, n=25)
        cam = make_camera()
        rows = gm.live_rows()
        shuffled = np.random.default_rng(1).permutation(rows)
        out_a = render(gm, cam, rows=rows)
        out_b = render(gm, cam, rows=shuffled)
        assert np.array_equal(out_a.color, out_b.color)

    def test_subset_render_restricts_to_ids(self):
        gm = random_scene(11, n=20)
        cam = make_camera()
        ids = gm.live_ids()
        half = ids[: len(ids) // 2]
        out_sub = render(gm, cam, subset=half)
        gm2 = random_scene(11, n=20)
        gm2.tombstone(ids[len(ids) // 2:])
        out_only = render(gm2, cam)
        assert np.allclose(out_sub.color, out_only.color, atol=1e-12)
        full = render(gm, cam, subset=ids)
        ref = render(gm, cam)
        assert np.array_equal(full.color, ref.color)

    def test_contributors_recorded_with_weights(self):
        gm = random_scene(12, n=40)
        cam = make_camera()
        out = render(gm, cam, keep_contributors=True)
        assert out.contrib_ids is not None
        wsum = out.contrib_weights.sum(axis=2)
        assert np.abs(wsum - out.alpha).max() < 1e-9
        counts = out.contrib_count
        filled = (out.contrib_ids >= 0).sum(axis=2)
        assert np.array_equal(counts, filled)
        live = set(gm.live_ids())
        used = out.contrib_ids[out.contrib_ids >= 0]
        assert set(np.unique(used)).issubset(live)

    def test_raw_depth_mode_composites_with_far_background(self):
        gm = GaussianMap(dtype=np.float64)
        cam = Camera(fx=80, fy=80, cx=32, cy=32, width=64, height=64,
                     far=10.0)
        gm.insert(np.array([[0.0, 0.0, 2.0]]), np.array([[0.5, 0.5, 0.5]]),
                  log_scales=np.log(0.1) * np.ones((1, 3)),
                  opacity_logits=np.array([logit(0.8)]))
        out = render(gm, cam, normalize_depth=False)
        ref = brute_force_render(gm, cam, normalize_depth=False)
        assert out.depth[32, 32] == pytest.approx(0.8 * 2.0 + 0.2 * 10.0)
        assert np.abs(out.depth - ref.depth).max() < 1e-9

    def test_behind_camera_gaussians_ignored(self):
        gm = GaussianMap(dtype=np.float64)
        cam = make_camera()
        gm.insert(np.array([[0.0, 0.0, -2.0], [0.0, 0.0, 3.0]]),
                  np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
                  log_scales=np.log(0.2) * np.ones((2, 3)),
                  opacity_logits=np.array([3.0, 3.0]))
        out = render(gm, cam)
        assert out.color[..., 0].max() < 1e-9


def fd_pixel_mask(gm, cam, margin_sigma=2e-3, floor_margin=2e-3,
                  edge_margin=1e-2):
    """Mask out pixels sitting on blending discontinuities, or reject.

    Finite differences step parameters by 1e-5, which moves any sigma value
    by far less than `margin_sigma`. Pixels within that margin of the
    3-sigma truncation edge, or with accumulation near the depth
    normalization floor, are excluded from the loss so the remaining
    objective is smooth. A splat whose footprint grazes the image bound can
    flip its visibility bit entirely, so those scenes are rejected outright
    (returns None).
    """
    m, q, ls, lo, _, ids = gm.gather()
    proj = project_batch(m, q, ls, cam)
    vis = np.flatnonzero(proj.visible)
    if len(vis) == 0:
        return None
    xs, ys = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    wsum = np.zeros((cam.height, cam.width))
    trans = np.ones((cam.height, cam.width))
    mask = np.ones((cam.height, cam.width), dtype=bool)
    order = vis[np.lexsort((ids[vis], proj.depth[vis]))]
    for g in order:
        r = proj.radius[g]
        x, y = proj.mean2d[g]
        d_edge = min(x + r, y + r, cam.width - 1 + r - x,
                     cam.height - 1 + r - y)
        if abs(d_edge) < edge_margin:
            return None
        dx = xs - x
        dy = ys - y
        a, b, c = proj.conic[g]
        sigma = 0.5 * (a * dx ** 2 + c * dy ** 2) + b * dx * dy
        mask &= np.abs(sigma - SIGMA_CUTOFF) > margin_sigma
        inside = sigma <= SIGMA_CUTOFF
        alpha = 1.0 / (1.0 + np.exp(-lo[g])) * np.exp(-sigma) * inside
        wsum += alpha * trans
        trans *= 1.0 - alpha
    mask &= np.abs(wsum - 1e-3) > floor_margin
    if mask.mean() < 0.5:
        return None
    return mask


def fd_safe_scene(base_seed, n=8, size=16):
    cam = Camera(fx=22.0, fy=22.0, cx=(size - 1) / 2, cy=(size - 1) / 2,
                 width=size, height=size, far=12.0)
    for attempt in range(40):
        gm = random_scene(base_seed + 1000 * attempt, n=n,
                          z_range=(2.2, 4.2), logit_range=(-1.0, 1.2))
        mask = fd_pixel_mask(gm, cam)
        if mask is not None:
            return gm, cam, mask
    raise RuntimeError("no finite-difference-safe scene found")


def collect_grads(gm, out, d_color, d_depth):
    g = backward(gm, out, d_color=d_color, d_depth=d_depth)
    n = gm.count_live()
    dense = {
        "means": np.zeros((n, 3)),
        "quats": np.zeros((n, 4)),
        "log_scales": np.zeros((n, 3)),
        "opacity_logits": np.zeros(n),
        "colors": np.zeros((n, 3)),
    }
    dense["means"][g.rows] = g.means
    dense["quats"][g.rows] = g.quats
    dense["log_scales"][g.rows] = g.log_scales
    dense["opacity_logits"][g.rows] = g.opacity_logits
    dense["colors"][g.rows] = g.colors
    return dense


def run_fd_check(seed, normalize_depth=True, h=1e-5):
    gm, cam, mask = fd_safe_scene(seed)
    n = gm.count_live()
    rng = np.random.default_rng(seed + 77)
    d_color = rng.normal(size=(cam.height, cam.width, 3)) * mask[..., None]
    d_depth = rng.normal(size=(cam.height, cam.width)) * 0.3 * mask

    def loss():
        out = render(gm, cam, cutoff=0.0, normalize_depth=normalize_depth)
        return float(np.sum(out.color * d_color) + np.sum(out.depth * d_depth))

    out = render(gm, cam, cutoff=0.0, normalize_depth=normalize_depth)
    dense = collect_grads(gm, out, d_color, d_depth)

    worst = 0.0
    for field in ("means", "quats", "log_scales", "opacity_logits", "colors"):
        flat = getattr(gm, field)[:n].reshape(n, -1)
        gflat = dense[field].reshape(n, -1)
        for i in range(n):
            for k in range(flat.shape[1]):
                old = flat[i, k]
                flat[i, k] = old + h
                gm.generation += 1
                lp = loss()
                flat[i, k] = old - h
                gm.generation += 1
                lm = loss()
                flat[i, k] = old
                gm.generation += 1
                fd = (lp - lm) / (2 * h)
                an = gflat[i, k]
                err = abs(fd - an)
                if err > 1e-7:
                    rel = err / max(abs(fd), abs(an))
                    worst = max(worst, rel)
    return worst


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        gm = random_scene(1, n=10)
        cam = make_camera(size=32)
        out = render(gm, cam)
        g = backward(gm, out, d_color=np.zeros((32, 32, 3)),
                     d_depth=np.zeros((32, 32)))
        for arr in (g.means, g.quats, g.log_scales, g.opacity_logits,
                    g.colors):
            assert np.allclose(arr, 0.0)

    def test_color_gradient_is_blend_weight(self):
        gm = GaussianMap(dtype=np.float64)
        cam = Camera(fx=80, fy=80, cx=16, cy=16, width=32, height=32)
        gm.insert(np.array([[0.0, 0.0, 2.0]]), np.array([[0.3, 0.3, 0.3]]),
                  log_scales=np.log(0.1) * np.ones((1, 3)),
                  opacity_logits=np.array([logit(0.7)]))
        out = render(gm, cam, keep_contributors=True)
        d_color = np.zeros((32, 32, 3))
        d_color[16, 16, 0] = 1.0
        g = backward(gm, out, d_color=d_color)
        w = out.contrib_weights[16, 16, 0]
        assert w == pytest.approx(0.7, abs=1e-9)
        assert g.colors[0, 0] == pytest.approx(w, abs=1e-12)
        assert g.colors[0, 1] == 0.0

    def test_masked_pixels_contribute_nothing(self):
        gm = random_scene(2, n=15)
        cam = make_camera(size=32)
        rng = np.random.default_rng(0)
        d_color = rng.normal(size=(32, 32, 3))
        d_depth = rng.normal(size=(32, 32))
        mask = rng.uniform(size=(32, 32)) > 0.4

        out = render(gm, cam)
        g_masked = backward(gm, out, d_color=d_color, d_depth=d_depth,
                            pixel_mask=mask)
        out2 = render(gm, cam)
        g_zeroed = backward(gm, out2, d_color=d_color * mask[..., None],
                            d_depth=d_depth * mask)
        assert np.allclose(g_masked.means, g_zeroed.means, atol=1e-12)
        assert np.allclose(g_masked.colors, g_zeroed.colors, atol=1e-12)
        assert np.allclose(g_masked.quats, g_zeroed.quats, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        gm = random_scene(3, n=5)
        cam = make_camera(size=32)
        out = render(gm, cam)
        with pytest.raises(ValueError):
            backward(gm, out, d_color=np.zeros((16, 16, 3)))
        with pytest.raises(ValueError):
            backward(gm, out, d_color=np.zeros((32, 32, 3)),
                     d_depth=np.zeros((16, 16)))

    def test_map_mutation_after_forward_rejected(self):
        gm = random_scene(4, n=5)
        cam = make_camera(size=32)
        out = render(gm, cam)
        gm.insert(np.zeros((1, 3)), np.zeros((1, 3)))
        with pytest.raises(ValueError):
            backward(gm, out, d_color=np.zeros((32, 32, 3)))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_match_finite_differences(self, seed):
        worst = run_fd_check(seed)
        assert worst < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences_raw_depth(self, seed):
        worst = run_fd_check(seed + 100, normalize_depth=False)
        assert worst < 1e-3
