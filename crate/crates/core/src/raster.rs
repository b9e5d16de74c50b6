//! Tile-based differentiable Gaussian rasterizer (CPU).
//!
//! Cameras follow the computer-vision convention: x right, y down, z forward,
//! pixel centres at half-integer coordinates. Gaussians are projected with
//! the local affine (EWA) approximation, binned into square tiles, sorted per
//! tile by `(depth, index)` and alpha-composited front to back.
//!
//! The backward pass replays each pixel's compositing list and accumulates
//! per-tile partial gradients, which are then summed in tile order so the
//! result does not depend on how tiles were scheduled across threads.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binding::{WorldGaussian, WorldGrads};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::math::{quat_to_mat, quat_to_mat_backward, Mat3, Quat, RigidTransform, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: RigidTransform,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("camera focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Config("camera needs 0 < near < far".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera has an empty image".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Added to the projected covariance diagonal, in px².
    pub blur: f64,
    pub max_alpha: f64,
    pub min_alpha: f64,
    pub min_transmittance: f64,
    /// Projected means further than this fraction of the image size outside
    /// the frame are culled.
    pub frustum_margin: f64,
    pub background: [f64; 3],
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            blur: 0.3,
            max_alpha: 0.999,
            min_alpha: 1.0 / 255.0,
            min_transmittance: 1e-4,
            frustum_margin: 0.15,
            background: [0.0; 3],
        }
    }
}

/// `R diag(s²) Rᵀ`.
pub fn compute_cov3d(rotation: &Quat, scale: &Vec3) -> Mat3 {
    let r = quat_to_mat(rotation);
    let s2 = Mat3::from_diagonal(&scale.component_mul(scale));
    r * s2 * r.transpose()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub visible: bool,
}

fn perspective_jacobian(camera: &Camera, t: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * t.x * iz * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * t.y * iz * iz,
    )
}

pub fn project_gaussian(mean: &Vec3, cov3d: &Mat3, camera: &Camera, config: &RasterConfig) -> Projection {
    let t = camera.world_to_camera.apply(mean);
    let mut p = Projection {
        mean2d: Vector2::zeros(),
        cov2d: Matrix2::zeros(),
        depth: t.z,
        visible: false,
    };
    if !(t.z > camera.near && t.z < camera.far) {
        return p;
    }
    p.mean2d = Vector2::new(camera.fx * t.x / t.z + camera.cx, camera.fy * t.y / t.z + camera.cy);
    let (mx, my) = (
        config.frustum_margin * camera.width as f64,
        config.frustum_margin * camera.height as f64,
    );
    if p.mean2d.x < -mx
        || p.mean2d.x > camera.width as f64 + mx
        || p.mean2d.y < -my
        || p.mean2d.y > camera.height as f64 + my
    {
        return p;
    }
    let m = perspective_jacobian(camera, &t) * camera.world_to_camera.rotation;
    p.cov2d = m * cov3d * m.transpose() + Matrix2::identity() * config.blur;
    p.visible = true;
    p
}

/// Screen-space data of one Gaussian, as used by compositing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat {
    pub mean2d: [f64; 2],
    /// Inverse projected covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    /// Pixel radius beyond which the contribution is below `min_alpha`.
    pub radius: f64,
    pub visible: bool,
}

/// Output of [`rasterize`], including what the backward pass needs.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub rgb: Image,
    pub alpha: Image,
    pub final_transmittance: Vec<f64>,
    pub splats: Vec<Splat>,
    /// Per-tile Gaussian indices in compositing order.
    pub tile_lists: Vec<Vec<u32>>,
    pub tile_size: usize,
}

fn check_finite(gaussians: &[WorldGaussian]) -> Result<()> {
    for (i, g) in gaussians.iter().enumerate() {
        let ok = g.mean.iter().all(|v| v.is_finite())
            && g.rotation.coords.iter().all(|v| v.is_finite())
            && g.scale.iter().all(|v| v.is_finite())
            && g.color.iter().all(|v| v.is_finite())
            && g.opacity.is_finite();
        if !ok {
            return Err(Error::NonFiniteGaussian { index: i });
        }
    }
    Ok(())
}

fn make_splat(g: &WorldGaussian, camera: &Camera, config: &RasterConfig) -> Splat {
    let cov = compute_cov3d(&g.rotation, &g.scale);
    let p = project_gaussian(&g.mean, &cov, camera, config);
    let mut s = Splat {
        mean2d: [p.mean2d.x, p.mean2d.y],
        conic: [0.0; 3],
        depth: p.depth,
        radius: 0.0,
        visible: false,
    };
    // contributions never exceed the opacity
    if !p.visible || g.opacity < config.min_alpha {
        return s;
    }
    let (a, b, c) = (p.cov2d[(0, 0)], p.cov2d[(0, 1)], p.cov2d[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return s;
    }
    s.conic = [c / det, -b / det, a / det];
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    // opacity · exp(-q/2) < min_alpha whenever q > 2 ln(opacity / min_alpha),
    // and q ≥ |d|² / λmax
    let reach = (2.0 * (g.opacity / config.min_alpha).ln()).max(9.0);
    s.radius = (reach * lambda_max).sqrt();
    s.visible = true;
    s
}

/// Inclusive pixel range whose centres lie within `radius` of `centre`.
fn pixel_span(centre: f64, radius: f64, len: usize) -> Option<(usize, usize)> {
    let lo = (centre - radius - 0.5).ceil().max(0.0);
    let hi = (centre + radius - 0.5).floor().min(len as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
    size: usize,
}

impl TileGrid {
    fn new(camera: &Camera, size: usize) -> Self {
        Self {
            tiles_x: camera.width.div_ceil(size),
            tiles_y: camera.height.div_ceil(size),
            size,
        }
    }

    fn bounds(&self, tile: usize, camera: &Camera) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * self.size;
        let y0 = ty * self.size;
        (x0, y0, (x0 + self.size).min(camera.width), (y0 + self.size).min(camera.height))
    }
}

fn bin_splats(splats: &[Splat], grid: &TileGrid, camera: &Camera) -> Vec<Vec<u32>> {
    let mut lists = vec![Vec::new(); grid.tiles_x * grid.tiles_y];
    for (i, s) in splats.iter().enumerate() {
        if !s.visible {
            continue;
        }
        let (Some((x0, x1)), Some((y0, y1))) = (
            pixel_span(s.mean2d[0], s.radius, camera.width),
            pixel_span(s.mean2d[1], s.radius, camera.height),
        ) else {
            continue;
        };
        for ty in y0 / grid.size..=y1 / grid.size {
            for tx in x0 / grid.size..=x1 / grid.size {
                lists[ty * grid.tiles_x + tx].push(i as u32);
            }
        }
    }
    lists.par_iter_mut().for_each(|l| {
        l.sort_by(|&a, &b| {
            splats[a as usize]
                .depth
                .total_cmp(&splats[b as usize].depth)
                .then(a.cmp(&b))
        })
    });
    lists
}

/// One Gaussian's contribution at a pixel.
#[derive(Clone, Copy)]
struct Hit {
    slot: usize,
    alpha: f64,
    /// False when `alpha` was clamped to `max_alpha`.
    live: bool,
    dx: f64,
    dy: f64,
}

/// Walks one pixel's compositing list, appending every contribution to
/// `hits`; returns the final transmittance.
fn composite_pixel(
    px: f64,
    py: f64,
    list: &[u32],
    splats: &[Splat],
    gaussians: &[WorldGaussian],
    config: &RasterConfig,
    hits: &mut Vec<Hit>,
) -> f64 {
    hits.clear();
    let mut t = 1.0;
    for (slot, &gi) in list.iter().enumerate() {
        let s = &splats[gi as usize];
        let dx = px - s.mean2d[0];
        let dy = py - s.mean2d[1];
        let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
        let raw = gaussians[gi as usize].opacity * (-0.5 * q).exp();
        if raw < config.min_alpha {
            continue;
        }
        let (alpha, live) = if raw > config.max_alpha {
            (config.max_alpha, false)
        } else {
            (raw, true)
        };
        hits.push(Hit {
            slot,
            alpha,
            live,
            dx,
            dy,
        });
        t *= 1.0 - alpha;
        if t < config.min_transmittance {
            break;
        }
    }
    t
}

pub fn rasterize(gaussians: &[WorldGaussian], camera: &Camera, config: &RasterConfig) -> Result<RenderOutput> {
    camera.validate()?;
    if config.tile_size == 0 {
        return Err(Error::Config("tile_size must be positive".into()));
    }
    check_finite(gaussians)?;
    let splats: Vec<Splat> = gaussians
        .par_iter()
        .map(|g| make_splat(g, camera, config))
        .collect();
    let grid = TileGrid::new(camera, config.tile_size);
    let tile_lists = bin_splats(&splats, &grid, camera);

    let (w, h) = (camera.width, camera.height);
    let bg = config.background;
    let tiles: Vec<Vec<(usize, [f64; 3], f64)>> = (0..tile_lists.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = grid.bounds(tile, camera);
            let list = &tile_lists[tile];
            let mut hits = Vec::new();
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let tf = composite_pixel(x as f64 + 0.5, y as f64 + 0.5, list, &splats, gaussians, config, &mut hits);
                    let mut c = [0.0; 3];
                    let mut t = 1.0;
                    for hit in &hits {
                        let col = &gaussians[list[hit.slot] as usize].color;
                        for k in 0..3 {
                            c[k] += hit.alpha * t * col[k];
                        }
                        t *= 1.0 - hit.alpha;
                    }
                    for k in 0..3 {
                        c[k] += tf * bg[k];
                    }
                    out.push((y * w + x, c, tf));
                }
            }
            out
        })
        .collect();

    let mut rgb = Image::new(w, h, 3);
    let mut alpha = Image::new(w, h, 1);
    let mut final_transmittance = vec![1.0; w * h];
    for tile in tiles {
        for (p, c, tf) in tile {
            rgb.data[3 * p..3 * p + 3].copy_from_slice(&c);
            alpha.data[p] = 1.0 - tf;
            final_transmittance[p] = tf;
        }
    }
    Ok(RenderOutput {
        rgb,
        alpha,
        final_transmittance,
        splats,
        tile_lists,
        tile_size: config.tile_size,
    })
}

/// Screen-space gradient of one Gaussian.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean2d: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Reverse-mode gradients of a scalar loss given `d_rgb` (3 channels) and
/// `d_alpha` (1 channel) with respect to the rendered images.
pub fn rasterize_backward(
    gaussians: &[WorldGaussian],
    camera: &Camera,
    config: &RasterConfig,
    out: &RenderOutput,
    d_rgb: &Image,
    d_alpha: &Image,
) -> Result<WorldGrads> {
    let n = gaussians.len();
    if out.splats.len() != n || out.tile_size != config.tile_size {
        return Err(Error::Contract("render output does not match the gaussians".into()));
    }
    out.rgb.check_shape(d_rgb, "rgb gradient")?;
    out.alpha.check_shape(d_alpha, "alpha gradient")?;
    let grid = TileGrid::new(camera, config.tile_size);
    if grid.tiles_x * grid.tiles_y != out.tile_lists.len() {
        return Err(Error::Contract("tile layout does not match the camera".into()));
    }
    let splats = &out.splats;
    let w = camera.width;
    let bg = config.background;

    let partials: Vec<Vec<SplatGrad>> = (0..out.tile_lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &out.tile_lists[tile];
            let mut acc = vec![SplatGrad::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let (x0, y0, x1, y1) = grid.bounds(tile, camera);
            let mut hits = Vec::new();
            let mut trans = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    let dc = [d_rgb.data[3 * p], d_rgb.data[3 * p + 1], d_rgb.data[3 * p + 2]];
                    let da = d_alpha.data[p];
                    if dc == [0.0; 3] && da == 0.0 {
                        continue;
                    }
                    let tf = composite_pixel(x as f64 + 0.5, y as f64 + 0.5, list, splats, gaussians, config, &mut hits);
                    trans.clear();
                    let mut t = 1.0;
                    for hit in &hits {
                        trans.push(t);
                        t *= 1.0 - hit.alpha;
                    }
                    // suffix = Σ_{j>i} α_j T_j c_j + T_final·bg
                    let mut suffix = [tf * bg[0], tf * bg[1], tf * bg[2]];
                    for (hit, &ti) in hits.iter().zip(&trans).rev() {
                        let gi = list[hit.slot] as usize;
                        let col = &gaussians[gi].color;
                        let g = &mut acc[hit.slot];
                        let mut d_alpha_i = da * tf / (1.0 - hit.alpha);
                        for k in 0..3 {
                            g.color[k] += hit.alpha * ti * dc[k];
                            d_alpha_i += dc[k] * (ti * col[k] - suffix[k] / (1.0 - hit.alpha));
                            suffix[k] += hit.alpha * ti * col[k];
                        }
                        if !hit.live {
                            continue;
                        }
                        let s = &splats[gi];
                        let opacity = gaussians[gi].opacity;
                        let gauss = hit.alpha / opacity;
                        g.opacity += d_alpha_i * gauss;
                        let dq = -0.5 * hit.alpha * d_alpha_i;
                        g.conic[0] += dq * hit.dx * hit.dx;
                        g.conic[1] += dq * 2.0 * hit.dx * hit.dy;
                        g.conic[2] += dq * hit.dy * hit.dy;
                        // d = pixel - mean, so dq/dmean = -2 conic d
                        g.mean2d[0] -= dq * 2.0 * (s.conic[0] * hit.dx + s.conic[1] * hit.dy);
                        g.mean2d[1] -= dq * 2.0 * (s.conic[1] * hit.dx + s.conic[2] * hit.dy);
                    }
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![SplatGrad::default(); n];
    for (list, acc) in out.tile_lists.iter().zip(&partials) {
        for (&gi, g) in list.iter().zip(acc) {
            screen[gi as usize].add(g);
        }
    }

    let per: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| world_gradient(&gaussians[i], &splats[i], &screen[i], camera))
        .collect();
    let mut grads = WorldGrads::zeros(n);
    for (i, (dm, dq, dr, ds, g)) in per.into_iter().enumerate() {
        grads.mean[i] = dm;
        grads.rotation[i] = dq;
        grads.rotation_matrix[i] = dr;
        grads.scale[i] = ds;
        grads.opacity[i] = screen[i].opacity;
        grads.color[i] = Vec3::from(screen[i].color);
        grads.mean2d[i] = g;
    }
    Ok(grads)
}

type WorldGrad = (Vec3, nalgebra::Vector4<f64>, Mat3, Vec3, [f64; 2]);

fn world_gradient(g: &WorldGaussian, s: &Splat, sg: &SplatGrad, camera: &Camera) -> WorldGrad {
    if !s.visible {
        return (Vec3::zeros(), nalgebra::Vector4::zeros(), Mat3::zeros(), Vec3::zeros(), [0.0; 2]);
    }
    let wr = camera.world_to_camera.rotation;
    let t = camera.world_to_camera.apply(&g.mean);
    let r = quat_to_mat(&g.rotation);
    let s2 = g.scale.component_mul(&g.scale);
    let cov3 = r * Mat3::from_diagonal(&s2) * r.transpose();
    let jac = perspective_jacobian(camera, &t);
    let m = jac * wr;

    // conic = Σ2⁻¹, dΣ2 = -C G C with G the symmetric conic gradient
    let conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let gc = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let d_cov2 = -conic * gc * conic;
    let d_cov3 = m.transpose() * d_cov2 * m;
    let d_m = 2.0 * d_cov2 * m * cov3;
    let d_j = d_m * wr.transpose();

    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut dt = Vec3::zeros();
    // through the Jacobian entries
    dt.x += d_j[(0, 2)] * (-fx * iz2);
    dt.y += d_j[(1, 2)] * (-fy * iz2);
    dt.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + d_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    // through the projected mean
    let [gx, gy] = sg.mean2d;
    dt.x += gx * fx * iz;
    dt.y += gy * fy * iz;
    dt.z += -gx * fx * t.x * iz2 - gy * fy * t.y * iz2;
    let d_mean = wr.transpose() * dt;

    let d_r = 2.0 * d_cov3 * r * Mat3::from_diagonal(&s2);
    let rt_g_r = r.transpose() * d_cov3 * r;
    let d_scale = Vec3::new(
        2.0 * g.scale.x * rt_g_r[(0, 0)],
        2.0 * g.scale.y * rt_g_r[(1, 1)],
        2.0 * g.scale.z * rt_g_r[(2, 2)],
    );
    let d_quat = quat_to_mat_backward(&g.rotation, &d_r);
    (d_mean, d_quat, d_r, d_scale, sg.mean2d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{axis_angle_quat, IDENTITY_QUAT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(w: usize, h: usize, f: f64) -> Camera {
        Camera {
            fx: f,
            fy: f,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            world_to_camera: RigidTransform::identity(),
            near: 0.01,
            far: 100.0,
        }
    }

    #[test]
    fn covariance_examples() {
        let id = crate::math::quat_from_array(IDENTITY_QUAT);
        assert!((compute_cov3d(&id, &Vec3::repeat(1.0)) - Mat3::identity()).norm() < 1e-15);
        let q = axis_angle_quat(Vec3::z(), std::f64::consts::FRAC_PI_2);
        let c = compute_cov3d(&q, &Vec3::new(2.0, 1.0, 1.0));
        assert!((c - Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0))).norm() < 1e-12);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let q = axis_angle_quat(axis, rng.random_range(-3.0..3.0));
            let s = Vec3::new(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
            let c = compute_cov3d(&q, &s);
            assert!((c - c.transpose()).norm() < 1e-12);
            let mut ev: Vec<f64> = c.symmetric_eigenvalues().iter().copied().collect();
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            ev.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in ev.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_examples() {
        let cam = camera(64, 48, 100.0);
        let cfg = RasterConfig::default();
        let d = 5.0;
        let sigma = 0.01;
        let p = project_gaussian(&Vec3::new(0.0, 0.0, d), &(Mat3::identity() * sigma * sigma), &cam, &cfg);
        assert!(p.visible);
        assert_eq!(p.mean2d, Vector2::new(32.0, 24.0));
        let expect = 100.0 * 100.0 * sigma * sigma / (d * d) + 0.3;
        assert!((p.cov2d[(0, 0)] - expect).abs() / expect < 0.01);
        assert!((p.cov2d[(1, 1)] - expect).abs() / expect < 0.01);
        assert!(p.cov2d[(0, 1)].abs() < 1e-12);
        let behind = project_gaussian(&Vec3::new(0.0, 0.0, 0.005), &Mat3::identity(), &cam, &cfg);
        assert!(!behind.visible);
    }

    fn gauss(mean: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> WorldGaussian {
        WorldGaussian {
            mean: Vec3::from(mean),
            rotation: crate::math::quat_from_array(IDENTITY_QUAT),
            scale: Vec3::repeat(scale),
            opacity,
            color: Vec3::from(color),
        }
    }

    #[test]
    fn empty_scene_is_black() {
        let out = rasterize(&[], &camera(16, 16, 20.0), &RasterConfig::default()).unwrap();
        assert!(out.rgb.data.iter().all(|&v| v == 0.0));
        assert!(out.alpha.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_gaussian_centre_pixel() {
        let cam = camera(15, 15, 20.0);
        // mean projects onto the centre of pixel (7, 7)
        let g = gauss([0.0, 0.0, 2.0], 0.5, 0.8, [0.2, 0.6, 1.0]);
        let out = rasterize(&[g], &cam, &RasterConfig::default()).unwrap();
        let a = out.alpha.get(7, 7, 0);
        assert!((a - 0.8).abs() < 1e-9);
        for k in 0..3 {
            assert!((out.rgb.get(7, 7, k) - g.color[k] * a).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gaussian_reports_index() {
        let mut gs = vec![gauss([0.0, 0.0, 2.0], 0.1, 0.5, [1.0; 3]); 3];
        gs[2].scale.x = f64::NAN;
        match rasterize(&gs, &camera(8, 8, 10.0), &RasterConfig::default()) {
            Err(Error::NonFiniteGaussian { index }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Full-sort compositing of every Gaussian at every pixel, no tiles.
    fn brute_force(gs: &[WorldGaussian], cam: &Camera, cfg: &RasterConfig) -> (Image, Image) {
        let mut order: Vec<usize> = (0..gs.len()).collect();
        let t_cam: Vec<Vec3> = gs.iter().map(|g| cam.world_to_camera.apply(&g.mean)).collect();
        order.sort_by(|&a, &b| t_cam[a].z.total_cmp(&t_cam[b].z).then(a.cmp(&b)));
        let mut rgb = Image::new(cam.width, cam.height, 3);
        let mut alpha = Image::new(cam.width, cam.height, 1);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let mut t = 1.0;
                let mut c = [0.0; 3];
                for &i in &order {
                    let cov = compute_cov3d(&gs[i].rotation, &gs[i].scale);
                    let p = project_gaussian(&gs[i].mean, &cov, cam, cfg);
                    if !p.visible {
                        continue;
                    }
                    let inv = p.cov2d.try_inverse().unwrap();
                    let d = Vector2::new(x as f64 + 0.5, y as f64 + 0.5) - p.mean2d;
                    let q = (d.transpose() * inv * d)[0];
                    let a = (gs[i].opacity * (-0.5 * q).exp()).min(cfg.max_alpha);
                    if a < cfg.min_alpha {
                        continue;
                    }
                    for k in 0..3 {
                        c[k] += a * t * gs[i].color[k];
                    }
                    t *= 1.0 - a;
                    if t < cfg.min_transmittance {
                        break;
                    }
                }
                for k in 0..3 {
                    let at = rgb.index(x, y, k);
                    rgb.data[at] = c[k];
                }
                alpha.data[y * cam.width + x] = 1.0 - t;
            }
        }
        (rgb, alpha)
    }

    #[test]
    fn overlapping_gaussians_match_brute_force() {
        let cam = camera(8, 8, 10.0);
        let gs = vec![
            gauss([0.1, 0.0, 2.0], 0.2, 0.7, [1.0, 0.0, 0.0]),
            gauss([-0.1, 0.1, 2.5], 0.3, 0.6, [0.0, 1.0, 0.0]),
            gauss([0.0, -0.1, 3.0], 0.25, 0.9, [0.0, 0.0, 1.0]),
        ];
        let cfg = RasterConfig {
            tile_size: 4,
            ..Default::default()
        };
        let out = rasterize(&gs, &cam, &cfg).unwrap();
        let (rgb, alpha) = brute_force(&gs, &cam, &cfg);
        for (a, b) in out.rgb.data.iter().zip(&rgb.data) {
            assert!((a - b).abs() <= 1e-6);
        }
        for (a, b) in out.alpha.data.iter().zip(&alpha.data) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let cam = camera(8, 8, 10.0);
        let gs = vec![gauss([0.0, 0.0, 2.0], 0.2, 0.7, [1.0, 0.0, 0.0])];
        let cfg = RasterConfig::default();
        let out = rasterize(&gs, &cam, &cfg).unwrap();
        let g = rasterize_backward(&gs, &cam, &cfg, &out, &Image::new(8, 8, 3), &Image::new(8, 8, 1)).unwrap();
        assert_eq!(g.mean[0], Vec3::zeros());
        assert_eq!(g.opacity[0], 0.0);
        assert_eq!(g.color[0], Vec3::zeros());
    }

    #[test]
    fn red_channel_gradient_equals_alpha() {
        let cam = camera(8, 8, 10.0);
        let gs = vec![gauss([0.05, 0.05, 2.0], 0.2, 0.7, [0.3, 0.3, 0.3])];
        let cfg = RasterConfig::default();
        let out = rasterize(&gs, &cam, &cfg).unwrap();
        let mut d_rgb = Image::new(8, 8, 3);
        let idx = d_rgb.index(4, 4, 0);
        d_rgb.data[idx] = 1.0;
        let g = rasterize_backward(&gs, &cam, &cfg, &out, &d_rgb, &Image::new(8, 8, 1)).unwrap();
        assert!((g.color[0].x - out.alpha.get(4, 4, 0)).abs() < 1e-12);
        assert_eq!(g.color[0].y, 0.0);
    }

    #[test]
    fn mismatched_output_is_a_contract_error() {
        let cam = camera(8, 8, 10.0);
        let cfg = RasterConfig::default();
        let gs = vec![gauss([0.0, 0.0, 2.0], 0.2, 0.7, [1.0; 3])];
        let out = rasterize(&gs, &cam, &cfg).unwrap();
        let two = vec![gs[0], gs[0]];
        let r = rasterize_backward(&two, &cam, &cfg, &out, &Image::new(8, 8, 3), &Image::new(8, 8, 1));
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
