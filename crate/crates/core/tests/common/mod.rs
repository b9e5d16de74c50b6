#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rigsplat_core::binding::WorldGaussian;
use rigsplat_core::imaging::Image;
use rigsplat_core::math::{axis_angle_quat, Quat, RigidTransform, Vec3};
use rigsplat_core::raster::{rasterize, rasterize_backward, Camera, RasterConfig};

pub struct Scene {
    pub camera: Camera,
    pub gaussians: Vec<WorldGaussian>,
    pub w_rgb: Image,
    pub w_alpha: Image,
}

fn rand_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n < 1.0 {
            return v / n;
        }
    }
}

/// Random scene on a `size`×`size` image whose Gaussians stay well inside the
/// smooth regime of the compositor: every contribution is far above the
/// 1/255 cutoff and below the 0.999 clamp, transmittance never reaches the
/// early-stop threshold and depths are far apart, so central differences
/// never cross a branch.
pub fn smooth_scene(seed: u64, size: usize, count: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = 10.0;
    let eye = rand_unit(&mut rng) * 3.0;
    let world_to_camera = RigidTransform::look_at(eye, Vec3::zeros(), rand_unit(&mut rng));
    let camera = Camera {
        fx: f,
        fy: f * rng.random_range(0.9..1.1),
        cx: size as f64 / 2.0 + rng.random_range(-0.5..0.5),
        cy: size as f64 / 2.0 + rng.random_range(-0.5..0.5),
        width: size,
        height: size,
        world_to_camera,
        near: 0.1,
        far: 20.0,
    };
    let cam_to_world = world_to_camera.inverse();
    let mut depths: Vec<f64> = (0..count).map(|i| 2.0 + 0.4 * i as f64).collect();
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        depths.swap(i, j);
    }
    let gaussians = depths
        .iter()
        .map(|&z| {
            let u = rng.random_range(1.5..size as f64 - 1.5);
            let v = rng.random_range(1.5..size as f64 - 1.5);
            let t = Vec3::new((u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy, z);
            // projected standard deviation between 4.5 and 8 px on each axis
            let scale = Vec3::from_fn(|_, _| rng.random_range(4.5..8.0) * z / f);
            let q: Quat = axis_angle_quat(rand_unit(&mut rng), rng.random_range(-3.0..3.0));
            WorldGaussian {
                mean: cam_to_world.apply(&t),
                rotation: q * rng.random_range(0.5..2.0),
                scale,
                opacity: rng.random_range(0.3..0.8),
                color: Vec3::from_fn(|_, _| rng.random_range(0.0..1.0)),
            }
        })
        .collect();
    let mut w_rgb = Image::new(size, size, 3);
    let mut w_alpha = Image::new(size, size, 1);
    w_rgb.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    w_alpha.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    Scene {
        camera,
        gaussians,
        w_rgb,
        w_alpha,
    }
}

pub fn scene_loss(scene: &Scene, gs: &[WorldGaussian], cfg: &RasterConfig) -> f64 {
    let out = rasterize(gs, &scene.camera, cfg).unwrap();
    let a: f64 = out.rgb.data.iter().zip(&scene.w_rgb.data).map(|(x, w)| x * w).sum();
    let b: f64 = out.alpha.data.iter().zip(&scene.w_alpha.data).map(|(x, w)| x * w).sum();
    a + b
}

/// Largest relative error between the analytic gradient and central
/// differences over every parameter of every Gaussian, with the relative
/// error taken against `max(|fd|, |analytic|, floor)`.
pub fn max_gradient_error(scene: &Scene, h: f64, floor: f64) -> (f64, usize) {
    let cfg = RasterConfig {
        tile_size: 4,
        ..Default::default()
    };
    let out = rasterize(&scene.gaussians, &scene.camera, &cfg).unwrap();
    let g = rasterize_backward(&scene.gaussians, &scene.camera, &cfg, &out, &scene.w_rgb, &scene.w_alpha).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut check = |fd: f64, an: f64| {
        let den = fd.abs().max(an.abs()).max(floor);
        worst = worst.max((fd - an).abs() / den);
        checked += 1;
    };
    let fd = |edit: &dyn Fn(&mut WorldGaussian, f64), i: usize| {
        let mut p = scene.gaussians.clone();
        let mut m = scene.gaussians.clone();
        edit(&mut p[i], h);
        edit(&mut m[i], -h);
        (scene_loss(scene, &p, &cfg) - scene_loss(scene, &m, &cfg)) / (2.0 * h)
    };
    for i in 0..scene.gaussians.len() {
        for a in 0..3 {
            check(fd(&|g, d| g.mean[a] += d, i), g.mean[i][a]);
            check(fd(&|g, d| g.scale[a] += d, i), g.scale[i][a]);
            check(fd(&|g, d| g.color[a] += d, i), g.color[i][a]);
        }
        for a in 0..4 {
            check(fd(&|g, d| g.rotation.coords[(a + 3) % 4] += d, i), g.rotation[i][a]);
        }
        check(fd(&|g, d| g.opacity += d, i), g.opacity[i]);
    }
    (worst, checked)
}
