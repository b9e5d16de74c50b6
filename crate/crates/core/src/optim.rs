//! Adam over the Gaussian parameter groups, learning-rate decay and
//! adaptive density control.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binding::{BoundGaussianSet, LocalGrads};
use crate::error::{Error, Result};
use crate::math::{quat_from_array, quat_to_mat, sigmoid, Vec3};

/// Multiplier applied to every base learning rate: `0.1^(iter / total)`.
pub fn decay_factor(iter: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    0.1f64.powf(iter as f64 / total as f64)
}

pub fn lr_schedule(base_lr: f64, iter: usize, total: usize) -> f64 {
    base_lr * decay_factor(iter, total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moments for one flat parameter array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut Moments,
    step: u64,
    lr: f64,
    config: &AdamConfig,
    group: &str,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!("adam group `{group}` lengths differ")));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            group: group.to_string(),
        });
    }
    let bc1 = 1.0 - config.beta1.powi(step as i32);
    let bc2 = 1.0 - config.beta2.powi(step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= lr * mh / (vh.sqrt() + config.eps);
    }
    Ok(())
}

/// Base learning rates per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    /// World-space position rate; divided by the mean triangle scale and
    /// multiplied by the scene extent to act on local positions.
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for GroupRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

pub const GROUPS: [&str; 5] = ["position", "rotation", "log_scale", "opacity", "color"];

/// Adam state for every parameter group of a [`BoundGaussianSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianAdam {
    pub config: AdamConfig,
    pub step: u64,
    pub position: Moments,
    pub rotation: Moments,
    pub log_scale: Moments,
    pub opacity: Moments,
    pub color: Moments,
}

impl GaussianAdam {
    pub fn new(count: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            position: Moments::zeros(3 * count),
            rotation: Moments::zeros(4 * count),
            log_scale: Moments::zeros(3 * count),
            opacity: Moments::zeros(count),
            color: Moments::zeros(3 * count),
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lengths_consistent(&self, count: usize) -> bool {
        [
            (&self.position, 3),
            (&self.rotation, 4),
            (&self.log_scale, 3),
            (&self.opacity, 1),
            (&self.color, 3),
        ]
        .iter()
        .all(|(m, k)| m.m.len() == k * count && m.v.len() == k * count)
    }

    /// Applies one update with the given per-group learning rates, then
    /// projects colours back into [0, 1].
    pub fn step(&mut self, set: &mut BoundGaussianSet, grads: &LocalGrads, lrs: &GroupRates) -> Result<()> {
        self.step += 1;
        let (s, c) = (self.step, self.config);
        adam_step(set.position.as_flattened_mut(), grads.position.as_flattened(), &mut self.position, s, lrs.position, &c, GROUPS[0])?;
        adam_step(set.rotation.as_flattened_mut(), grads.rotation.as_flattened(), &mut self.rotation, s, lrs.rotation, &c, GROUPS[1])?;
        adam_step(set.log_scale.as_flattened_mut(), grads.log_scale.as_flattened(), &mut self.log_scale, s, lrs.log_scale, &c, GROUPS[2])?;
        adam_step(&mut set.opacity_logit, &grads.opacity_logit, &mut self.opacity, s, lrs.opacity, &c, GROUPS[3])?;
        adam_step(set.color.as_flattened_mut(), grads.color.as_flattened(), &mut self.color, s, lrs.color, &c, GROUPS[4])?;
        for v in set.color.as_flattened_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(())
    }

    /// Keeps the moments of Gaussians whose mask entry is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        fn filter(m: &mut Moments, keep: &[bool], k: usize) {
            for arr in [&mut m.m, &mut m.v] {
                let mut i = 0;
                arr.retain(|_| {
                    let r = keep[i / k];
                    i += 1;
                    r
                });
            }
        }
        filter(&mut self.position, keep, 3);
        filter(&mut self.rotation, keep, 4);
        filter(&mut self.log_scale, keep, 3);
        filter(&mut self.opacity, keep, 1);
        filter(&mut self.color, keep, 3);
    }

    /// Appends zero moments for `count` new Gaussians.
    pub fn push_zeros(&mut self, count: usize) {
        for (m, k) in [
            (&mut self.position, 3),
            (&mut self.rotation, 4),
            (&mut self.log_scale, 3),
            (&mut self.opacity, 1),
            (&mut self.color, 3),
        ] {
            m.m.resize(m.m.len() + k * count, 0.0);
            m.v.resize(m.v.len() + k * count, 0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub interval: usize,
    /// Mean screen-space positional gradient norm (normalized device
    /// coordinates) above which a Gaussian is densified.
    pub grad_threshold: f64,
    /// World-size threshold between cloning and splitting, as a fraction of
    /// the scene extent.
    pub split_scale_fraction: f64,
    pub prune_opacity_threshold: f64,
    pub max_gaussians: usize,
    pub split_factor: f64,
    pub children: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 500,
            grad_threshold: 2e-4,
            split_scale_fraction: 0.01,
            prune_opacity_threshold: 0.05,
            max_gaussians: 100_000,
            split_factor: 1.6,
            children: 2,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self, initial_count: usize) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Config("densify interval must be positive".into()));
        }
        if self.max_gaussians < initial_count {
            return Err(Error::Config(format!(
                "max_gaussians {} is below the initial count {initial_count}",
                self.max_gaussians
            )));
        }
        if self.children < 1 || !(self.split_factor > 0.0) {
            return Err(Error::Config("split needs children ≥ 1 and a positive factor".into()));
        }
        Ok(())
    }

    /// True when a density event is due after iteration `iter` (1-based
    /// count of completed iterations) of a run of `total`.
    pub fn is_event(&self, iter: usize, total: usize) -> bool {
        self.enabled && iter > 0 && iter < total && iter.is_multiple_of(self.interval)
    }
}

/// Screen-space gradient statistics gathered between density events.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensityStats {
    pub grad_norm_sum: Vec<f64>,
    pub visible_count: Vec<u32>,
}

impl DensityStats {
    pub fn new(count: usize) -> Self {
        Self {
            grad_norm_sum: vec![0.0; count],
            visible_count: vec![0; count],
        }
    }

    pub fn len(&self) -> usize {
        self.visible_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds one view's screen-space gradients, given in pixels for a
    /// `width`×`height` image. They are converted to normalized device
    /// coordinates (`[-1, 1]` across the image) before taking the norm.
    pub fn accumulate(&mut self, mean2d_grads: &[[f64; 2]], visible: &[bool], width: usize, height: usize) {
        let (sx, sy) = (width as f64 / 2.0, height as f64 / 2.0);
        for i in 0..self.len() {
            if visible[i] {
                let [x, y] = mean2d_grads[i];
                let (x, y) = (x * sx, y * sy);
                self.grad_norm_sum[i] += (x * x + y * y).sqrt();
                self.visible_count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        match self.visible_count[i] {
            0 => 0.0,
            n => self.grad_norm_sum[i] / n as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyReport {
    pub split: usize,
    pub cloned: usize,
    pub pruned: usize,
}

/// Runs one density event.
///
/// `face_scales` holds each triangle's frame scale in the rest pose, used to
/// measure a Gaussian's world size; `extent` is the scene extent in metres.
/// Pruning always runs. Cloning and splitting only run when the count before
/// the event is at most `max_gaussians`; clones are further limited so they
/// alone never push the count past the cap.
#[allow(clippy::too_many_arguments)]
pub fn densify_and_prune(
    set: &mut BoundGaussianSet,
    adam: &mut GaussianAdam,
    stats: &mut DensityStats,
    config: &DensifyConfig,
    face_scales: &[f64],
    extent: f64,
    seed: u64,
) -> Result<DensifyReport> {
    let n = set.len();
    if adam.len() != n || stats.len() != n || !set.lengths_consistent() {
        return Err(Error::Contract("density state out of sync with gaussians".into()));
    }
    let mut report = DensifyReport::default();
    let prune: Vec<bool> = set
        .opacity_logit
        .iter()
        .map(|&l| sigmoid(l) < config.prune_opacity_threshold)
        .collect();
    report.pruned = prune.iter().filter(|&&p| p).count();

    let mut split = vec![false; n];
    let mut clones = Vec::new();
    if n <= config.max_gaussians {
        let mut clone_budget = config.max_gaussians - n;
        let threshold = config.split_scale_fraction * extent;
        for i in 0..n {
            if prune[i] || stats.mean(i) <= config.grad_threshold {
                continue;
            }
            let max_ls = set.log_scale[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let world = face_scales[set.triangle[i] as usize] * max_ls.exp();
            if world < threshold {
                if clone_budget > 0 {
                    clones.push(i);
                    clone_budget -= 1;
                }
            } else {
                split[i] = true;
            }
        }
    }
    report.cloned = clones.len();
    report.split = split.iter().filter(|&&s| s).count();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shrink = config.split_factor.ln();
    let mut added = BoundGaussianSet::default();
    for &i in &clones {
        added.push(set.get(i));
    }
    for i in (0..n).filter(|&i| split[i]) {
        let parent = set.get(i);
        let rot = quat_to_mat(&quat_from_array(parent.rotation));
        let sigma = Vec3::from(parent.log_scale).map(f64::exp);
        for _ in 0..config.children {
            let z = Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let offset = rot * sigma.component_mul(&z);
            let mut child = parent;
            child.position = (Vec3::from(parent.position) + offset).into();
            child.log_scale = parent.log_scale.map(|v| v - shrink);
            added.push(child);
        }
    }

    let keep: Vec<bool> = (0..n).map(|i| !prune[i] && !split[i]).collect();
    set.retain_mask(&keep);
    adam.retain_mask(&keep);
    let new_count = added.len();
    for i in 0..new_count {
        set.push(added.get(i));
    }
    adam.push_zeros(new_count);
    *stats = DensityStats::new(set.len());
    Ok(report)
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub count: usize,
    pub split: usize,
    pub cloned: usize,
    pub pruned: usize,
    pub loss: f64,
    pub lr: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binding::init_gaussians;
    use crate::math::logit;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0.01, 0, 50_000), 0.01);
        assert_eq!(decay_factor(50_000, 50_000), 0.1);
        assert!((lr_schedule(1.0, 25_000, 50_000) - 10f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut s = Moments::zeros(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1, 0.1, &AdamConfig::default(), "x").unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = vec![0.0];
        let mut s = Moments::zeros(1);
        let mut last = 0.0;
        for t in 1..=2000 {
            let before = p[0];
            adam_step(&mut p, &[0.3], &mut s, t, 0.01, &AdamConfig::default(), "x").unwrap();
            last = before - p[0];
        }
        assert!((last - 0.01).abs() < 1e-6);
    }

    #[test]
    fn matches_reference_adam_on_quadratic() {
        // f(x) = (x - 3)², reference written out longhand
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-15, 0.1);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut ours = vec![0.0];
        let mut s = Moments::zeros(1);
        for t in 1..=10 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);

            let g = [2.0 * (ours[0] - 3.0)];
            adam_step(&mut ours, &g, &mut s, t as u64, lr, &AdamConfig::default(), "x").unwrap();
        }
        assert!((ours[0] - x).abs() <= 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_group() {
        let mut p = vec![0.0];
        let mut s = Moments::zeros(1);
        let err = adam_step(&mut p, &[f64::NAN], &mut s, 1, 0.1, &AdamConfig::default(), "opacity").unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref group } if group == "opacity"));
        assert!(err.is_numeric());
    }

    fn setup(n: usize) -> (BoundGaussianSet, GaussianAdam, DensityStats) {
        let set = init_gaussians(n, n, 0).unwrap();
        (set, GaussianAdam::new(n, AdamConfig::default()), DensityStats::new(n))
    }

    #[test]
    fn pruning_everything_empties_the_set() {
        let (mut set, mut adam, mut stats) = setup(10);
        set.opacity_logit.iter_mut().for_each(|o| *o = logit(0.01));
        let r = densify_and_prune(&mut set, &mut adam, &mut stats, &DensifyConfig::default(), &[1.0; 10], 1.0, 0).unwrap();
        assert_eq!(r.pruned, 10);
        assert!(set.is_empty() && adam.is_empty() && stats.is_empty());
    }

    #[test]
    fn no_growth_above_cap() {
        let (mut set, mut adam, mut stats) = setup(11);
        stats.grad_norm_sum.iter_mut().for_each(|g| *g = 1.0);
        stats.visible_count.iter_mut().for_each(|c| *c = 1);
        let cfg = DensifyConfig {
            max_gaussians: 10,
            ..Default::default()
        };
        let r = densify_and_prune(&mut set, &mut adam, &mut stats, &cfg, &[1.0; 11], 1.0, 0).unwrap();
        assert_eq!((r.split, r.cloned), (0, 0));
        assert_eq!(set.len(), 11);
    }

    #[test]
    fn large_gaussian_splits_into_two_children() {
        let (mut set, mut adam, mut stats) = setup(3);
        set.opacity_logit = vec![logit(0.5); 3];
        set.triangle[1] = 2;
        stats.grad_norm_sum[1] = 1.0;
        stats.visible_count[1] = 1;
        adam.opacity.m = vec![0.3; 3];
        let cfg = DensifyConfig::default();
        // frame scale 1 and local scale 0.5 is far above 1% of a 1 m extent
        let r = densify_and_prune(&mut set, &mut adam, &mut stats, &cfg, &[1.0; 3], 1.0, 7).unwrap();
        assert_eq!(r, DensifyReport { split: 1, cloned: 0, pruned: 0 });
        assert_eq!(set.len(), 4);
        for c in 2..4 {
            assert_eq!(set.triangle[c], 2);
            for a in 0..3 {
                assert!((set.log_scale[c][a] - (0.5f64.ln() - 1.6f64.ln())).abs() < 1e-15);
            }
            assert_eq!(adam.opacity.m[c], 0.0);
        }
        assert_ne!(set.position[2], set.position[3]);
        assert_eq!(adam.opacity.m[..2], [0.3, 0.3]);
        assert!(adam.lengths_consistent(4));
    }

    #[test]
    fn small_gaussian_is_cloned() {
        let (mut set, mut adam, mut stats) = setup(2);
        set.opacity_logit = vec![logit(0.5); 2];
        stats.grad_norm_sum[0] = 1.0;
        stats.visible_count[0] = 2;
        let r = densify_and_prune(&mut set, &mut adam, &mut stats, &DensifyConfig::default(), &[0.001; 2], 1.0, 7).unwrap();
        assert_eq!(r.cloned, 1);
        assert_eq!(set.get(2), set.get(0));
    }

    #[test]
    fn repeated_prune_is_idempotent() {
        let (mut set, mut adam, mut stats) = setup(20);
        for (i, o) in set.opacity_logit.iter_mut().enumerate() {
            *o = logit(if i % 3 == 0 { 0.01 } else { 0.5 });
        }
        let cfg = DensifyConfig::default();
        let first = densify_and_prune(&mut set, &mut adam, &mut stats, &cfg, &[1.0; 20], 1.0, 0).unwrap();
        assert_eq!(first.pruned, 7);
        let again = densify_and_prune(&mut set, &mut adam, &mut stats, &cfg, &[1.0; 20], 1.0, 0).unwrap();
        assert_eq!(again, DensifyReport::default());
    }

    #[test]
    fn event_cadence() {
        let cfg = DensifyConfig::default();
        let events: Vec<usize> = (0..=6000).filter(|&i| cfg.is_event(i, 6000)).collect();
        assert_eq!(events, (1..12).map(|k| k * 500).collect::<Vec<_>>());
    }
}
