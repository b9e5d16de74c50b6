//! Fitting one rig's pose (and optionally shape) to another surface.
//!
//! The objective is the mean squared distance from the source rig's posed
//! vertices to their closest points on the target mesh, plus a small prior on
//! joint rotation magnitude and a hinge penalty outside joint limits. Closest
//! points are recomputed on every evaluation. Steps are damped Gauss-Newton
//! with a point-to-plane curvature model, falling back to steepest descent,
//! and are only accepted under an Armijo sufficient-decrease test.

use nalgebra::{DMatrix, DVector, Matrix4x3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    exp_map, left_mul_matrix, log_map, quat_to_array, skew, swing_angle, swing_angle_grad, twist_angle, twist_angle_grad, Mat3, Quat, Vec3,
};
use crate::rig::{Pose, PosedRig, Rig, Shape};

// ---------------------------------------------------------------------------
// closest points

/// Closest point on a triangle, with barycentric coordinates `(u, v, w)`
/// such that `point = u·a + v·b + w·c`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    pub distance: f64,
    pub face: usize,
    pub barycentric: [f64; 3],
    pub point: Vec3,
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Vec3::repeat(f64::INFINITY),
            hi: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn distance_sq(&self, p: &Vec3) -> f64 {
        let d = (self.lo - p).sup(&(p - self.hi)).sup(&Vec3::zeros());
        d.norm_squared()
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

const LEAF_SIZE: usize = 4;

/// A triangle mesh with an axis-aligned bounding-volume hierarchy for
/// closest-point queries.
#[derive(Clone, Debug)]
pub struct TargetSurface {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    normals: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl TargetSurface {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::Config("target surface has no faces".into()));
        }
        for (f, face) in faces.iter().enumerate() {
            if face.iter().any(|&k| k as usize >= vertices.len()) {
                return Err(Error::Config(format!("target face {f} indexes past the vertex array")));
            }
        }
        let normals = faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|k| vertices[k as usize]);
                let n = (b - a).cross(&(c - a));
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vec3::zeros()
                }
            })
            .collect();
        let mut s = Self {
            vertices,
            faces,
            normals,
            order: Vec::new(),
            nodes: Vec::new(),
        };
        s.build();
        Ok(s)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn normal(&self, face: usize) -> Vec3 {
        self.normals[face]
    }

    fn corners(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|k| self.vertices[k as usize])
    }

    fn build(&mut self) {
        let centroids: Vec<Vec3> = (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.corners(f);
                (a + b + c) / 3.0
            })
            .collect();
        let mut order: Vec<usize> = (0..self.faces.len()).collect();
        let mut nodes = Vec::new();
        self.build_node(&mut order, 0, &centroids, &mut nodes);
        self.order = order;
        self.nodes = nodes;
    }

    fn build_node(&self, items: &mut [usize], offset: usize, centroids: &[Vec3], nodes: &mut Vec<Node>) -> usize {
        let mut bounds = Aabb::empty();
        let mut cb = Aabb::empty();
        for &f in items.iter() {
            for p in self.corners(f) {
                bounds.grow(&p);
            }
            cb.grow(&centroids[f]);
        }
        let slot = nodes.len();
        if items.len() <= LEAF_SIZE {
            nodes.push(Node::Leaf {
                bounds,
                start: offset,
                end: offset + items.len(),
            });
            return slot;
        }
        let ext = cb.hi - cb.lo;
        let axis = ext.imax();
        let mid = items.len() / 2;
        items.select_nth_unstable_by(mid, |&x, &y| {
            centroids[x][axis]
                .total_cmp(&centroids[y][axis])
                .then(x.cmp(&y))
        });
        nodes.push(Node::Leaf {
            bounds,
            start: 0,
            end: 0,
        });
        let (l, r) = items.split_at_mut(mid);
        let left = self.build_node(l, offset, centroids, nodes);
        let right = self.build_node(r, offset + mid, centroids, nodes);
        nodes[slot] = Node::Inner { bounds, left, right };
        slot
    }

    /// Exact closest point on the mesh. Ties between faces at equal
    /// distance go to the lower face index.
    pub fn closest_point(&self, p: &Vec3) -> SurfaceHit {
        let mut best = SurfaceHit {
            distance: f64::INFINITY,
            face: usize::MAX,
            barycentric: [0.0; 3],
            point: Vec3::zeros(),
        };
        let mut best_sq = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.bounds().distance_sq(p) > best_sq {
                continue;
            }
            match node {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.order[*start..*end] {
                        let [a, b, c] = self.corners(f);
                        let (q, bc) = closest_point_on_triangle(p, &a, &b, &c);
                        let d = (p - q).norm_squared();
                        if d < best_sq || (d == best_sq && f < best.face) {
                            best_sq = d;
                            best = SurfaceHit {
                                distance: 0.0,
                                face: f,
                                barycentric: bc,
                                point: q,
                            };
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[*left].bounds().distance_sq(p);
                    let dr = self.nodes[*right].bounds().distance_sq(p);
                    // visit the nearer child first
                    if dl <= dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best.distance = best_sq.sqrt();
        best
    }
}

pub fn point_to_surface_distance(points: &[Vec3], target: &TargetSurface) -> Vec<SurfaceHit> {
    points.par_iter().map(|p| target.closest_point(p)).collect()
}

/// Gradient of the unsigned distance with respect to the query point.
/// Zero on the surface.
pub fn distance_gradient(p: &Vec3, hit: &SurfaceHit) -> Vec3 {
    if hit.distance > 0.0 {
        (p - hit.point) / hit.distance
    } else {
        Vec3::zeros()
    }
}

// ---------------------------------------------------------------------------
// pose fitting

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Stop once an accepted step moves vertices less than this on average (m).
    pub convergence_tol: f64,
    pub lambda_pose_prior: f64,
    pub lambda_joint_limit: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Levenberg damping relative to the mean curvature diagonal: starting
    /// value and floor. It shrinks after full steps and grows after
    /// backtracking.
    pub initial_damping: f64,
    pub damping: f64,
    /// Weight of the isotropic term added to the point-to-plane curvature.
    pub point_weight: f64,
    /// Largest change of any step coordinate per iteration (rad or m).
    pub max_step: f64,
    pub fit_root: bool,
    pub fit_shape: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            convergence_tol: 1e-6,
            lambda_pose_prior: 1e-8,
            lambda_joint_limit: 1.0,
            armijo: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 30,
            initial_damping: 1e-2,
            damping: 1e-6,
            point_weight: 0.05,
            max_step: 0.2,
            fit_root: false,
            fit_shape: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("convergence_tol", self.convergence_tol),
            ("armijo", self.armijo),
            ("damping", self.damping),
            ("initial_damping", self.initial_damping),
            ("max_step", self.max_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("fit.{name} must be positive")));
            }
        }
        if !(self.lambda_pose_prior >= 0.0 && self.lambda_joint_limit >= 0.0 && self.point_weight >= 0.0) {
            return Err(Error::Config("fit penalty weights must be non-negative".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Config("fit.backtrack_factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_objective: f64,
    pub objective: f64,
    pub mean_distance: f64,
    pub max_distance: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
    pub pose: Vec<f64>,
    pub shape: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub pose: Pose,
    pub shape: Shape,
    pub report: FitReport,
}

/// Which parameters are free and where they sit in the step vector.
struct Layout {
    joints: Vec<usize>,
    /// Column of joint `j`'s first tangent coordinate.
    joint_col: Vec<Option<usize>>,
    translation: Option<usize>,
    shape: Option<usize>,
    n: usize,
}

impl Layout {
    fn new(rig: &Rig, config: &FitConfig) -> Self {
        let mut joint_col = vec![None; rig.joint_count()];
        let mut joints = Vec::new();
        let mut n = 0;
        for (j, joint) in rig.joints().iter().enumerate() {
            if joint.parent.is_some() || config.fit_root {
                joint_col[j] = Some(n);
                joints.push(j);
                n += 3;
            }
        }
        let translation = config.fit_root.then(|| {
            n += 3;
            n - 3
        });
        let shape = (config.fit_shape && rig.shape_count() > 0).then(|| {
            n += rig.shape_count();
            n - rig.shape_count()
        });
        Self {
            joints,
            joint_col,
            translation,
            shape,
            n,
        }
    }
}

/// `∂q/∂δ` for the right perturbation `q ⊗ exp(δ)` at `δ = 0`.
fn quat_tangent(q: &Quat) -> Matrix4x3<f64> {
    let l = left_mul_matrix(q);
    Matrix4x3::from_columns(&[
        l.column(1) * 0.5,
        l.column(2) * 0.5,
        l.column(3) * 0.5,
    ])
}

/// Inverse right Jacobian of SO(3): `∂ log(R exp(δ)) / ∂δ`.
fn right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    let c = if theta < 1e-5 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Mat3::identity() + k * 0.5 + k * k * c
}

struct Evaluation {
    posed: PosedRig,
    hits: Vec<SurfaceHit>,
    objective: f64,
}

fn limit_hinges(rig: &Rig, pose: &Pose, j: usize) -> [(f64, Vector4<f64>); 3] {
    let q = pose.rotation(j);
    let axis = rig.twist_axis(j);
    let lim = rig.joints()[j].limits;
    let swing = swing_angle(&q, &axis);
    let twist = twist_angle(&q, &axis);
    let sg = swing_angle_grad(&q, &axis);
    let tg = twist_angle_grad(&q, &axis);
    [
        ((swing - lim.max_swing).max(0.0), sg),
        ((lim.min_twist - twist).max(0.0), -tg),
        ((twist - lim.max_twist).max(0.0), tg),
    ]
}

fn evaluate(rig: &Rig, target: &TargetSurface, pose: &Pose, shape: &Shape, layout: &Layout, config: &FitConfig) -> Result<Evaluation> {
    let posed = rig.pose_internals(pose, shape)?;
    let hits = point_to_surface_distance(&posed.vertices, target);
    let mut objective = hits.iter().map(|h| h.distance * h.distance).sum::<f64>() / hits.len() as f64;
    for &j in &layout.joints {
        objective += config.lambda_pose_prior * log_map(&pose.rotation(j)).norm_squared();
        if config.lambda_joint_limit > 0.0 {
            for (h, _) in limit_hinges(rig, pose, j) {
                objective += config.lambda_joint_limit * h * h;
            }
        }
    }
    Ok(Evaluation { posed, hits, objective })
}

/// 3×P Jacobian of vertex `i` with respect to the step vector.
fn vertex_jacobian(rig: &Rig, ev: &Evaluation, layout: &Layout, corr_tangents: &[Option<(usize, nalgebra::RowVector3<f64>)>], i: usize) -> DMatrix<f64> {
    let data = rig.data();
    let mut jac = DMatrix::zeros(3, layout.n);
    let row = &data.skin_weights[i];
    let total: f64 = row.iter().map(|r| r.1).sum();
    let u = ev.posed.unposed[i];
    for &(k, w) in row {
        let k = k as usize;
        let w = w / total;
        let x = ev.posed.skinning[k].apply(&u);
        for &j in rig.chain(k) {
            if let Some(col) = layout.joint_col[j] {
                let world = &ev.posed.world[j];
                let block = -skew(&(x - world.translation)) * world.rotation * w;
                let mut view = jac.fixed_view_mut::<3, 3>(0, col);
                view += block;
            }
        }
        let r = ev.posed.skinning[k].rotation;
        for (c, tangent) in corr_tangents.iter().enumerate() {
            if let Some((col, dfeat)) = tangent {
                let d = Vec3::from(data.correctives[c].displacement[i]);
                if d == Vec3::zeros() {
                    continue;
                }
                let block = (r * d * w) * dfeat;
                let mut view = jac.fixed_view_mut::<3, 3>(0, *col);
                view += block;
            }
        }
        if let Some(col) = layout.shape {
            for (b, basis) in data.shape_basis.iter().enumerate() {
                let d = r * Vec3::from(basis[i]) * w;
                for a in 0..3 {
                    jac[(a, col + b)] += d[a];
                }
            }
        }
    }
    if let Some(col) = layout.translation {
        for a in 0..3 {
            jac[(a, col + a)] = 1.0;
        }
    }
    jac
}

/// Objective gradient and curvature model at `ev`.
fn linearize(rig: &Rig, target: &TargetSurface, ev: &Evaluation, pose: &Pose, layout: &Layout, config: &FitConfig) -> (DVector<f64>, DMatrix<f64>) {
    let corr_tangents: Vec<_> = rig
        .data()
        .correctives
        .iter()
        .map(|c| {
            layout.joint_col[c.driver.joint].map(|col| {
                let g = rig.corrective_feature_grad(&c.driver, pose);
                (col, g.transpose() * quat_tangent(&pose.rotation(c.driver.joint)))
            })
        })
        .collect();
    let n = ev.hits.len();
    let scale = 2.0 / n as f64;
    // fixed chunks summed in order keep the result independent of threading
    let partials: Vec<(DVector<f64>, DMatrix<f64>)> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(64)
        .map(|chunk| {
            let mut g = DVector::zeros(layout.n);
            let mut h = DMatrix::zeros(layout.n, layout.n);
            for &i in chunk {
                let jac = vertex_jacobian(rig, ev, layout, &corr_tangents, i);
                let hit = &ev.hits[i];
                let r = ev.posed.vertices[i] - hit.point;
                g += jac.transpose() * DVector::from_column_slice(r.as_slice()) * scale;
                let nrm = target.normal(hit.face);
                let w = nrm * nrm.transpose() + Mat3::identity() * config.point_weight;
                let wd = DMatrix::from_column_slice(3, 3, w.as_slice());
                h += jac.transpose() * wd * &jac * scale;
            }
            (g, h)
        })
        .collect();
    let mut grad = DVector::zeros(layout.n);
    let mut hess = DMatrix::zeros(layout.n, layout.n);
    for (g, h) in partials {
        grad += g;
        hess += h;
    }
    for &j in &layout.joints {
        let col = layout.joint_col[j].unwrap();
        let q = pose.rotation(j);
        let phi = log_map(&q);
        let jp = right_jacobian_inv(&phi);
        let gp = jp.transpose() * phi * (2.0 * config.lambda_pose_prior);
        let hp = jp.transpose() * jp * (2.0 * config.lambda_pose_prior);
        for a in 0..3 {
            grad[col + a] += gp[a];
            for b in 0..3 {
                hess[(col + a, col + b)] += hp[(a, b)];
            }
        }
        if config.lambda_joint_limit > 0.0 {
            let t = quat_tangent(&q);
            for (h, g4) in limit_hinges(rig, pose, j) {
                if h <= 0.0 {
                    continue;
                }
                let dh = (g4.transpose() * t).transpose();
                let lam = 2.0 * config.lambda_joint_limit;
                for a in 0..3 {
                    grad[col + a] += lam * h * dh[a];
                    for b in 0..3 {
                        hess[(col + a, col + b)] += lam * dh[a] * dh[b];
                    }
                }
            }
        }
    }
    (grad, hess)
}

fn apply_step(pose: &Pose, shape: &Shape, layout: &Layout, step: &DVector<f64>) -> (Pose, Shape) {
    let mut pose = pose.clone();
    let mut shape = shape.clone();
    for &j in &layout.joints {
        let col = layout.joint_col[j].unwrap();
        let d = Vec3::new(step[col], step[col + 1], step[col + 2]);
        let q = pose.rotation(j) * exp_map(&d);
        pose.joint_rotations[j] = quat_to_array(&q.normalize());
    }
    if let Some(col) = layout.translation {
        for a in 0..3 {
            pose.root_translation[a] += step[col + a];
        }
    }
    if let Some(col) = layout.shape {
        for (b, beta) in shape.coefficients.iter_mut().enumerate() {
            *beta += step[col + b];
        }
    }
    (pose, shape)
}

fn mean_move(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

/// Objective value and gradient with respect to the step vector (joint
/// tangents, then root translation and shape when enabled).
pub fn fit_objective(rig: &Rig, target: &TargetSurface, pose: &Pose, shape: &Shape, config: &FitConfig) -> Result<(f64, Vec<f64>)> {
    let layout = Layout::new(rig, config);
    let ev = evaluate(rig, target, pose, shape, &layout, config)?;
    let (g, _) = linearize(rig, target, &ev, pose, &layout, config);
    Ok((ev.objective, g.iter().copied().collect()))
}

/// Applies a step vector laid out like the gradient of [`fit_objective`].
pub fn retract(rig: &Rig, pose: &Pose, shape: &Shape, config: &FitConfig, step: &[f64]) -> (Pose, Shape) {
    let layout = Layout::new(rig, config);
    apply_step(pose, shape, &layout, &DVector::from_column_slice(step))
}

pub fn fit_pose(rig: &Rig, target: &TargetSurface, init: &Pose, init_shape: &Shape, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    init.validate(rig.joint_count())?;
    let layout = Layout::new(rig, config);
    let (mut pose, mut shape) = (init.clone(), init_shape.clone());
    let mut ev = evaluate(rig, target, &pose, &shape, &layout, config)?;
    if !ev.objective.is_finite() {
        return Err(Error::FitDiverged { iteration: 0 });
    }
    let initial = ev.objective;
    let mut history = vec![initial];
    let mut converged = ev.objective == 0.0;
    let mut iterations = 0;
    let mut mu_rel = config.initial_damping;
    while !converged && iterations < config.max_iters {
        iterations += 1;
        let (g, h) = linearize(rig, target, &ev, &pose, &layout, config);
        let gnorm = g.norm();
        if gnorm == 0.0 || !gnorm.is_finite() {
            if !gnorm.is_finite() {
                return Err(Error::FitDiverged { iteration: iterations });
            }
            converged = true;
            break;
        }
        let damped = &h + DMatrix::identity(layout.n, layout.n) * (mu_rel * (h.trace() / layout.n as f64).max(f64::MIN_POSITIVE));
        let gn = damped.cholesky().map(|c| -c.solve(&g));
        let mut directions = Vec::new();
        if let Some(d) = gn {
            if d.dot(&g) < 0.0 {
                // predicted decrease below the tolerance scale: nothing left to gain
                if -0.5 * d.dot(&g) < config.convergence_tol * config.convergence_tol {
                    converged = true;
                    break;
                }
                let limit = (config.max_step / d.amax()).min(1.0);
                directions.push(d * limit);
            }
        }
        let gn_count = directions.len();
        // steepest descent scaled to the step bound on the largest coordinate
        directions.push(-&g * (config.max_step / g.amax()));

        let mut accepted = None;
        'search: for (k, dir) in directions.iter().enumerate() {
            let slope = g.dot(dir);
            let mut alpha = 1.0;
            for _ in 0..=config.max_backtracks {
                let (p, s) = apply_step(&pose, &shape, &layout, &(dir * alpha));
                let trial = evaluate(rig, target, &p, &s, &layout, config)?;
                if !trial.objective.is_finite() {
                    return Err(Error::FitDiverged { iteration: iterations });
                }
                if trial.objective <= ev.objective + config.armijo * alpha * slope {
                    // trust the curvature model more after a full step
                    mu_rel = if k < gn_count && alpha == 1.0 {
                        (mu_rel / 3.0).max(config.damping)
                    } else {
                        mu_rel * 4.0
                    };
                    accepted = Some((p, s, trial));
                    break 'search;
                }
                alpha *= config.backtrack_factor;
            }
        }
        match accepted {
            Some((p, s, trial)) => {
                let moved = mean_move(&trial.posed.vertices, &ev.posed.vertices);
                pose = p;
                shape = s;
                ev = trial;
                history.push(ev.objective);
                if moved < config.convergence_tol || ev.objective == 0.0 {
                    converged = true;
                }
            }
            // no direction decreases the objective: a numerical stationary point
            None => converged = true,
        }
    }
    let n = ev.hits.len() as f64;
    let report = FitReport {
        initial_objective: initial,
        objective: ev.objective,
        mean_distance: ev.hits.iter().map(|h| h.distance).sum::<f64>() / n,
        max_distance: ev.hits.iter().map(|h| h.distance).fold(0.0, f64::max),
        iterations,
        converged,
        history,
        pose: pose.to_flat(),
        shape: shape.coefficients.clone(),
    };
    Ok(FitResult { pose, shape, report })
}

/// Fits every target frame in order. With `warm_start`, frame `t` starts
/// from frame `t − 1`'s solution; otherwise every frame starts from `init`.
pub fn fit_sequence(
    rig: &Rig,
    target_rig: &Rig,
    target_poses: &[Pose],
    target_shape: &Shape,
    init: &Pose,
    config: &FitConfig,
    warm_start: bool,
) -> Result<Vec<FitResult>> {
    let shape0 = Shape::zeros(rig.shape_count());
    let fit_one = |pose: &Pose, start: &Pose, start_shape: &Shape| -> Result<FitResult> {
        let verts = target_rig.skin_vertices(pose, target_shape)?;
        let surface = TargetSurface::new(verts, target_rig.faces().to_vec())?;
        fit_pose(rig, &surface, start, start_shape, config)
    };
    if !warm_start {
        return target_poses.iter().map(|p| fit_one(p, init, &shape0)).collect();
    }
    let mut out: Vec<FitResult> = Vec::with_capacity(target_poses.len());
    for p in target_poses {
        let (start, start_shape) = match out.last() {
            Some(prev) => (prev.pose.clone(), prev.shape.clone()),
            None => (init.clone(), shape0.clone()),
        };
        out.push(fit_one(p, &start, &start_shape)?);
    }
    Ok(out)
}
