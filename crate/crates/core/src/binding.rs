//! Gaussians stored in per-triangle local frames.
//!
//! Each triangle gets a rigid frame (centroid origin, first edge as x, normal
//! as z) and a scalar scale `sqrt(area)`. A Gaussian's local position and
//! scale are expressed in units of that scale, so it rides rigidly on its
//! parent triangle and stretches with it.

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{blob_path_for, write_atomic, BlobEntry, BlobReader, BlobWriter};
use crate::error::{Error, Result};
use crate::math::{
    left_mul_matrix, logit, mat_to_quat, normalize_backward, quat_from_array, quat_to_vec4,
    sigmoid, Mat3, Quat, Vec3,
};

const MIN_AREA: f64 = 1e-12;

pub const INIT_LOG_SCALE: f64 = -std::f64::consts::LN_2;
pub const INIT_OPACITY: f64 = 0.1;
pub const INIT_COLOR: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleFrame {
    pub rotation: Mat3,
    pub origin: Vec3,
    pub scale: f64,
}

pub fn triangle_frame(face: usize, v0: &Vec3, v1: &Vec3, v2: &Vec3) -> Result<TriangleFrame> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let n = e1.cross(&e2);
    let area = 0.5 * n.norm();
    if !(area > MIN_AREA) {
        return Err(Error::DegenerateTriangle { face });
    }
    let c1 = e1.normalize();
    let c3 = n / n.norm();
    let c2 = c3.cross(&c1);
    Ok(TriangleFrame {
        rotation: Mat3::from_columns(&[c1, c2, c3]),
        origin: (v0 + v1 + v2) / 3.0,
        scale: area.sqrt(),
    })
}

/// Gradient of a loss with respect to the three triangle vertices, given its
/// gradient with respect to the frame's rotation, origin and scale.
pub fn triangle_frame_backward(
    v0: &Vec3,
    v1: &Vec3,
    v2: &Vec3,
    d_rotation: &Mat3,
    d_origin: &Vec3,
    d_scale: f64,
) -> [Vec3; 3] {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let n = e1.cross(&e2);
    let n_len = n.norm();
    let e1_len = e1.norm();
    let c1 = e1 / e1_len;
    let c3 = n / n_len;
    let scale = (0.5 * n_len).sqrt();

    let mut d_c1: Vec3 = d_rotation.column(0).into();
    let d_c2: Vec3 = d_rotation.column(1).into();
    let mut d_c3: Vec3 = d_rotation.column(2).into();
    // c2 = c3 × c1
    d_c3 += c1.cross(&d_c2);
    d_c1 += d_c2.cross(&c3);

    let d_e1_norm = (d_c1 - c1 * c1.dot(&d_c1)) / e1_len;
    let mut d_n = (d_c3 - c3 * c3.dot(&d_c3)) / n_len;
    d_n += c3 * (d_scale / (4.0 * scale));

    let d_e1 = d_e1_norm + e2.cross(&d_n);
    let d_e2 = d_n.cross(&e1);
    let third = d_origin / 3.0;
    [third - d_e1 - d_e2, third + d_e1, third + d_e2]
}

/// One Gaussian's local parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundGaussian {
    pub triangle: u32,
    pub position: [f64; 3],
    /// `(w, x, y, z)`, normalised at bind time.
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

/// Gaussian in world space, after activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldGaussian {
    pub mean: Vec3,
    pub rotation: Quat,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

/// Parallel arrays of triangle-local Gaussian parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundGaussianSet {
    pub triangle: Vec<u32>,
    pub position: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl BoundGaussianSet {
    pub fn len(&self) -> usize {
        self.triangle.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangle.is_empty()
    }

    pub fn get(&self, i: usize) -> BoundGaussian {
        BoundGaussian {
            triangle: self.triangle[i],
            position: self.position[i],
            rotation: self.rotation[i],
            log_scale: self.log_scale[i],
            opacity_logit: self.opacity_logit[i],
            color: self.color[i],
        }
    }

    pub fn push(&mut self, g: BoundGaussian) {
        self.triangle.push(g.triangle);
        self.position.push(g.position);
        self.rotation.push(g.rotation);
        self.log_scale.push(g.log_scale);
        self.opacity_logit.push(g.opacity_logit);
        self.color.push(g.color);
    }

    /// Keeps entries whose mask value is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        filter(&mut self.triangle, keep);
        filter(&mut self.position, keep);
        filter(&mut self.rotation, keep);
        filter(&mut self.log_scale, keep);
        filter(&mut self.opacity_logit, keep);
        filter(&mut self.color, keep);
    }

    /// Copy with every parameter rounded to `f32`, as stored in checkpoints.
    pub fn rounded_to_f32(&self) -> Self {
        fn r<const K: usize>(v: &[[f64; K]]) -> Vec<[f64; K]> {
            v.iter().map(|a| a.map(|x| x as f32 as f64)).collect()
        }
        Self {
            triangle: self.triangle.clone(),
            position: r(&self.position),
            rotation: r(&self.rotation),
            log_scale: r(&self.log_scale),
            opacity_logit: self.opacity_logit.iter().map(|&x| x as f32 as f64).collect(),
            color: r(&self.color),
        }
    }

    pub fn lengths_consistent(&self) -> bool {
        let n = self.len();
        [
            self.position.len(),
            self.rotation.len(),
            self.log_scale.len(),
            self.opacity_logit.len(),
            self.color.len(),
        ]
        .iter()
        .all(|&l| l == n)
    }
}

/// One Gaussian per face, then `n_total - F` more on uniformly drawn faces.
pub fn init_gaussians(face_count: usize, n_total: usize, seed: u64) -> Result<BoundGaussianSet> {
    if face_count == 0 {
        return Err(Error::Init("mesh has no faces".into()));
    }
    if n_total < face_count {
        return Err(Error::Init(format!(
            "{n_total} gaussians cannot cover {face_count} faces"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = |triangle: u32| BoundGaussian {
        triangle,
        position: [0.0; 3],
        rotation: crate::math::IDENTITY_QUAT,
        log_scale: [INIT_LOG_SCALE; 3],
        opacity_logit: logit(INIT_OPACITY),
        color: [INIT_COLOR; 3],
    };
    let mut set = BoundGaussianSet::default();
    for f in 0..face_count {
        set.push(template(f as u32));
    }
    for _ in face_count..n_total {
        set.push(template(rng.random_range(0..face_count) as u32));
    }
    Ok(set)
}

/// Frame quaternion cached beside the matrix, for composing rotations.
#[derive(Clone, Copy, Debug)]
pub struct FaceFrame {
    pub frame: TriangleFrame,
    pub quat: Quat,
}

pub fn local_to_world(g: &BoundGaussian, frame: &TriangleFrame) -> WorldGaussian {
    local_to_world_with(g, frame, &mat_to_quat(&frame.rotation))
}

fn local_to_world_with(g: &BoundGaussian, frame: &TriangleFrame, frame_quat: &Quat) -> WorldGaussian {
    let local_q = quat_from_array(g.rotation);
    let local_q = local_q / local_q.norm();
    let p = Vec3::from(g.position);
    WorldGaussian {
        mean: frame.origin + frame.rotation * p * frame.scale,
        rotation: frame_quat * local_q,
        scale: Vec3::from(g.log_scale).map(f64::exp) * frame.scale,
        opacity: sigmoid(g.opacity_logit),
        color: Vec3::from(g.color),
    }
}

/// Result of binding a set to posed vertices.
#[derive(Clone, Debug)]
pub struct Binding {
    /// Per face; `None` for degenerate faces no Gaussian references.
    pub frames: Vec<Option<FaceFrame>>,
    pub gaussians: Vec<WorldGaussian>,
}

pub fn face_frames(posed: &[Vec3], faces: &[[u32; 3]]) -> Vec<Option<FaceFrame>> {
    faces
        .par_iter()
        .enumerate()
        .map(|(f, face)| {
            let [a, b, c] = face.map(|k| &posed[k as usize]);
            triangle_frame(f, a, b, c).ok().map(|frame| FaceFrame {
                quat: mat_to_quat(&frame.rotation),
                frame,
            })
        })
        .collect()
}

pub fn bind_all(set: &BoundGaussianSet, posed: &[Vec3], faces: &[[u32; 3]]) -> Result<Binding> {
    let frames = face_frames(posed, faces);
    if let Some(&t) = set.triangle.iter().find(|&&t| t as usize >= faces.len()) {
        return Err(Error::Contract(format!("gaussian bound to missing face {t}")));
    }
    if let Some(&t) = set.triangle.iter().find(|&&t| frames[t as usize].is_none()) {
        return Err(Error::DegenerateTriangle { face: t as usize });
    }
    let gaussians = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let ff = frames[set.triangle[i] as usize].as_ref().unwrap();
            local_to_world_with(&set.get(i), &ff.frame, &ff.quat)
        })
        .collect();
    Ok(Binding { frames, gaussians })
}

/// Loss gradients with respect to world-space Gaussian parameters.
#[derive(Clone, Debug, Default)]
pub struct WorldGrads {
    pub mean: Vec<Vec3>,
    /// With respect to the world quaternion `(w, x, y, z)`.
    pub rotation: Vec<Vector4<f64>>,
    /// With respect to the world rotation matrix.
    pub rotation_matrix: Vec<Mat3>,
    pub scale: Vec<Vec3>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vec3>,
    /// Screen-space mean gradient (pixels), for density statistics.
    pub mean2d: Vec<[f64; 2]>,
}

impl WorldGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vec3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            rotation_matrix: vec![Mat3::zeros(); n],
            scale: vec![Vec3::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
            mean2d: vec![[0.0; 2]; n],
        }
    }
}

/// Loss gradients with respect to the local parameters, laid out like
/// [`BoundGaussianSet`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalGrads {
    pub position: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// Posed-vertex gradients, only when requested.
    pub vertices: Option<Vec<Vec3>>,
}

/// Chains world-space gradients back to local parameters and, optionally,
/// to the posed vertices.
pub fn bind_backward(
    set: &BoundGaussianSet,
    binding: &Binding,
    grads: &WorldGrads,
    posed_for_vertex_grads: Option<(&[Vec3], &[[u32; 3]])>,
) -> Result<LocalGrads> {
    let n = set.len();
    if grads.mean.len() != n || binding.gaussians.len() != n {
        return Err(Error::Contract("gradient/binding length mismatch".into()));
    }
    let per: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ff = binding.frames[set.triangle[i] as usize].as_ref().unwrap();
            let fr = &ff.frame;
            let wg = &binding.gaussians[i];
            let d_pos = fr.rotation.transpose() * grads.mean[i] * fr.scale;
            let lq = quat_from_array(set.rotation[i]);
            let d_unit = left_mul_matrix(&ff.quat).transpose() * grads.rotation[i];
            let d_rot = normalize_backward(&lq, &d_unit);
            let d_ls = grads.scale[i].component_mul(&wg.scale);
            let d_op = grads.opacity[i] * wg.opacity * (1.0 - wg.opacity);
            (
                [d_pos.x, d_pos.y, d_pos.z],
                [d_rot[0], d_rot[1], d_rot[2], d_rot[3]],
                [d_ls.x, d_ls.y, d_ls.z],
                d_op,
                [grads.color[i].x, grads.color[i].y, grads.color[i].z],
            )
        })
        .collect();
    let mut out = LocalGrads {
        position: Vec::with_capacity(n),
        rotation: Vec::with_capacity(n),
        log_scale: Vec::with_capacity(n),
        opacity_logit: Vec::with_capacity(n),
        color: Vec::with_capacity(n),
        vertices: None,
    };
    for (p, r, s, o, c) in per {
        out.position.push(p);
        out.rotation.push(r);
        out.log_scale.push(s);
        out.opacity_logit.push(o);
        out.color.push(c);
    }

    if let Some((posed, faces)) = posed_for_vertex_grads {
        // accumulate frame gradients per face, in Gaussian order
        let mut d_frame = vec![(Mat3::zeros(), Vec3::zeros(), 0.0f64); faces.len()];
        for i in 0..n {
            let f = set.triangle[i] as usize;
            let fr = &binding.frames[f].as_ref().unwrap().frame;
            let wg = &binding.gaussians[i];
            let lq = quat_from_array(set.rotation[i]);
            let local_r = crate::math::quat_to_mat(&lq);
            let p = Vec3::from(set.position[i]);
            let entry = &mut d_frame[f];
            entry.0 += grads.rotation_matrix[i] * local_r.transpose();
            entry.0 += grads.mean[i] * (p * fr.scale).transpose();
            entry.1 += grads.mean[i];
            entry.2 += grads.mean[i].dot(&(fr.rotation * p));
            entry.2 += grads.scale[i].dot(&(wg.scale / fr.scale));
        }
        let mut dv = vec![Vec3::zeros(); posed.len()];
        for (f, face) in faces.iter().enumerate() {
            let (dr, dorg, ds) = &d_frame[f];
            if binding.frames[f].is_none() {
                continue;
            }
            let [a, b, c] = face.map(|k| posed[k as usize]);
            let g = triangle_frame_backward(&a, &b, &c, dr, dorg, *ds);
            for (k, gk) in face.iter().zip(g) {
                dv[*k as usize] += gk;
            }
        }
        out.vertices = Some(dv);
    }
    Ok(out)
}

/// Quaternion vector of a world Gaussian, `(w, x, y, z)`.
pub fn world_quat_vec(g: &WorldGaussian) -> Vector4<f64> {
    quat_to_vec4(&g.rotation)
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    count: usize,
    iteration: usize,
    seed: u64,
    blobs: Vec<BlobEntry>,
}

/// Checkpoint header fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub iteration: usize,
    pub seed: u64,
}

/// Writes the set as a JSON header plus `f32` blobs next to `path`.
pub fn save_checkpoint(set: &BoundGaussianSet, info: CheckpointInfo, path: &Path) -> Result<()> {
    if !set.lengths_consistent() {
        return Err(Error::Contract("gaussian arrays differ in length".into()));
    }
    let bin_name = blob_path_for(path)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?;
    let mut w = BlobWriter::new(bin_name);
    w.put_u32("triangle", set.triangle.iter().copied());
    w.put_f32("position", set.position.iter().flatten().copied());
    w.put_f32("rotation", set.rotation.iter().flatten().copied());
    w.put_f32("log_scale", set.log_scale.iter().flatten().copied());
    w.put_f32("opacity_logit", set.opacity_logit.iter().copied());
    w.put_f32("color", set.color.iter().flatten().copied());
    let blobs = w.finish(path)?;
    let manifest = CheckpointManifest {
        count: set.len(),
        iteration: info.iteration,
        seed: info.seed,
        blobs,
    };
    write_atomic(path, &serde_json::to_vec_pretty(&manifest)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(BoundGaussianSet, CheckpointInfo)> {
    let m: CheckpointManifest = serde_json::from_slice(&std::fs::read(path)?)?;
    let r = BlobReader::open(path, &m.blobs, "checkpoint")?;
    let n = m.count;
    fn chunks<const K: usize>(v: Vec<f64>, n: usize, name: &str) -> Result<Vec<[f64; K]>> {
        if v.len() != n * K {
            return Err(Error::rig(name, format!("expected {} values, found {}", n * K, v.len())));
        }
        Ok(v.chunks_exact(K).map(|c| std::array::from_fn(|k| c[k])).collect())
    }
    let triangle = r.u32s("triangle")?;
    let opacity_logit = r.f32s("opacity_logit")?;
    if triangle.len() != n || opacity_logit.len() != n {
        return Err(Error::rig("checkpoint", "count mismatch"));
    }
    let set = BoundGaussianSet {
        triangle,
        position: chunks(r.f32s("position")?, n, "position")?,
        rotation: chunks(r.f32s("rotation")?, n, "rotation")?,
        log_scale: chunks(r.f32s("log_scale")?, n, "log_scale")?,
        opacity_logit,
        color: chunks(r.f32s("color")?, n, "color")?,
    };
    Ok((
        set,
        CheckpointInfo {
            iteration: m.iteration,
            seed: m.seed,
        },
    ))
}
