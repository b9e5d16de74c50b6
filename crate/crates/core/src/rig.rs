//! Parametric skinned rig: template mesh, joint forest, sparse skin weights,
//! linear shape blendshapes and pose-driven corrective blendshapes.
//!
//! Posing is `skin(shape + correctives(pose))` with linear blend skinning
//! over forward-kinematics transforms taken relative to the rest pose.

use std::path::Path;

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use crate::container::{blob_path_for, BlobReader, BlobWriter, BlobEntry};
use crate::error::{Error, Result};
use crate::math::{
    quat_from_array, quat_to_vec4, twist_sine, twist_sine_grad, unit_quat_rotation_partials,
    Mat3, Quat, RigidTransform, Vec3,
};

pub const MAX_INFLUENCES: usize = 8;
const WEIGHT_SUM_TOL: f64 = 1e-6;
const MIN_FACE_AREA: f64 = 1e-12;
const QUAT_NORM_TOL: f64 = 1e-6;
const DEGENERATE_QUAT: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    /// Maximum swing away from the rest bone direction, radians.
    pub max_swing: f64,
    pub min_twist: f64,
    pub max_twist: f64,
}

impl Default for JointLimits {
    fn default() -> Self {
        Self {
            max_swing: std::f64::consts::PI,
            min_twist: -std::f64::consts::PI,
            max_twist: std::f64::consts::PI,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest rotation relative to the parent, `(w, x, y, z)`.
    pub rest_rotation: [f64; 4],
    /// Rest offset from the parent, in the parent's frame (m).
    pub rest_translation: [f64; 3],
    #[serde(default)]
    pub limits: JointLimits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriverKind {
    /// An entry of `R_j - I` (row-major, `component` in `0..9`).
    #[serde(rename = "rotation-matrix-residual")]
    RotationResidual,
    /// `sin` of the joint's twist about its rest bone axis.
    #[serde(rename = "twist-angle-sine")]
    TwistSine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectiveDriver {
    pub kind: DriverKind,
    pub joint: usize,
    pub component: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corrective {
    pub driver: CorrectiveDriver,
    pub displacement: Vec<[f64; 3]>,
}

/// Plain rig arrays, unvalidated. Turn into a [`Rig`] with [`Rig::new`].
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RigData {
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub joints: Vec<Joint>,
    /// Per-vertex `(joint, weight)` influences.
    pub skin_weights: Vec<Vec<(u32, f64)>>,
    pub shape_basis: Vec<Vec<[f64; 3]>>,
    pub correctives: Vec<Corrective>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub root_translation: [f64; 3],
    pub joint_rotations: Vec<[f64; 4]>,
}

impl Pose {
    pub fn rest(joint_count: usize) -> Self {
        Self {
            root_translation: [0.0; 3],
            joint_rotations: vec![crate::math::IDENTITY_QUAT; joint_count],
        }
    }

    pub fn rotation(&self, j: usize) -> Quat {
        quat_from_array(self.joint_rotations[j])
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.root_translation)
    }

    /// `[tx, ty, tz, w0, x0, y0, z0, w1, ...]`
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.root_translation.to_vec();
        for q in &self.joint_rotations {
            out.extend_from_slice(q);
        }
        out
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() < 3 || !(values.len() - 3).is_multiple_of(4) {
            return Err(Error::PoseShape(format!(
                "flat pose length {} is not 3 + 4·J",
                values.len()
            )));
        }
        Ok(Self {
            root_translation: [values[0], values[1], values[2]],
            joint_rotations: values[3..]
                .chunks_exact(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect(),
        })
    }

    pub fn validate(&self, joint_count: usize) -> Result<()> {
        if self.joint_rotations.len() != joint_count {
            return Err(Error::PoseShape(format!(
                "pose has {} rotations, rig has {joint_count} joints",
                self.joint_rotations.len()
            )));
        }
        if self.root_translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::PoseShape("non-finite root translation".into()));
        }
        for (j, q) in self.joint_rotations.iter().enumerate() {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !n.is_finite() || n < DEGENERATE_QUAT {
                return Err(Error::PoseShape(format!("degenerate quaternion on joint {j}")));
            }
            if (n - 1.0).abs() > QUAT_NORM_TOL {
                return Err(Error::PoseShape(format!(
                    "quaternion on joint {j} has norm {n}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub coefficients: Vec<f64>,
}

impl Shape {
    pub fn zeros(count: usize) -> Self {
        Self {
            coefficients: vec![0.0; count],
        }
    }
}

/// Everything computed while posing, kept for gradient computations.
#[derive(Clone, Debug)]
pub struct PosedRig {
    pub world: Vec<RigidTransform>,
    /// `world_j ∘ rest_world_j⁻¹`
    pub skinning: Vec<RigidTransform>,
    /// Shaped rest vertices plus corrective offsets, before skinning.
    pub unposed: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
}

/// A validated, immutable rig.
#[derive(Clone, Debug)]
pub struct Rig {
    data: RigData,
    rest_local: Vec<RigidTransform>,
    rest_world: Vec<RigidTransform>,
    rest_world_inv: Vec<RigidTransform>,
    twist_axes: Vec<Vec3>,
    /// Joints ordered so parents precede children.
    order: Vec<usize>,
    /// Root-to-joint chain for each joint, inclusive.
    chains: Vec<Vec<usize>>,
}

fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

impl Rig {
    pub fn new(data: RigData) -> Result<Self> {
        let v = data.template_vertices.len();
        let j = data.joints.len();
        if v == 0 {
            return Err(Error::rig("template_vertices", "empty"));
        }
        if j == 0 {
            return Err(Error::rig("joints", "rig has no joints"));
        }
        if data
            .template_vertices
            .iter()
            .flatten()
            .any(|x| !x.is_finite())
        {
            return Err(Error::rig("template_vertices", "non-finite coordinate"));
        }

        // joints: forest with index 0 a root
        if data.joints[0].parent.is_some() {
            return Err(Error::rig("joints", "joint 0 must be a root"));
        }
        for (i, joint) in data.joints.iter().enumerate() {
            if let Some(p) = joint.parent {
                if p >= j {
                    return Err(Error::rig("joints", format!("joint {i} parent {p} out of range")));
                }
            }
            let n = joint.rest_rotation.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !n.is_finite() || (n - 1.0).abs() > QUAT_NORM_TOL {
                return Err(Error::rig("joints", format!("joint {i} rest rotation is not unit")));
            }
        }
        let mut chains = Vec::with_capacity(j);
        for i in 0..j {
            let mut chain = vec![i];
            let mut cur = i;
            while let Some(p) = data.joints[cur].parent {
                if chain.len() > j {
                    return Err(Error::rig("joints", format!("cycle through joint {i}")));
                }
                chain.push(p);
                cur = p;
            }
            chain.reverse();
            chains.push(chain);
        }
        let mut order: Vec<usize> = (0..j).collect();
        order.sort_by_key(|&i| (chains[i].len(), i));

        // faces
        for (f, face) in data.faces.iter().enumerate() {
            if face.iter().any(|&k| k as usize >= v) {
                return Err(Error::rig("faces", format!("face {f} indexes past {v} vertices")));
            }
            let [a, b, c] = face.map(|k| Vec3::from(data.template_vertices[k as usize]));
            if !(triangle_area(&a, &b, &c) > MIN_FACE_AREA) {
                return Err(Error::rig("faces", format!("face {f} is degenerate")));
            }
        }

        // skin weights
        if data.skin_weights.len() != v {
            return Err(Error::rig(
                "skin_weights",
                format!("{} rows for {v} vertices", data.skin_weights.len()),
            ));
        }
        for (i, row) in data.skin_weights.iter().enumerate() {
            if row.is_empty() || row.len() > MAX_INFLUENCES {
                return Err(Error::rig(
                    "skin_weights",
                    format!("vertex {i} has {} influences", row.len()),
                ));
            }
            let mut sum = 0.0;
            for &(jj, w) in row {
                if jj as usize >= j || !(w >= 0.0) || !w.is_finite() {
                    return Err(Error::rig("skin_weights", format!("vertex {i} has an invalid entry")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::rig(
                    "skin_weights",
                    format!("vertex {i} weights sum to {sum}"),
                ));
            }
        }

        for (s, basis) in data.shape_basis.iter().enumerate() {
            if basis.len() != v {
                return Err(Error::rig("shape_basis", format!("blendshape {s} has wrong length")));
            }
        }
        for (c, corr) in data.correctives.iter().enumerate() {
            if corr.displacement.len() != v {
                return Err(Error::rig("correctives", format!("corrective {c} has wrong length")));
            }
            if corr.driver.joint >= j {
                return Err(Error::rig("correctives", format!("corrective {c} joint out of range")));
            }
            if corr.driver.kind == DriverKind::RotationResidual && corr.driver.component >= 9 {
                return Err(Error::rig("correctives", format!("corrective {c} component out of range")));
            }
        }

        let rest_local: Vec<RigidTransform> = data
            .joints
            .iter()
            .map(|jt| {
                RigidTransform::from_quat(
                    &quat_from_array(jt.rest_rotation),
                    Vec3::from(jt.rest_translation),
                )
            })
            .collect();
        let mut rest_world = vec![RigidTransform::identity(); j];
        for &i in &order {
            rest_world[i] = match data.joints[i].parent {
                Some(p) => rest_world[p].compose(&rest_local[i]),
                None => rest_local[i],
            };
        }
        let rest_world_inv = rest_world.iter().map(|t| t.inverse()).collect();

        let twist_axes = (0..j)
            .map(|i| {
                let child = (0..j).find(|&c| data.joints[c].parent == Some(i));
                child
                    .map(|c| rest_local[c].translation)
                    .filter(|t| t.norm() > 1e-9)
                    .map(|t| t.normalize())
                    .unwrap_or_else(Vec3::y)
            })
            .collect();

        Ok(Self {
            data,
            rest_local,
            rest_world,
            rest_world_inv,
            twist_axes,
            order,
            chains,
        })
    }

    pub fn data(&self) -> &RigData {
        &self.data
    }

    pub fn vertex_count(&self) -> usize {
        self.data.template_vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.data.faces.len()
    }

    pub fn joint_count(&self) -> usize {
        self.data.joints.len()
    }

    pub fn shape_count(&self) -> usize {
        self.data.shape_basis.len()
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.data.faces
    }

    pub fn joints(&self) -> &[Joint] {
        &self.data.joints
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.data.joints.iter().position(|j| j.name == name)
    }

    pub fn rest_world(&self) -> &[RigidTransform] {
        &self.rest_world
    }

    /// Twist axis of joint `j` in its own frame: the rest direction toward
    /// its first child, or `+y` for leaves.
    pub fn twist_axis(&self, j: usize) -> Vec3 {
        self.twist_axes[j]
    }

    /// Root-to-`j` joint chain, inclusive.
    pub fn chain(&self, j: usize) -> &[usize] {
        &self.chains[j]
    }

    pub fn template(&self) -> Vec<Vec3> {
        self.data
            .template_vertices
            .iter()
            .map(|p| Vec3::from(*p))
            .collect()
    }

    pub fn rest_pose(&self) -> Pose {
        Pose::rest(self.joint_count())
    }

    pub fn forward_kinematics(&self, pose: &Pose) -> Result<Vec<RigidTransform>> {
        pose.validate(self.joint_count())?;
        let mut world = vec![RigidTransform::identity(); self.joint_count()];
        for &i in &self.order {
            let local = self.rest_local[i]
                .compose(&RigidTransform::from_quat(&pose.rotation(i), Vec3::zeros()));
            world[i] = match self.data.joints[i].parent {
                Some(p) => world[p].compose(&local),
                None => RigidTransform::translation(pose.translation()).compose(&local),
            };
        }
        Ok(world)
    }

    pub fn shaped_vertices(&self, shape: &Shape) -> Result<Vec<Vec3>> {
        self.check_shape(shape)?;
        let mut out = self.template();
        for (beta, basis) in shape.coefficients.iter().zip(&self.data.shape_basis) {
            if *beta == 0.0 {
                continue;
            }
            for (v, d) in out.iter_mut().zip(basis) {
                *v += Vec3::from(*d) * *beta;
            }
        }
        Ok(out)
    }

    fn check_shape(&self, shape: &Shape) -> Result<()> {
        if shape.coefficients.len() != self.shape_count() {
            return Err(Error::PoseShape(format!(
                "shape has {} coefficients, rig has {} blendshapes",
                shape.coefficients.len(),
                self.shape_count()
            )));
        }
        Ok(())
    }

    /// Scalar driving value of one corrective for `pose` (pose assumed valid).
    pub fn corrective_feature(&self, driver: &CorrectiveDriver, pose: &Pose) -> f64 {
        let q = pose.rotation(driver.joint);
        match driver.kind {
            DriverKind::RotationResidual => {
                let r = crate::math::quat_to_mat(&q) - Mat3::identity();
                r[(driver.component / 3, driver.component % 3)]
            }
            DriverKind::TwistSine => twist_sine(&q, &self.twist_axes[driver.joint]),
        }
    }

    /// Gradient of [`Rig::corrective_feature`] with respect to the driving
    /// joint's quaternion components, valid along unit-norm tangents.
    pub fn corrective_feature_grad(&self, driver: &CorrectiveDriver, pose: &Pose) -> Vector4<f64> {
        let q = pose.rotation(driver.joint);
        match driver.kind {
            DriverKind::RotationResidual => {
                let partials = unit_quat_rotation_partials(&q);
                let (r, c) = (driver.component / 3, driver.component % 3);
                Vector4::new(
                    partials[0][(r, c)],
                    partials[1][(r, c)],
                    partials[2][(r, c)],
                    partials[3][(r, c)],
                )
            }
            DriverKind::TwistSine => twist_sine_grad(&q, &self.twist_axes[driver.joint]),
        }
    }

    pub fn corrective_features(&self, pose: &Pose) -> Result<Vec<f64>> {
        pose.validate(self.joint_count())?;
        Ok(self
            .data
            .correctives
            .iter()
            .map(|c| self.corrective_feature(&c.driver, pose))
            .collect())
    }

    pub fn corrective_offsets(&self, pose: &Pose) -> Result<Vec<Vec3>> {
        let features = self.corrective_features(pose)?;
        let mut out = vec![Vec3::zeros(); self.vertex_count()];
        for (f, corr) in features.iter().zip(&self.data.correctives) {
            if *f == 0.0 {
                continue;
            }
            for (o, d) in out.iter_mut().zip(&corr.displacement) {
                *o += Vec3::from(*d) * *f;
            }
        }
        Ok(out)
    }

    pub fn pose_internals(&self, pose: &Pose, shape: &Shape) -> Result<PosedRig> {
        let world = self.forward_kinematics(pose)?;
        let skinning: Vec<RigidTransform> = world
            .iter()
            .zip(&self.rest_world_inv)
            .map(|(w, inv)| w.compose(inv))
            .collect();
        let mut unposed = self.shaped_vertices(shape)?;
        for (u, c) in unposed.iter_mut().zip(self.corrective_offsets(pose)?) {
            *u += c;
        }
        let vertices = unposed
            .iter()
            .zip(&self.data.skin_weights)
            .map(|(u, row)| blend(&skinning, row, u))
            .collect();
        Ok(PosedRig {
            world,
            skinning,
            unposed,
            vertices,
        })
    }

    pub fn skin_vertices(&self, pose: &Pose, shape: &Shape) -> Result<Vec<Vec3>> {
        Ok(self.pose_internals(pose, shape)?.vertices)
    }
}

/// Weight-normalised linear blend of skinning transforms applied to `u`.
#[inline]
pub fn blend(skinning: &[RigidTransform], row: &[(u32, f64)], u: &Vec3) -> Vec3 {
    let mut acc = Vec3::zeros();
    let mut sum = 0.0;
    for &(j, w) in row {
        acc += skinning[j as usize].apply(u) * w;
        sum += w;
    }
    acc / sum
}

/// Extracts the quaternion vector `(w, x, y, z)` of joint `j`.
pub fn pose_quat_vec(pose: &Pose, j: usize) -> Vector4<f64> {
    quat_to_vec4(&pose.rotation(j))
}

// ---------------------------------------------------------------------------
// file format

#[derive(Serialize, Deserialize)]
struct RigCounts {
    vertices: usize,
    faces: usize,
    joints: usize,
    influences: usize,
    shapes: usize,
    correctives: usize,
}

#[derive(Serialize, Deserialize)]
struct CorrectiveEntry {
    #[serde(flatten)]
    driver: CorrectiveDriver,
    blob: String,
}

#[derive(Serialize, Deserialize)]
struct RigManifest {
    version: u32,
    counts: RigCounts,
    joints: Vec<Joint>,
    correctives: Vec<CorrectiveEntry>,
    blobs: Vec<BlobEntry>,
}

pub fn save_rig(rig: &Rig, path: &Path) -> Result<()> {
    save_rig_data(rig.data(), path)
}

pub(crate) fn save_rig_data(data: &RigData, path: &Path) -> Result<()> {
    let bin_name = blob_path_for(path)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Config(format!("bad rig path {}", path.display())))?;
    let mut w = BlobWriter::new(bin_name);
    w.put_f32(
        "template_vertices",
        data.template_vertices.iter().flatten().copied(),
    );
    w.put_u32("faces", data.faces.iter().flatten().copied());
    let mut offsets = vec![0u32];
    for row in &data.skin_weights {
        offsets.push(offsets.last().unwrap() + row.len() as u32);
    }
    w.put_u32("skin_offsets", offsets);
    w.put_u32(
        "skin_joints",
        data.skin_weights.iter().flatten().map(|&(j, _)| j),
    );
    w.put_f32(
        "skin_weights",
        data.skin_weights.iter().flatten().map(|&(_, wt)| wt),
    );
    w.put_f32(
        "shape_basis",
        data.shape_basis.iter().flatten().flatten().copied(),
    );
    let mut correctives = Vec::new();
    for (i, c) in data.correctives.iter().enumerate() {
        let name = format!("corrective_{i}");
        w.put_f32(&name, c.displacement.iter().flatten().copied());
        correctives.push(CorrectiveEntry {
            driver: c.driver,
            blob: name,
        });
    }
    let blobs = w.finish(path)?;
    let manifest = RigManifest {
        version: 1,
        counts: RigCounts {
            vertices: data.template_vertices.len(),
            faces: data.faces.len(),
            joints: data.joints.len(),
            influences: data.skin_weights.iter().map(|r| r.len()).sum(),
            shapes: data.shape_basis.len(),
            correctives: data.correctives.len(),
        },
        joints: data.joints.clone(),
        correctives,
        blobs,
    };
    std::fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_rig(path: &Path) -> Result<Rig> {
    let text = std::fs::read(path)
        .map_err(|e| Error::rig("manifest", format!("{}: {e}", path.display())))?;
    let m: RigManifest =
        serde_json::from_slice(&text).map_err(|e| Error::rig("manifest", e.to_string()))?;
    if m.version != 1 {
        return Err(Error::rig("version", format!("unsupported version {}", m.version)));
    }
    if m.joints.len() != m.counts.joints {
        return Err(Error::rig("joints", "count mismatch"));
    }
    let r = BlobReader::open(path, &m.blobs, "blobs")?;
    let nv = m.counts.vertices;
    let template_vertices = r.vec3s("template_vertices", nv)?;
    let flat_faces = r.u32s("faces")?;
    if flat_faces.len() != m.counts.faces * 3 {
        return Err(Error::rig("faces", "count mismatch"));
    }
    let faces = flat_faces.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let offsets = r.u32s("skin_offsets")?;
    let sj = r.u32s("skin_joints")?;
    let sw = r.f32s("skin_weights")?;
    if offsets.len() != nv + 1 || sj.len() != sw.len() || sj.len() != m.counts.influences {
        return Err(Error::rig("skin_weights", "table sizes disagree"));
    }
    let mut skin_weights = Vec::with_capacity(nv);
    for i in 0..nv {
        let (a, b) = (offsets[i] as usize, offsets[i + 1] as usize);
        if a > b || b > sj.len() {
            return Err(Error::rig("skin_weights", "bad offsets"));
        }
        skin_weights.push((a..b).map(|k| (sj[k], sw[k])).collect());
    }
    let sb = r.vec3s("shape_basis", nv * m.counts.shapes)?;
    let shape_basis = if nv == 0 {
        Vec::new()
    } else {
        sb.chunks_exact(nv).map(|c| c.to_vec()).collect()
    };
    if m.correctives.len() != m.counts.correctives {
        return Err(Error::rig("correctives", "count mismatch"));
    }
    let correctives = m
        .correctives
        .iter()
        .map(|c| {
            Ok(Corrective {
                driver: c.driver,
                displacement: r.vec3s(&c.blob, nv)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Rig::new(RigData {
        template_vertices,
        faces,
        joints: m.joints,
        skin_weights,
        shape_basis,
        correctives,
    })
}

/// FNV-1a of the rig's manifest and blob bytes as written to disk.
pub fn rig_file_checksum(path: &Path) -> Result<u64> {
    let mut bytes = std::fs::read(path)?;
    bytes.extend(std::fs::read(blob_path_for(path))?);
    Ok(crate::container::fnv1a64(&bytes))
}
