//! Synthetic limb rigs, motion sequences and withheld "oracle" Gaussian sets
//! for closed-loop experiments.
//!
//! The limb runs along `+y` from the shoulder (y = 0) to the wrist end. Its
//! cross-section is a lopsided ellipse that tapers toward the wrist, so axial
//! twist changes the silhouette as well as the texture.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binding::{bind_all, triangle_frame, BoundGaussian, BoundGaussianSet};
use crate::dataset::{
    image_rel_path, mask_rel_path, write_manifest, CameraRecord, DatasetManifest, FrameRecord, Split, DATASET_VERSION, RIG_FILE,
};
use crate::error::{Error, Result};
use crate::math::{axis_angle_quat, logit, quat_to_array, quat_to_mat, twist_angle, Mat3, Quat, RigidTransform, Vec3, IDENTITY_QUAT};
use crate::imaging::save_png;
use crate::raster::{rasterize, Camera, RasterConfig};
use crate::rig::{save_rig, Corrective, CorrectiveDriver, DriverKind, Joint, JointLimits, Pose, Rig, RigData, Shape};

/// Dimensions of the synthetic limb (metres).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimbDims {
    pub upper_length: f64,
    pub fore_length: f64,
    /// Semi-axis along x at the shoulder and at the wrist end.
    pub radius_top: f64,
    pub radius_bottom: f64,
    /// z semi-axis as a fraction of the x semi-axis.
    pub aspect: f64,
    /// Half-width of the shoulder/elbow weight blend around the elbow.
    pub elbow_band: f64,
    /// Second-harmonic bulge of the cross-section. Non-zero values remove
    /// the half-turn symmetry of the ellipse so axial twist is observable
    /// from geometry alone.
    pub asymmetry: f64,
}

impl Default for LimbDims {
    fn default() -> Self {
        Self {
            upper_length: 0.3,
            fore_length: 0.3,
            radius_top: 0.07,
            radius_bottom: 0.05,
            aspect: 0.7,
            elbow_band: 0.04,
            asymmetry: 0.15,
        }
    }
}

impl LimbDims {
    pub fn length(&self) -> f64 {
        self.upper_length + self.fore_length
    }

    fn radii(&self, y: f64) -> (f64, f64) {
        let t = (y / self.length()).clamp(0.0, 1.0);
        let a = self.radius_top + (self.radius_bottom - self.radius_top) * t;
        (a, a * self.aspect)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LimbSpec {
    pub twist_joints: usize,
    /// Forearm blend segments, starting at the elbow, that get a pair of
    /// twist correctives; capped at the number of segments.
    pub correctives: usize,
    pub radial_segments: usize,
    pub axial_segments: usize,
}

impl LimbSpec {
    pub fn high() -> Self {
        Self {
            twist_joints: 3,
            correctives: 3,
            radial_segments: 24,
            axial_segments: 40,
        }
    }

    pub fn low() -> Self {
        Self {
            twist_joints: 0,
            correctives: 0,
            ..Self::high()
        }
    }
}

pub const ROOT: &str = "root";
/// Total forearm twists (degrees) at which correctives reproduce the ideal limb.
pub const CORRECTIVE_REFERENCE_TWISTS: [f64; 2] = [60.0, 120.0];
/// Twist joints rotate (almost) only about the bone axis.
pub const TWIST_JOINT_MAX_SWING: f64 = 0.1;
pub const SHOULDER: &str = "shoulder";
pub const ELBOW: &str = "elbow";

pub fn twist_joint_name(k: usize) -> String {
    format!("twist_{k}")
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

/// Weight rows along the limb axis as `(joint, weight)` lists, plus the
/// index of the forearm blend segment (if any) a height belongs to.
struct WeightLayout {
    /// Anchor heights: `anchors[k]` is where joint `joints[k]` has full weight.
    anchors: Vec<f64>,
    joints: Vec<u32>,
}

impl WeightLayout {
    fn new(dims: LimbDims, twist_joints: usize) -> Self {
        let elbow_y = dims.upper_length;
        let b = dims.elbow_band;
        let end = dims.length();
        let (shoulder, elbow) = (1u32, 2u32);
        let mut anchors = vec![elbow_y - b];
        let mut joints = vec![shoulder];
        if twist_joints == 0 {
            // without twist joints the elbow blend spans the whole forearm
            anchors.push(end);
            joints.push(elbow);
        } else {
            anchors.push(elbow_y + b);
            joints.push(elbow);
            for k in 1..=twist_joints {
                anchors.push(elbow_y + b + k as f64 * (end - elbow_y - b) / twist_joints as f64);
                joints.push(2 + k as u32);
            }
        }
        Self { anchors, joints }
    }

    /// Segment `s` blends `joints[s]` into `joints[s + 1]`.
    fn segment(&self, y: f64) -> Option<(usize, f64)> {
        let a = &self.anchors;
        for s in 0..a.len() - 1 {
            if y > a[s] && y < a[s + 1] {
                return Some((s, (y - a[s]) / (a[s + 1] - a[s])));
            }
        }
        None
    }

    fn row(&self, y: f64) -> Vec<(u32, f64)> {
        let first = self.anchors[0];
        if y <= first {
            return vec![(self.joints[0], 1.0)];
        }
        match self.segment(y) {
            Some((s, t)) => {
                let w = if s == 0 { smoothstep(t) } else { t };
                let w = q32(w);
                let mut row = Vec::new();
                if w < 1.0 {
                    row.push((self.joints[s], q32(1.0 - w)));
                }
                if w > 0.0 {
                    row.push((self.joints[s + 1], w));
                }
                row
            }
            None => vec![(*self.joints.last().unwrap(), 1.0)],
        }
    }

    /// Forearm blend segments, i.e. those whose distal joint is not the
    /// elbow-band start. With twist joints the elbow band itself is skipped.
    fn forearm_segments(&self) -> Vec<usize> {
        if self.joints.len() == 2 {
            vec![0]
        } else {
            (1..self.joints.len() - 1).collect()
        }
    }

    /// Blend weight of the distal joint in segment `s` at height `y`.
    fn distal_weight(&self, s: usize, y: f64) -> Option<f64> {
        match self.segment(y) {
            Some((seg, t)) if seg == s => Some(if s == 0 { smoothstep(t) } else { t }),
            _ => None,
        }
    }
}

/// Builds the limb rig. Joints: `root`, `shoulder` (at the origin),
/// `elbow`, then `twist_1..n` chained down the forearm.
pub fn make_synthetic_limb_rig(spec: LimbSpec, dims: LimbDims) -> Result<Rig> {
    if spec.radial_segments < 3 || spec.axial_segments < 2 {
        return Err(Error::Config("limb needs ≥3 radial and ≥2 axial segments".into()));
    }
    let (nr, na) = (spec.radial_segments, spec.axial_segments);
    let length = dims.length();
    let layout = WeightLayout::new(dims, spec.twist_joints);

    let mut joints = vec![
        Joint {
            name: ROOT.into(),
            parent: None,
            rest_rotation: IDENTITY_QUAT,
            rest_translation: [0.0; 3],
            limits: JointLimits::default(),
        },
        Joint {
            name: SHOULDER.into(),
            parent: Some(0),
            rest_rotation: IDENTITY_QUAT,
            rest_translation: [0.0; 3],
            limits: JointLimits::default(),
        },
        Joint {
            name: ELBOW.into(),
            parent: Some(1),
            rest_rotation: IDENTITY_QUAT,
            rest_translation: [0.0, q32(dims.upper_length), 0.0],
            limits: JointLimits::default(),
        },
    ];
    let mut prev_y = dims.upper_length;
    for k in 1..=spec.twist_joints {
        let y = layout.anchors[k + 1];
        joints.push(Joint {
            name: twist_joint_name(k),
            parent: Some(joints.len() - 1),
            rest_rotation: IDENTITY_QUAT,
            rest_translation: [0.0, q32(y - prev_y), 0.0],
            limits: JointLimits {
                max_swing: TWIST_JOINT_MAX_SWING,
                ..JointLimits::default()
            },
        });
        prev_y = y;
    }

    // rings of the tube, then the two cap centres
    let mut heights = Vec::new();
    let mut verts = Vec::new();
    let mut radial_dirs = Vec::new();
    for k in 0..=na {
        let y = length * k as f64 / na as f64;
        let (a, b) = dims.radii(y);
        for i in 0..nr {
            let phi = TAU * i as f64 / nr as f64;
            let x = a * (phi.cos() + dims.asymmetry * (2.0 * phi).cos());
            let z = b * phi.sin();
            verts.push([q32(x), q32(y), q32(z)]);
            radial_dirs.push([x, 0.0, z]);
            heights.push(y);
        }
    }
    let bottom = verts.len() as u32;
    verts.push([0.0, 0.0, 0.0]);
    radial_dirs.push([0.0; 3]);
    heights.push(0.0);
    let top = verts.len() as u32;
    verts.push([0.0, q32(length), 0.0]);
    radial_dirs.push([0.0; 3]);
    heights.push(length);

    let idx = |k: usize, i: usize| (k * nr + i % nr) as u32;
    let mut faces = Vec::new();
    for k in 0..na {
        for i in 0..nr {
            faces.push([idx(k, i), idx(k + 1, i), idx(k, i + 1)]);
            faces.push([idx(k + 1, i), idx(k + 1, i + 1), idx(k, i + 1)]);
        }
    }
    for i in 0..nr {
        faces.push([bottom, idx(0, i), idx(0, i + 1)]);
        faces.push([top, idx(na, i + 1), idx(na, i)]);
    }

    let skin_weights = heights.iter().map(|&y| layout.row(y)).collect();

    // overall thickness, then forearm thickness
    let forearm = |y: f64| smoothstep((y - dims.upper_length + dims.elbow_band) / (2.0 * dims.elbow_band));
    let shape_basis = vec![
        radial_dirs.iter().map(|d| d.map(q32)).collect(),
        radial_dirs
            .iter()
            .zip(&heights)
            .map(|(d, &y)| d.map(|v| q32(v * forearm(y))))
            .collect(),
    ];

    // Each forearm segment gets a twist-sine corrective and one driven by
    // entry (0, 0) of `R - I`, which is `cos(twist) - 1` for a twist about +y,
    // calibrated so that at two reference twists (spread evenly over the
    // forearm joints) the skinned surface matches an ideal limb whose twist
    // grows linearly from the elbow band to the wrist.
    let mut correctives = Vec::new();
    let segments = layout.forearm_segments();
    let per_joint = |total: f64| total / spec.twist_joints.max(1) as f64;
    let twist_start = dims.upper_length + dims.elbow_band;
    let joint_twist = |j: u32, total: f64| match j {
        2 if spec.twist_joints == 0 => total,
        j if j > 2 => (j - 2) as f64 * per_joint(total),
        _ => 0.0,
    };
    let rot_y = |a: f64| quat_to_mat(&axis_angle_quat(Vec3::y(), a));
    // rest-frame offset that makes the blended skin hit the ideal limb
    let needed = |y: f64, v: Vec3, total: f64| -> Option<Vec3> {
        let blend: Mat3 = layout.row(y).iter().map(|&(j, w)| rot_y(joint_twist(j, total)) * w).sum();
        let frac = ((y - twist_start) / (dims.length() - twist_start)).clamp(0.0, 1.0);
        Some(blend.try_inverse()? * (rot_y(total * frac) * v) - v)
    };
    let (t1, t2) = (CORRECTIVE_REFERENCE_TWISTS[0].to_radians(), CORRECTIVE_REFERENCE_TWISTS[1].to_radians());
    let (a1, a2) = (per_joint(t1), per_joint(t2));
    let det = a1.sin() * (1.0 - a2.cos()) - a2.sin() * (1.0 - a1.cos());
    for &s in segments.iter().take(spec.correctives) {
        let driver_joint = layout.joints[s + 1] as usize;
        let (mut sine, mut cosine) = (Vec::new(), Vec::new());
        for (&y, v) in heights.iter().zip(&verts) {
            let v = Vec3::from(*v);
            let pair = layout
                .distal_weight(s, y)
                .and_then(|_| Some((needed(y, v, t1)?, needed(y, v, t2)?)))
                .map(|(d1, d2)| ((d1 * (1.0 - a2.cos()) - d2 * (1.0 - a1.cos())) / det, (d2 * a1.sin() - d1 * a2.sin()) / det));
            let (ds, dv) = pair.unwrap_or((Vec3::zeros(), Vec3::zeros()));
            sine.push(ds.map(q32).into());
            cosine.push((-dv).map(q32).into());
        }
        for (kind, displacement) in [(DriverKind::TwistSine, sine), (DriverKind::RotationResidual, cosine)] {
            correctives.push(Corrective {
                driver: CorrectiveDriver {
                    kind,
                    joint: driver_joint,
                    component: 0,
                },
                displacement,
            });
        }
    }

    Rig::new(RigData {
        template_vertices: verts,
        faces,
        joints,
        skin_weights,
        shape_basis,
        correctives,
    })
}

/// Names of the twist joints of a rig, in chain order.
pub fn twist_joints(rig: &Rig) -> Vec<usize> {
    (1..)
        .map_while(|k| rig.joint_index(&twist_joint_name(k)))
        .collect()
}

fn required_joint(rig: &Rig, name: &str) -> Result<usize> {
    rig.joint_index(name)
        .ok_or_else(|| Error::Config(format!("rig has no `{name}` joint")))
}

/// Limb pose from shoulder rotation, elbow flexion about x and forearm
/// pronation about the bone axis, spread evenly over the twist joints (or
/// applied at the elbow when there are none).
pub fn limb_pose(rig: &Rig, shoulder: Quat, flex: f64, pronation: f64) -> Result<Pose> {
    let mut pose = rig.rest_pose();
    let s = required_joint(rig, SHOULDER)?;
    let e = required_joint(rig, ELBOW)?;
    pose.joint_rotations[s] = quat_to_array(&shoulder);
    let flex_q = axis_angle_quat(Vec3::x(), flex);
    let twists = twist_joints(rig);
    if twists.is_empty() {
        pose.joint_rotations[e] = quat_to_array(&(flex_q * axis_angle_quat(Vec3::y(), pronation)));
    } else {
        pose.joint_rotations[e] = quat_to_array(&flex_q);
        let share = axis_angle_quat(Vec3::y(), pronation / twists.len() as f64);
        for j in twists {
            pose.joint_rotations[j] = quat_to_array(&share);
        }
    }
    Ok(pose)
}

/// Carries a limb pose between rigs of different twist capacity: shoulder
/// and elbow copy over, the forearm twist is summed and redistributed.
pub fn transfer_limb_pose(from: &Rig, pose: &Pose, to: &Rig) -> Result<Pose> {
    pose.validate(from.joint_count())?;
    let mut out = to.rest_pose();
    out.root_translation = pose.root_translation;
    for name in [ROOT, SHOULDER] {
        out.joint_rotations[required_joint(to, name)?] = pose.joint_rotations[required_joint(from, name)?];
    }
    let mut forearm = pose.rotation(required_joint(from, ELBOW)?);
    for j in twist_joints(from) {
        forearm *= pose.rotation(j);
    }
    let twist = twist_angle(&forearm, &Vec3::y());
    let flex = forearm * axis_angle_quat(Vec3::y(), -twist);
    let targets = twist_joints(to);
    let e = required_joint(to, ELBOW)?;
    if targets.is_empty() {
        out.joint_rotations[e] = quat_to_array(&forearm);
    } else {
        out.joint_rotations[e] = quat_to_array(&flex);
        let share = axis_angle_quat(Vec3::y(), twist / targets.len() as f64);
        for j in targets {
            out.joint_rotations[j] = quat_to_array(&share);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Pronation,
    ElbowFlex,
    Composite,
}

impl std::str::FromStr for Motion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pronation" => Ok(Motion::Pronation),
            "elbow-flex" => Ok(Motion::ElbowFlex),
            "composite" => Ok(Motion::Composite),
            other => Err(Error::Config(format!("unknown motion `{other}`"))),
        }
    }
}

/// A camera circling the limb about the vertical axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbitSpec {
    pub distance: f64,
    pub elevation_deg: f64,
    pub start_deg: f64,
    /// Total azimuth sweep over the sequence; 0 gives a fixed camera.
    pub span_deg: f64,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            distance: 0.85,
            elevation_deg: 10.0,
            start_deg: -30.0,
            span_deg: 60.0,
            focal: 150.0,
            width: 128,
            height: 128,
        }
    }
}

fn orbit_camera(orbit: &OrbitSpec, target: Vec3, t: f64) -> Camera {
    let az = (orbit.start_deg + orbit.span_deg * t).to_radians();
    let el = orbit.elevation_deg.to_radians();
    let eye = target + Vec3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos()) * orbit.distance;
    Camera {
        fx: orbit.focal,
        fy: orbit.focal,
        cx: orbit.width as f64 / 2.0,
        cy: orbit.height as f64 / 2.0,
        width: orbit.width,
        height: orbit.height,
        world_to_camera: RigidTransform::look_at(eye, target, Vec3::y()),
        near: 0.05,
        far: 20.0,
    }
}

/// Deterministic smooth pose trajectory with one camera per frame.
/// Pronation sweeps 0→120°, elbow flexion 0→100°; the composite motion does
/// both while the shoulder swings.
pub fn make_synthetic_sequence(rig: &Rig, motion: Motion, n_frames: usize, orbit: &OrbitSpec) -> Result<Vec<(Pose, Camera)>> {
    if n_frames == 0 {
        return Err(Error::Config("sequence needs at least one frame".into()));
    }
    let length = rig
        .template()
        .iter()
        .map(|v| v.y)
        .fold(0.0, f64::max);
    // arm hangs to the side, raised 30° toward the camera plane
    let lift = axis_angle_quat(Vec3::z(), 30f64.to_radians());
    (0..n_frames)
        .map(|f| {
            let t = if n_frames == 1 { 0.0 } else { f as f64 / (n_frames - 1) as f64 };
            let (swing, flex, pron) = match motion {
                Motion::Pronation => (0.0, 0.0, 120f64.to_radians() * t),
                Motion::ElbowFlex => (0.0, 100f64.to_radians() * t, 0.0),
                Motion::Composite => (
                    0.3 * (TAU * t).sin(),
                    80f64.to_radians() * t,
                    120f64.to_radians() * t,
                ),
            };
            let shoulder = lift * axis_angle_quat(Vec3::x(), swing);
            let pose = limb_pose(rig, shoulder, flex, pron)?;
            let target = crate::math::quat_to_mat(&lift) * Vec3::new(0.0, 0.5 * length, 0.0);
            Ok((pose, orbit_camera(orbit, target, t)))
        })
        .collect()
}

/// Dense ground-truth appearance: four flat Gaussians per face at the
/// centroids of the face's midpoint subdivision, opacity 0.95, colours from
/// a smooth seeded pattern evaluated at each face's rest centroid.
pub fn oracle_gaussians(rig: &Rig, seed: u64) -> Result<BoundGaussianSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64)> = (0..3 * 3)
        .map(|_| {
            (
                rng.random_range(4.0..18.0),
                rng.random_range(1..4) as f64,
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let verts = rig.template();
    let bary = [
        [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
        [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
        [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
        [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    ];
    let mut set = BoundGaussianSet::default();
    for (f, face) in rig.faces().iter().enumerate() {
        let [a, b, c] = face.map(|k| verts[k as usize]);
        let frame = triangle_frame(f, &a, &b, &c)?;
        let centroid = (a + b + c) / 3.0;
        let phi = centroid.z.atan2(centroid.x);
        let color: [f64; 3] = std::array::from_fn(|ch| {
            let mut v = 0.5;
            for w in &waves[3 * ch..3 * ch + 3] {
                v += 0.16 * (w.0 * centroid.y + w.1 * phi + w.2).sin();
            }
            v.clamp(0.02, 0.98)
        });
        for bc in &bary {
            let p = a * bc[0] + b * bc[1] + c * bc[2];
            let local = frame.rotation.transpose() * (p - frame.origin) / frame.scale;
            set.push(BoundGaussian {
                triangle: f as u32,
                position: local.into(),
                rotation: IDENTITY_QUAT,
                log_scale: [0.3f64.ln(), 0.3f64.ln(), 0.05f64.ln()],
                opacity_logit: logit(0.95),
                color,
            });
        }
    }
    Ok(set)
}

/// Every `test_every`-th frame (the last of each block) is held out.
pub fn interleaved_split(n_frames: usize, test_every: usize) -> Split {
    let mut split = Split::default();
    for i in 0..n_frames {
        if test_every > 1 && i % test_every == test_every - 1 {
            split.test.push(i);
        } else {
            split.train.push(i);
        }
    }
    split
}

/// Renders the withheld oracle Gaussians bound to `oracle_rig` for every
/// `(pose, camera)` and writes a complete dataset into `dir`: the rig,
/// 8-bit images, masks of `alpha > 0.5`, and the manifest (written last).
pub fn render_ground_truth(
    oracle_rig: &Rig,
    appearance_seed: u64,
    frames: &[(Pose, Camera)],
    split: Split,
    raster: &RasterConfig,
    dir: &Path,
) -> Result<DatasetManifest> {
    if frames.is_empty() {
        return Err(Error::Config("no frames to render".into()));
    }
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    save_rig(oracle_rig, &dir.join(RIG_FILE))?;
    let oracle = oracle_gaussians(oracle_rig, appearance_seed)?;
    let shape = Shape::zeros(oracle_rig.shape_count());

    let bounds = frames
        .par_iter()
        .enumerate()
        .map(|(i, (pose, camera))| {
            let posed = oracle_rig.skin_vertices(pose, &shape)?;
            let binding = bind_all(&oracle, &posed, oracle_rig.faces())?;
            let out = rasterize(&binding.gaussians, camera, raster)?;
            save_png(&out.rgb, &dir.join(image_rel_path(i)))?;
            save_png(&out.alpha.threshold(0.5), &dir.join(mask_rel_path(i)))?;
            let mut lo = Vec3::repeat(f64::INFINITY);
            let mut hi = Vec3::repeat(f64::NEG_INFINITY);
            for v in &posed {
                lo = lo.inf(v);
                hi = hi.sup(v);
            }
            Ok((lo, hi))
        })
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = bounds.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), (a, b)| (lo.inf(a), hi.sup(b)),
    );

    let mut cameras: Vec<CameraRecord> = Vec::new();
    let mut records = Vec::with_capacity(frames.len());
    for (i, (pose, camera)) in frames.iter().enumerate() {
        let id = match cameras.iter().position(|c| c.to_camera() == *camera) {
            Some(id) => id,
            None => {
                cameras.push(CameraRecord::from_camera(cameras.len(), camera));
                cameras.len() - 1
            }
        };
        records.push(FrameRecord {
            index: i,
            image: image_rel_path(i),
            mask: mask_rel_path(i),
            camera: id,
            pose: pose.to_flat(),
        });
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        rig: RIG_FILE.into(),
        // radius of the posed bounding box
        scene_extent: 0.5 * (hi - lo).norm(),
        shape: shape.coefficients,
        cameras,
        frames: records,
        split,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}
