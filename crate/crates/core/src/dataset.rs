//! On-disk datasets: a JSON manifest of cameras, per-frame poses and split
//! labels, plus the rig and per-frame image/mask PNGs.
//!
//! ```text
//! manifest.json
//! rig.rigjson, rig.bin
//! images/000000.png   8-bit RGB
//! masks/000000.png    8-bit grey, {0, 255}
//! ```

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::container::{fnv1a64, write_atomic};
use crate::error::{Error, Result};
use crate::imaging::{load_png, Image};
use crate::math::RigidTransform;
use crate::raster::Camera;
use crate::rig::{load_rig, Pose, Rig, Shape};

pub const MANIFEST: &str = "manifest.json";
pub const RIG_FILE: &str = "rig.rigjson";
pub const DATASET_VERSION: u32 = 1;

pub fn image_rel_path(index: usize) -> String {
    format!("images/{index:06}.png")
}

pub fn mask_rel_path(index: usize) -> String {
    format!("masks/{index:06}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 3×4 `[R | t]`.
    pub world_to_camera: [f64; 12],
    pub near: f64,
    pub far: f64,
}

impl CameraRecord {
    pub fn from_camera(id: usize, c: &Camera) -> Self {
        Self {
            id,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            world_to_camera: c.world_to_camera.to_row_major(),
            near: c.near,
            far: c.far,
        }
    }

    pub fn to_camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            world_to_camera: RigidTransform::from_row_major(&self.world_to_camera),
            near: self.near,
            far: self.far,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub image: String,
    pub mask: String,
    pub camera: usize,
    /// Flat pose: root translation then `(w, x, y, z)` per joint.
    pub pose: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub rig: String,
    pub scene_extent: f64,
    #[serde(default)]
    pub shape: Vec<f64>,
    pub cameras: Vec<CameraRecord>,
    pub frames: Vec<FrameRecord>,
    pub split: Split,
}

/// Per-frame poses replacing a dataset's own, optionally for another rig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseOverride {
    /// Rig file the poses belong to, relative to the override file or
    /// absolute. `None` keeps the dataset's rig.
    #[serde(default)]
    pub rig: Option<String>,
    #[serde(default)]
    pub shape: Option<Vec<f64>>,
    pub poses: Vec<Vec<f64>>,
}

impl PoseOverride {
    pub fn load(path: &Path) -> Result<Self> {
        let mut ov: PoseOverride = serde_json::from_slice(&std::fs::read(path)?)?;
        if let (Some(rig), Some(dir)) = (&ov.rig, path.parent()) {
            if Path::new(rig).is_relative() {
                ov.rig = Some(dir.join(rig).to_string_lossy().into_owned());
            }
        }
        Ok(ov)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub camera: Camera,
    pub pose: Pose,
}

#[derive(Clone, Debug)]
pub struct FrameImages {
    pub rgb: Image,
    pub mask: Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// A validated dataset. Images are decoded on demand and every decode is
/// recorded, so callers can check which frames were read.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
    rig_path: PathBuf,
    frames: Vec<Frame>,
    shape: Shape,
    accessed: Mutex<Vec<bool>>,
}

fn frame_name(i: usize) -> String {
    format!("frame {i}")
}

fn check_pose(flat: &[f64], joints: usize, frame: usize) -> Result<Pose> {
    let pose = Pose::from_flat(flat).map_err(|e| Error::dataset(frame_name(frame), e.to_string()))?;
    pose.validate(joints)
        .map_err(|e| Error::dataset(frame_name(frame), e.to_string()))?;
    Ok(pose)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::dataset("manifest", format!("{}: {e}", path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::dataset("manifest", e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::dataset("manifest", format!("unsupported version {}", manifest.version)));
    }
    let rig_path = dir.join(&manifest.rig);
    let rig = load_rig(&rig_path)?;
    Dataset::from_manifest(dir, manifest, rig_path, &rig)
}

impl Dataset {
    fn from_manifest(root: &Path, manifest: DatasetManifest, rig_path: PathBuf, rig: &Rig) -> Result<Self> {
        if !(manifest.scene_extent > 0.0 && manifest.scene_extent.is_finite()) {
            return Err(Error::dataset("manifest", "scene_extent must be positive"));
        }
        let shape = if manifest.shape.is_empty() {
            Shape::zeros(rig.shape_count())
        } else {
            Shape {
                coefficients: manifest.shape.clone(),
            }
        };
        if shape.coefficients.len() != rig.shape_count() {
            return Err(Error::dataset("manifest", "shape length does not match the rig"));
        }
        for (k, c) in manifest.cameras.iter().enumerate() {
            if c.id != k {
                return Err(Error::dataset("manifest", format!("camera {k} has id {}", c.id)));
            }
            c.to_camera()
                .validate()
                .map_err(|e| Error::dataset(format!("camera {k}"), e.to_string()))?;
        }
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for (i, f) in manifest.frames.iter().enumerate() {
            let camera = manifest
                .cameras
                .get(f.camera)
                .ok_or_else(|| Error::dataset(frame_name(i), format!("unknown camera {}", f.camera)))?
                .to_camera();
            for rel in [&f.image, &f.mask] {
                if !root.join(rel).is_file() {
                    return Err(Error::dataset(frame_name(i), format!("missing file {rel}")));
                }
            }
            frames.push(Frame {
                index: f.index,
                camera,
                pose: check_pose(&f.pose, rig.joint_count(), i)?,
            });
        }
        if manifest.split.train.is_empty() {
            return Err(Error::dataset("split", "train split is empty"));
        }
        for &i in manifest.split.train.iter().chain(&manifest.split.test) {
            if i >= frames.len() {
                return Err(Error::dataset("split", format!("frame {i} out of range")));
            }
        }
        let accessed = Mutex::new(vec![false; frames.len()]);
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            rig_path,
            frames,
            shape,
            accessed,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn rig_path(&self) -> &Path {
        &self.rig_path
    }

    pub fn load_rig(&self) -> Result<Rig> {
        load_rig(&self.rig_path)
    }

    pub fn scene_extent(&self) -> f64 {
        self.manifest.scene_extent
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn split(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.manifest.split.train,
            SplitName::Test => &self.manifest.split.test,
        }
    }

    /// FNV-1a of the manifest bytes as stored.
    pub fn checksum(&self) -> Result<u64> {
        Ok(fnv1a64(&std::fs::read(self.root.join(MANIFEST))?))
    }

    /// Decodes frame `i`'s image and mask (mask as {0, 1}).
    pub fn load_frame(&self, i: usize) -> Result<FrameImages> {
        let rec = self
            .manifest
            .frames
            .get(i)
            .ok_or_else(|| Error::dataset(frame_name(i), "no such frame"))?;
        self.accessed.lock().expect("access log poisoned")[i] = true;
        let err = |e: Error| Error::dataset(frame_name(i), e.to_string());
        let rgb = load_png(&self.root.join(&rec.image), 3).map_err(err)?;
        let mask = load_png(&self.root.join(&rec.mask), 1).map_err(err)?.threshold(0.5);
        let cam = &self.frames[i].camera;
        if rgb.width != cam.width || rgb.height != cam.height || mask.width != rgb.width || mask.height != rgb.height {
            return Err(Error::dataset(frame_name(i), "image size does not match its camera or mask"));
        }
        Ok(FrameImages { rgb, mask })
    }

    /// Indices of every frame decoded so far.
    pub fn accessed_frames(&self) -> Vec<usize> {
        let log = self.accessed.lock().expect("access log poisoned");
        (0..log.len()).filter(|&i| log[i]).collect()
    }

    pub fn reset_access_log(&self) {
        self.accessed.lock().expect("access log poisoned").fill(false);
    }

    /// Replaces every frame's pose (and possibly the rig) with `ov`,
    /// validating the poses against the rig they belong to.
    pub fn with_pose_override(mut self, ov: &PoseOverride) -> Result<Self> {
        if ov.poses.len() != self.frames.len() {
            return Err(Error::dataset(
                "pose override",
                format!("{} poses for {} frames", ov.poses.len(), self.frames.len()),
            ));
        }
        if let Some(r) = &ov.rig {
            let p = PathBuf::from(r);
            self.rig_path = if p.is_relative() { self.root.join(p) } else { p };
        }
        let rig = self.load_rig()?;
        self.shape = match &ov.shape {
            Some(s) => Shape { coefficients: s.clone() },
            None if ov.rig.is_some() => Shape::zeros(rig.shape_count()),
            None => self.shape,
        };
        if self.shape.coefficients.len() != rig.shape_count() {
            return Err(Error::dataset("pose override", "shape length does not match the rig"));
        }
        for (i, (frame, flat)) in self.frames.iter_mut().zip(&ov.poses).enumerate() {
            frame.pose = check_pose(flat, rig.joint_count(), i)?;
        }
        Ok(self)
    }
}

/// Writes `manifest.json` atomically; images, masks and the rig must
/// already be in place.
pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(manifest)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{axis_angle_quat, Vec3};
    use crate::rig::save_rig;
    use crate::synth::{limb_pose, make_synthetic_limb_rig, LimbDims, LimbSpec};

    fn tiny_dataset(dir: &Path) -> DatasetManifest {
        let spec = LimbSpec {
            radial_segments: 6,
            axial_segments: 4,
            ..LimbSpec::high()
        };
        let rig = make_synthetic_limb_rig(spec, LimbDims::default()).unwrap();
        save_rig(&rig, &dir.join(RIG_FILE)).unwrap();
        std::fs::create_dir_all(dir.join("images")).unwrap();
        std::fs::create_dir_all(dir.join("masks")).unwrap();
        let camera = Camera {
            fx: 10.0 / 3.0,
            fy: 10.1,
            cx: 4.0,
            cy: 4.0,
            width: 8,
            height: 8,
            world_to_camera: RigidTransform::look_at(Vec3::new(0.1, 0.2, 1.0), Vec3::zeros(), Vec3::y()),
            near: 0.1,
            far: 10.0,
        };
        let mut frames = Vec::new();
        for i in 0..3 {
            crate::imaging::save_png(&Image::filled(8, 8, 3, 0.5), &dir.join(image_rel_path(i))).unwrap();
            crate::imaging::save_png(&Image::filled(8, 8, 1, 1.0), &dir.join(mask_rel_path(i))).unwrap();
            let pose = limb_pose(&rig, axis_angle_quat(Vec3::z(), 0.1 * i as f64), 0.3, 1.0 / 3.0).unwrap();
            frames.push(FrameRecord {
                index: i,
                image: image_rel_path(i),
                mask: mask_rel_path(i),
                camera: 0,
                pose: pose.to_flat(),
            });
        }
        let m = DatasetManifest {
            version: DATASET_VERSION,
            rig: RIG_FILE.into(),
            scene_extent: 0.7,
            shape: vec![0.1, -0.2],
            cameras: vec![CameraRecord::from_camera(0, &camera)],
            frames,
            split: Split {
                train: vec![0, 1],
                test: vec![2],
            },
        };
        write_manifest(dir, &m).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(dir.path());
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest(), &m);
        for (f, rec) in ds.frames().iter().zip(&m.frames) {
            assert_eq!(f.pose.to_flat(), rec.pose);
            assert_eq!(CameraRecord::from_camera(0, &f.camera), m.cameras[0]);
        }
        assert!(ds.accessed_frames().is_empty());
        ds.load_frame(1).unwrap();
        assert_eq!(ds.accessed_frames(), vec![1]);
    }

    #[test]
    fn errors_name_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_dataset(dir.path());
        m.frames[2].pose.truncate(10);
        write_manifest(dir.path(), &m).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame 2"), "{err}");

        let mut m = tiny_dataset(dir.path());
        std::fs::remove_file(dir.path().join(mask_rel_path(1))).unwrap();
        m.frames[2].pose = m.frames[1].pose.clone();
        write_manifest(dir.path(), &m).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame 1") && err.contains("missing"), "{err}");
    }

    #[test]
    fn pose_override_is_validated_against_its_rig() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let low = make_synthetic_limb_rig(
            LimbSpec {
                radial_segments: 6,
                axial_segments: 4,
                ..LimbSpec::low()
            },
            LimbDims::default(),
        )
        .unwrap();
        save_rig(&low, &dir.path().join("low.rigjson")).unwrap();
        let poses = vec![low.rest_pose().to_flat(); 3];
        let ov = PoseOverride {
            rig: Some("low.rigjson".into()),
            shape: None,
            poses: poses.clone(),
        };
        let ds = load_dataset(dir.path()).unwrap().with_pose_override(&ov).unwrap();
        assert_eq!(ds.load_rig().unwrap().joint_count(), 3);
        assert_eq!(ds.shape().coefficients, vec![0.0, 0.0]);
        // low-rig poses do not fit the dataset's own rig
        let bad = PoseOverride { rig: None, ..ov };
        assert!(load_dataset(dir.path()).unwrap().with_pose_override(&bad).is_err());
    }
}
