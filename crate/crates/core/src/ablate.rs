//! Rig-capacity and pose-quality ablation matrix on a synthetic limb.
//!
//! Ground truth comes from the high-capacity rig. Every cell trains the same
//! configuration and differs only in the rig it trains with and where that
//! rig's poses come from:
//!
//! | cell               | rig                 | poses                                   |
//! |--------------------|---------------------|-----------------------------------------|
//! | `high/oracle`      | 3 twist + correctives | generating poses                      |
//! | `high/fitted`      | same                | fitted to the posed ground-truth surface |
//! | `high/noisy`       | same                | generating poses with rotation noise    |
//! | `low0/fitted`      | no twist joints     | fitted to the posed ground-truth surface |
//! | `low0+corr/fitted` | no twist, 1 corrective | fitted                               |
//! | `low0/transferred` | no twist joints     | generating poses converted joint-wise   |

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::dataset::{load_dataset, PoseOverride, SplitName};
use crate::error::{Error, Result};
use crate::fit::{fit_sequence, FitConfig};
use crate::loss::MetricRegistry;
use crate::math::{exp_map, quat_to_array, Vec3};
use crate::raster::RasterConfig;
use crate::rig::{save_rig, Pose, Rig, Shape};
use crate::synth::{
    interleaved_split, make_synthetic_limb_rig, make_synthetic_sequence, render_ground_truth, transfer_limb_pose, LimbDims, LimbSpec,
    Motion, OrbitSpec,
};
use crate::trainer::{eval, train, RunOutput, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationScenario {
    pub motion: Motion,
    pub frames: usize,
    /// Every `test_every`-th frame is held out.
    pub test_every: usize,
    pub orbit: OrbitSpec,
    pub dims: LimbDims,
    pub radial_segments: usize,
    pub axial_segments: usize,
    pub appearance_seed: u64,
    /// Per-axis standard deviation of the pose noise, degrees.
    pub pose_noise_deg: f64,
    pub noise_seed: u64,
    pub train: TrainConfig,
    pub fit: FitConfig,
    /// Train cells concurrently; results are identical either way.
    pub parallel_cells: bool,
    /// Subset of cells to run; empty runs all.
    pub cells: Vec<String>,
}

impl Default for AblationScenario {
    fn default() -> Self {
        let high = LimbSpec::high();
        Self {
            motion: Motion::Pronation,
            frames: 25,
            test_every: 5,
            orbit: OrbitSpec::default(),
            dims: LimbDims::default(),
            radial_segments: high.radial_segments,
            axial_segments: high.axial_segments,
            appearance_seed: 1,
            pose_noise_deg: 4.0,
            noise_seed: 11,
            train: TrainConfig::desk(),
            fit: FitConfig::default(),
            parallel_cells: false,
            cells: Vec::new(),
        }
    }
}

pub const CELL_NAMES: [&str; 6] = [
    "high/oracle",
    "high/fitted",
    "high/noisy",
    "low0/fitted",
    "low0+corr/fitted",
    "low0/transferred",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub rig: String,
    pub poses: String,
    pub config_hash: String,
    pub test_psnr: f64,
    pub test_ssim: f64,
    pub test_crop_psnr: Option<f64>,
    pub gaussians: usize,
    pub seconds: f64,
    /// Mean point-to-surface residual of the pose fit, when fitted.
    pub fit_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    /// `high/fitted − low0/fitted` test PSNR (dB).
    pub capacity_gap_db: Option<f64>,
    /// Share of the capacity gap closed by adding correctives to the 0-twist rig.
    pub corrective_recovery: Option<f64>,
    /// `high/oracle − high/noisy` test PSNR (dB).
    pub pose_gap_db: Option<f64>,
    /// `low0/fitted − low0/transferred` test PSNR (dB).
    pub fitting_vs_transfer_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub scenario: AblationScenario,
    pub cells: Vec<CellResult>,
    pub summary: AblationSummary,
}

impl AblationTable {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell == name)
    }

    fn psnr(&self, name: &str) -> Option<f64> {
        self.cell(name).map(|c| c.test_psnr)
    }

    fn summarize(&mut self) {
        let gap = self.psnr("high/fitted").zip(self.psnr("low0/fitted")).map(|(h, l)| h - l);
        let recovery = gap
            .zip(self.psnr("low0+corr/fitted"))
            .zip(self.psnr("low0/fitted"))
            .map(|((g, c), l)| (c - l) / g);
        self.summary = AblationSummary {
            capacity_gap_db: gap,
            corrective_recovery: recovery,
            pose_gap_db: self.psnr("high/oracle").zip(self.psnr("high/noisy")).map(|(o, n)| o - n),
            fitting_vs_transfer_db: self.psnr("low0/fitted").zip(self.psnr("low0/transferred")).map(|(f, t)| f - t),
        };
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from("cell,rig,poses,config_hash,test_psnr,test_ssim,test_crop_psnr,gaussians,seconds,fit_residual,delta_vs_high_oracle\n");
        let base = self.psnr("high/oracle");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.1},{},{}\n",
                c.cell,
                c.rig,
                c.poses,
                c.config_hash,
                c.test_psnr,
                c.test_ssim,
                opt(c.test_crop_psnr),
                c.gaussians,
                c.seconds,
                opt(c.fit_residual),
                opt(base.map(|b| c.test_psnr - b)),
            ));
        }
        s
    }
}

fn limb_rig(scenario: &AblationScenario, twist_joints: usize, correctives: usize) -> Result<Rig> {
    make_synthetic_limb_rig(
        LimbSpec {
            twist_joints,
            correctives,
            radial_segments: scenario.radial_segments,
            axial_segments: scenario.axial_segments,
        },
        scenario.dims,
    )
}

/// Adds independent rotation noise to every non-root joint of every pose.
pub fn perturb_poses(poses: &[Pose], rig: &Rig, sigma_deg: f64, seed: u64) -> Result<Vec<Pose>> {
    let normal = Normal::new(0.0, sigma_deg.to_radians()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(poses
        .iter()
        .map(|p| {
            let mut out = p.clone();
            for (j, joint) in rig.joints().iter().enumerate() {
                if joint.parent.is_none() {
                    continue;
                }
                let n = Vec3::from_fn(|_, _| normal.sample(&mut rng));
                out.joint_rotations[j] = quat_to_array(&(p.rotation(j) * exp_map(&n)));
            }
            out
        })
        .collect())
}

struct CellPlan {
    name: &'static str,
    rig_file: &'static str,
    override_file: PathBuf,
    fit_residual: Option<f64>,
}

fn write_override(path: &Path, rig_file: &str, poses: &[Pose]) -> Result<()> {
    PoseOverride {
        rig: Some(format!("../rigs/{rig_file}")),
        shape: None,
        poses: poses.iter().map(Pose::to_flat).collect(),
    }
    .save(path)
}

fn mean_residual(results: &[crate::fit::FitResult]) -> f64 {
    results.iter().map(|r| r.report.mean_distance).sum::<f64>() / results.len() as f64
}

/// Runs the ablation matrix in `out`: synthesizes the dataset, prepares
/// every cell's rig and poses, trains and evaluates each cell on the test
/// split, and writes `ablation.json` / `ablation.csv`.
pub fn ablate(scenario: &AblationScenario, out: &Path) -> Result<AblationTable> {
    let selected: Vec<&'static str> = if scenario.cells.is_empty() {
        CELL_NAMES.to_vec()
    } else {
        let mut v = Vec::new();
        for c in &scenario.cells {
            v.push(
                *CELL_NAMES
                    .iter()
                    .find(|n| *n == c)
                    .ok_or_else(|| Error::Config(format!("unknown ablation cell `{c}`")))?,
            );
        }
        v
    };
    let high = limb_rig(scenario, 3, 3)?;
    let low0 = limb_rig(scenario, 0, 0)?;
    let low0c = limb_rig(scenario, 0, 1)?;
    scenario.train.validate(high.face_count())?;
    scenario.fit.validate()?;

    let data_dir = out.join("dataset");
    let rig_dir = out.join("rigs");
    let pose_dir = out.join("poses");
    for d in [&rig_dir, &pose_dir] {
        std::fs::create_dir_all(d)?;
    }
    let sequence = make_synthetic_sequence(&high, scenario.motion, scenario.frames, &scenario.orbit)?;
    let raster = RasterConfig {
        background: scenario.train.raster.background,
        ..RasterConfig::default()
    };
    render_ground_truth(
        &high,
        scenario.appearance_seed,
        &sequence,
        interleaved_split(scenario.frames, scenario.test_every),
        &raster,
        &data_dir,
    )?;
    save_rig(&high, &rig_dir.join("high.rigjson"))?;
    save_rig(&low0, &rig_dir.join("low0.rigjson"))?;
    save_rig(&low0c, &rig_dir.join("low0_corr.rigjson"))?;

    let oracle: Vec<Pose> = sequence.iter().map(|(p, _)| p.clone()).collect();
    let shape = Shape::zeros(high.shape_count());
    let mut plans = Vec::new();
    for &name in &selected {
        let override_file = pose_dir.join(format!("{}.json", name.replace(['/', '+'], "_")));
        let (rig_file, poses, fit_residual) = match name {
            "high/oracle" => ("high.rigjson", oracle.clone(), None),
            "high/fitted" => {
                let r = fit_sequence(&high, &high, &oracle, &shape, &high.rest_pose(), &scenario.fit, true)?;
                ("high.rigjson", r.iter().map(|f| f.pose.clone()).collect(), Some(mean_residual(&r)))
            }
            "high/noisy" => (
                "high.rigjson",
                perturb_poses(&oracle, &high, scenario.pose_noise_deg, scenario.noise_seed)?,
                None,
            ),
            "low0/fitted" | "low0+corr/fitted" => {
                let (rig, file) = if name == "low0/fitted" {
                    (&low0, "low0.rigjson")
                } else {
                    (&low0c, "low0_corr.rigjson")
                };
                let r = fit_sequence(rig, &high, &oracle, &shape, &rig.rest_pose(), &scenario.fit, true)?;
                (file, r.iter().map(|f| f.pose.clone()).collect(), Some(mean_residual(&r)))
            }
            "low0/transferred" => (
                "low0.rigjson",
                oracle
                    .iter()
                    .map(|p| transfer_limb_pose(&high, p, &low0))
                    .collect::<Result<Vec<_>>>()?,
                None,
            ),
            _ => unreachable!(),
        };
        write_override(&override_file, rig_file, &poses)?;
        plans.push(CellPlan {
            name,
            rig_file,
            override_file,
            fit_residual,
        });
    }

    let run_cell = |plan: &CellPlan| -> Result<CellResult> {
        let ov = PoseOverride::load(&plan.override_file)?;
        let ds = load_dataset(&data_dir)?.with_pose_override(&ov)?;
        let rig = ds.load_rig()?;
        let dir = out.join("cells").join(plan.name.replace(['/', '+'], "_"));
        std::fs::create_dir_all(&dir)?;
        let inputs = serde_json::json!({
            "dataset": data_dir,
            "pose_override": plan.override_file,
            "cell": plan.name,
        });
        let outcome = train(&ds, &rig, &scenario.train, Some(&RunOutput { dir: dir.clone(), inputs }))?;
        let train_split = ds.split(SplitName::Train);
        if let Some(i) = ds.accessed_frames().into_iter().find(|i| !train_split.contains(i)) {
            return Err(Error::Contract(format!("training read held-out frame {i}")));
        }
        let report = eval(&ds, SplitName::Test, &rig, &outcome.gaussians, &scenario.train.raster, true, &MetricRegistry::default())?;
        report.write(&dir, "eval_test")?;
        Ok(CellResult {
            cell: plan.name.into(),
            rig: plan.rig_file.into(),
            poses: plan.override_file.file_name().unwrap().to_string_lossy().into_owned(),
            config_hash: format!("{:016x}", scenario.train.hash()),
            test_psnr: report.mean_psnr,
            test_ssim: report.mean_ssim,
            test_crop_psnr: report.mean_crop_psnr,
            gaussians: outcome.gaussians.len(),
            seconds: outcome.seconds,
            fit_residual: plan.fit_residual,
        })
    };
    let cells: Vec<CellResult> = if scenario.parallel_cells {
        plans.par_iter().map(run_cell).collect::<Result<_>>()?
    } else {
        plans.iter().map(run_cell).collect::<Result<_>>()?
    };
    if cells.windows(2).any(|w| w[0].config_hash != w[1].config_hash) {
        return Err(Error::Contract("ablation cells trained with different configurations".into()));
    }
    let mut table = AblationTable {
        scenario: scenario.clone(),
        cells,
        summary: AblationSummary {
            capacity_gap_db: None,
            corrective_recovery: None,
            pose_gap_db: None,
            fitting_vs_transfer_db: None,
        },
    };
    table.summarize();
    write_atomic(&out.join("ablation.json"), &serde_json::to_vec_pretty(&table)?)?;
    write_atomic(&out.join("ablation.csv"), table.to_csv().as_bytes())?;
    Ok(table)
}
