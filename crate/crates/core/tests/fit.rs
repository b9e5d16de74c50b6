use rigsplat_core::fit::{fit_pose, fit_sequence, FitConfig, TargetSurface};
use rigsplat_core::math::{geodesic_angle, quat_from_array};
use rigsplat_core::rig::Shape;
use rigsplat_core::synth::{make_synthetic_limb_rig, make_synthetic_sequence, LimbDims, LimbSpec, Motion, OrbitSpec};

#[test]
fn self_fit_recovers_every_frame_of_a_composite_motion() {
    let rig = make_synthetic_limb_rig(LimbSpec::high(), LimbDims::default()).unwrap();
    let seq = make_synthetic_sequence(&rig, Motion::Composite, 6, &OrbitSpec::default()).unwrap();
    for (f, (truth, _)) in seq.iter().enumerate() {
        let verts = rig.skin_vertices(truth, &Shape::zeros(2)).unwrap();
        let target = TargetSurface::new(verts, rig.faces().to_vec()).unwrap();
        let r = fit_pose(&rig, &target, &rig.rest_pose(), &Shape::zeros(2), &FitConfig::default()).unwrap();
        assert!(r.report.mean_distance <= 1e-4, "frame {f}: {}", r.report.mean_distance);
        for j in 1..rig.joint_count() {
            let err = geodesic_angle(&r.pose.rotation(j), &quat_from_array(truth.joint_rotations[j])).to_degrees();
            assert!(err <= 2.0, "frame {f} joint {j}: {err} deg");
        }
    }
}

#[test]
fn warm_start_is_no_worse_than_cold_start() {
    let high = make_synthetic_limb_rig(LimbSpec::high(), LimbDims::default()).unwrap();
    let low = make_synthetic_limb_rig(LimbSpec::low(), LimbDims::default()).unwrap();
    let poses: Vec<_> = make_synthetic_sequence(&high, Motion::Pronation, 20, &OrbitSpec::default())
        .unwrap()
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let cfg = FitConfig::default();
    let shape = Shape::zeros(2);
    let warm = fit_sequence(&low, &high, &poses, &shape, &low.rest_pose(), &cfg, true).unwrap();
    let cold = fit_sequence(&low, &high, &poses, &shape, &low.rest_pose(), &cfg, false).unwrap();
    for (f, (w, c)) in warm.iter().zip(&cold).enumerate() {
        assert!(
            w.report.mean_distance <= c.report.mean_distance * 1.05 + 1e-7,
            "frame {f}: warm {} cold {}",
            w.report.mean_distance,
            c.report.mean_distance
        );
        for pair in w.report.history.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }
}
