//! Self-checks run by the `check` command: geometry, metrics, gradients,
//! serialisation and sampler formulas on small fixed inputs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Tensor;
use crate::camera::Camera;
use crate::checkpoint::Checkpoint;
use crate::diffusion::{ddim_sigma, DiffusionConfig};
use crate::error::{Error, Result};
use crate::generators::{rigid_transform, GeneratorConfig, Generators};
use crate::gradcheck::check_gradients;
use crate::kinematics::{bones_from_joints, joints_from_bones};
use crate::metrics::{mpjpe, pa_mpjpe};
use crate::nn::{Activation, Architecture, ParamModel};
use crate::objectives::{loss_2d, loss_3d, loss_dis, ObjectiveConfig, PenaltyMode};
use crate::optim::ema_update;
use crate::pose::{Pose2D, Pose3D, PoseClip};
use crate::posefile::{parse_pose_file, PoseFile, PoseHeader, PoseRecord};
use crate::seeding::rng_for;
use crate::skeleton::Skeleton;
use crate::synth::{synth_domain, SynthDomainSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Probe = fn() -> Result<(bool, String)>;

const PROBES: &[(&str, Probe)] = &[
    ("kinematic-round-trip", kinematic_round_trip),
    ("projection-hand-case", projection_hand_case),
    ("generator-geometry", generator_geometry),
    ("procrustes-oracle", procrustes_oracle),
    ("pa-below-mpjpe", pa_below_mpjpe),
    ("loss-gradients", loss_gradients),
    ("penalty-double-backward", penalty_double_backward),
    ("closed-form-losses", closed_form_losses),
    ("ddim-sigma", ddim_sigma_formula),
    ("checkpoint-round-trip", checkpoint_round_trip),
    ("posefile-round-trip", posefile_round_trip),
];

pub fn run_probes() -> Vec<ProbeResult> {
    PROBES
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            ProbeResult { name, passed, detail }
        })
        .collect()
}

fn sample_poses(n: usize) -> Result<Vec<Pose3D>> {
    let ds = synth_domain(&SynthDomainSpec::plain("probe", 5), &Skeleton::canonical(), n)?;
    ds.all_3d()
}

fn kinematic_round_trip() -> Result<(bool, String)> {
    let skel = Skeleton::canonical();
    let mut worst = 0.0f64;
    for p in sample_poses(200)? {
        let back = joints_from_bones(&bones_from_joints(&p, &skel)?, p.joints[0], &skel)?;
        for (a, b) in p.joints.iter().zip(&back.joints) {
            for k in 0..3 {
                worst = worst.max((a[k] - b[k]).abs());
            }
        }
    }
    Ok((worst <= 1e-9, format!("max error {worst:.2e} mm")))
}

fn projection_hand_case() -> Result<(bool, String)> {
    let cam = Camera::default();
    let p = cam.project(&Pose3D::new(vec![
        [0.0, 0.0, 0.0],
        [100.0, -50.0, 0.0],
        [250.0, 500.0, 5000.0],
    ]))?;
    let want = [[500.0, 500.0], [520.0, 490.0], [525.0, 550.0]];
    Ok((p.joints == want, format!("{:?}", p.joints)))
}

fn generator_geometry() -> Result<(bool, String)> {
    let skel = Skeleton::canonical();
    let mut rng = rng_for(3, "probe", 0);
    let mut gens = Generators::new(GeneratorConfig::default(), &skel, &mut rng)?;
    for m in gens.models.models_mut() {
        for t in m.params_mut() {
            t.mapv_inplace(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng));
        }
    }
    let poses = sample_poses(27)?;
    let clip = PoseClip::new(poses.clone(), 50.0)?;
    let prior = Pose2D::new(vec![[0.1, -0.2]; skel.joint_count()]);
    let input = gens.encode_input(&clip, Some(&prior))?;
    let base = bones_from_joints(clip.center(), &skel)?;
    let ba = gens.g_ba(&input, &base)?;
    let norm_err = ba
        .units
        .iter()
        .map(|u| ((u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    let bl = gens.g_bl(&input, &base)?;
    let ratios_ok = bl
        .lengths
        .iter()
        .zip(&base.lengths)
        .all(|(n, b)| (0.7..=1.3).contains(&(n / b)) && n / b != 0.7 && n / b != 1.3);
    let centred = clip.center().root_centered();
    let rt = gens.g_rt(&input, &centred)?;
    let mut iso = 0.0f64;
    for i in 0..centred.len() {
        for j in 0..centred.len() {
            let d = |p: &Pose3D| {
                let (a, b) = (p.joints[i], p.joints[j]);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            };
            iso = iso.max((d(&centred) - d(&rt)).abs());
        }
    }
    let ok = norm_err <= 1e-6 && iso <= 1e-6 && ratios_ok;
    Ok((
        ok,
        format!("unit-norm err {norm_err:.1e}, isometry err {iso:.1e} mm, ratios in (0.7, 1.3): {ratios_ok}"),
    ))
}

fn similarity(p: &Pose3D, q: [f64; 4], s: f64, t: [f64; 3]) -> Result<Pose3D> {
    let scaled = Pose3D::new(p.joints.iter().map(|j| [j[0] * s, j[1] * s, j[2] * s]).collect());
    rigid_transform(&scaled, q, t)
}

fn unit_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

fn procrustes_oracle() -> Result<(bool, String)> {
    let mut rng = rng_for(4, "probe", 0);
    let mut worst = 0.0f64;
    for p in sample_poses(50)? {
        let q = unit_quaternion(&mut rng);
        let moved = similarity(
            &p,
            q,
            rng.random_range(0.5..2.0),
            [rng.random_range(-500.0..500.0), 30.0, -70.0],
        )?;
        worst = worst.max(pa_mpjpe(&moved, &p)?);
    }
    Ok((worst <= 1e-6, format!("max PA-MPJPE {worst:.2e} mm")))
}

fn pa_below_mpjpe() -> Result<(bool, String)> {
    let mut rng = rng_for(5, "probe", 0);
    let mut violations = 0;
    let n = 200;
    for _ in 0..n {
        let rand_pose = |rng: &mut crate::seeding::RunRng| {
            Pose3D::new(
                (0..16)
                    .map(|_| std::array::from_fn(|_| 300.0 * Distribution::<f64>::sample(&StandardNormal, rng)))
                    .collect(),
            )
        };
        let (a, b) = (rand_pose(&mut rng), rand_pose(&mut rng));
        if pa_mpjpe(&a, &b)? > mpjpe(&a, &b)? + 1e-9 {
            violations += 1;
        }
    }
    Ok((violations == 0, format!("{violations} violations in {n} pairs")))
}

fn probe_rows(rng: &mut impl Rng, n: usize, w: usize, scale: f64) -> Tensor {
    Tensor::from_shape_fn((n, w), |_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

fn smooth_model(input: usize, output: usize, rng: &mut impl Rng) -> Result<ParamModel> {
    ParamModel::init(Architecture::mlp(input, &[6], output, Activation::Tanh), rng)
}

fn loss_gradients() -> Result<(bool, String)> {
    let mut rng = rng_for(6, "probe", 0);
    let model = smooth_model(4, 6, &mut rng)?;
    let x = probe_rows(&mut rng, 3, 4, 1.0);
    let y3 = probe_rows(&mut rng, 3, 6, 0.5);
    let y2 = probe_rows(&mut rng, 3, 6, 0.5);
    let l3 = check_gradients(&[&model], 1e-5, |tape, p| {
        loss_3d(model.apply(&p[0], tape.constant(x.clone()))?, tape.constant(y3.clone()))
    })?;
    let l2 = check_gradients(&[&model], 1e-5, |tape, p| {
        loss_2d(tape.constant(y2.clone()), model.apply(&p[0], tape.constant(x.clone()))?)
    })?;
    let worst = l3.max_rel_error.max(l2.max_rel_error);
    Ok((
        worst < 1e-4,
        format!("L3D {:.1e}, L2D {:.1e}", l3.max_rel_error, l2.max_rel_error),
    ))
}

fn penalty_double_backward() -> Result<(bool, String)> {
    let mut rng = rng_for(7, "probe", 0);
    let critic = smooth_model(6, 1, &mut rng)?;
    let source = smooth_model(4, 6, &mut rng)?;
    let x = probe_rows(&mut rng, 3, 6, 0.5);
    let z = probe_rows(&mut rng, 3, 4, 1.0);
    let eps = Tensor::from_shape_fn((3, 1), |_| rng.random::<f64>());
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for mode in [PenaltyMode::StandardGp, PenaltyMode::AsWritten] {
        let cfg = ObjectiveConfig {
            penalty: mode,
            ..ObjectiveConfig::default()
        };
        let r = check_gradients(&[&critic, &source], 1e-5, |tape, p| {
            let fake = source.apply(&p[1], tape.constant(z.clone()))?;
            Ok(loss_dis(tape.constant(x.clone()), fake, &critic, &p[0], &eps, &cfg)?.total)
        })?;
        worst = worst.max(r.max_rel_error);
        detail.push(format!("{mode:?} {:.1e}", r.max_rel_error));
    }
    Ok((worst < 1e-4, detail.join(", ")))
}

fn closed_form_losses() -> Result<(bool, String)> {
    let tape = crate::autograd::Tape::new();
    let y = tape.constant(Tensor::from_shape_fn((2, 6), |(i, j)| (i * 6 + j) as f64 * 0.1 - 0.3));
    let l3 = loss_3d(y, y)?.item();
    let x = tape.constant(Tensor::from_shape_fn((2, 4), |(i, j)| (i + j) as f64 + 1.0));
    let second = loss_2d(x, x.scale(3.0))?.item() - x.sub(x.scale(3.0)).square().mean().item();
    let mut critic = ParamModel::zeros(Architecture::mlp(4, &[3], 1, Activation::LeakyRelu))?;
    let last = critic.params().len() - 1;
    critic.params_mut()[last][[0, 0]] = 1.7;
    let cfg = ObjectiveConfig {
        penalty: PenaltyMode::AsWritten,
        ..ObjectiveConfig::default()
    };
    let eps = Tensor::from_elem((2, 1), 0.5);
    let p = critic.bind_frozen(&tape);
    let dis = loss_dis(x, x.scale(3.0), &critic, &p, &eps, &cfg)?.total.item();
    let one = |v: f64| Tensor::from_elem((1, 1), v);
    let anchor = ParamModel::from_params(
        Architecture::mlp(1, &[], 1, Activation::Identity),
        vec![one(0.0), one(0.0)],
    )?;
    let live = ParamModel::from_params(
        Architecture::mlp(1, &[], 1, Activation::Identity),
        vec![one(1.0), one(1.0)],
    )?;
    let ema = ema_update(&anchor, &live, 0.99)?.params()[0][[0, 0]];
    let ok = l3 == 0.0 && second.abs() < 1e-15 && dis == 0.35 && (ema - 0.01).abs() < 1e-15;
    Ok((
        ok,
        format!("L3D {l3}, L2D shape term {second:.1e}, L_dis {dis}, EMA {ema}"),
    ))
}

fn ddim_sigma_formula() -> Result<(bool, String)> {
    let sched = DiffusionConfig::default().schedule();
    let mut worst = 0.0f64;
    for (k, prev) in [(400, 390), (200, 190), (10, 0)] {
        let (a, b) = (sched.alpha_bar(k)?, sched.alpha_bar(prev)?);
        let direct = 0.2 * ((1.0 - b) / (1.0 - a) * (1.0 - a / b)).sqrt();
        worst = worst.max((ddim_sigma(0.2, a, b) - direct).abs());
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.1e}")))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let mut rng = rng_for(8, "probe", 0);
    let model = smooth_model(5, 3, &mut rng)?;
    let ck = Checkpoint::new(9, 3, "probe").with_model("m", &model);
    let back = Checkpoint::from_bytes(&ck.to_bytes())?;
    let same = back
        .model("m")?
        .params()
        .iter()
        .zip(model.params())
        .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    Ok((
        same && back.seed == 9 && back.step == 3,
        format!("{} parameters", model.param_count()),
    ))
}

fn posefile_round_trip() -> Result<(bool, String)> {
    let skel = Skeleton::canonical();
    let mut rng = rng_for(10, "probe", 0);
    let header = PoseHeader::new(&skel, 2, 50.0, "probe", "probe", 10);
    let records: Vec<PoseRecord> = (0..100)
        .map(|f| PoseRecord {
            sequence: 0,
            frame: f,
            values: (0..32).map(|_| f64::from_bits(rng.random::<u64>() >> 2)).collect(),
        })
        .collect();
    let file = PoseFile { header, records };
    let back = parse_pose_file(&file.to_text()?, std::path::Path::new("<probe>"), &skel)?;
    let same = back
        .records
        .iter()
        .zip(&file.records)
        .all(|(a, b)| a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    if back.records.len() != file.records.len() {
        return Err(Error::Format {
            path: "<probe>".into(),
            line: 0,
            msg: "record count".into(),
        });
    }
    Ok((same, format!("{} records", back.records.len())))
}
