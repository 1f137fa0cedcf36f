//! Sequential adaptation: source pretraining, one target per phase, the
//! moving-average estimator handoff and evaluation over every seen domain.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::camera::Camera;
use crate::checkpoint::Checkpoint;
use crate::config::{DomainSource, RunConfig};
use crate::dataset::{Dataset, DomainData, DomainStream};
use crate::diffusion::{sampler_pool, train_sampler, NoisePredictor};
use crate::error::{Error, Result};
use crate::estimator::{pretrain_source, LiftingMeta, LiftingModel, PretrainConfig};
use crate::generators::{GeneratorConfig, Generators};
use crate::metrics::batch_errors;
use crate::nn::{gradients, ModelSet, ParamModel};
use crate::objectives::{
    critic_gap, discriminator_arch, draw_interpolation, loss_2d, loss_3d, loss_dis, EstimatorCritic,
};
use crate::optim::{ema_update, Optimizer, OptimizerConfig};
use crate::pose::Pose2D;
use crate::posefile::read_dataset;
use crate::seeding::{derive_seed, rng_for};
use crate::skeleton::Skeleton;
use crate::synth::{synth_domain, SynthDomainSpec};

/// Everything carried from one phase to the next.
#[derive(Clone, Debug)]
pub struct AdaptationState {
    /// Completed phase; 0 after source pretraining.
    pub phase: usize,
    /// Estimator entering the next phase.
    pub anchor: LiftingModel,
    /// Estimator at the end of the last adaptation (the anchor at phase 0).
    pub live: LiftingModel,
    pub generators: Generators,
    pub gen_optimizers: Vec<Optimizer>,
    pub discriminator: ParamModel,
    pub dis_optimizer: Optimizer,
    /// Diffusion prior trained on every domain up to `phase`.
    pub sampler: NoisePredictor,
    /// Projection camera, fixed from the source domain.
    pub camera: Camera,
    pub seed: u64,
    pub config_hash: String,
}

impl AdaptationState {
    /// Hash over every parameter and optimizer moment.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.phase.to_le_bytes());
        for m in [
            &self.anchor.model,
            &self.live.model,
            &self.discriminator,
            &self.sampler.model,
        ] {
            h.update(m.digest().as_bytes());
        }
        h.update(self.generators.models.digest().as_bytes());
        for o in self.gen_optimizers.iter().chain([&self.dis_optimizer]) {
            h.update(o.step.to_le_bytes());
            for t in o.first_moment.iter().chain(&o.second_moment) {
                for v in t.iter() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.update(self.sampler.scale.to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self, history: &RunHistory) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.seed, self.phase as u64, &self.config_hash)
            .with_model("anchor", &self.anchor.model)
            .with_model("live", &self.live.model)
            .with_model("discriminator", &self.discriminator);
        for (name, m) in self
            .generators
            .models
            .names()
            .iter()
            .zip(self.generators.models.models())
        {
            ck.models.insert(format!("gen.{name}"), m.clone());
        }
        for (name, o) in self.generators.models.names().iter().zip(&self.gen_optimizers) {
            ck.optimizers.insert(format!("gen.{name}"), o.clone());
        }
        ck.optimizers.insert("discriminator".into(), self.dis_optimizer.clone());
        let sampler = self.sampler.to_checkpoint(self.seed, &self.config_hash);
        ck.models.insert("sampler".into(), sampler.model("noise_predictor")?);
        ck.extra = serde_json::json!({
            "phase": self.phase,
            "estimator": self.anchor.meta(),
            "generator": self.generators.config,
            "generator_names": self.generators.models.names(),
            "sampler": sampler.extra,
            "camera": self.camera,
            "history": history,
        });
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, skeleton: &Skeleton) -> Result<(Self, RunHistory)> {
        let bad = |m: &str| Error::Checkpoint(format!("adaptation state: {m}"));
        let field = |k: &str| ck.extra.get(k).cloned().ok_or_else(|| bad(&format!("missing `{k}`")));
        let parse = |k: &str| -> Result<serde_json::Value> { field(k) };
        let meta: LiftingMeta = serde_json::from_value(parse("estimator")?).map_err(|e| bad(&e.to_string()))?;
        let gen_cfg: GeneratorConfig = serde_json::from_value(parse("generator")?).map_err(|e| bad(&e.to_string()))?;
        let names: Vec<String> = serde_json::from_value(parse("generator_names")?).map_err(|e| bad(&e.to_string()))?;
        let camera: Camera = serde_json::from_value(parse("camera")?).map_err(|e| bad(&e.to_string()))?;
        let history: RunHistory = serde_json::from_value(parse("history")?).map_err(|e| bad(&e.to_string()))?;
        let mut models = ModelSet::new();
        let mut gen_optimizers = Vec::new();
        for n in &names {
            models.push(n.clone(), ck.model(&format!("gen.{n}"))?);
            gen_optimizers.push(ck.optimizer(&format!("gen.{n}"))?);
        }
        let mut sck = Checkpoint::new(ck.seed, 0, &ck.config_hash).with_model("noise_predictor", &ck.model("sampler")?);
        sck.extra = parse("sampler")?;
        let state = AdaptationState {
            phase: ck.step as usize,
            anchor: LiftingModel::from_parts(ck.model("anchor")?, meta.clone())?,
            live: LiftingModel::from_parts(ck.model("live")?, meta)?,
            generators: Generators::from_models(gen_cfg, skeleton, models)?,
            gen_optimizers,
            discriminator: ck.model("discriminator")?,
            dis_optimizer: ck.optimizer("discriminator")?,
            sampler: NoisePredictor::from_checkpoint(&sck)?,
            camera,
            seed: ck.seed,
            config_hash: ck.config_hash.clone(),
        };
        Ok((state, history))
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: String,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

/// Metrics of one estimator on the source and on targets `1..=phase`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub phase: usize,
    /// `anchor`, `live` or `source-only`.
    pub model: String,
    pub config_hash: String,
    pub seed: u64,
    pub source: DomainMetrics,
    pub domains: Vec<DomainMetrics>,
    pub avg_mpjpe: Option<f64>,
    pub avg_pa_mpjpe: Option<f64>,
}

impl EvaluationReport {
    pub fn domain(&self, name: &str) -> Option<&DomainMetrics> {
        self.domains.iter().find(|d| d.domain == name)
    }
}

/// Forgetting of domain `domain` at phase `phase` relative to the phase
/// that adapted to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub domain: String,
    pub phase: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

/// Reports accumulated over a run; stored in every phase checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    /// Anchor reports for phases `0..=j`.
    pub anchor: Vec<EvaluationReport>,
    /// Live-model reports for phases `1..=j`.
    pub live: Vec<EvaluationReport>,
    /// The pretrained model on every target.
    pub source_only: Option<EvaluationReport>,
    pub state_digests: Vec<String>,
}

impl RunHistory {
    pub fn forgetting(&self) -> Vec<Forgetting> {
        forgetting(&self.anchor)
    }
}

pub fn evaluate_model(model: &LiftingModel, ds: &Dataset) -> Result<DomainMetrics> {
    if !ds.has_labels() {
        return Err(Error::MissingLabels(ds.name.clone()));
    }
    let preds = model.predict_dataset(ds)?;
    let (mpjpe, pa_mpjpe) = batch_errors(&preds, &ds.all_3d()?)?;
    Ok(DomainMetrics {
        domain: ds.name.clone(),
        mpjpe,
        pa_mpjpe,
    })
}

/// Evaluates `model` on the source and on targets `1..=upto`.
pub fn evaluate_all(
    model: &LiftingModel,
    stream: &DomainStream,
    upto: usize,
    label: &str,
    config_hash: &str,
    seed: u64,
) -> Result<EvaluationReport> {
    let source = evaluate_model(model, stream.open_eval(0)?)?;
    let domains = (1..=upto)
        .map(|d| evaluate_model(model, stream.open_eval(d)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from(upto, label, config_hash, seed, source, domains))
}

pub fn report_from(
    phase: usize,
    label: &str,
    config_hash: &str,
    seed: u64,
    source: DomainMetrics,
    domains: Vec<DomainMetrics>,
) -> EvaluationReport {
    let n = domains.len() as f64;
    let avg = |f: fn(&DomainMetrics) -> f64| (!domains.is_empty()).then(|| domains.iter().map(f).sum::<f64>() / n);
    EvaluationReport {
        phase,
        model: label.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        avg_mpjpe: avg(|d| d.mpjpe),
        avg_pa_mpjpe: avg(|d| d.pa_mpjpe),
        source,
        domains,
    }
}

/// `F_d(j) = MPJPE_d(j) - MPJPE_d(d)` for every `d < j`, from a series of
/// reports indexed by phase.
pub fn forgetting(reports: &[EvaluationReport]) -> Vec<Forgetting> {
    let mut out = Vec::new();
    for r in reports {
        for (d, m) in r.domains.iter().enumerate() {
            let adapted_at = d + 1;
            if adapted_at >= r.phase {
                continue;
            }
            let Some(base) = reports.iter().find(|x| x.phase == adapted_at) else {
                continue;
            };
            let Some(b) = base.domain(&m.domain) else {
                continue;
            };
            out.push(Forgetting {
                domain: m.domain.clone(),
                phase: r.phase,
                mpjpe: m.mpjpe - b.mpjpe,
                pa_mpjpe: m.pa_mpjpe - b.pa_mpjpe,
            });
        }
    }
    out
}

fn synth_data(spec: &SynthDomainSpec, skeleton: &Skeleton, clips: usize, eval_clips: usize) -> Result<DomainData> {
    let mut eval_spec = spec.clone();
    eval_spec.seed = derive_seed(spec.seed, "eval", 0);
    Ok(DomainData {
        train: synth_domain(spec, skeleton, clips)?,
        eval: synth_domain(&eval_spec, skeleton, eval_clips)?,
    })
}

/// Materialises every domain of the config.
pub fn load_domains(cfg: &RunConfig, skeleton: &Skeleton) -> Result<(DomainData, Vec<DomainData>)> {
    let load = |d: &DomainSource| -> Result<DomainData> {
        match d {
            DomainSource::Synth(spec) => synth_data(spec, skeleton, cfg.clips_per_domain, cfg.eval_clips),
            DomainSource::File { name, train, eval } => {
                let mut train = read_dataset(train, skeleton)?;
                let mut eval = read_dataset(eval, skeleton)?;
                train.name = name.clone();
                eval.name = name.clone();
                Ok(DomainData { train, eval })
            }
        }
    };
    let source = load(&cfg.source)?;
    let targets = cfg.targets.iter().map(load).collect::<Result<Vec<_>>>()?;
    Ok((source, targets))
}

pub fn build_stream(cfg: &RunConfig, skeleton: &Skeleton) -> Result<DomainStream> {
    let (source, targets) = load_domains(cfg, skeleton)?;
    DomainStream::new(source, targets)
}

fn network_poses(rows: &Tensor) -> Result<Vec<Pose2D>> {
    rows.rows()
        .into_iter()
        .map(|r| Pose2D::from_flat(r.as_slice().expect("contiguous")))
        .collect()
}

/// Normalised centre-frame 2D rows of input windows.
fn centre_rows(x: &Tensor, frames: usize, joints: usize) -> Tensor {
    let w = joints * 2;
    let start = (frames / 2) * w;
    x.slice(ndarray::s![.., start..start + w]).to_owned()
}

/// Fresh models, source pretraining and the source-trained prior: the
/// phase-0 state.
pub fn initialize(
    cfg: &RunConfig,
    stream: &DomainStream,
    skeleton: &Skeleton,
    seed: u64,
    log: &mut Vec<LogRecord>,
) -> Result<AdaptationState> {
    cfg.validate()?;
    let source = stream.open_train(0)?;
    if source.is_empty() {
        return Err(Error::EmptySource);
    }
    let joints = skeleton.joint_count();
    let camera = source.camera;
    let init = LiftingModel::new(
        cfg.frames,
        &cfg.estimator,
        joints,
        &camera,
        &mut rng_for(seed, "init", 0),
    )?;
    let pre = PretrainConfig {
        epochs: cfg.training.pretrain_epochs,
        learning_rate: cfg.training.lr_pretrain.unwrap_or(cfg.training.lr_estimator),
        batch_size: cfg.training.batch_size,
    };
    let outcome = pretrain_source(&init, source, &pre, &mut rng_for(seed, "pretrain", 0))?;
    for (epoch, v) in outcome.epoch_losses.iter().enumerate() {
        log.push(LogRecord {
            phase: 0,
            epoch,
            step: epoch,
            loss: "pretrain_mse".into(),
            value: *v,
        });
    }
    let generators = Generators::new(cfg.generator.clone(), skeleton, &mut rng_for(seed, "init", 1))?;
    let discriminator = ParamModel::init(discriminator_arch(joints * 2), &mut rng_for(seed, "init", 2))?;
    let gen_opt = OptimizerConfig::adam(cfg.training.lr_gen_dis);
    let gen_optimizers = generators
        .models
        .models()
        .iter()
        .map(|m| Optimizer::new(gen_opt, m))
        .collect();
    let dis_optimizer = Optimizer::new(gen_opt, &discriminator);
    let sampler0 = NoisePredictor::new(cfg.diffusion.clone(), joints * 2, &mut rng_for(seed, "init", 3))?;
    let x = outcome.model.dataset_inputs(source);
    let poses = network_poses(&centre_rows(&x, cfg.frames, joints))?;
    let trained = train_sampler(
        &poses,
        &sampler0,
        cfg.diffusion.epochs,
        &mut rng_for(seed, "sampler", 0),
    )?;
    for (epoch, v) in trained.epoch_losses.iter().enumerate() {
        log.push(LogRecord {
            phase: 0,
            epoch,
            step: epoch,
            loss: "diffusion".into(),
            value: *v,
        });
    }
    Ok(AdaptationState {
        phase: 0,
        anchor: outcome.model.clone(),
        live: outcome.model,
        generators,
        gen_optimizers,
        discriminator,
        dis_optimizer,
        sampler: trained.predictor,
        camera,
        seed,
        config_hash: cfg.hash(),
    })
}

/// One adaptation phase on the stream's current target.
pub fn adapt_phase(
    state: &AdaptationState,
    stream: &DomainStream,
    cfg: &RunConfig,
    log: &mut Vec<LogRecord>,
) -> Result<AdaptationState> {
    let j = state.phase + 1;
    let data = stream.open_train(j)?;
    if data.is_empty() {
        return Err(Error::EmptyDomain);
    }
    let seed = state.seed;
    let mut rng = rng_for(seed, "phase", j as u64);
    let (frames, joints) = (state.anchor.frames(), state.anchor.joints());
    let w = &cfg.objective.weights;
    let ab = &cfg.ablation;
    let gen_cfg = &state.generators.config;

    let mut next = state.clone();
    next.phase = j;
    next.live = state.anchor.clone();
    let mut est_opt = Optimizer::new(OptimizerConfig::adamw(cfg.training.lr_estimator), &next.live.model);

    let x_in = next.live.dataset_inputs(data);
    let centres = centre_rows(&x_in, frames, joints);
    let priors = if gen_cfg.use_de {
        let pool = sampler_pool(&state.sampler, &cfg.diffusion, derive_seed(seed, "pool", j as u64))?;
        let mut t = Tensor::zeros((pool.len(), joints * 2));
        for (r, p) in pool.iter().enumerate() {
            t.row_mut(r).assign(&ndarray::ArrayView1::from(&p.to_flat()));
        }
        Some(t)
    } else {
        None
    };
    // Row index of every frame in each clip's window.
    let mut offsets = Vec::new();
    let mut acc = 0;
    for s in &data.sequences {
        offsets.push(acc);
        acc += s.len();
    }
    let windows: Vec<Vec<usize>> = data
        .clip_ids()
        .into_iter()
        .map(|(s, f)| {
            data.window_indices(s, f, frames)
                .into_iter()
                .map(|i| offsets[s] + i)
                .collect()
        })
        .collect();

    let n = x_in.nrows();
    let batch = cfg.training.batch_size;
    let width3 = joints * 3;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let use_gen_step = ab.use_l3d || ab.use_dis;
    for epoch in 0..cfg.training.adapt_epochs {
        let y_all = next.live.forward_batched(&x_in, 256)?;
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let b = chunk.len();
            let xb = x_in.select(Axis(0), chunk);
            let x2 = centres.select(Axis(0), chunk);
            let y_det = y_all.select(Axis(0), chunk);
            let mut clip3 = Tensor::zeros((b, frames * width3));
            for (r, &c) in chunk.iter().enumerate() {
                for (f, &src) in windows[c].iter().enumerate() {
                    clip3
                        .slice_mut(ndarray::s![r, f * width3..(f + 1) * width3])
                        .assign(&y_all.row(src));
                }
            }
            let prior_b = priors.as_ref().map(|p| {
                let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..p.nrows())).collect();
                p.select(Axis(0), &idx)
            });
            let eps_g = draw_interpolation(&mut rng, b);
            let eps_d = draw_interpolation(&mut rng, b);
            let norm = next.live.normalizer;
            let camera = next.camera;

            if use_gen_step {
                let gens = &next.generators;
                let critic = &next.discriminator;
                let models: Vec<&ParamModel> = gens.models.models().iter().collect();
                let (clip3, prior_b, y_det, x2) = (clip3.clone(), prior_b.clone(), y_det.clone(), x2.clone());
                let mut parts = (0.0, 0.0);
                let (lg, grads) = gradients(&models, |tape, p| {
                    let y_hat = tape.constant(y_det);
                    let trace =
                        gens.augment_graph(p, y_hat, Some(tape.constant(clip3)), prior_b.map(|t| tape.constant(t)))?;
                    let mut loss = tape.scalar(0.0);
                    if ab.use_l3d {
                        let l3 = loss_3d(y_hat, trace.output)?;
                        parts.0 = l3.item();
                        loss = loss.add(l3);
                    }
                    if ab.use_dis {
                        let x_t = norm.normalize_graph(camera.project_graph(trace.output.scale(1000.0))?);
                        let cp = critic.bind_frozen(tape);
                        let d = loss_dis(tape.constant(x2), x_t, critic, &cp, &eps_g, &cfg.objective)?;
                        parts.1 = d.total.item();
                        loss = loss.sub(d.total.scale(w.beta));
                    }
                    Ok(loss)
                })?;
                for ((m, o), g) in next
                    .generators
                    .models
                    .models_mut()
                    .iter_mut()
                    .zip(&mut next.gen_optimizers)
                    .zip(&grads)
                {
                    o.step(m, g)?;
                }
                for (name, v) in [("loss_g", lg), ("l3d", parts.0), ("ldis_g", parts.1)] {
                    log.push(LogRecord {
                        phase: j,
                        epoch,
                        step,
                        loss: name.into(),
                        value: v,
                    });
                }
            }

            let gens = &next.generators;
            let live = &next.live;
            let critic = &next.discriminator;
            let mut parts = (0.0, 0.0, 0.0);
            let (ldp, grads) = gradients(&[critic, &live.model], |tape, p| {
                let y_hat = live.forward_graph(&p[1], tape.constant(xb))?;
                let gp = gens.models.bind_frozen(tape);
                let trace = gens.augment_graph(
                    &gp,
                    y_hat,
                    Some(tape.constant(clip3)),
                    prior_b.map(|t| tape.constant(t)),
                )?;
                let x_t = norm.normalize_graph(camera.project_graph(trace.output.scale(1000.0))?);
                let x = tape.constant(x2);
                let mut loss = tape.scalar(0.0);
                if ab.use_l2d {
                    let l2 = loss_2d(x, x_t)?;
                    parts.0 = l2.item();
                    loss = loss.add(l2);
                }
                if ab.use_dis {
                    let literal = cfg.objective.estimator_critic == EstimatorCritic::Literal;
                    let d = loss_dis(
                        x,
                        if literal { x_t } else { x_t.detach() },
                        critic,
                        &p[0],
                        &eps_d,
                        &cfg.objective,
                    )?;
                    parts.1 = d.total.item();
                    parts.2 = d.penalty.item();
                    loss = loss.add(d.total.scale(w.gamma));
                    if cfg.objective.estimator_critic == EstimatorCritic::Adversarial {
                        // Contributes exactly zero to the value and -gamma * d(gap) to P.
                        let gap = critic_gap(x, x_t, critic, &critic.bind_frozen(tape), &cfg.objective)?;
                        loss = loss.add(gap.detach().sub(gap).scale(w.gamma));
                    }
                }
                Ok(loss)
            })?;
            if ab.use_dis {
                next.dis_optimizer.step(&mut next.discriminator, &grads[0])?;
            }
            if ab.use_l2d || ab.use_dis {
                est_opt.step(&mut next.live.model, &grads[1])?;
            }
            for (name, v) in [
                ("loss_dp", ldp),
                ("l2d", parts.0),
                ("ldis_dp", parts.1),
                ("penalty", parts.2),
            ] {
                log.push(LogRecord {
                    phase: j,
                    epoch,
                    step,
                    loss: name.into(),
                    value: v,
                });
            }
            step += 1;
        }
    }

    next.anchor = if ab.use_ema {
        LiftingModel::from_parts(
            ema_update(&state.anchor.model, &next.live.model, cfg.training.ema_eta)?,
            state.anchor.meta(),
        )?
    } else {
        next.live.clone()
    };
    let poses = network_poses(&centres)?;
    let trained = train_sampler(
        &poses,
        &state.sampler,
        cfg.diffusion.epochs,
        &mut rng_for(seed, "sampler", j as u64),
    )?;
    for (e, v) in trained.epoch_losses.iter().enumerate() {
        log.push(LogRecord {
            phase: j,
            epoch: e,
            step: e,
            loss: "diffusion".into(),
            value: *v,
        });
    }
    next.sampler = trained.predictor;
    Ok(next)
}

/// Where and how [`run_experiment`] writes.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seed: u64,
    /// Parent of the run directory.
    pub out: PathBuf,
    pub force: bool,
    /// Continue from the newest phase checkpoint in an existing directory.
    pub resume: bool,
    /// Stop after this phase (for interrupted-run tests).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub history: RunHistory,
    pub state: AdaptationState,
}

pub fn checkpoint_path(dir: &Path, phase: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("phase{phase}.ckpt"))
}

fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    let entries = fs::read_dir(dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            let j: usize = name.strip_prefix("phase")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((j, e.path()))
        })
        .max_by_key(|(j, _)| *j)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_log(dir: &Path, phase: usize, log: &[LogRecord]) -> Result<()> {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r).expect("json"));
        s.push('\n');
    }
    write_text(&dir.join("logs").join(format!("phase{phase}.jsonl")), &s)
}

/// Fails when some target is not harder for the pretrained model than the
/// source by at least `margin` mm.
pub fn check_shift(source_only: &EvaluationReport, margin: f64) -> Result<()> {
    for d in &source_only.domains {
        let gap = d.mpjpe - source_only.source.mpjpe;
        if gap < margin {
            return Err(Error::config(
                "shift_margin_mm",
                format!(
                    "domain {} is only {gap:.2} mm harder than the source (need {margin})",
                    d.domain
                ),
            ));
        }
    }
    Ok(())
}

/// Pretraining, every adaptation phase and all reports, under
/// `<out>/<config hash>-seed<seed>`.
pub fn run_experiment(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let skeleton = Skeleton::canonical();
    let dir = opts.out.join(cfg.run_dir_name(opts.seed));
    let resume_from = if dir.exists() {
        if opts.resume {
            latest_checkpoint(&dir)
        } else if opts.force {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            None
        } else {
            return Err(Error::RunExists(dir));
        }
    } else {
        None
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml_string())?;

    let mut stream = build_stream(cfg, &skeleton)?;
    let hash = cfg.hash();
    let (mut state, mut history) = match resume_from {
        Some((j, path)) => {
            let (state, history) = AdaptationState::from_checkpoint(&Checkpoint::load(&path)?, &skeleton)?;
            if state.config_hash != hash || state.seed != opts.seed || state.phase != j {
                return Err(Error::Checkpoint(format!(
                    "{} does not belong to this run",
                    path.display()
                )));
            }
            stream.enter_phase(j)?;
            (state, history)
        }
        None => {
            let mut log = Vec::new();
            let state = initialize(cfg, &stream, &skeleton, opts.seed, &mut log)?;
            write_log(&dir, 0, &log)?;
            let r0 = evaluate_all(&state.anchor, &stream, 0, "anchor", &hash, opts.seed)?;
            let so = evaluate_all(
                &state.anchor,
                &stream,
                stream.target_count(),
                "source-only",
                &hash,
                opts.seed,
            )?;
            if let Some(margin) = cfg.shift_margin_mm {
                check_shift(&so, margin)?;
            }
            let history = RunHistory {
                anchor: vec![r0],
                live: Vec::new(),
                source_only: Some(so),
                state_digests: vec![state.digest()],
            };
            state.to_checkpoint(&history)?.save(&checkpoint_path(&dir, 0))?;
            (state, history)
        }
    };
    let last = opts.stop_after.unwrap_or(usize::MAX).min(stream.target_count());
    while state.phase < last {
        let j = state.phase + 1;
        stream.enter_phase(j)?;
        let mut log = Vec::new();
        state = adapt_phase(&state, &stream, cfg, &mut log)?;
        write_log(&dir, j, &log)?;
        history
            .anchor
            .push(evaluate_all(&state.anchor, &stream, j, "anchor", &hash, opts.seed)?);
        history
            .live
            .push(evaluate_all(&state.live, &stream, j, "live", &hash, opts.seed)?);
        history.state_digests.push(state.digest());
        state.to_checkpoint(&history)?.save(&checkpoint_path(&dir, j))?;
    }
    write_reports(&dir, &history, &hash, opts.seed)?;
    Ok(RunOutcome { dir, history, state })
}

/// `report.txt`, `report.jsonl`, `forgetting.jsonl` and `summary.json`.
pub fn write_reports(dir: &Path, history: &RunHistory, config_hash: &str, seed: u64) -> Result<()> {
    let table = format!("# config_hash={config_hash} seed={seed}\n{}", render_table(history));
    write_text(&dir.join("report.txt"), &table)?;
    write_text(&dir.join("report.jsonl"), &render_records(history))?;
    let forgetting = history.forgetting();
    let mut f = String::new();
    for r in &forgetting {
        let mut v = serde_json::to_value(r).expect("json");
        v["config_hash"] = config_hash.into();
        v["seed"] = seed.into();
        f.push_str(&v.to_string());
        f.push('\n');
    }
    write_text(&dir.join("forgetting.jsonl"), &f)?;
    let summary = serde_json::json!({
        "config_hash": config_hash,
        "seed": seed,
        "phases": history.anchor.last().map_or(0, |r| r.phase),
        "final": history.anchor.last(),
        "final_live": history.live.last(),
        "source_only": history.source_only,
        "forgetting": forgetting,
        "state_digests": history.state_digests,
    });
    write_text(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("json"),
    )
}

fn series(history: &RunHistory) -> Vec<&EvaluationReport> {
    let mut all: Vec<&EvaluationReport> = history.source_only.iter().collect();
    for r in &history.anchor {
        all.push(r);
        all.extend(history.live.iter().filter(|l| l.phase == r.phase));
    }
    all
}

/// Aligned text table: one row per (phase, model), `MPJPE/PA-MPJPE` cells.
pub fn render_table(history: &RunHistory) -> String {
    let rows = series(history);
    let mut names: Vec<String> = Vec::new();
    for r in &rows {
        for d in &r.domains {
            if !names.contains(&d.domain) {
                names.push(d.domain.clone());
            }
        }
    }
    let cell = |m: Option<(f64, f64)>| m.map_or("-".to_string(), |(a, b)| format!("{a:.1}/{b:.1}"));
    let mut header = vec!["t".to_string(), "model".to_string(), "source".to_string()];
    header.extend(names.iter().cloned());
    header.push("avg".into());
    let mut table = vec![header];
    for r in rows {
        let mut line = vec![
            r.phase.to_string(),
            r.model.clone(),
            cell(Some((r.source.mpjpe, r.source.pa_mpjpe))),
        ];
        for n in &names {
            line.push(cell(r.domain(n).map(|d| (d.mpjpe, d.pa_mpjpe))));
        }
        line.push(cell(r.avg_mpjpe.zip(r.avg_pa_mpjpe)));
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in &table {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

/// One JSON line per (report, domain), plus an `avg` line per report.
pub fn render_records(history: &RunHistory) -> String {
    let mut out = String::new();
    for r in series(history) {
        let mut emit = |domain: &str, mpjpe: f64, pa: f64| {
            let v = serde_json::json!({
                "phase": r.phase,
                "model": r.model,
                "domain": domain,
                "mpjpe": mpjpe,
                "pa_mpjpe": pa,
                "config_hash": r.config_hash,
                "seed": r.seed,
            });
            out.push_str(&v.to_string());
            out.push('\n');
        };
        emit("source", r.source.mpjpe, r.source.pa_mpjpe);
        for d in &r.domains {
            emit(&d.domain, d.mpjpe, d.pa_mpjpe);
        }
        if let (Some(a), Some(b)) = (r.avg_mpjpe, r.avg_pa_mpjpe) {
            emit("avg", a, b);
        }
    }
    out
}

/// Reads the newest checkpoint of a run directory.
pub fn load_run(dir: &Path) -> Result<(AdaptationState, RunHistory)> {
    let (_, path) =
        latest_checkpoint(dir).ok_or_else(|| Error::Checkpoint(format!("no checkpoints in {}", dir.display())))?;
    AdaptationState::from_checkpoint(&Checkpoint::load(&path)?, &Skeleton::canonical())
}
