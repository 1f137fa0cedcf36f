#![allow(dead_code)]

use lipose::config::{DomainSource, RunConfig};
use lipose::synth::{SynthDomainSpec, ViewSpec};

/// Source plus two shifted targets, small enough for a few seconds per run.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::demo();
    let mut source = SynthDomainSpec::plain("src", 1);
    source.noise_px = 1.0;
    let mut a = SynthDomainSpec::plain("tga", 2);
    a.view = ViewSpec {
        yaw_deg: 40.0,
        yaw_jitter_deg: 10.0,
        pitch_deg: 10.0,
    };
    a.scale = 1.1;
    let mut b = SynthDomainSpec::plain("tgb", 3);
    b.view = ViewSpec {
        yaw_deg: -45.0,
        yaw_jitter_deg: 10.0,
        pitch_deg: -10.0,
    };
    b.scale = 0.9;
    b.noise_px = 2.0;
    cfg.source = DomainSource::Synth(source);
    cfg.targets = vec![DomainSource::Synth(a), DomainSource::Synth(b)];
    cfg.shift_margin_mm = None;
    cfg.frames = 9;
    cfg.clips_per_domain = 120;
    cfg.eval_clips = 60;
    cfg.estimator.channels = 32;
    cfg.training.pretrain_epochs = 2;
    cfg.training.adapt_epochs = 1;
    cfg.training.batch_size = 32;
    cfg.generator.hidden = 32;
    cfg.diffusion.epochs = 1;
    cfg.diffusion.hidden = vec![32];
    cfg.diffusion.pool_size = 32;
    cfg
}
