use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{
    finetune_loss, predict, prepare_finetune, prepare_pretrain, pretrain_loss, FinetuneSample, MaskSettings, PositionTables,
};
use super::optim::{lr_schedule, AdamW};
use super::params::{Bound, ParamStore};
use super::{ModelConfig, MvaError, Phase, TrainConfig};
use crate::frameselect::{select_informative, FrameSelectSettings};
use crate::numerics::{grad_check_sampled, GradCheckReport, Graph, NumericsError, Tensor};
use crate::rero::{MetricKind, SelectionOrder};
use crate::seed;
use crate::videodata::{normalize, sample_uniform, ChannelNorm, DatasetManifest, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

fn trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for t in trace {
        let _ = writeln!(out, "{},{:e},{:e}", t.step, t.lr, t.loss);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mask: MaskSettings,
    pub alpha: f64,
    pub stride: usize,
    pub smoothing: bool,
    pub norm: ChannelNorm,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::pretrain(),
            mask: MaskSettings::default(),
            alpha: 1.0,
            stride: 1,
            smoothing: true,
            norm: ChannelNorm::imagenet(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub params: ParamStore<f32>,
    pub trace: Vec<TracePoint>,
}

impl PretrainReport {
    pub fn trace_csv(&self) -> String {
        trace_csv(&self.trace)
    }

    pub fn write_trace(&self, path: impl AsRef<Path>) -> Result<(), MvaError> {
        Ok(fs::write(path, self.trace_csv())?)
    }
}

/// Clip order for one epoch.
struct Sampler {
    n: usize,
    seed: u64,
    cache: HashMap<usize, Vec<usize>>,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, cache: HashMap::new() }
    }

    /// (clip index, epoch) of the `pos`-th draw.
    fn at(&mut self, pos: usize) -> (usize, usize) {
        let epoch = pos / self.n;
        let (n, s) = (self.n, self.seed);
        let perm = self.cache.entry(epoch).or_insert_with(|| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(s, u64::MAX, epoch as u64)));
            p
        });
        (perm[pos % n], epoch)
    }
}

fn add_into(acc: &mut [Tensor<f32>], grads: &[Tensor<f32>]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y);
    }
}

fn batch_mean(results: Vec<(f64, Vec<Tensor<f32>>)>) -> (f64, Vec<Tensor<f32>>) {
    let n = results.len();
    let mut it = results.into_iter();
    let (mut loss, mut acc) = it.next().expect("non-empty batch");
    for (l, g) in it {
        loss += l;
        add_into(&mut acc, &g);
    }
    let inv = 1.0 / n as f32;
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    (loss / n as f64, acc)
}

fn param_grads(g: &Graph<f32>, loss: crate::numerics::NodeId, params: &ParamStore<f32>, bound: &Bound) -> Result<(f64, Vec<Tensor<f32>>), MvaError> {
    let grads = g.backward(loss)?;
    let out = bound.ids().iter().zip(params.tensors()).map(|(&id, t)| grads.get_or_zeros(id, t)).collect();
    Ok((g.value(loss).data()[0] as f64, out))
}

fn check_training(model: &ModelConfig, train: &TrainConfig, n: usize) -> Result<(), MvaError> {
    let mut v = model.violations();
    v.extend(train.violations());
    if n == 0 {
        v.push("no training clips".into());
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(MvaError::Config(v.join("; ")))
    }
}

/// The `2 * tau`-frame training clip for one draw.
fn training_clip(src: &VideoClip, opts: &PretrainOptions, embed: &crate::embedding::EmbedWeights<f32>, clip_seed: u64) -> Result<VideoClip, MvaError> {
    let tau = opts.model.tau;
    let pairs = if opts.alpha > 1.0 { crate::frameselect::pair_count(tau, opts.alpha) } else { tau };
    let span = |pairs: usize| (2 * pairs - 1) * opts.stride + 1;
    let span = if span(pairs) <= src.t_frames { span(pairs) } else { span(tau) };
    let max_start = src.t_frames.saturating_sub(span);
    let start = ChaCha8Rng::seed_from_u64(seed::stream(clip_seed, 1)).random_range(0..=max_start);
    if opts.alpha > 1.0 {
        let settings = FrameSelectSettings {
            tau,
            alpha: opts.alpha,
            stride: opts.stride,
            rho_pre: opts.mask.rho_pre,
            metric: opts.mask.metric,
            smoothing: opts.smoothing,
        };
        let (clip, _) = select_informative(src, &settings, start, embed, opts.model.patch, &opts.norm, seed::stream(clip_seed, 3))?;
        Ok(clip)
    } else {
        Ok(sample_uniform(src, 2 * tau, opts.stride, start)?)
    }
}

/// Pre-trains on in-memory clips. Each step: frame selection (when
/// `alpha > 1`), tube embedding, importance, selection, visible sampling,
/// encode, decode, loss, backward and an AdamW update. Batch elements run
/// in parallel; their gradients are summed in batch order.
pub fn pretrain_clips(clips: &[VideoClip], opts: &PretrainOptions, init: Option<ParamStore<f32>>) -> Result<PretrainReport, MvaError> {
    let (cfg, tc) = (&opts.model, &opts.train);
    check_training(cfg, tc, clips.len())?;
    let mut params = match init {
        Some(p) => p,
        None => ParamStore::init(cfg, Phase::Pretrain, seed::stream(tc.seed, 10))?,
    };
    let mut opt = AdamW::new(&params);
    let tables = PositionTables::<f32>::new(cfg);
    let mut sampler = Sampler::new(clips.len(), tc.seed);
    let mut trace = Vec::with_capacity(tc.total_steps);
    for step in 0..tc.total_steps {
        let lr = lr_schedule(step, tc)?;
        let draws: Vec<(usize, usize)> = (0..tc.batch_size).map(|b| sampler.at(step * tc.batch_size + b)).collect();
        let embed = params.embed_weights()?;
        let results = draws
            .par_iter()
            .map(|&(clip, epoch)| -> Result<_, MvaError> {
                let clip_seed = seed::derive(tc.seed, clip as u64, epoch as u64);
                let video = training_clip(&clips[clip], opts, &embed, clip_seed)?;
                let frames = normalize::<f32>(&video, &opts.norm)?;
                let sample = prepare_pretrain(cfg, &frames, &embed, &tables, &opts.mask, seed::stream(clip_seed, 2))?;
                let mut g = Graph::new();
                let bound = params.bind(&mut g);
                let loss = pretrain_loss(&mut g, &bound, cfg, &sample)?;
                param_grads(&g, loss, &params, &bound)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (loss, grads) = batch_mean(results);
        opt.step(&mut params, &grads, lr, tc)?;
        log::debug!("step {step} lr {lr:.3e} loss {loss:.5}");
        trace.push(TracePoint { step, lr, loss });
    }
    Ok(PretrainReport { params, trace })
}

/// Loads every clip of a manifest into memory.
pub fn load_manifest_clips(manifest: &DatasetManifest) -> Result<Vec<VideoClip>, MvaError> {
    (0..manifest.entries.len()).into_par_iter().map(|i| Ok(manifest.load_clip(i)?)).collect()
}

/// Labelled clips of a manifest.
pub fn load_labelled(manifest: &DatasetManifest) -> Result<Vec<(VideoClip, usize)>, MvaError> {
    if !manifest.is_labelled() {
        return Err(MvaError::Unlabelled);
    }
    let clips = load_manifest_clips(manifest)?;
    Ok(clips.into_iter().zip(&manifest.entries).map(|(c, e)| (c, e.label.expect("labelled"))).collect())
}

pub fn pretrain(manifest: &DatasetManifest, opts: &PretrainOptions) -> Result<PretrainReport, MvaError> {
    manifest.validate()?;
    pretrain_clips(&load_manifest_clips(manifest)?, opts, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOptions {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rho_pre: f64,
    pub metric: MetricKind,
    pub order: SelectionOrder,
    pub stride: usize,
    pub norm: ChannelNorm,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::finetune(),
            rho_pre: 0.6,
            metric: MetricKind::L2,
            order: SelectionOrder::Descending,
            stride: 1,
            norm: ChannelNorm::imagenet(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub params: ParamStore<f32>,
    pub trace: Vec<TracePoint>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

impl FinetuneReport {
    pub fn trace_csv(&self) -> String {
        trace_csv(&self.trace)
    }
}

fn ft_sample(clip: &VideoClip, label: usize, params: &ParamStore<f32>, tables: &PositionTables<f32>, opts: &FinetuneOptions) -> Result<FinetuneSample<f32>, MvaError> {
    let video = sample_uniform(clip, opts.model.frames(), opts.stride, 0)?;
    let frames = normalize::<f32>(&video, &opts.norm)?;
    prepare_finetune(&opts.model, &frames, &params.embed_weights()?, tables, opts.rho_pre, opts.metric, opts.order, label)
}

/// Fraction of clips classified correctly.
pub fn evaluate(params: &ParamStore<f32>, clips: &[(VideoClip, usize)], opts: &FinetuneOptions) -> Result<f64, MvaError> {
    if clips.is_empty() {
        return Err(MvaError::Config("no evaluation clips".into()));
    }
    let tables = PositionTables::<f32>::new(&opts.model);
    let correct = clips
        .par_iter()
        .map(|(clip, label)| -> Result<usize, MvaError> {
            let s = ft_sample(clip, *label, params, &tables, opts)?;
            Ok(usize::from(predict(params, &opts.model, &s)? == *label))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / clips.len() as f64)
}

/// Trains the encoder and a class head on the selected tokens of each
/// clip. `init` supplies pre-trained weights; matching names are copied.
pub fn finetune_clips(
    train: &[(VideoClip, usize)],
    test: &[(VideoClip, usize)],
    opts: &FinetuneOptions,
    init: Option<&ParamStore<f32>>,
) -> Result<FinetuneReport, MvaError> {
    let (cfg, tc) = (&opts.model, &opts.train);
    check_training(cfg, tc, train.len())?;
    if !(opts.rho_pre > 0.0 && opts.rho_pre <= 1.0) {
        return Err(MvaError::Config(format!("rho_pre {} must lie in (0, 1]", opts.rho_pre)));
    }
    let mut params = ParamStore::<f32>::init(cfg, Phase::Finetune, seed::stream(tc.seed, 11))?;
    if let Some(p) = init {
        params.load_matching(p);
    }
    let mut opt = AdamW::new(&params);
    let tables = PositionTables::<f32>::new(cfg);
    let mut sampler = Sampler::new(train.len(), tc.seed);
    let mut trace = Vec::with_capacity(tc.total_steps);
    for step in 0..tc.total_steps {
        let lr = lr_schedule(step, tc)?;
        let draws: Vec<usize> = (0..tc.batch_size).map(|b| sampler.at(step * tc.batch_size + b).0).collect();
        let results = draws
            .par_iter()
            .map(|&i| -> Result<_, MvaError> {
                let (clip, label) = &train[i];
                let s = ft_sample(clip, *label, &params, &tables, opts)?;
                let mut g = Graph::new();
                let bound = params.bind(&mut g);
                let (loss, _) = finetune_loss(&mut g, &bound, cfg, &s)?;
                param_grads(&g, loss, &params, &bound)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (loss, grads) = batch_mean(results);
        opt.step(&mut params, &grads, lr, tc)?;
        trace.push(TracePoint { step, lr, loss });
    }
    let train_accuracy = evaluate(&params, train, opts)?;
    let test_accuracy = if test.is_empty() { None } else { Some(evaluate(&params, test, opts)?) };
    Ok(FinetuneReport { params, trace, train_accuracy, test_accuracy })
}

pub fn finetune(
    train: &DatasetManifest,
    test: Option<&DatasetManifest>,
    opts: &FinetuneOptions,
    init: Option<&ParamStore<f32>>,
) -> Result<FinetuneReport, MvaError> {
    train.validate()?;
    let train_clips = load_labelled(train)?;
    let test_clips = match test {
        Some(m) => load_labelled(m)?,
        None => Vec::new(),
    };
    finetune_clips(&train_clips, &test_clips, opts, init)
}

fn as_numerics(e: MvaError) -> NumericsError {
    match e {
        MvaError::Numerics(n) => n,
        other => NumericsError::InvalidArgument(other.to_string()),
    }
}

/// Finite-difference check of the full reconstruction objective with
/// respect to every parameter tensor, in 64-bit at a tiny configuration.
pub fn pipeline_grad_check(seed_value: u64, h: f64, max_coords: Option<usize>) -> Result<GradCheckReport, MvaError> {
    let cfg = ModelConfig {
        channels: 1,
        height: 12,
        width: 12,
        tau: 3,
        patch: 4,
        enc_dim: 8,
        enc_depth: 1,
        enc_heads: 2,
        dec_dim: 4,
        dec_depth: 1,
        dec_heads: 2,
        mlp_ratio: 2,
        num_classes: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let mut params = ParamStore::<f64>::init(&cfg, Phase::Pretrain, seed_value)?;
    // weights well above the 0.02 init keep attention gradients clear of rounding noise
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.6..0.6));
    }
    let n = cfg.frames() * cfg.channels * cfg.height * cfg.width;
    let frames = Tensor::new(vec![cfg.frames(), cfg.channels, cfg.height, cfg.width], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let settings = MaskSettings { rho_pre: 0.5, rho_post: 0.5, allow_ratio_override: true, ..MaskSettings::default() };
    let tables = PositionTables::<f64>::new(&cfg);
    let sample = prepare_pretrain(&cfg, &frames, &params.embed_weights()?, &tables, &settings, seed::stream(seed_value, 2))?;
    let f = |g: &mut Graph<f64>, ids: &[crate::numerics::NodeId]| {
        let bound = Bound::from_ids(&params, ids).map_err(as_numerics)?;
        pretrain_loss(g, &bound, &cfg, &sample).map_err(as_numerics)
    };
    Ok(grad_check_sampled(f, params.tensors(), h, max_coords)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::videodata::{gen_moving_square, SquareSpec};

    fn toy() -> PretrainOptions {
        let model = ModelConfig {
            channels: 3,
            height: 16,
            width: 16,
            tau: 2,
            patch: 4,
            enc_dim: 16,
            enc_depth: 1,
            enc_heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
        };
        let train = TrainConfig { total_steps: 4, warmup_steps: 1, batch_size: 2, ..TrainConfig::pretrain() };
        PretrainOptions { model, train, ..PretrainOptions::default() }
    }

    fn clips(n: usize) -> Vec<VideoClip> {
        (0..n).map(|i| gen_moving_square(&SquareSpec::new(16, 16, 8, 4, (1, 1), i as u64)).unwrap().0).collect()
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut opts = toy();
        opts.train.base_lr = 0.0;
        let init = ParamStore::init(&opts.model, Phase::Pretrain, 9).unwrap();
        let r = pretrain_clips(&clips(3), &opts, Some(init.clone())).unwrap();
        assert_eq!(r.params, init);
        assert_eq!(r.trace.len(), 4);
    }

    #[test]
    fn deterministic_trace() {
        let mut opts = toy();
        opts.alpha = 1.5;
        let a = pretrain_clips(&clips(3), &opts, None).unwrap();
        let b = pretrain_clips(&clips(3), &opts, None).unwrap();
        assert_eq!(a.trace_csv(), b.trace_csv());
        assert_eq!(a.params, b.params);
        assert!(a.trace_csv().starts_with("step,lr,loss\n0,"));
    }

    #[test]
    fn sampler_visits_each_clip_once_per_epoch() {
        let mut s = Sampler::new(5, 1);
        let mut first: Vec<usize> = (0..5).map(|p| s.at(p).0).collect();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.at(7).1, 1);
    }

    #[test]
    fn pipeline_gradients() {
        for seed in 0..5 {
            let r = pipeline_grad_check(seed, 1e-5, None).unwrap();
            assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
        }
    }
}
