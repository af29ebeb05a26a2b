//! Optimization loop, frame sampling, multi-pass inference, evaluation,
//! checkpoints and the ablation table.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ArchConfig, GenConfig, RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::heads::{assemble_prediction, select_span, BBox, Prediction};
use crate::interaction::frame_clip_alignment;
use crate::losses::{iou_target_map, total_loss, LossBreakdown, Targets};
use crate::metrics::{aggregate_records, viou_trace, Aggregate, EvalRecord};
use crate::model::{GroundingModel, ModelInput};
use crate::nn::Ctx;
use crate::synth_data::{generate_dataset, generate_sample, sample_seed, GroundingSample};
use crate::tensor::{grad_check, read_exact, read_u32, read_u64, GradCheckOptions, GradCheckReport, Tensor};

/// Number of offset passes needed so that `n` evenly spaced samples cover all `t_video` frames.
pub fn pass_count(t_video: usize, n: usize) -> usize {
    if n == 0 || n >= t_video {
        1
    } else {
        t_video.div_ceil(n)
    }
}

/// `n` evenly spaced frame indices, shifted by `pass`; all frames when `n ≥ t_video`.
pub fn uniform_sample_frames(t_video: usize, n: usize, pass: usize) -> Vec<usize> {
    if n >= t_video {
        return (0..t_video).collect();
    }
    (0..n).map(|k| (k * t_video / n + pass).min(t_video - 1)).collect()
}

/// Supervision for `sample` at the given frames.
pub fn targets_for(sample: &GroundingSample, frames: &[usize]) -> Result<Targets> {
    let mut boxes = vec![0.0; frames.len() * 4];
    let mut frame_mask = vec![false; frames.len()];
    for (k, &f) in frames.iter().enumerate() {
        if let Some(b) = sample.gt_box(f) {
            boxes[k * 4..k * 4 + 4].copy_from_slice(&b.to_array());
            frame_mask[k] = true;
        }
    }
    let t = sample.clip_count();
    Ok(Targets {
        boxes: Tensor::new(&[frames.len(), 4], boxes)?,
        frame_mask,
        clip_mask: (0..t).map(|c| sample.span.contains(c)).collect(),
        iou_map: iou_target_map(sample.span, t)?,
    })
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    /// Updates every parameter that has a gradient; the rest are left untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<Vec<f64>>], lr: f64) {
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.t[i] += 1;
            let bc1 = 1.0 - self.beta1.powi(self.t[i] as i32);
            let bc2 = 1.0 - self.beta2.powi(self.t[i] as i32);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * self.weight_decay * p[j];
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Per-step loss record, also emitted as a JSON log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: GroundingModel,
    opt: AdamW,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub step: usize,
    pub history: Vec<StepLog>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.train.validate()?;
        let model = GroundingModel::new(config.model_config(), config.train.seed)?;
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
        let t = &config.train;
        let opt = AdamW::new(&sizes, t.beta1, t.beta2, t.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(t.seed);
        Ok(Self { config, model, opt, rng, order: Vec::new(), cursor: 0, step: 0, history: Vec::new() })
    }

    fn next_index(&mut self, n: usize) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// One optimizer step on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[GroundingSample]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Invalid("cannot train on an empty dataset".into()));
        }
        let tc = self.config.train.clone();
        let mut sum: Vec<Option<Vec<f64>>> = vec![None; self.model.params().len()];
        let mut mean = LossBreakdown::default();
        for _ in 0..tc.batch_size {
            let idx = self.next_index(data.len());
            let sample = &data[idx];
            let tf = sample.video_frames();
            let pass = self.rng.gen_range(0..pass_count(tf, tc.train_frames));
            let frames = uniform_sample_frames(tf, tc.train_frames, pass);
            let (b, grads) = self.sample_grads(sample, &frames).map_err(|e| match e {
                Error::NonFinite(op) => Error::Diverged {
                    step: self.step,
                    detail: format!("non-finite value in {op} on sample {}", sample.id),
                },
                e => e,
            })?;
            for (acc, g) in sum.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
            mean.l1 += b.l1;
            mean.giou += b.giou;
            mean.aux_static += b.aux_static;
            mean.temporal += b.temporal;
            mean.aux_dynamic += b.aux_dynamic;
            mean.total += b.total;
        }
        let k = tc.batch_size as f64;
        for v in [
            &mut mean.l1,
            &mut mean.giou,
            &mut mean.aux_static,
            &mut mean.temporal,
            &mut mean.aux_dynamic,
            &mut mean.total,
        ] {
            *v /= k;
        }
        if !mean.total.is_finite() {
            return Err(Error::Diverged { step: self.step, detail: format!("loss {}", mean.total) });
        }
        for g in sum.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v /= k);
        }
        if tc.grad_clip > 0.0 {
            let norm = sum.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt();
            if norm > tc.grad_clip {
                let s = tc.grad_clip / norm;
                sum.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
            }
        }
        let mut tensors = self.model.params_mut().data_mut();
        self.opt.step(&mut tensors, &sum, tc.lr_at(self.step));
        self.step += 1;
        let log = StepLog { step: self.step, loss: mean };
        if tc.log_every > 0 && (self.step % tc.log_every == 0 || self.step == 1) {
            log::info!("{}", serde_json::to_string(&log).unwrap_or_default());
        }
        self.history.push(log);
        Ok(log)
    }

    fn sample_grads(
        &self,
        sample: &GroundingSample,
        frames: &[usize],
    ) -> Result<(LossBreakdown, Vec<Option<Vec<f64>>>)> {
        let input = ModelInput::from_sample(sample, frames)?;
        let targets = targets_for(sample, frames)?;
        let ctx = Ctx::new(self.model.params());
        let out = self.model.forward(&ctx, &input)?;
        let (loss, b) = total_loss(&out.loss_inputs(), &targets, &self.config.train.weights)?;
        let grads = loss.backward()?;
        Ok((b, ctx.param_grads(&grads)))
    }

    /// Runs `config.train.steps` steps.
    pub fn run(&mut self, data: &[GroundingSample]) -> Result<()> {
        while self.step < self.config.train.steps {
            self.train_step(data)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step as u64,
            rng: RngState::of(&self.rng),
            model: self.model.clone(),
        }
    }
}

/// Trains a fresh model on `data` for the configured number of steps.
pub fn train(config: &RunConfig, data: &[GroundingSample]) -> Result<(Checkpoint, Vec<StepLog>)> {
    let mut t = Trainer::new(config.clone())?;
    t.run(data)?;
    Ok((t.checkpoint(), t.history))
}

/// Boxes from every pass averaged per frame; span and span score from pass 0.
pub fn infer(model: &GroundingModel, sample: &GroundingSample, test_frames: usize) -> Result<Prediction> {
    let tf = sample.video_frames();
    let mut box_sum: BTreeMap<usize, ([f64; 4], f64, usize)> = BTreeMap::new();
    let mut span = None;
    for pass in 0..pass_count(tf, test_frames) {
        let frames = uniform_sample_frames(tf, test_frames, pass);
        let input = ModelInput::from_sample(sample, &frames)?;
        let ctx = Ctx::inference(model.params());
        let out = model.forward(&ctx, &input)?;
        let boxes = out.boxes.to_vec();
        let scores = out.frame_scores.to_vec();
        for (k, &f) in frames.iter().enumerate() {
            let e = box_sum.entry(f).or_insert(([0.0; 4], 0.0, 0));
            for c in 0..4 {
                e.0[c] += boxes[k * 4 + c];
            }
            e.1 += scores[k];
            e.2 += 1;
        }
        if pass == 0 {
            let map = out.score_map.value();
            let s = select_span(&map)?;
            let t = map.shape()[0];
            span = Some((s, map.data()[s.start * t + s.end]));
        }
    }
    let (span, span_score) = span.expect("at least one pass");
    let frames: Vec<usize> = box_sum.keys().copied().collect();
    let boxes: Vec<BBox> = box_sum
        .values()
        .map(|(b, _, n)| {
            let n = *n as f64;
            BBox::new(b[0] / n, b[1] / n, b[2] / n, b[3] / n)
        })
        .collect();
    let scores: Vec<f64> = box_sum.values().map(|(_, s, n)| s / *n as f64).collect();
    let clips = sample.clip_count();
    let map = frame_clip_alignment(tf, clips);
    assemble_prediction(sample.id, &frames, &boxes, &scores, span, span_score, tf as f64 / clips as f64, &map)
}

/// Per-sample vIoU of a prediction against its sample.
pub fn score_prediction(pred: &Prediction, sample: &GroundingSample) -> Result<EvalRecord> {
    let pred_tube: BTreeMap<usize, BBox> = pred.boxes.iter().copied().collect();
    let gt_tube: BTreeMap<usize, BBox> =
        (sample.frame_span.0..=sample.frame_span.1).zip(sample.gt_boxes.iter().copied()).collect();
    let (viou, frame_ious) = viou_trace(&pred_tube, pred.frame_span, &gt_tube, sample.frame_span)?;
    Ok(EvalRecord { sample_id: sample.id, viou, frame_ious })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub predictions: Vec<Prediction>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    /// JSON lines: one `prediction` and one `record` line per sample, then an `aggregate` line.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        let err = |e: serde_json::Error| Error::Invalid(e.to_string());
        for (p, r) in self.predictions.iter().zip(&self.records) {
            let line = serde_json::json!({ "kind": "prediction", "prediction": p });
            writeln!(w, "{}", serde_json::to_string(&line).map_err(err)?)?;
            let line = serde_json::json!({ "kind": "record", "record": r });
            writeln!(w, "{}", serde_json::to_string(&line).map_err(err)?)?;
        }
        let line = serde_json::json!({ "kind": "aggregate", "aggregate": self.aggregate });
        writeln!(w, "{}", serde_json::to_string(&line).map_err(err)?)?;
        Ok(())
    }
}

pub fn evaluate(model: &GroundingModel, data: &[GroundingSample], test_frames: usize) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(data.len());
    let mut predictions = Vec::with_capacity(data.len());
    for s in data {
        let p = infer(model, s, test_frames)?;
        records.push(score_prediction(&p, s)?);
        predictions.push(p);
    }
    let aggregate = aggregate_records(&records)?;
    Ok(EvalReport { records, predictions, aggregate })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Trained weights plus the configuration and training progress that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub rng: RngState,
    pub model: GroundingModel,
}

const CKPT_MAGIC: &[u8; 4] = b"STVC";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        let text = self.config.to_kv();
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        let params = self.model.params();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, t) in params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "checkpoint magic")?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r, "checkpoint version")?;
        if version != CKPT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u64(r, "config length")?;
        if len > 1 << 20 {
            return Err(Error::Parse(format!("config length {len} is implausible")));
        }
        let mut text = vec![0u8; len as usize];
        read_exact(r, &mut text, "config")?;
        let text = String::from_utf8(text).map_err(|_| Error::Parse("config is not UTF-8".into()))?;
        let config = RunConfig::parse(&text)?;
        let step = read_u64(r, "step")?;
        let mut seed = [0u8; 32];
        read_exact(r, &mut seed, "rng seed")?;
        let stream = read_u64(r, "rng stream")?;
        let mut wp = [0u8; 16];
        read_exact(r, &mut wp, "rng position")?;
        let rng = RngState { seed, stream, word_pos: u128::from_le_bytes(wp) };
        let mut model = GroundingModel::new(config.model_config(), config.train.seed)?;
        let count = read_u32(r, "parameter count")? as usize;
        if count != model.params().len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {count} tensors, model has {}",
                model.params().len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let n = read_u32(r, "name length")? as usize;
            if n > 4096 {
                return Err(Error::Parse(format!("parameter name length {n} is implausible")));
            }
            let mut name = vec![0u8; n];
            read_exact(r, &mut name, "parameter name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?;
            let t = Tensor::read_from(r)?;
            if !seen.insert(name.clone()) {
                return Err(Error::Validation(format!("duplicate parameter {name}")));
            }
            model.params_mut().set(&name, t)?;
        }
        Ok(Self { config, step, rng, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Smallest geometry that still exercises every block: 4 clips of 2 frames on
/// a 2×2 grid, 3 token slots, width 8, one layer of each branch.
pub fn grad_check_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.arch = ArchConfig { layers: 1, d_model: 8, d_moment: 4, ..ArchConfig::default() };
    c.gen = GenConfig {
        video_frames: 8,
        clips: 4,
        grid_h: 2,
        grid_w: 2,
        max_tokens: 3,
        attributes: 2,
        actions: 2,
        distractors: 1,
        min_box: 0.1,
        max_box: 0.2,
        min_span_clips: 1,
        max_span_clips: 3,
        max_speed: 0.01,
        samples: 1,
        ..GenConfig::default()
    };
    c.train.train_frames = 8;
    c
}

/// Finite-difference check of the total training loss of one sample against
/// every model parameter, with both interaction blocks on.
pub fn loss_grad_check(cfg: &RunConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut mc = cfg.model_config();
    mc.s2d = true;
    mc.d2s = true;
    let model = GroundingModel::new(mc, cfg.train.seed)?;
    let sample = generate_sample(sample_seed(cfg.gen.seed, 0), 0, &cfg.gen)?;
    let frames = uniform_sample_frames(sample.video_frames(), cfg.train.train_frames, 0);
    let input = ModelInput::from_sample(&sample, &frames)?;
    let targets = targets_for(&sample, &frames)?;
    let store = model.params();
    let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |v| {
            let ctx = Ctx::with_bindings(store, v)?;
            let out = model.forward(&ctx, &input)?;
            Ok(total_loss(&out.loss_inputs(), &targets, &cfg.train.weights)?.0)
        },
        &inputs,
        opts,
    )
}

/// The four interaction settings compared in the ablation table.
pub const ABLATION_ROWS: [(&str, bool, bool); 4] =
    [("full", false, false), ("w/o s2d", true, false), ("w/o d2s", false, true), ("w/o interaction", true, true)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// Per-seed test aggregates.
    pub runs: Vec<Aggregate>,
    /// Medians over seeds.
    pub median: Aggregate,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_aggregate(runs: &[Aggregate]) -> Aggregate {
    let col = |f: fn(&Aggregate) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        m_viou: col(|a| a.m_viou),
        viou_03: col(|a| a.viou_03),
        viou_05: col(|a| a.viou_05),
        count: runs.first().map_or(0, |a| a.count),
    }
}

/// Train and test sets for a run: the test set uses the next data seed.
pub fn split_datasets(cfg: &RunConfig) -> Result<(Vec<GroundingSample>, Vec<GroundingSample>)> {
    let train = generate_dataset(&cfg.gen)?;
    let mut g = cfg.gen.clone();
    g.seed = g.seed.wrapping_add(1);
    g.samples = if cfg.train.test_samples > 0 { cfg.train.test_samples } else { cfg.gen.samples };
    Ok((train, generate_dataset(&g)?))
}

/// Trains one model per (row, seed) and reports test medians.
///
/// `rows` selects entries of [`ABLATION_ROWS`] by name; `progress` sees each
/// finished run.
pub fn run_ablation(
    cfg: &RunConfig,
    seeds: &[u64],
    rows: &[&str],
    mut progress: impl FnMut(&str, u64, &Aggregate),
) -> Result<Vec<AblationRow>> {
    let (train_set, test_set) = split_datasets(cfg)?;
    let mut out = Vec::new();
    for &(name, no_s2d, no_d2s) in ABLATION_ROWS.iter().filter(|r| rows.contains(&r.0)) {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = cfg.clone();
            c.train = TrainConfig { seed, no_s2d, no_d2s, ..cfg.train.clone() };
            let (ckpt, _) = train(&c, &train_set)?;
            let agg = evaluate(&ckpt.model, &test_set, c.train.test_frames)?.aggregate;
            progress(name, seed, &agg);
            runs.push(agg);
        }
        out.push(AblationRow { name: name.to_string(), median: median_aggregate(&runs), runs });
    }
    Ok(out)
}

/// Markdown table with one row per setting and the three metric columns.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| model | m_vIoU | vIoU@0.3 | vIoU@0.5 |\n|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.1} | {:.1} | {:.1} |\n",
            r.name,
            100.0 * r.median.m_viou,
            100.0 * r.median.viou_03,
            100.0 * r.median.viou_05
        ));
    }
    s
}
