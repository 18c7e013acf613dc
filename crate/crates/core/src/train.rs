//! Losses, schedules, the Adam optimizer and the training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Manifest, QuerySample, SceneConfig};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{EvalMode, MetricReport};
use crate::model::{MaskClass, Model};
use crate::param::{read_checkpoint, write_entry, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use crate::sentence::{tokenize_and_pad, TokenSeq, Vocabulary};
use crate::tensor::{Real, Tensor};

/// Squared-hinge spread loss over the `[n]` class scores:
/// `Σ_{i≠t} max(0, m - (a_t - a_i))²`.
pub fn spread_loss<F: Real>(g: &mut Graph<F>, scores: Var, target: usize, margin: F) -> Result<Var> {
    let s = g.shape(scores).to_vec();
    if s.len() != 1 {
        return Err(dim_err!("spread loss expects [n] scores, got {s:?}"));
    }
    let n = s[0];
    if target >= n {
        return Err(Error::Contract(format!("target class {target} out of {n}")));
    }
    let onehot = g.constant(Tensor::from_fn(&[n], |i| if i == target { F::one() } else { F::zero() }));
    let picked = g.mul(scores, onehot)?;
    let a_t = g.sum_all(picked);
    let a_t = g.reshape(a_t, &[1])?;
    let a_t = g.expand(a_t, 0, n)?;
    let gap = g.sub(scores, a_t)?; // a_i - a_t
    let hinge = g.add_scalar(gap, margin);
    let hinge = g.relu(hinge);
    let sq = g.square(hinge);
    let others = g.constant(Tensor::from_fn(&[n], |i| if i == target { F::zero() } else { F::one() }));
    let sq = g.mul(sq, others)?;
    Ok(g.sum_all(sq))
}

/// Mean sigmoid cross-entropy of `logits` against a `{0,1}` mask.
pub fn seg_loss<F: Real>(g: &mut Graph<F>, logits: Var, gt: &Tensor<F>) -> Result<Var> {
    g.bce_with_logits(logits, gt)
}

/// `λ L_c + (1 - λ) mean(L_s)`.
pub fn total_loss<F: Real>(g: &mut Graph<F>, class_loss: Var, seg_losses: &[Var], lambda: F) -> Result<Var> {
    if seg_losses.is_empty() {
        return Err(Error::Contract("need at least one segmentation loss".into()));
    }
    let mut ls = seg_losses[0];
    for &l in &seg_losses[1..] {
        ls = g.add(ls, l)?;
    }
    let ls = g.mul_scalar(ls, F::one() / F::from_usize(seg_losses.len()).unwrap());
    let lc = g.mul_scalar(class_loss, lambda);
    let ls = g.mul_scalar(ls, F::one() - lambda);
    g.add(lc, ls)
}

/// Downsamples `[T, H, W]` masks by an integer factor with a max filter, so
/// a coarse pixel is foreground when any covered pixel is.
pub fn resample_mask<F: Real>(mask: &Tensor<F>, size: usize) -> Result<Tensor<F>> {
    let s = mask.shape();
    if s.len() != 3 || s[1] != s[2] || size == 0 || s[1] % size != 0 {
        return Err(dim_err!("cannot resample mask {s:?} to {size}x{size}"));
    }
    let f = s[1] / size;
    let src = s[1];
    Ok(Tensor::from_fn(&[s[0], size, size], |i| {
        let (t, y, x) = (i / (size * size), (i / size) % size, i % size);
        let mut v = F::zero();
        for dy in 0..f {
            for dx in 0..f {
                v = v.max(mask.data()[(t * src + y * f + dy) * src + x * f + dx]);
            }
        }
        v
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub margin_start: f64,
    pub margin_end: f64,
    /// Steps over which the margin ramps; `None` means 80% of `max_steps`.
    pub margin_steps: Option<usize>,
    pub lambda_initial: f64,
    pub acc_threshold: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub val_every: usize,
    pub val_size: usize,
    /// Average the segmentation loss over every pyramid level instead of the
    /// final output alone.
    pub multi_resolution: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            margin_start: 0.2,
            margin_end: 0.9,
            margin_steps: None,
            lambda_initial: 0.5,
            acc_threshold: 0.95,
            batch_size: 8,
            max_steps: 2000,
            val_every: 200,
            val_size: 64,
            multi_resolution: true,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0 < self.margin_start && self.margin_start < self.margin_end && self.margin_end < 1.0) {
            return bad("margins must satisfy 0 < start < end < 1");
        }
        if !(self.acc_threshold > 0.0 && self.acc_threshold < 1.0) {
            return bad("accuracy threshold must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda_initial) {
            return bad("initial lambda must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.val_every == 0 {
            return bad("learning rate, batch size and validation cadence must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn resolved_margin_steps(&self) -> usize {
        self.margin_steps.unwrap_or(self.max_steps * 4 / 5)
    }
}

/// Margin at `step`, rising linearly from `margin_start` to `margin_end`.
pub fn margin_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let n = cfg.resolved_margin_steps();
    if n == 0 || step >= n {
        return cfg.margin_end;
    }
    cfg.margin_start + (cfg.margin_end - cfg.margin_start) * step as f64 / n as f64
}

/// Drops λ to 0 once validation accuracy exceeds `threshold`; 0 is absorbing.
pub fn lambda_schedule(val_accuracy: f64, current: f64, threshold: f64) -> f64 {
    if current == 0.0 || val_accuracy > threshold {
        0.0
    } else {
        current
    }
}

/// Adam moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<f32>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match the parameter store".into()));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = &p.grad;
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn write_to(&self, store: &ParamStore<f32>, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        write_entry(&mut w, "adam.step", &Tensor::scalar(self.step as f32))?;
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            write_entry(&mut w, &format!("adam.m.{}", p.name), m)?;
            write_entry(&mut w, &format!("adam.v.{}", p.name), v)?;
        }
        Ok(())
    }

    pub fn read_from(&mut self, store: &ParamStore<f32>, r: impl std::io::Read) -> Result<()> {
        let entries: std::collections::HashMap<String, Tensor<f32>> = read_checkpoint(r)?.into_iter().collect();
        let take = |k: &str| entries.get(k).cloned().ok_or_else(|| Error::Format(format!("optimizer state lacks {k}")));
        self.step = take("adam.step")?.item() as u64;
        for (i, p) in store.iter().enumerate() {
            let m = take(&format!("adam.m.{}", p.name))?;
            let v = take(&format!("adam.v.{}", p.name))?;
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Format(format!("optimizer moments for {} have the wrong shape", p.name)));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// A manifest together with what is needed to regenerate its samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scene: SceneConfig,
    pub manifest: Manifest,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<(QuerySample, TokenSeq)> {
        let s = self.manifest.sample(&self.scene, i)?;
        let t = tokenize_and_pad(&s.query, &self.vocab);
        Ok((s, t))
    }

    pub fn head(&self, n: usize) -> Dataset {
        let entries = self.manifest.entries.iter().take(n).cloned().collect();
        Dataset { manifest: Manifest { entries }, ..self.clone() }
    }
}

/// One training step's losses, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub margin: f64,
    pub lambda: f64,
    pub class_loss: f32,
    pub seg_loss: f32,
    pub loss: f32,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.4}\t{}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.margin, self.lambda, self.class_loss, self.seg_loss, self.loss
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Samples where background won and nothing was segmented.
    pub flagged: usize,
    pub report: MetricReport,
}

/// Runs inference over a dataset with predicted-class masking.
pub fn evaluate(model: &Model<f32>, data: &Dataset, mode: EvalMode) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let mut correct = 0;
    let mut flagged = 0;
    let mut videos = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let (s, tokens) = data.get(i)?;
        let p = model.predict(&s.video, &tokens)?;
        correct += usize::from(p.class == Some(s.target_class));
        flagged += usize::from(p.class.is_none());
        videos.push((p.mask, s.gt_masks.data().iter().map(|&v| v > 0.5).collect()));
    }
    let report = MetricReport::from_videos(mode, &videos, data.scene.frames)?;
    Ok(Evaluation { accuracy: correct as f64 / data.len() as f64, flagged, report })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub step: usize,
    pub accuracy: f64,
    pub mean_iou: f64,
    pub lambda: f64,
}

impl Validation {
    pub fn log_line(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\t{}", self.step, self.accuracy, self.mean_iou, self.lambda)
    }
}

pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam,
    pub cfg: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
    pub lambda: f64,
}

const MODEL_FILE: &str = "model.ckpt";
const OPTIMIZER_FILE: &str = "optimizer.ckpt";
const STATE_FILE: &str = "trainer.state";

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(&model.store, &cfg);
        let lambda = cfg.lambda_initial;
        Ok(Trainer { model, adam, cfg, step: 0, lambda })
    }

    /// Sample indices of the batch for optimizer step `step` (0-based). The
    /// order is reshuffled every epoch from the seed alone.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let b = self.cfg.batch_size;
        let mut out = Vec::with_capacity(b);
        let mut epoch_cache: Option<(usize, Vec<usize>)> = None;
        for k in step * b..(step + 1) * b {
            let (epoch, pos) = (k / n, k % n);
            if epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x100_0000).wrapping_add(epoch as u64)));
                epoch_cache = Some((epoch, perm));
            }
            out.push(epoch_cache.as_ref().unwrap().1[pos]);
        }
        out
    }

    /// Per-sample loss graph with ground-truth masking. Returns the graph and
    /// `(L_c, L_s, L)`.
    pub fn sample_loss(&self, sample: &QuerySample, tokens: &TokenSeq, margin: f64) -> Result<(Graph<f32>, [Var; 3])> {
        let mut g = Graph::new();
        let video = g.constant(sample.video.clone());
        let out = self.model.forward(&mut g, video, tokens, MaskClass::GroundTruth(sample.target_class))?;
        let lc = spread_loss(&mut g, out.scores, sample.target_class, margin as f32)?;
        let pyramid = out.pyramid.ok_or_else(|| Error::Contract("ground-truth masking produced no decoder output".into()))?;
        let levels: Vec<Var> =
            if self.cfg.multi_resolution { pyramid.levels.clone() } else { vec![pyramid.final_logits()] };
        let mut seg = Vec::with_capacity(levels.len());
        for l in levels {
            let size = g.shape(l)[1];
            let gt = resample_mask(&sample.gt_masks, size)?;
            seg.push(seg_loss(&mut g, l, &gt)?);
        }
        let mut ls = seg[0];
        for &s in &seg[1..] {
            ls = g.add(ls, s)?;
        }
        let ls = g.mul_scalar(ls, 1.0 / seg.len() as f32);
        let total = total_loss(&mut g, lc, &seg, self.lambda as f32)?;
        Ok((g, [lc, ls, total]))
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let margin = margin_schedule(self.step, &self.cfg);
        let idx = self.batch_indices(self.step, data.len());
        let scale = 1.0 / idx.len() as f32;
        self.model.store.zero_grad();
        let (mut lc, mut ls, mut lt) = (0.0f32, 0.0f32, 0.0f32);
        for &i in &idx {
            let (sample, tokens) = data.get(i)?;
            let (mut g, [c, s, t]) = self.sample_loss(&sample, &tokens, margin)?;
            let (vc, vs, vt) = (g.value(c).item(), g.value(s).item(), g.value(t).item());
            if !(vc.is_finite() && vs.is_finite() && vt.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {} on sample seed {}: L_c={vc} L_s={vs} L={vt} margin={margin} lambda={}",
                    self.step + 1,
                    sample.seed,
                    self.lambda
                )));
            }
            lc += vc * scale;
            ls += vs * scale;
            lt += vt * scale;
            let scaled = g.mul_scalar(t, scale);
            g.backward(scaled, &mut self.model.store)?;
        }
        self.adam.update(&mut self.model.store)?;
        self.step += 1;
        Ok(StepRecord { step: self.step, margin, lambda: self.lambda, class_loss: lc, seg_loss: ls, loss: lt })
    }

    /// Evaluates on the validation split and applies the λ latch.
    pub fn validate(&mut self, val: &Dataset) -> Result<Validation> {
        let e = evaluate(&self.model, val, EvalMode::Frame)?;
        self.lambda = lambda_schedule(e.accuracy, self.lambda, self.cfg.acc_threshold);
        Ok(Validation { step: self.step, accuracy: e.accuracy, mean_iou: e.report.mean, lambda: self.lambda })
    }

    /// Trains until `max_steps`, writing one log line per step and one
    /// validation line every `val_every` steps.
    pub fn run(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        log: &mut dyn Write,
        val_log: &mut dyn Write,
        dump_dir: Option<&Path>,
    ) -> Result<()> {
        let val = val.head(self.cfg.val_size);
        while self.step < self.cfg.max_steps {
            let rec = match self.train_step(train) {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => {
                    if let Some(dir) = dump_dir {
                        self.dump_state(dir, &e)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            writeln!(log, "{}", rec.log_line())?;
            if self.step % self.cfg.val_every == 0 && !val.is_empty() {
                let v = self.validate(&val)?;
                writeln!(val_log, "{}", v.log_line())?;
            }
        }
        log.flush()?;
        val_log.flush()?;
        Ok(())
    }

    fn dump_state(&self, dir: &Path, err: &Error) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut s = format!("error\t{err}\nstep\t{}\nlambda\t{}\n", self.step, self.lambda);
        for p in self.model.store.iter() {
            let finite = p.value.all_finite() && p.grad.all_finite();
            let norm = p.value.data().iter().map(|v| v * v).sum::<f32>().sqrt();
            s.push_str(&format!("param\t{}\tnorm={norm}\tfinite={finite}\n", p.name));
        }
        std::fs::write(dir.join("nonfinite_dump.txt"), s)?;
        self.model.store.save(dir.join("nonfinite_model.ckpt"))
    }

    /// Writes model weights, optimizer moments and the step/λ state.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.store.save(dir.join(MODEL_FILE))?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(OPTIMIZER_FILE))?);
        self.adam.write_to(&self.model.store, &mut w)?;
        w.flush()?;
        std::fs::write(dir.join(STATE_FILE), format!("step={}\nlambda={}\n", self.step, self.lambda))?;
        Ok(())
    }

    /// Restores a trainer written by [`Trainer::save`] into a freshly built
    /// model of the same configuration.
    pub fn resume(mut model: Model<f32>, cfg: TrainConfig, dir: &Path) -> Result<Self> {
        model.store.load(dir.join(MODEL_FILE))?;
        let mut t = Trainer::new(model, cfg)?;
        let f = std::fs::File::open(dir.join(OPTIMIZER_FILE))?;
        t.adam.read_from(&t.model.store, std::io::BufReader::new(f))?;
        let state = std::fs::read_to_string(dir.join(STATE_FILE))?;
        for line in state.lines() {
            let bad = || Error::Format(format!("bad trainer state line {line:?}"));
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            match k {
                "step" => t.step = v.parse().map_err(|_| bad())?,
                "lambda" => t.lambda = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        Ok(t)
    }
}

pub fn model_path(dir: &Path) -> std::path::PathBuf {
    dir.join(MODEL_FILE)
}
