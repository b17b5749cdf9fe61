//! The training loop: warmup, threshold annealing, pseudo-label
//! generation, loss assembly and optimisation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cst::{cst_loss_with_grad, generate_cross_pseudo, ExemplarMemory, DEFAULT_MEMORY_SIZE};
use crate::datagen::{Dataset, PartialLabelVector, PseudoLabelVector, Sample};
use crate::error::{Error, Result};
use crate::ist::{
    generate_intra_pseudo, generation_pairs, pair_term, supervised_pairs, CooccurrenceMatrix, IstDims,
    IstLossConfig, IstPredictor,
};
use crate::metrics::{pseudo_quality, MetricSummary, PseudoQuality};
use crate::model::{partial_bce, partial_bce_grad, SarlDims, SarlForward, SarlParams};
use crate::numerics::{
    AdamConfig, AdamState, Checkpoint, CheckpointHeader, Gradients, Matrix, ParamStore,
    CHECKPOINT_FORMAT_VERSION,
};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub d: usize,
    pub ist_mid: usize,
    pub ist_mid2: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            d: 32,
            ist_mid: 32,
            ist_mid2: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CooccurrenceSource {
    Learned,
    Statistical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub theta_start: f64,
    pub theta_step: f64,
    pub theta_intra_min: f64,
    pub theta_inter_min: f64,
    pub lambda_ist: f64,
    pub lambda_cst: f64,
    pub ist_loss: IstLossConfig,
    pub batch_size: usize,
    pub memory_size: usize,
    pub adam: AdamConfig,
    /// Divide the learning rate by 10 every this many epochs; 0 disables.
    pub lr_decay_every: usize,
    pub use_ist: bool,
    pub use_cst: bool,
    pub cooccurrence_source: CooccurrenceSource,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            warmup_epochs: 5,
            theta_start: 0.95,
            theta_step: 0.025,
            theta_intra_min: 0.75,
            theta_inter_min: 0.75,
            lambda_ist: 10.0,
            lambda_cst: 0.05,
            ist_loss: IstLossConfig::default(),
            batch_size: 32,
            memory_size: DEFAULT_MEMORY_SIZE,
            adam: AdamConfig::default(),
            lr_decay_every: 0,
            use_ist: true,
            use_cst: true,
            cooccurrence_source: CooccurrenceSource::Learned,
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.theta_start < self.theta_intra_min || self.theta_start < self.theta_inter_min {
            return Err(Error::Config("theta_start must be >= both threshold minima".into()));
        }
        if !(self.theta_step >= 0.0) {
            return Err(Error::Config("theta_step must be >= 0".into()));
        }
        if !(self.lambda_ist >= 0.0 && self.lambda_cst >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        self.ist_loss.validate()?;
        self.adam.validate()?;
        let m = &self.model;
        if m.hidden == 0 || m.d == 0 || m.ist_mid == 0 || m.ist_mid2 == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn intra_schedule(&self) -> ThresholdSchedule {
        ThresholdSchedule {
            warmup_epochs: self.warmup_epochs,
            start: self.theta_start,
            step: self.theta_step,
            min: self.theta_intra_min,
        }
    }

    pub fn inter_schedule(&self) -> ThresholdSchedule {
        ThresholdSchedule {
            min: self.theta_inter_min,
            ..self.intra_schedule()
        }
    }

    /// IST pseudo labels come from the learned predictor.
    fn learned_ist(&self) -> bool {
        self.use_ist && self.cooccurrence_source == CooccurrenceSource::Learned
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSchedule {
    pub warmup_epochs: usize,
    pub start: f64,
    pub step: f64,
    pub min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub enabled: bool,
    /// Meaningless while disabled; reported as 1.0.
    pub theta: f64,
}

/// Generation is switched off for the warmup epochs; afterwards the
/// threshold starts at `start` and drops by `step` per epoch down to `min`.
/// Epochs are 1-based. Values are snapped to a 1e-12 grid so decimal
/// schedules land on the nearest double of each decimal value.
pub fn threshold_at_epoch(epoch: usize, schedule: &ThresholdSchedule) -> Threshold {
    if epoch <= schedule.warmup_epochs {
        return Threshold {
            enabled: false,
            theta: 1.0,
        };
    }
    let k = (epoch - schedule.warmup_epochs - 1) as f64;
    let raw = schedule.start - k * schedule.step;
    let snapped = (raw * 1e12).round() / 1e12;
    Threshold {
        enabled: true,
        theta: snapped.max(schedule.min),
    }
}

/// Global `(i, j)` entry `#(y_i = 1 ∧ y_j = 1) / max(1, #(y_j = 1))` over
/// known labels of the training set. Diagonal held at zero.
pub fn statistical_cooccurrence(dataset: &Dataset) -> CooccurrenceMatrix {
    let c = dataset.categories();
    let mut joint = vec![vec![0usize; c]; c];
    let mut single = vec![0usize; c];
    for s in &dataset.samples {
        let pos: Vec<usize> = s.partial_labels.positives().collect();
        for &j in &pos {
            single[j] += 1;
            for &i in &pos {
                joint[i][j] += 1;
            }
        }
    }
    let mut m = CooccurrenceMatrix::zeros(c);
    for i in 0..c {
        for j in 0..c {
            if i != j {
                m.set(i, j, joint[i][j] as f64 / single[j].max(1) as f64);
            }
        }
    }
    m
}

/// Parameter handles for the full network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Network {
    pub sarl: SarlParams,
    pub ist: IstPredictor,
}

/// A trained or freshly initialised network with its parameters.
#[derive(Debug, Clone)]
pub struct SstModel {
    pub store: ParamStore,
    pub net: Network,
    pub model_config: ModelConfig,
    pub seed: u64,
}

impl SstModel {
    pub fn new(categories: usize, d_raw: usize, model_config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng::rng(rng::derive(seed, streams::INIT, 0));
        let sarl = SarlParams::init(&mut store, Self::sarl_dims(categories, d_raw, &model_config), &mut rng)?;
        let ist = IstPredictor::init(&mut store, Self::ist_dims(&model_config), &mut rng)?;
        Ok(Self {
            store,
            net: Network { sarl, ist },
            model_config,
            seed,
        })
    }

    fn sarl_dims(categories: usize, d_raw: usize, m: &ModelConfig) -> SarlDims {
        SarlDims {
            categories,
            d_raw,
            hidden: m.hidden,
            d: m.d,
        }
    }

    fn ist_dims(m: &ModelConfig) -> IstDims {
        IstDims {
            d: m.d,
            mid: m.ist_mid,
            mid2: m.ist_mid2,
        }
    }

    pub fn categories(&self) -> usize {
        self.net.sarl.dims().categories
    }

    pub fn d_raw(&self) -> usize {
        self.net.sarl.dims().d_raw
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            c: self.categories(),
            d: self.model_config.d,
            r: self.d_raw(),
            seed: self.seed,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.header(), &self.store)
    }

    /// Rebuilds a model from a checkpoint; the model configuration must
    /// match the tensors.
    pub fn from_checkpoint(ckpt: &Checkpoint, model_config: ModelConfig) -> Result<Self> {
        let h = ckpt.header;
        let mut model = Self::new(h.c, h.r, model_config, h.seed)?;
        ckpt.restore_into(&model.header(), &mut model.store)?;
        model.net = Network {
            sarl: SarlParams::bind(&model.store, Self::sarl_dims(h.c, h.r, &model_config))?,
            ist: IstPredictor::bind(&model.store, Self::ist_dims(&model_config))?,
        };
        Ok(model)
    }

    /// Like [`SstModel::from_checkpoint`], reading the layer widths off the
    /// stored tensor shapes.
    pub fn from_checkpoint_inferred(ckpt: &Checkpoint) -> Result<Self> {
        let shape = |name: &str| {
            ckpt.tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.shape)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no tensor {name}")))
        };
        let model_config = ModelConfig {
            hidden: shape("backbone.w1")?[0],
            d: ckpt.header.d,
            ist_mid: shape("ist.w1")?[0],
            ist_mid2: shape("ist.w2")?[0],
        };
        Self::from_checkpoint(ckpt, model_config)
    }

    pub fn predict(&self, regions: &Matrix) -> Result<Vec<f64>> {
        self.net.sarl.predict(&self.store, regions)
    }

    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
        dataset.samples.iter().map(|s| self.predict(&s.regions)).collect()
    }
}

/// Pseudo-label vectors for one batch: `intra` from IST, `cross` from CST.
/// Each equals the known labels where generation is off.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    pub intra: Vec<PseudoLabelVector>,
    pub cross: Vec<PseudoLabelVector>,
}

impl PseudoBatch {
    pub fn identity(batch: &[&Sample]) -> Self {
        let y: Vec<_> = batch.iter().map(|s| s.partial_labels.clone()).collect();
        Self {
            intra: y.clone(),
            cross: y,
        }
    }
}

/// Thresholds in force for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochThresholds {
    pub intra: Threshold,
    pub inter: Threshold,
}

impl EpochThresholds {
    pub fn at(epoch: usize, cfg: &TrainingConfig) -> Self {
        Self {
            intra: threshold_at_epoch(epoch, &cfg.intra_schedule()),
            inter: threshold_at_epoch(epoch, &cfg.inter_schedule()),
        }
    }
}

/// Generates pseudo labels from already-computed forward passes. No
/// gradient flows through generation.
pub fn generate_pseudo_labels(
    store: &ParamStore,
    net: &Network,
    batch: &[&Sample],
    forwards: &[SarlForward],
    memory: &ExemplarMemory,
    stat: Option<&CooccurrenceMatrix>,
    thresholds: EpochThresholds,
    cfg: &TrainingConfig,
) -> Result<PseudoBatch> {
    let mut out = PseudoBatch::identity(batch);
    if cfg.use_ist && thresholds.intra.enabled {
        for (k, (s, fwd)) in batch.iter().zip(forwards).enumerate() {
            let y = &s.partial_labels;
            out.intra[k] = match (cfg.cooccurrence_source, stat) {
                (CooccurrenceSource::Statistical, Some(m)) => {
                    generate_intra_pseudo(m, y, thresholds.intra.theta)
                }
                (CooccurrenceSource::Statistical, None) => {
                    return Err(Error::invalid("statistical co-occurrence requested but not provided"))
                }
                (CooccurrenceSource::Learned, _) => {
                    let pass = net
                        .ist
                        .evaluate_pairs(store, &fwd.features, &generation_pairs(y))?;
                    generate_intra_pseudo(&pass.matrix, y, thresholds.intra.theta)
                }
            };
        }
    }
    if cfg.use_cst && thresholds.inter.enabled {
        for (k, (s, fwd)) in batch.iter().zip(forwards).enumerate() {
            out.cross[k] = generate_cross_pseudo(&fwd.features, &s.partial_labels, memory, thresholds.inter.theta);
        }
    }
    Ok(out)
}

/// Batch-averaged loss components. `total = cls + λ₁·ist + λ₂·cst`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub cls: f64,
    pub ist: f64,
    pub cst: f64,
}

/// Full objective on a batch with fixed pseudo labels. When `grads` is
/// given the gradient of `total` is added into it.
pub fn total_loss(
    store: &ParamStore,
    net: &Network,
    batch: &[&Sample],
    pseudo: &PseudoBatch,
    cfg: &TrainingConfig,
    grads: Option<&mut Gradients>,
) -> Result<LossComponents> {
    let forwards = batch
        .iter()
        .map(|s| net.sarl.forward(store, &s.regions))
        .collect::<Result<Vec<_>>>()?;
    loss_from_forwards(store, net, batch, &forwards, pseudo, cfg, grads)
}

fn loss_from_forwards(
    store: &ParamStore,
    net: &Network,
    batch: &[&Sample],
    forwards: &[SarlForward],
    pseudo: &PseudoBatch,
    cfg: &TrainingConfig,
    mut grads: Option<&mut Gradients>,
) -> Result<LossComponents> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let inv_n = 1.0 / n as f64;
    let c = net.sarl.dims().categories;
    let d = net.sarl.dims().d;
    let want_grad = grads.is_some();

    let mut cls = 0.0;
    let mut d_scores: Vec<Vec<f64>> = vec![vec![0.0; c]; if want_grad { n } else { 0 }];
    for (k, (s, fwd)) in batch.iter().zip(forwards).enumerate() {
        let targets: [&PartialLabelVector; 3] = [&s.partial_labels, &pseudo.intra[k], &pseudo.cross[k]];
        for y in targets {
            cls += partial_bce(&fwd.scores, y).loss * inv_n;
            if want_grad {
                partial_bce_grad(&fwd.scores, y, inv_n, &mut d_scores[k]);
            }
        }
    }

    let mut d_features: Vec<Matrix> = if want_grad {
        (0..n).map(|_| Matrix::zeros(c, d)).collect()
    } else {
        Vec::new()
    };

    let mut ist = 0.0;
    if cfg.learned_ist() && cfg.lambda_ist > 0.0 {
        for (k, (s, fwd)) in batch.iter().zip(forwards).enumerate() {
            let y = &s.partial_labels;
            let pairs = supervised_pairs(y);
            if pairs.is_empty() {
                continue;
            }
            let pass = net.ist.evaluate_pairs(store, &fwd.features, &pairs)?;
            let mut d_probs = Vec::with_capacity(pairs.len());
            for &(i, j) in &pairs {
                let co = y.get(i) == 1 && y.get(j) == 1;
                let (l, dl) = pair_term(pass.matrix.get(i, j), co, &cfg.ist_loss);
                ist += l * inv_n;
                d_probs.push(dl * inv_n * cfg.lambda_ist);
            }
            if let Some(g) = grads.as_deref_mut() {
                net.ist
                    .backward(store, &fwd.features, &pass, &d_probs, &mut d_features[k], g);
            }
        }
    }

    let mut cst = 0.0;
    if cfg.use_cst && cfg.lambda_cst > 0.0 && n >= 2 {
        let feats: Vec<&Matrix> = forwards.iter().map(|f| &f.features).collect();
        let labels: Vec<&PartialLabelVector> = batch.iter().map(|s| &s.partial_labels).collect();
        let (out, g) = cst_loss_with_grad(&feats, &labels);
        cst = out.loss;
        if want_grad {
            for (df, gk) in d_features.iter_mut().zip(&g) {
                let mut scaled = gk.clone();
                scaled.scale(cfg.lambda_cst);
                df.add_assign(&scaled);
            }
        }
    }

    if let Some(g) = grads {
        for (k, (s, fwd)) in batch.iter().zip(forwards).enumerate() {
            net.sarl
                .backward(store, &s.regions, fwd, &d_scores[k], &d_features[k], g);
        }
    }

    Ok(LossComponents {
        total: cls + cfg.lambda_ist * ist + cfg.lambda_cst * cst,
        cls,
        ist,
        cst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub thresholds: EpochThresholds,
    /// Mean over batches.
    pub loss: LossComponents,
    pub intra_pseudo: PseudoQuality,
    pub cross_pseudo: PseudoQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainingConfig,
    pub epochs: Vec<EpochRecord>,
    /// Known labels are counted three times inside the classification
    /// loss: once directly and once inside each pseudo-label vector.
    pub known_label_weight: u32,
    pub final_metrics: Option<MetricSummary>,
}

impl TrainReport {
    /// Line-delimited records: one per epoch, then a summary line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.epochs {
            serde_json::to_writer(&mut out, &ReportLine::Epoch(e.clone()))?;
            out.push(b'\n');
        }
        serde_json::to_writer(
            &mut out,
            &ReportLine::Summary {
                config: self.config.clone(),
                known_label_weight: self.known_label_weight,
                final_metrics: self.final_metrics,
            },
        )?;
        out.push(b'\n');
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut epochs = Vec::new();
        let mut summary = None;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReportLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
            match rec {
                ReportLine::Epoch(e) => epochs.push(e),
                ReportLine::Summary {
                    config,
                    known_label_weight,
                    final_metrics,
                } => summary = Some((config, known_label_weight, final_metrics)),
            }
        }
        let (config, known_label_weight, final_metrics) = summary.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "missing summary record".into(),
        })?;
        Ok(Self {
            config,
            epochs,
            known_label_weight,
            final_metrics,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ReportLine {
    Epoch(EpochRecord),
    Summary {
        config: TrainingConfig,
        known_label_weight: u32,
        final_metrics: Option<MetricSummary>,
    },
}

/// Trains a fresh model on `dataset`. Deterministic given the dataset and
/// configuration.
pub fn fit(dataset: &Dataset, cfg: &TrainingConfig) -> Result<(SstModel, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let model = SstModel::new(dataset.categories(), dataset.d_raw(), cfg.model, cfg.seed)?;
    fit_from(model, dataset, cfg)
}

/// Trains an existing model in place of a fresh one.
pub fn fit_from(mut model: SstModel, dataset: &Dataset, cfg: &TrainingConfig) -> Result<(SstModel, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let c = model.categories();
    if dataset.categories() != c || dataset.d_raw() != model.d_raw() {
        return Err(Error::invalid("dataset dimensions do not match the model"));
    }

    if !cfg.learned_ist() || cfg.lambda_ist == 0.0 {
        for id in model.net.ist.ids() {
            model.store.set_trainable(id, false);
        }
    }
    let stat = (cfg.use_ist && cfg.cooccurrence_source == CooccurrenceSource::Statistical)
        .then(|| statistical_cooccurrence(dataset));

    let mut adam = AdamState::new(cfg.adam, &model.store)?;
    let mut memory = ExemplarMemory::new(c, cfg.memory_size);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut grads = model.store.zeros_like();

    for epoch in 1..=cfg.epochs {
        let lr = match cfg.lr_decay_every {
            0 => cfg.adam.lr,
            k => cfg.adam.lr * 0.1f64.powi(((epoch - 1) / k) as i32),
        };
        adam.set_lr(lr);
        let thresholds = EpochThresholds::at(epoch, cfg);
        let mut shuffle_rng = rng::rng(rng::derive(cfg.seed, streams::SHUFFLE, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = LossComponents::default();
        let mut batches = 0usize;
        let mut intra_q = PseudoQuality::default();
        let mut cross_q = PseudoQuality::default();

        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let forwards = batch
                .iter()
                .map(|s| model.net.sarl.forward(&model.store, &s.regions))
                .collect::<Result<Vec<_>>>()?;
            let pseudo = generate_pseudo_labels(
                &model.store,
                &model.net,
                &batch,
                &forwards,
                &memory,
                stat.as_ref(),
                thresholds,
                cfg,
            )?;

            let full: Vec<Vec<i8>> = batch.iter().map(|s| s.full_labels.clone()).collect();
            let known: Vec<PartialLabelVector> = batch.iter().map(|s| s.partial_labels.clone()).collect();
            intra_q = intra_q.merge(&pseudo_quality(&pseudo.intra, &full, &known)?);
            cross_q = cross_q.merge(&pseudo_quality(&pseudo.cross, &full, &known)?);

            grads.zero();
            let loss = loss_from_forwards(
                &model.store,
                &model.net,
                &batch,
                &forwards,
                &pseudo,
                cfg,
                Some(&mut grads),
            )?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            model.store.accumulate(&grads);
            adam.step(&mut model.store)?;
            model.store.zero_grads();

            for (s, fwd) in batch.iter().zip(&forwards) {
                memory.update(&fwd.features, &s.partial_labels, s.id);
            }

            loss_sum.total += loss.total;
            loss_sum.cls += loss.cls;
            loss_sum.ist += loss.ist;
            loss_sum.cst += loss.cst;
            batches += 1;
        }

        let nb = batches as f64;
        records.push(EpochRecord {
            epoch,
            lr,
            thresholds,
            loss: LossComponents {
                total: loss_sum.total / nb,
                cls: loss_sum.cls / nb,
                ist: loss_sum.ist / nb,
                cst: loss_sum.cst / nb,
            },
            intra_pseudo: intra_q,
            cross_pseudo: cross_q,
        });
    }

    let report = TrainReport {
        config: cfg.clone(),
        epochs: records,
        known_label_weight: 3,
        final_metrics: None,
    };
    Ok((model, report))
}

/// Fills an exemplar memory from the known positives of `dataset` using
/// the model's current features, as at the end of training.
pub fn build_memory(model: &SstModel, dataset: &Dataset, capacity: usize) -> Result<ExemplarMemory> {
    let mut memory = ExemplarMemory::new(model.categories(), capacity);
    for s in &dataset.samples {
        let fwd = model.net.sarl.forward(&model.store, &s.regions)?;
        memory.update(&fwd.features, &s.partial_labels, s.id);
    }
    Ok(memory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_world, PartialLabelVector};
    use crate::numerics::finite_diff_check;

    #[test]
    fn default_schedule() {
        let s = TrainingConfig::default().intra_schedule();
        assert!(!threshold_at_epoch(3, &s).enabled);
        assert!(!threshold_at_epoch(5, &s).enabled);
        assert_eq!(threshold_at_epoch(6, &s), Threshold { enabled: true, theta: 0.95 });
        assert_eq!(threshold_at_epoch(7, &s).theta, 0.925);
        assert_eq!(threshold_at_epoch(14, &s).theta, 0.75);
        assert_eq!(threshold_at_epoch(20, &s).theta, 0.75);
    }

    fn sample_with(partial: &[i8]) -> Sample {
        let full = partial.iter().map(|&v| if v == 1 { 1 } else { -1 }).collect();
        Sample {
            id: 0,
            regions: Matrix::zeros(1, 2),
            full_labels: full,
            partial_labels: PartialLabelVector::new(partial.to_vec()).unwrap(),
        }
    }

    #[test]
    fn statistical_matrix_by_hand() {
        let d = Dataset {
            samples: vec![
                sample_with(&[1, 1, 0, -1]),
                sample_with(&[1, 0, 1, -1]),
                sample_with(&[1, 1, -1, 0]),
                sample_with(&[0, 1, 1, -1]),
            ],
        };
        let m = statistical_cooccurrence(&d);
        // brute-force conditional counts
        let (mut joint, mut single) = ([[0.0; 4]; 4], [0.0; 4]);
        for s in &d.samples {
            let y = s.partial_labels.as_slice();
            for j in 0..4 {
                if y[j] == 1 {
                    single[j] += 1.0;
                    for i in 0..4 {
                        if y[i] == 1 {
                            joint[i][j] += 1.0;
                        }
                    }
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let want = if single[j] == 0.0 { 0.0 } else { joint[i][j] / single[j] };
                    assert_eq!(m.get(i, j), want, "({i},{j})");
                }
            }
        }
        assert_eq!(m.get(1, 0), 2.0 / 3.0);
        // category 3 never known-positive
        for i in 0..3 {
            assert_eq!(m.get(i, 3), 0.0);
        }
    }

    #[test]
    fn always_co_positive_gives_one() {
        let d = Dataset {
            samples: vec![sample_with(&[1, 1, 0]), sample_with(&[1, 1, -1])],
        };
        let m = statistical_cooccurrence(&d);
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(1, 0), 1.0);
    }

    fn tiny_dataset(n: usize, q: f64) -> Dataset {
        let w = sample_world(1, 5, 4, 0.3, 0.2).unwrap();
        Dataset::generate_train(&w, n, 1).with_known_proportion(q, 1).unwrap()
    }

    #[test]
    fn warmup_loss_is_three_bce_terms() {
        let data = tiny_dataset(4, 0.6);
        let cfg = TrainingConfig {
            use_ist: false,
            use_cst: false,
            model: ModelConfig {
                hidden: 4,
                d: 3,
                ist_mid: 3,
                ist_mid2: 3,
            },
            ..TrainingConfig::default()
        };
        let mut model = SstModel::new(5, 4, cfg.model, 0).unwrap();
        // zero classifier weights and biases: every score is exactly 0.5
        for name in ["classifier.w", "classifier.b"] {
            let id = model.store.find(name).unwrap();
            model.store.value_mut(id).fill(0.0);
        }
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let pseudo = PseudoBatch::identity(&batch);
        let out = total_loss(&model.store, &model.net, &batch, &pseudo, &cfg, None).unwrap();
        assert!((out.total - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(out.total, out.cls);
    }

    #[test]
    fn zero_weights_leave_only_classification() {
        let data = tiny_dataset(6, 0.6);
        let cfg = TrainingConfig {
            lambda_ist: 0.0,
            lambda_cst: 0.0,
            ..TrainingConfig::default()
        };
        let model = SstModel::new(5, 4, cfg.model, 3).unwrap();
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let out = total_loss(&model.store, &model.net, &batch, &PseudoBatch::identity(&batch), &cfg, None).unwrap();
        assert_eq!(out.total, out.cls);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = tiny_dataset(20, 0.4);
        let cfg = TrainingConfig {
            epochs: 7,
            warmup_epochs: 2,
            batch_size: 8,
            model: ModelConfig {
                hidden: 6,
                d: 5,
                ist_mid: 4,
                ist_mid2: 6,
            },
            ..TrainingConfig::default()
        };
        let (a, ra) = fit(&data, &cfg).unwrap();
        let (b, rb) = fit(&data, &cfg).unwrap();
        assert_eq!(a.checkpoint().to_json().unwrap(), b.checkpoint().to_json().unwrap());
        assert_eq!(ra, rb);
        assert_eq!(ra.epochs.len(), 7);
    }

    #[test]
    fn disabled_ist_leaves_predictor_untouched() {
        let data = tiny_dataset(16, 0.6);
        let cfg = TrainingConfig {
            epochs: 3,
            warmup_epochs: 1,
            use_ist: false,
            batch_size: 8,
            ..TrainingConfig::default()
        };
        let fresh = SstModel::new(5, 4, cfg.model, cfg.seed).unwrap();
        let (trained, report) = fit(&data, &cfg).unwrap();
        for id in fresh.net.ist.ids() {
            assert_eq!(fresh.store.value(id), trained.store.value(id));
        }
        assert!(report.epochs.iter().all(|e| e.loss.ist == 0.0));
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let w = sample_world(4, 6, 3, 0.4, 0.3).unwrap();
        let data = Dataset::generate_train(&w, 4, 2).with_known_proportion(0.7, 2).unwrap();
        let cfg = TrainingConfig {
            model: ModelConfig {
                hidden: 5,
                d: 8,
                ist_mid: 6,
                ist_mid2: 5,
            },
            ..TrainingConfig::default()
        };
        let model = SstModel::new(6, 3, cfg.model, 9).unwrap();
        let batch: Vec<&Sample> = data.samples.iter().collect();
        // frozen pseudo labels that differ from the known ones
        let mut pseudo = PseudoBatch::identity(&batch);
        for (k, s) in batch.iter().enumerate() {
            let mut v = s.partial_labels.as_slice().to_vec();
            if let Some(u) = v.iter().position(|&x| x == 0) {
                v[u] = 1;
            }
            pseudo.intra[k] = PartialLabelVector::new(v).unwrap();
        }
        let err = finite_diff_check(&model.store, 1e-5, |s, g| {
            Ok(total_loss(s, &model.net, &batch, &pseudo, &cfg, Some(g))?.total)
        })
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip_restores_model() {
        let cfg = ModelConfig::default();
        let m = SstModel::new(6, 5, cfg, 12).unwrap();
        let json = m.checkpoint().to_json().unwrap();
        let back = SstModel::from_checkpoint(&Checkpoint::from_json(&json).unwrap(), cfg).unwrap();
        assert_eq!(back.store, m.store);
        let inferred = SstModel::from_checkpoint_inferred(&m.checkpoint()).unwrap();
        assert_eq!(inferred.model_config, cfg);
        assert_eq!(inferred.store, m.store);
        let other = ModelConfig { hidden: 7, ..cfg };
        assert!(SstModel::from_checkpoint(&m.checkpoint(), other).is_err());
    }
}
