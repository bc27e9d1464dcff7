//! Optimization of the typeface network, D1–D4 evaluation and model
//! checkpoints.

use std::fmt::Write as _;
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::font_net::{FontNet, FontNetConfig};
use crate::glyph::{sample_training_batch, Cell, Corpus, EvalSuites, Triplet};
use crate::losses::{l1_metric, pdar_metric, rmse_metric, weighted_l1_loss};
use crate::optim::{adam_step, clip_global_norm, AdamState};
use crate::tensor::{BnMode, Graph, RunningStats, Tensor};

/// Targets evaluated per forward pass.
const EVAL_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Size of the training triplet pool; step batches cycle through it.
    pub n_t: usize,
    pub steps: u64,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch: 4,
            n_t: 20_000,
            steps: 2000,
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch == 0 || self.n_t == 0 {
            return Err(Error::InvalidArgument("batch size and n_t must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!("clip norm {} must be positive", self.clip_norm)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: f64,
}

impl LogEntry {
    pub const HEADER: &'static str = "step,loss,wall_ms";

    pub fn csv(&self) -> String {
        format!("{},{:?},{:.1}", self.step, self.loss, self.wall_ms)
    }
}

/// Owns the network and optimizer state. Parameters and Adam moments are
/// kept at `f32` precision so a checkpoint resumes bit-exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: FontNet,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub log: Vec<LogEntry>,
    started: Instant,
}

impl Trainer {
    pub fn new(mut net: FontNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        for (_, p) in net.params.iter_mut() {
            p.round_to_f32();
        }
        let mut adam = AdamState::new(config.lr);
        adam.round_to_f32 = true;
        Ok(Self {
            net,
            adam,
            config,
            log: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let net = restore_model(ck)?;
        let mut t = Self::new(net, config)?;
        t.adam.step = ck.get("meta.adam")?.data().first().copied().unwrap_or(0.0) as u64;
        for (name, _) in t.net.params.iter() {
            for (slot, map) in [("m", &mut t.adam.first), ("v", &mut t.adam.second)] {
                let key = format!("adam.{slot}.{name}");
                if ck.contains(&key) {
                    map.insert(name.to_string(), ck.get(&key)?.data().to_vec());
                }
            }
        }
        Ok(t)
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> u64 {
        self.adam.step
    }

    /// The triplets of the next optimizer step.
    pub fn next_batch(&self, corpus: &Corpus) -> Result<Vec<Triplet>> {
        let c = &self.config;
        sample_training_batch(&corpus.partition, c.n_t, self.net.config.r, c.batch, c.seed, self.adam.step)
    }

    /// Runs one update and returns the loss before it.
    pub fn step(&mut self, corpus: &Corpus) -> Result<f64> {
        check_corpus(&self.net.config, corpus)?;
        let batch = self.next_batch(corpus)?;
        let (styles, contents, targets) = corpus.batch_tensors(&batch)?;
        let mut g = Graph::new();
        let bound = self.net.params.bind(&mut g, true);
        let s = g.constant(styles);
        let c = g.constant(contents);
        let mut buffers = self.net.buffers.clone();
        let out = self.net.forward(&mut g, &bound, s, c, BnMode::Train, &mut buffers)?;
        let (loss, _) = weighted_l1_loss(&mut g, out, &targets)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: self.adam.step,
                loss: value,
                targets: batch.iter().map(|t| (t.style, t.content)).collect(),
            });
        }
        let mut grads = g.backward(loss)?;
        bound.write_grads(&mut grads, &mut self.net.params)?;
        clip_global_norm(&mut self.net.params, self.config.clip_norm);
        adam_step(&mut self.net.params, &mut self.adam)?;
        self.net.buffers = buffers;
        self.log.push(LogEntry {
            step: self.adam.step - 1,
            loss: value,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        });
        Ok(value)
    }

    /// Runs until `config.steps` updates have been made in total, calling
    /// `on_step` after each one.
    pub fn train(&mut self, corpus: &Corpus, mut on_step: impl FnMut(&LogEntry)) -> Result<()> {
        while self.adam.step < self.config.steps {
            self.step(corpus)?;
            on_step(self.log.last().expect("just pushed"));
        }
        Ok(())
    }

    /// Model plus optimizer state.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = model_checkpoint(&self.net)?;
        ck.insert("meta.adam", Tensor::new(vec![1], vec![self.adam.step as f64])?)?;
        for (slot, map) in [("m", &self.adam.first), ("v", &self.adam.second)] {
            for (name, v) in map {
                ck.insert(format!("adam.{slot}.{name}"), Tensor::new(vec![v.len()], v.clone())?)?;
            }
        }
        Ok(ck)
    }
}

fn check_corpus(config: &FontNetConfig, corpus: &Corpus) -> Result<()> {
    if corpus.size != config.image_size {
        return Err(Error::InvalidArgument(format!(
            "corpus images are {0}×{0} but the model expects {1}×{1}",
            corpus.size, config.image_size
        )));
    }
    Ok(())
}

/// Weighted L1 loss of `net` on `batch` without touching any state.
pub fn batch_loss(net: &FontNet, corpus: &Corpus, batch: &[Triplet], mode: BnMode) -> Result<f64> {
    let (styles, contents, targets) = corpus.batch_tensors(batch)?;
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g, false);
    let s = g.constant(styles);
    let c = g.constant(contents);
    let mut buffers = net.buffers.clone();
    let out = net.forward(&mut g, &bound, s, c, mode, &mut buffers)?;
    let (loss, _) = weighted_l1_loss(&mut g, out, &targets)?;
    Ok(g.value(loss).data()[0])
}

/// Generated images for `batch`, in eval mode.
pub fn generate_batch(net: &FontNet, corpus: &Corpus, batch: &[Triplet]) -> Result<Tensor> {
    let (styles, contents, _) = corpus.batch_tensors(batch)?;
    net.generate(&styles, &contents)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub l1: f64,
    pub rmse: f64,
    pub pdar: f64,
}

/// Mean metrics per cell, in `Cell::ALL` order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(Cell, Metrics)>,
}

impl EvalReport {
    pub fn get(&self, cell: Cell) -> Metrics {
        self.rows.iter().find(|(c, _)| *c == cell).map(|(_, m)| *m).expect("every cell is evaluated")
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("set,l1,rmse,pdar\n");
        for (cell, m) in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", cell.name(), m.l1, m.rmse, m.pdar);
        }
        s
    }
}

/// Per-image L1, RMSE and PDAR between generated and ground-truth glyphs,
/// averaged over each suite.
pub fn evaluate(net: &FontNet, corpus: &Corpus, suites: &EvalSuites) -> Result<EvalReport> {
    check_corpus(&net.config, corpus)?;
    let mut rows = Vec::with_capacity(4);
    for cell in Cell::ALL {
        let set = suites.get(cell);
        if set.is_empty() {
            return Err(Error::InvalidArgument(format!("evaluation suite {} is empty", cell.name())));
        }
        let mut sum = Metrics::default();
        for chunk in set.chunks(EVAL_CHUNK) {
            let out = generate_batch(net, corpus, chunk)?;
            for (i, t) in chunk.iter().enumerate() {
                let (gen, target) = (out.batch_item(i)?, corpus.image(t.style, t.content)?);
                sum.l1 += l1_metric(&gen, &target)?;
                sum.rmse += rmse_metric(&gen, &target)?;
                sum.pdar += pdar_metric(&gen, &target)?;
            }
        }
        let n = set.len() as f64;
        rows.push((
            cell,
            Metrics {
                l1: sum.l1 / n,
                rmse: sum.rmse / n,
                pdar: sum.pdar / n,
            },
        ));
    }
    Ok(EvalReport { rows })
}

/// Parameters, batch-norm running statistics and the architecture.
pub fn model_checkpoint(net: &FontNet) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    let c = &net.config;
    let meta = vec![c.image_size as f64, c.r as f64, c.base_channels as f64, f64::from(u8::from(c.skips))];
    ck.insert("meta.config", Tensor::new(vec![4], meta)?)?;
    for (name, t) in net.params.iter() {
        ck.insert(format!("param.{name}"), t.clone())?;
    }
    for (name, s) in &net.buffers.layers {
        ck.insert(format!("bn.{name}.mean"), Tensor::new(vec![s.channels()], s.mean.clone())?)?;
        ck.insert(format!("bn.{name}.var"), Tensor::new(vec![s.channels()], s.var.clone())?)?;
    }
    Ok(ck)
}

/// Rebuilds a network from [`model_checkpoint`] output. Every parameter
/// and running statistic must be present with the expected shape.
pub fn restore_model(ck: &Checkpoint) -> Result<FontNet> {
    let meta = ck.get("meta.config")?.data();
    let field = |i: usize| -> Result<usize> {
        match meta.get(i) {
            Some(&v) if v >= 0.0 && v.fract() == 0.0 => Ok(v as usize),
            _ => Err(Error::Data(format!("meta.config has no valid field {i}"))),
        }
    };
    let mut config = FontNetConfig::new(field(0)?, field(1)?, field(2)?)?;
    config.skips = field(3)? != 0;
    let mut net = FontNet::new(config, 0)?;
    let stored = ck.with_prefix("param.").count();
    if stored != net.params.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {stored} parameters, the architecture has {}",
            net.params.len()
        )));
    }
    for (name, p) in net.params.iter_mut() {
        let t = ck.get(&format!("param.{name}"))?;
        if t.shape() != p.shape() {
            return Err(Error::Data(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), p.shape())));
        }
        p.data_mut().copy_from_slice(t.data());
    }
    for (name, s) in net.buffers.layers.iter_mut() {
        let mean = ck.get(&format!("bn.{name}.mean"))?.data();
        let var = ck.get(&format!("bn.{name}.var"))?.data();
        if mean.len() != s.channels() || var.len() != s.channels() {
            return Err(Error::Data(format!("running statistics of `{name}` have the wrong width")));
        }
        *s = RunningStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
        };
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph::build_eval_sets;

    fn tiny() -> (Corpus, FontNet) {
        let corpus = Corpus::render(8, 8, 16, 3).unwrap();
        let net = FontNet::new(FontNetConfig::new(16, 2, 2).unwrap(), 1).unwrap();
        (corpus, net)
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn log_lines_and_step_count() {
        let (corpus, net) = tiny();
        let cfg = TrainConfig {
            steps: 3,
            batch: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(net, cfg).unwrap();
        let mut seen = Vec::new();
        t.train(&corpus, |e| seen.push(e.step)).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(t.steps_done(), 3);
        let line = t.log[1].csv();
        assert_eq!(line.split(',').count(), 3);
        assert!(line.starts_with("1,"));
    }

    #[test]
    fn model_checkpoint_restores_exactly() {
        let (corpus, net) = tiny();
        let mut t = Trainer::new(net, TrainConfig::default()).unwrap();
        t.step(&corpus).unwrap();
        let ck = model_checkpoint(&t.net).unwrap();
        let back = restore_model(&Checkpoint::decode(&ck.encode()).unwrap()).unwrap();
        assert_eq!(back.params, t.net.params);
        assert_eq!(back.config, t.net.config);
        assert_eq!(ck.with_prefix("param.").count(), t.net.params.len());
    }

    #[test]
    fn evaluate_reports_every_cell_and_rejects_empty_suites() {
        let (corpus, net) = tiny();
        let mut suites = build_eval_sets(&corpus.partition, 2, 0, 3).unwrap();
        let report = evaluate(&net, &corpus, &suites).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(report.csv().starts_with("set,l1,rmse,pdar\nD1,"));
        suites.sets[2].clear();
        assert!(evaluate(&net, &corpus, &suites).is_err());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let corpus = Corpus::render(8, 8, 20, 3).unwrap();
        let net = FontNet::new(FontNetConfig::new(16, 2, 2).unwrap(), 1).unwrap();
        let mut t = Trainer::new(net, TrainConfig::default()).unwrap();
        assert!(t.step(&corpus).is_err());
    }
}
