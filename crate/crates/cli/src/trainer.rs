//! The training loop: online augmentation, milestone schedule, periodic validation and
//! checkpointing. Every random draw comes from a generator seeded by counters, so a run
//! resumed from a checkpoint continues exactly as the uninterrupted one.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use csanet::codec::FlipPairs;
use csanet::data::{augment, make_dataset, Dataset, DatasetSpec, SampleRecord, Split};
use csanet::eval::{evaluate_model, EvalReport};
use csanet::loss::LossBreakdown;
use csanet::model::Network;
use csanet::tensor::ParamStore;
use csanet::train::{train_step, Batch};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::{diff_keys, RunConfig};
use crate::error::{CliError, CliResult};

const SHUFFLE_STREAM: u64 = 1 << 32;
const AUGMENT_STREAM: u64 = 2 << 32;

pub const LAST_CHECKPOINT: &str = "last.bin";

/// Network plus parameters built from a config.
pub fn build_model(cfg: &RunConfig) -> CliResult<(Network, ParamStore)> {
    let mut store = ParamStore::new();
    let net = Network::new(
        &cfg.model,
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    )?;
    Ok((net, store))
}

/// Loads a checkpoint into the network described by its config echo. When `expected` is
/// given, its model and loss keys must equal the echo.
pub fn load_model(
    path: &Path,
    expected: Option<&RunConfig>,
) -> CliResult<(RunConfig, Network, ParamStore, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let echo = RunConfig::parse(&ck.config)?;
    if let Some(cfg) = expected {
        check_echo(&ck.config, cfg, |k| {
            k.starts_with("model.") || k.starts_with("loss.")
        })?;
    }
    let (net, mut store) = build_model(&echo)?;
    ck.restore(&mut store)?;
    Ok((echo, net, store, ck))
}

fn check_echo(echo: &str, cfg: &RunConfig, keep: impl Fn(&str) -> bool) -> CliResult<()> {
    let diffs = diff_keys(echo, &cfg.to_text(), keep);
    if diffs.is_empty() {
        return Ok(());
    }
    Err(CliError::Incompatible(
        diffs
            .into_iter()
            .map(|(k, a, b)| format!("config {k}: checkpoint `{a}`, current `{b}`"))
            .collect(),
    ))
}

pub fn format_step(step: u64, l: &LossBreakdown, lr: f64) -> String {
    format!(
        "step={step} l_face={} l_upper={} l_lower={} l_body={} l_total={} lr={lr}",
        l.l_face, l.l_upper, l.l_lower, l.l_body, l.l_total
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub first_loss: Option<LossBreakdown>,
    pub last_loss: Option<LossBreakdown>,
    pub report: Option<EvalReport>,
    pub state: TrainState,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Network,
    pub store: ParamStore,
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub state: TrainState,
    order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> CliResult<Trainer> {
        cfg.validate()?;
        let (net, store) = build_model(&cfg)?;
        let (h, w) = cfg.model.input_size;
        let train = match &cfg.data.train_dir {
            Some(dir) => {
                let ds = Dataset::load(dir)?;
                if ds.spec.input_size != (h, w) {
                    return Err(CliError::Usage(format!(
                        "{}: crops are {}x{}, model input is {h}x{w}",
                        dir.display(),
                        ds.spec.input_size.0,
                        ds.spec.input_size.1
                    )));
                }
                ds.samples
            }
            None => {
                make_dataset(&DatasetSpec {
                    n: cfg.data.train_size,
                    seed: cfg.data.seed,
                    split: Split::Train,
                    difficulty: cfg.data.difficulty,
                    input_size: (h, w),
                    augment: None,
                })?
                .samples
            }
        };
        let val = if cfg.data.val_size == 0 {
            Vec::new()
        } else {
            make_dataset(&DatasetSpec {
                n: cfg.data.val_size,
                seed: cfg.data.seed,
                split: Split::Val,
                difficulty: cfg.data.difficulty,
                input_size: (h, w),
                augment: None,
            })?
            .samples
        };
        let state = TrainState {
            epoch: 0,
            global_step: 0,
            lr: cfg.lr_at(0),
            best_val_ap: None,
            seed: cfg.seed,
        };
        Ok(Trainer {
            cfg,
            net,
            store,
            train,
            val,
            state,
            order: None,
        })
    }

    /// Continues from `ck`; every config key except `io.*` must match its echo.
    pub fn resume(cfg: RunConfig, ck: &Checkpoint) -> CliResult<Trainer> {
        check_echo(&ck.config, &cfg, |k| !k.starts_with("io."))?;
        let mut t = Trainer::new(cfg)?;
        ck.restore(&mut t.store)?;
        t.state = ck.state;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.optim.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.optim.epochs as u64
    }

    pub fn is_finished(&self) -> bool {
        self.state.global_step >= self.total_steps()
    }

    /// Sample visiting order for `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(SHUFFLE_STREAM | epoch as u64);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Sample `i` as seen in `epoch`, freshly augmented when augmentation is on.
    pub fn training_sample(&self, i: usize, epoch: usize) -> CliResult<SampleRecord> {
        let s = &self.train[i];
        let Some(aug) = &self.cfg.data.augment else {
            return Ok(s.clone());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(
            s.meta.seed ^ self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        rng.set_stream(AUGMENT_STREAM | epoch as u64);
        Ok(augment(s, &mut rng, aug, &FlipPairs::coco())?)
    }

    fn batch_at(&mut self, step: u64) -> CliResult<Batch> {
        let spe = self.steps_per_epoch();
        let epoch = (step / spe) as usize;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, self.epoch_order(epoch)));
        }
        let order = &self.order.as_ref().expect("set above").1;
        let bs = self.cfg.optim.batch_size;
        let start = (step % spe) as usize * bs;
        let idx: Vec<usize> = order[start..(start + bs).min(order.len())].to_vec();
        let samples = idx
            .into_iter()
            .map(|i| self.training_sample(i, epoch))
            .collect::<CliResult<Vec<_>>>()?;
        let refs: Vec<&SampleRecord> = samples.iter().collect();
        Ok(Batch::from_samples(&refs, &self.net)?)
    }

    /// One optimizer step at the current position; returns the loss before the update.
    pub fn step(&mut self) -> CliResult<LossBreakdown> {
        let step = self.state.global_step;
        let epoch = (step / self.steps_per_epoch()) as usize;
        let lr = self.cfg.lr_at(epoch);
        let batch = self.batch_at(step)?;
        let loss = train_step(&self.net, &mut self.store, &batch, lr, &self.cfg.optim.adam)?;
        self.state.global_step += 1;
        self.state.lr = lr;
        if self.state.global_step.is_multiple_of(self.steps_per_epoch()) {
            self.state.epoch = epoch + 1;
        }
        Ok(loss)
    }

    pub fn validate(&self) -> CliResult<Option<EvalReport>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let (report, _) = evaluate_model(
            &self.net,
            &self.store,
            &self.val,
            &self.cfg.model,
            self.cfg.eval.flip_test,
            self.cfg.eval.batch_size,
        )?;
        Ok(Some(report))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.cfg.to_text(), self.state, &self.store)
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.io.out
    }

    pub fn numbered_checkpoint(&self, epoch: usize) -> PathBuf {
        self.out_dir().join(format!("checkpoint-e{epoch:04}.bin"))
    }

    /// Trains to the end of the schedule, appending to `train.log` in the output directory
    /// and mirroring each line to `echo`.
    pub fn run(&mut self, echo: &mut dyn FnMut(&str)) -> CliResult<TrainSummary> {
        let out = self.out_dir().to_path_buf();
        fs::create_dir_all(&out)?;
        fs::write(out.join("config.cfg"), self.cfg.to_text())?;
        let log_file = if self.state.global_step == 0 {
            File::create(out.join("train.log"))?
        } else {
            OpenOptions::new()
                .append(true)
                .create(true)
                .open(out.join("train.log"))?
        };
        let mut log = BufWriter::new(log_file);
        let mut emit = |line: String, log: &mut BufWriter<File>| -> CliResult<()> {
            writeln!(log, "{line}")?;
            echo(&line);
            Ok(())
        };
        let mut first = None;
        let mut last = None;
        let mut report = None;
        let total = self.total_steps();
        let spe = self.steps_per_epoch();
        while self.state.global_step < total {
            let step = self.state.global_step;
            let loss = self.step()?;
            first.get_or_insert(loss);
            last = Some(loss);
            if step.is_multiple_of(self.cfg.io.log_interval as u64) || step + 1 == total {
                emit(format_step(step, &loss, self.state.lr), &mut log)?;
            }
            if !self.state.global_step.is_multiple_of(spe) {
                continue;
            }
            let epoch = self.state.epoch;
            let final_epoch = epoch == self.cfg.optim.epochs;
            let interval = self.cfg.eval.interval;
            if final_epoch || (interval > 0 && epoch.is_multiple_of(interval)) {
                if let Some(r) = self.validate()? {
                    if self.state.best_val_ap.is_none_or(|b| r.ap > b) {
                        self.state.best_val_ap = Some(r.ap);
                    }
                    emit(format!("epoch={epoch} val {}", r.summary()), &mut log)?;
                    report = Some(r);
                }
            }
            let ck = self.checkpoint();
            let ci = self.cfg.io.checkpoint_interval;
            if ci > 0 && epoch.is_multiple_of(ci) {
                ck.save(&self.numbered_checkpoint(epoch))?;
            }
            ck.save(&out.join(LAST_CHECKPOINT))?;
            log.flush()?;
        }
        log.flush()?;
        if let Some(r) = &report {
            crate::commands::write_report(r, &out, "val_report")?;
        }
        Ok(TrainSummary {
            first_loss: first,
            last_loss: last,
            report,
            state: self.state,
        })
    }
}
