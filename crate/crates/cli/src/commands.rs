//! Subcommand bodies, callable without going through argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use csanet::codec::{export_heatmaps, KEYPOINT_NAMES};
use csanet::data::{
    crop_to_aspect, load_image, make_dataset, AugmentConfig, BoundingBox, Dataset, DatasetSpec,
    Difficulty, SampleRecord, Split,
};
use csanet::eval::{evaluate_model, infer_heatmaps, predict_from_heatmaps, EvalReport};
use csanet::gradcheck::{check_network, negative_control, op_suite, CheckOutcome, GradCheckConfig};
use csanet::model::ModelConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::trainer::{load_model, TrainSummary, Trainer};

/// Writes `<stem>.json` (machine-readable) and `<stem>.txt` (one summary line).
pub fn write_report(r: &EvalReport, dir: &Path, stem: &str) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(r)? + "\n",
    )?;
    fs::write(dir.join(format!("{stem}.txt")), r.summary() + "\n")?;
    Ok(())
}

/// Trains from scratch, or continues from `resume`.
pub fn cmd_train(
    cfg: RunConfig,
    resume: Option<&Path>,
    echo: &mut dyn FnMut(&str),
) -> CliResult<TrainSummary> {
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg, &Checkpoint::load(path)?)?,
        None => Trainer::new(cfg)?,
    };
    trainer.run(echo)
}

/// Which samples `eval` scores.
#[derive(Debug, Clone)]
pub enum EvalData {
    /// A directory written by `gen-data`.
    Dir(PathBuf),
    /// The generated split described by the run config, without augmentation.
    Generated(Split),
}

pub fn eval_samples(cfg: &RunConfig, data: &EvalData) -> CliResult<Vec<SampleRecord>> {
    Ok(match data {
        EvalData::Dir(dir) => Dataset::load(dir)?.samples,
        EvalData::Generated(split) => {
            let n = match split {
                Split::Train => cfg.data.train_size,
                Split::Val => cfg.data.val_size,
            };
            make_dataset(&DatasetSpec {
                n,
                seed: cfg.data.seed,
                split: *split,
                difficulty: cfg.data.difficulty,
                input_size: cfg.model.input_size,
                augment: None,
            })?
            .samples
        }
    })
}

/// Scores a checkpoint and writes `eval.json` / `eval.txt` into `out`.
pub fn cmd_eval(
    checkpoint: &Path,
    expected: Option<&RunConfig>,
    data: &EvalData,
    flip_test: bool,
    out: &Path,
) -> CliResult<EvalReport> {
    let (cfg, net, store, _) = load_model(checkpoint, expected)?;
    let samples = eval_samples(expected.unwrap_or(&cfg), data)?;
    if samples
        .iter()
        .any(|s| (s.height(), s.width()) != cfg.model.input_size)
    {
        return Err(CliError::Usage(format!(
            "evaluation crops do not match the model input {}x{}",
            cfg.model.input_size.0, cfg.model.input_size.1
        )));
    }
    let (report, _) = evaluate_model(
        &net,
        &store,
        &samples,
        &cfg.model,
        flip_test,
        cfg.eval.batch_size,
    )?;
    write_report(&report, out, "eval")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Keypoints in source-image pixels for one person box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image: String,
    /// `[x, y, w, h]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub keypoints: Vec<KeypointRecord>,
}

/// Crops `bbox` out of `image`, runs the network and maps the decoded keypoints back
/// through the inverse crop transform. Writes `prediction.json` (and the heatmaps as
/// `heatmaps/*.pgm` when asked) into `out`.
pub fn cmd_predict(
    checkpoint: &Path,
    expected: Option<&RunConfig>,
    image: &Path,
    bbox: BoundingBox,
    flip_test: bool,
    dump_heatmaps: bool,
    out: &Path,
) -> CliResult<PredictionRecord> {
    let (cfg, net, store, _) = load_model(checkpoint, expected)?;
    let pixels = load_image(image)?;
    let (h, w) = cfg.model.input_size;
    let crop = crop_to_aspect(&SampleRecord::unlabeled(pixels, bbox), &bbox, h, w)?;
    let maps = infer_heatmaps(&net, &store, &crop.image, flip_test)?;
    let pred = predict_from_heatmaps(&maps, 0, h, w)?;
    let back = crop.meta.transform.inverse()?;
    let keypoints = pred
        .keypoints
        .coords
        .iter()
        .zip(pred.scores)
        .zip(KEYPOINT_NAMES)
        .map(|((&p, score), name)| {
            let q = back.apply(p);
            KeypointRecord {
                name: name.to_string(),
                x: q.x,
                y: q.y,
                score,
            }
        })
        .collect();
    let record = PredictionRecord {
        image: image.display().to_string(),
        bbox: [bbox.x, bbox.y, bbox.w, bbox.h],
        score: pred.score,
        keypoints,
    };
    fs::create_dir_all(out)?;
    fs::write(
        out.join("prediction.json"),
        serde_json::to_string_pretty(&record)? + "\n",
    )?;
    if dump_heatmaps {
        export_heatmaps(&maps, 0, &out.join("heatmaps"))?;
    }
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct GradcheckRow {
    pub outcome: CheckOutcome,
    /// The negative control is expected to fail.
    pub expect_pass: bool,
}

impl GradcheckRow {
    pub fn ok(&self) -> bool {
        self.outcome.passed == self.expect_pass
    }

    pub fn line(&self) -> String {
        let status = match (self.ok(), self.expect_pass) {
            (true, true) => "PASS",
            (true, false) => "PASS (fails as expected)",
            (false, true) => "FAIL",
            (false, false) => "FAIL (control was not caught)",
        };
        format!(
            "{:<40} max_rel_err={:.3e} checks={:<5} {status}",
            self.outcome.name, self.outcome.max_rel_error, self.outcome.comparisons
        )
    }
}

/// Finite-difference checks of every tape op and of the micro network on a 32×32 input,
/// plus the corrupted-backward control. With `corrupt`, the control is checked as if it
/// were a real op, so the run must fail.
pub fn cmd_gradcheck(seed: u64, corrupt: bool) -> CliResult<Vec<GradcheckRow>> {
    let cfg = GradCheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<GradcheckRow> = op_suite(&cfg, &mut rng)?
        .into_iter()
        .map(|outcome| GradcheckRow {
            outcome,
            expect_pass: true,
        })
        .collect();
    rows.push(GradcheckRow {
        outcome: check_network(&ModelConfig::micro(), 32, 32, &cfg, &mut rng)?,
        expect_pass: true,
    });
    rows.push(GradcheckRow {
        outcome: negative_control(&cfg, &mut rng)?,
        expect_pass: corrupt,
    });
    Ok(rows)
}

pub fn gradcheck_verdict(rows: &[GradcheckRow]) -> CliResult<()> {
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.ok())
        .map(|r| r.outcome.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}

#[derive(Debug, Clone)]
pub struct GenDataArgs {
    pub n: usize,
    pub seed: u64,
    pub split: Split,
    pub difficulty: Difficulty,
    pub input_size: (usize, usize),
    pub augment: bool,
}

pub fn cmd_gen_data(args: &GenDataArgs, out: &Path) -> CliResult<Dataset> {
    let ds = make_dataset(&DatasetSpec {
        n: args.n,
        seed: args.seed,
        split: args.split,
        difficulty: args.difficulty,
        input_size: args.input_size,
        augment: args.augment.then(AugmentConfig::default),
    })?;
    ds.save(out)?;
    Ok(ds)
}
