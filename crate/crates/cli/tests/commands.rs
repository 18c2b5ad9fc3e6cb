use std::fs;
use std::path::{Path, PathBuf};

use csanet::data::{BoundingBox, Dataset, Difficulty, Split};
use csanet_cli::checkpoint::Checkpoint;
use csanet_cli::cli::run;
use csanet_cli::commands::{cmd_eval, cmd_gen_data, cmd_predict, cmd_train, EvalData, GenDataArgs};
use csanet_cli::config::RunConfig;
use csanet_cli::trainer::{Trainer, LAST_CHECKPOINT};
use csanet_cli::CliError;

fn quick_config(out: &Path, extra: &str) -> RunConfig {
    let text = format!(
        "optim.epochs = 2\noptim.milestones = 1\noptim.batch_size = 4\n\
         data.train_size = 8\ndata.val_size = 4\ndata.augment = true\n\
         eval.interval = 1\nio.checkpoint_interval = 1\nio.out = {}\n{extra}",
        out.display()
    );
    RunConfig::parse(&text).unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, cfg.to_text()).unwrap();
    path.to_str().unwrap().to_string()
}

fn log_lines(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("train.log"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|t| t.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in `{line}`"))
        .parse()
        .unwrap()
}

fn gen_args(n: usize) -> GenDataArgs {
    GenDataArgs {
        n,
        seed: 21,
        split: Split::Train,
        difficulty: Difficulty::Occluded,
        input_size: (128, 96),
        augment: false,
    }
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cmd_gen_data(&gen_args(5), &a).unwrap();
    cmd_gen_data(&gen_args(5), &b).unwrap();
    let manifest = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    assert_eq!(
        manifest,
        fs::read_to_string(b.join("manifest.jsonl")).unwrap()
    );
    for i in 0..5 {
        for rel in [
            format!("annotations/{i:06}.json"),
            format!("images/{i:06}.ppm"),
        ] {
            assert_eq!(
                fs::read(a.join(&rel)).unwrap(),
                fs::read(b.join(&rel)).unwrap(),
                "{rel}"
            );
        }
    }
    let other = tmp.path().join("c");
    cmd_gen_data(
        &GenDataArgs {
            seed: 22,
            ..gen_args(5)
        },
        &other,
    )
    .unwrap();
    assert_ne!(
        fs::read(a.join("images/000000.ppm")).unwrap(),
        fs::read(other.join("images/000000.ppm")).unwrap()
    );
}

#[test]
fn generated_directory_feeds_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let written = cmd_gen_data(&gen_args(6), &data).unwrap();
    assert_eq!(Dataset::load(&data).unwrap().samples, written.samples);
    let out = tmp.path().join("run");
    let extra = format!(
        "data.train_dir = {}\noptim.epochs = 1\noptim.milestones =\n",
        data.display()
    );
    let summary = cmd_train(quick_config(&out, &extra), None, &mut |_| {}).unwrap();
    assert_eq!(summary.state.global_step, 2);
    assert!(out.join(LAST_CHECKPOINT).exists());

    let wrong = format!("{extra}model.input_size = 256x192\n");
    let err = cmd_train(
        quick_config(&tmp.path().join("bad"), &wrong),
        None,
        &mut |_| {},
    );
    assert!(matches!(err, Err(CliError::Usage(_))), "{err:?}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    cmd_train(quick_config(&full, ""), None, &mut |_| {}).unwrap();
    let resumed = tmp.path().join("resumed");
    let mid = full.join("checkpoint-e0001.bin");
    let summary = cmd_train(quick_config(&resumed, ""), Some(&mid), &mut |_| {}).unwrap();
    assert_eq!(summary.state.global_step, 4);

    let a = Checkpoint::load(&full.join(LAST_CHECKPOINT)).unwrap();
    let b = Checkpoint::load(&resumed.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.params, b.params);
    assert_eq!(a.buffers, b.buffers);
    let full_log = log_lines(&full);
    let tail = log_lines(&resumed);
    assert_eq!(full_log[full_log.len() - tail.len()..], tail[..]);
    assert!(tail[0].starts_with("step=2 "), "{}", tail[0]);
    assert_eq!(
        fs::read(full.join("val_report.json")).unwrap(),
        fs::read(resumed.join("val_report.json")).unwrap()
    );
}

#[test]
fn resume_rejects_changed_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    cmd_train(quick_config(&out, ""), None, &mut |_| {}).unwrap();
    let ck = Checkpoint::load(&out.join("checkpoint-e0001.bin")).unwrap();
    let changed = quick_config(&out, "optim.lr = 0.01\nmodel.feature_width = 8\n");
    match Trainer::resume(changed, &ck) {
        Err(CliError::Incompatible(diffs)) => {
            assert_eq!(diffs.len(), 2, "{diffs:?}");
            assert!(diffs.iter().any(|d| d.contains("optim.lr")));
            assert!(diffs.iter().any(|d| d.contains("model.feature_width")));
        }
        other => panic!("expected incompatibility, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn milestone_drops_learning_rate_tenfold() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    cmd_train(quick_config(&out, ""), None, &mut |_| {}).unwrap();
    let lrs: Vec<f64> = log_lines(&out)
        .iter()
        .filter(|l| l.starts_with("step="))
        .map(|l| field(l, "lr"))
        .collect();
    assert_eq!(lrs.len(), 4);
    assert_eq!(lrs[0], 1e-3);
    assert_eq!(lrs[1], 1e-3);
    assert_eq!(lrs[2], 1e-3 * 0.1);
    assert_eq!(lrs[3], lrs[2]);
}

#[test]
fn eval_is_repeatable_and_flip_keeps_the_report_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let cfg = quick_config(&run_dir, "");
    cmd_train(cfg.clone(), None, &mut |_| {}).unwrap();
    let ckpt = run_dir.join(LAST_CHECKPOINT);
    let data = EvalData::Generated(Split::Val);
    let (a, b, f) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("f"),
    );
    let ra = cmd_eval(&ckpt, Some(&cfg), &data, false, &a).unwrap();
    let rb = cmd_eval(&ckpt, Some(&cfg), &data, false, &b).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(
        fs::read(a.join("eval.json")).unwrap(),
        fs::read(b.join("eval.json")).unwrap()
    );
    let rf = cmd_eval(&ckpt, Some(&cfg), &data, true, &f).unwrap();
    assert_eq!(rf.instances, ra.instances);
    assert!(rf.ap.is_finite());
    let keys = |dir: &Path| -> Vec<String> {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
        v.as_object().unwrap().keys().cloned().collect()
    };
    assert_eq!(keys(&a), keys(&f));
    assert!(fs::read_to_string(f.join("eval.txt"))
        .unwrap()
        .starts_with("AP="));
}

#[test]
fn eval_rejects_a_mismatched_model_config() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let cfg = quick_config(&run_dir, "");
    cmd_train(cfg.clone(), None, &mut |_| {}).unwrap();
    let other = quick_config(&run_dir, "model.hhp_depth = 2\n");
    let cfg_path = write_config(tmp.path(), &other);
    let ckpt = run_dir.join(LAST_CHECKPOINT);
    let args = [
        "csanet",
        "--config",
        &cfg_path,
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ];
    assert_eq!(run(args), 1);
}

fn trained_on(dir: &Path, data: &Path, steps_extra: &str) -> PathBuf {
    let out = dir.join("model");
    let extra = format!(
        "data.train_dir = {}\ndata.augment = false\noptim.milestones =\n{steps_extra}",
        data.display()
    );
    cmd_train(quick_config(&out, &extra), None, &mut |_| {}).unwrap();
    out.join(LAST_CHECKPOINT)
}

#[test]
fn predict_is_deterministic_and_handles_border_boxes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_gen_data(&gen_args(2), &data).unwrap();
    let ckpt = trained_on(tmp.path(), &data, "optim.epochs = 1\n");
    let image = data.join("images/000000.ppm");
    let bbox = BoundingBox::new(-20.0, 60.0, 70.0, 90.0);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let pa = cmd_predict(&ckpt, None, &image, bbox, false, true, &a).unwrap();
    let pb = cmd_predict(&ckpt, None, &image, bbox, false, true, &b).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(pa.keypoints.len(), 17);
    assert!(pa
        .keypoints
        .iter()
        .all(|k| k.x.is_finite() && k.y.is_finite()));
    assert_eq!(fs::read_dir(a.join("heatmaps")).unwrap().count(), 17);
    assert_eq!(
        fs::read(a.join("prediction.json")).unwrap(),
        fs::read(b.join("prediction.json")).unwrap()
    );
    let missing = tmp.path().join("nope.bin");
    let args = [
        "csanet",
        "predict",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--box",
        "0,0,10,10",
    ];
    assert_eq!(run(args), 1);
}

#[test]
fn overfit_model_predicts_within_four_pixels() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ds = cmd_gen_data(
        &GenDataArgs {
            difficulty: Difficulty::Easy,
            ..gen_args(1)
        },
        &data,
    )
    .unwrap();
    let ckpt = trained_on(
        tmp.path(),
        &data,
        "optim.epochs = 300\noptim.batch_size = 1\neval.interval = 0\n\
         io.checkpoint_interval = 0\ndata.val_size = 0\n",
    );
    let sample = &ds.samples[0];
    let bbox = BoundingBox::new(0.0, 0.0, sample.width() as f64, sample.height() as f64);
    let out = tmp.path().join("pred");
    let p = cmd_predict(
        &ckpt,
        None,
        &data.join("images/000000.ppm"),
        bbox,
        false,
        false,
        &out,
    )
    .unwrap();
    let (mut total, mut count) = (0.0, 0.0);
    for (k, rec) in p.keypoints.iter().enumerate() {
        if sample.keypoints.labeled(k) {
            let gt = sample.keypoints.coords[k];
            total += (rec.x - gt.x).hypot(rec.y - gt.y);
            count += 1.0;
        }
    }
    let mean = total / count;
    assert!(mean < 4.0, "mean error {mean} px");
}

#[test]
fn twenty_samples_three_hundred_steps_cut_the_loss_tenfold() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let extra = "data.train_size = 20\ndata.augment = false\noptim.epochs = 60\n\
                 optim.milestones =\neval.interval = 0\nio.checkpoint_interval = 0\n\
                 data.val_size = 0\n";
    let summary = cmd_train(quick_config(&out, extra), None, &mut |_| {}).unwrap();
    assert_eq!(summary.state.global_step, 300);
    let first = summary.first_loss.unwrap().l_total;
    let last = summary.last_loss.unwrap().l_total;
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn gradcheck_exit_codes() {
    assert_eq!(run(["csanet", "gradcheck", "--micro-config"]), 0);
    assert_eq!(run(["csanet", "gradcheck", "--corrupt"]), 2);
}
