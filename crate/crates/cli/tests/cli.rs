use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
train.batch_size = 128
train.n_samples = 8
train.knn_k = 3
train.n_intervals = 24
train.checkpoint_every = 10
schedule.initial_period = 4
schedule.final_period = 2
schedule.total_iterations = 20
field.density_res = 8
field.color_res = 4
field.n_features = 2
field.hidden = 4
data.n_views = 3
data.heldout_views = 1
data.image_size = 12
";

fn surfreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surfreg")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn sample_prints_one_row_per_direction() {
    let o = surfreg(&["sample", "--n", "16", "--rotate-seed", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "i,dir_x,dir_y,dir_z,radius,ball_x,ball_y,ball_z");
    assert_eq!(lines.count(), 16);
}

#[test]
fn sample_rejects_non_power_of_two() {
    assert_eq!(surfreg(&["sample", "--n", "6"]).status.code(), Some(2));
}

#[test]
fn schedule_reports_total_regularized_steps() {
    let o = surfreg(&["schedule", "--initial", "512", "--final", "4", "--total", "25000"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let last = text.lines().filter(|l| !l.starts_with('#')).last().unwrap();
    assert_eq!(last.rsplit(',').next().unwrap(), "1558");
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.not_a_key = 1\n").unwrap();
    let out = dir.path().join("run");
    assert_eq!(surfreg(&["train", "--config", p(&cfg), "--out", p(&out)]).status.code(), Some(2));

    let ckpt = dir.path().join("junk.bin");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    assert_eq!(surfreg(&["eval", "--checkpoint", p(&ckpt)]).status.code(), Some(2));
    assert_eq!(surfreg(&["schedule", "--bogus"]).status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.cfg");
    std::fs::write(&cfg, format!("{TINY}train.lr_schedule = fixed\ntrain.lr_init = 1e300\n")).unwrap();
    let out = dir.path().join("run");
    let o = surfreg(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_eval_render_losses_flow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let o = surfreg(&["train", "--config", p(&cfg), "--out", p(&run), "--write-dataset"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["final.bin", "train_log.csv", "config.txt", "cameras.csv", "checkpoint_000010.bin"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);

    let ckpt = run.join("final.bin");
    let o = surfreg(&["eval", "--checkpoint", p(&ckpt), "--config", p(&cfg)]);
    assert!(o.status.success());
    assert!(!stdout(&o).is_empty());

    let cams = run.join("cameras.csv");
    let render = dir.path().join("render");
    let o = surfreg(&[
        "render", "--checkpoint", p(&ckpt), "--cameras", p(&cams), "--width", "12", "--height", "12", "--out",
        p(&render),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_dir(&render).unwrap().count() > 0);

    let dump = dir.path().join("batch.csv");
    let o = surfreg(&[
        "losses", "--checkpoint", p(&ckpt), "--cameras", p(&cams), "--width", "12", "--height", "12", "--config",
        p(&cfg), "--dump-batch", p(&dump),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().count() > 1);

    let tuned = dir.path().join("tuned");
    let o = surfreg(&[
        "train", "--config", p(&cfg), "--finetune", p(&ckpt), "--steps", "3", "--out", p(&tuned),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tuned.join("final.bin").exists());
}
