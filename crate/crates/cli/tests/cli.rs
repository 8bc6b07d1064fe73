use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn chase(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_chase")).args(args).output().expect("spawn chase");
    assert!(
        out.status.success(),
        "chase {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const DATA: &str = "source_train = 3\nsource_val = 1\nsource_test = 1\ntarget_train = 3\ntarget_val = 1\n\
target_test = 2\nshape = [8, 16, 16]\ncavity_prob = 1.0\n";

const TRAIN: &str = "channels = [2, 3, 3, 3, 3]\ndisc_features = 2\npretrain_epochs = 1\n\
pretrain_steps_per_epoch = 2\npretrain_batch = 2\nchase_epochs = 1\nsteps_per_epoch = 2\nlabeled_batch = 2\n\
unlabeled_batch = 2\nfinetune_epochs = 1\n";

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("data.toml"), DATA).unwrap();
    fs::write(root.join("train.toml"), TRAIN).unwrap();
    let data = root.join("data");
    let cfg = root.join("train.toml");

    chase(&["gen-data", "--config", p(&root.join("data.toml")), "--out", p(&data)]);
    assert!(data.join("data.toml").exists());

    let pre = root.join("pre");
    chase(&["pretrain", "--data", p(&data), "--config", p(&cfg), "--out", p(&pre)]);
    let pre_ck = pre.join("checkpoints/pretrain.json");
    assert!(pre_ck.exists());

    let joint = root.join("joint");
    chase(&["train", "--data", p(&data), "--config", p(&cfg), "--checkpoint", p(&pre_ck), "--out", p(&joint)]);
    let joint_ck = joint.join("checkpoints/chase.json");
    assert!(joint_ck.exists());
    assert!(fs::read_to_string(joint.join("chase_loss.csv")).unwrap().starts_with("step,L_seg,L_cons,L_adv,L_d,total"));

    let holes = root.join("holes");
    chase(&["build-holes", "--data", p(&data), "--checkpoint", p(&joint_ck), "--out", p(&holes)]);

    let fine = root.join("fine");
    chase(&[
        "finetune", "--data", p(&data), "--config", p(&cfg), "--checkpoint", p(&joint_ck), "--holes", p(&holes),
        "--out", p(&fine),
    ]);
    let fine_ck = fine.join("checkpoints/finetune.json");
    assert!(fine_ck.exists());

    let ev_a = root.join("eval_a");
    let out = chase(&["eval", "--data", p(&data), "--checkpoint", p(&joint_ck), "--out", p(&ev_a)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("chase"));
    let ev_b = root.join("eval_b");
    chase(&[
        "eval", "--data", p(&data), "--checkpoint", p(&fine_ck), "--mode", "all", "--mode", "V", "--name", "fine",
        "--out", p(&ev_b),
    ]);
    let rows_b = fs::read_to_string(ev_b.join("metrics.csv")).unwrap();
    assert_eq!(rows_b.lines().count(), 1 + 2 * 2);

    let merged = root.join("merged");
    chase(&["report", p(&ev_a), p(&ev_b), "--out", p(&merged)]);
    let rows_a = fs::read_to_string(ev_a.join("metrics.csv")).unwrap();
    let rows = fs::read_to_string(merged.join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), rows_a.lines().count() + rows_b.lines().count() - 1);
    for f in ["summary.csv", "boxplot.csv", "skipped.csv", "summary.txt"] {
        assert!(merged.join(f).exists(), "{f}");
    }
}

#[test]
fn pretrained_checkpoints_are_refused_by_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("data.toml"), DATA).unwrap();
    fs::write(root.join("train.toml"), TRAIN).unwrap();
    let data = root.join("data");
    chase(&["gen-data", "--config", p(&root.join("data.toml")), "--out", p(&data)]);
    let pre = root.join("pre");
    chase(&["pretrain", "--data", p(&data), "--config", p(&root.join("train.toml")), "--out", p(&pre)]);
    let out = Command::new(env!("CARGO_BIN_EXE_chase"))
        .args([
            "finetune", "--data", p(&data), "--checkpoint", p(&pre.join("checkpoints/pretrain.json")), "--holes",
            p(&root.join("none")), "--out", p(&root.join("f")),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("joint-training checkpoint"));
}

#[test]
fn unknown_config_keys_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "segg_lr = 1.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_chase"))
        .args(["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("d"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
