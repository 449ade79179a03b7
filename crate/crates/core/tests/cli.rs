use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aspmcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aspmcp")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn run_dir(out: &Path, prefix: &str) -> std::path::PathBuf {
    fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .unwrap()
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n[train]\nbudjet = 5\n");
    let out = aspmcp(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budjet"));
}

#[test]
fn missing_required_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n[train]\nagent = \"scratch_mcp\"\n");
    let out = aspmcp(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.task"));

    let out = aspmcp(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`seed`"));

    let cfg = write_config(dir.path(), "seed = 1\n[train]\nagent = \"orchestrator\"\ntask = \"wall\"\n");
    let out = aspmcp(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.checkpoint"));
}

#[test]
fn unreadable_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = aspmcp(&[
        "coverage",
        "--seed",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
        "--checkpoint",
        dir.path().join("missing.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = aspmcp(&["gradcheck", "--seed", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let csv = fs::read_to_string(run_dir(dir.path(), "gradcheck-").join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn pretrain_then_train_eval_and_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let out_s = dir.path().to_str().unwrap();
    let cfg = write_config(
        dir.path(),
        "seed = 2\n\
         [pretrain]\nbudget_steps = 1000\nepisodes_per_iteration = 4\nhidden = [8]\n\
         [pretrain.alice_ppo]\nminibatch_size = 50\n\
         [pretrain.bob_ppo]\nminibatch_size = 50\n\
         [train]\nagent = \"orchestrator\"\ntask = \"box\"\nbudget_steps = 600\nn_envs = 2\n\
         hidden = [8]\neval_episodes = 3\n\
         [train.ppo]\nrollout_steps = 300\nminibatch_size = 100\n\
         [eval]\nepisodes = 2\n\
         [coverage]\nn_skills = 4\n",
    );
    let out = aspmcp(&["pretrain", "--config", &cfg, "--out", out_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pre = run_dir(dir.path(), "pretrain-");
    for f in ["initial.ckpt", "stage-010.ckpt", "stage-050.ckpt", "stage-100.ckpt", "primitives.ckpt", "curriculum.csv", "config.toml"] {
        assert!(pre.join(f).exists(), "{f}");
    }
    let prims = pre.join("primitives.ckpt");
    let stage = pre.join("stage-010.ckpt");

    let out = aspmcp(&["train", "--config", &cfg, "--out", out_s, "--checkpoint", prims.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train = run_dir(dir.path(), "train-");
    let results = fs::read_to_string(train.join("results.csv")).unwrap();
    assert!(results.lines().nth(1).unwrap().starts_with("orchestrator,box,2,3,"));
    assert!(train.join("agent.ckpt").exists());

    // the trained agent and the pretraining checkpoint both evaluate
    let agent = train.join("agent.ckpt");
    for ck in [agent.as_path(), stage.as_path()] {
        let out = aspmcp(&["eval", "--config", &cfg, "--out", out_s, "--checkpoint", ck.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let evals: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("eval-"))
        .collect();
    assert_eq!(evals.len(), 2);
    for e in evals {
        let text = fs::read_to_string(e.join("results.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 6);
    }

    let out = aspmcp(&["coverage", "--config", &cfg, "--out", out_s, "--checkpoint", stage.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cov = run_dir(dir.path(), "coverage-");
    let svg = fs::read_to_string(cov.join("coverage.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
}
