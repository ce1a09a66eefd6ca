use std::path::Path;
use std::process::{Command, Output};

fn memdistill(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memdistill"))
        .args(args)
        .current_dir(dir)
        .env("MEMDISTILL_THREADS", "2")
        .output()
        .expect("spawn memdistill")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn distill_eval_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = [
        "distill", "--dataset", "toy", "--ipc", "1", "--bases", "4", "--downsample", "2", "--inner-steps", "50",
        "--iters", "300", "--seed", "7", "--out", "m.ddam",
    ];
    let o = memdistill(d, &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["m.ddam", "m.loss.csv", "m.config.json"] {
        assert!(d.join(f).exists(), "missing {}", f);
    }
    let trace = std::fs::read_to_string(d.join("m.loss.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iteration,loss,wallclock_s"));
    assert_eq!(lines.count(), 300);

    let o = memdistill(d, &["eval", "--artifact", "m.ddam", "--retrains", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("accuracy")).unwrap();
    let nums: Vec<f64> = line
        .split(|c: char| !(c.is_ascii_digit() || c == '.'))
        .filter_map(|s| s.parse().ok())
        .collect();
    assert!(nums[0] > 0.0 && nums[0] <= 100.0, "{}", line);
    assert!(nums[1] >= 0.0, "{}", line);
    assert_eq!(nums[2], 5.0, "{}", line);
    let csv = std::fs::read_to_string(d.join("m.eval.csv")).unwrap();
    assert!(csv.starts_with("source,dataset,ipc,seed,eval_steps,eval_lr,mean,std,n_models"));
    assert!(d.join("m.eval.md").exists());

    // the resolved config reproduces the artifact
    let o = memdistill(d, &["distill", "--config", "m.config.json", "--out", "again.ddam"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(d.join("m.ddam")).unwrap(), std::fs::read(d.join("again.ddam")).unwrap());
}

#[test]
fn analyze_two_class_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("two.json"), r#"{"dataset": {"name": "toy", "toy": {"classes": 2}}}"#).unwrap();
    let o = memdistill(
        d,
        &[
            "distill", "--config", "two.json", "--bases", "2", "--downsample", "2", "--inner-steps", "5", "--iters",
            "20", "--out", "two.ddam",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = memdistill(
        d,
        &["analyze", "--artifact", "two.ddam", "--sim-out", "sim.csv", "--bases-out", "b.pgm", "--recall-out", "rec"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sim = std::fs::read_to_string(d.join("sim.csv")).unwrap();
    let rows: Vec<Vec<&str>> = sim.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0], vec!["", "class_0", "class_1"]);
    assert_eq!(rows[1][1], "1");
    assert_eq!(rows[2][2], "1");
    assert_eq!(rows[1][2], rows[2][1]);
    assert!(std::fs::read(d.join("b.pgm")).unwrap().starts_with(b"P5"));
    assert!(d.join("rec_class0.pgm").exists() && d.join("rec_class1.pgm").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(memdistill(d, &["--help"]).status.code(), Some(0));
    assert_eq!(memdistill(d, &["distill", "--bogus"]).status.code(), Some(1));
    assert_eq!(memdistill(d, &["distill", "--downsample", "3"]).status.code(), Some(1));
    assert_eq!(memdistill(d, &["distill", "--momentum-mode", "half"]).status.code(), Some(1));
    assert_eq!(memdistill(d, &[]).status.code(), Some(1));

    let o = memdistill(d, &["eval", "--artifact", "missing.ddam"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data-io"), "{}", stderr(&o));

    // 4 bases of 16 floats each fill the whole 64-float budget
    let o = memdistill(d, &["distill", "--bases", "4", "--downsample", "1", "--iters", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("memory: budget"), "{}", stderr(&o));

    let o = memdistill(d, &["distill", "--dataset", "nope", "--iters", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data-io"), "{}", stderr(&o));
}

#[test]
fn ablate_and_cl_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = memdistill(
        d,
        &[
            "ablate", "--bases", "4", "--downsample", "2", "--model", "linear", "--iters", "3", "--steps", "1,3",
            "--modes", "none,full", "--retrains", "1", "--eval-steps", "20", "--out", "ab",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("ab.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("momentum,steps,downsample,addressing,K,r,mean,std"));

    let o = memdistill(
        d,
        &[
            "cl", "--tasks", "2", "--per-task", "100", "--capacity", "20", "--bases", "4", "--model", "linear",
            "--inner-steps", "3", "--batch", "20", "--final-iters", "5", "--retrains", "1", "--eval-steps", "20",
            "--out", "cl",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("cl.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("task,accuracy"));
    assert_eq!(csv.lines().count(), 3);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("cl.json")).unwrap()).unwrap();
    assert!(json["online"]["ra"].is_number());
    assert!(json["compress_then_recall"]["ra"].is_number());
}
