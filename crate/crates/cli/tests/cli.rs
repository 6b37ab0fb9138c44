use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phm_cli::report::RunReport;
use phm_cli::train::RunSummary;
use phm_core::allocator::{accounting, AllocationPlan, ModelManifest};
use phm_core::linalg::{kron2, Matrix, SeededRng};
use phm_core::model::{RunConfig, TaskConfig, ToyModelConfig, TrainConfig};
use phm_core::phm::{BasisSet, PhmOperator};
use phm_core::tensor_file::{self, DType, Tensor};

fn phm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phm")).args(args).env_remove("PHM_THREADS").output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn micro_config(dir: &Path) -> PathBuf {
    let cfg = RunConfig {
        model: ToyModelConfig::micro(),
        train: TrainConfig {
            task: TaskConfig { content_len: 3, noise: 0.1, finetune_samples: 40, val_fraction: 0.25 },
            batch_size: 4,
            steps_pretrain: 6,
            steps_a: 8,
            steps_b: 3,
            eval_every: 4,
            ..TrainConfig::default()
        },
    };
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn micro_plan(dir: &Path, config: &Path, k: &str) -> PathBuf {
    let p = dir.join(format!("plan_k{k}.json"));
    ok(&phm(&["allocate", "--config", s(config), "--k", k, "--out", s(&p)]));
    p
}

#[test]
fn project_in_subspace_and_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SeededRng::new(3);
    let cores = vec![rng.normal_matrix(3, 5, 1.0), rng.normal_matrix(3, 5, 1.0)];
    let w = PhmOperator::new(BasisSet::new(2).unwrap(), cores).unwrap().expand();
    let input = dir.path().join("w.phmt");
    tensor_file::write(&input, &Tensor::from_matrix(&w), DType::F64).unwrap();

    let out = dir.path().join("proj");
    ok(&phm(&["project", "--input", s(&input), "--bases", "2", "--out", s(&out)]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("projection.json")).unwrap()).unwrap();
    assert!(report["relative_error"].as_f64().unwrap() < 1e-9);

    // expand the written cores and project again
    let read = |d: &Path| -> Vec<Matrix> {
        (0..2).map(|b| tensor_file::read(&d.join(format!("core_{b}.phmt"))).unwrap().0.into_matrix().unwrap()).collect()
    };
    let first = read(&out);
    let h = BasisSet::new(2).unwrap();
    let mut again = Matrix::zeros(6, 10);
    for (b, a) in first.iter().enumerate() {
        again.axpy(1.0, &kron2(&h.basis(b), a).unwrap()).unwrap();
    }
    let input2 = dir.path().join("w2.phmt");
    tensor_file::write(&input2, &Tensor::from_matrix(&again), DType::F64).unwrap();
    let out2 = dir.path().join("proj2");
    ok(&phm(&["project", "--input", s(&input2), "--out", s(&out2)]));
    assert_eq!(read(&out2), first);
}

#[test]
fn project_rejects_bad_input_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let odd = dir.path().join("odd.phmt");
    tensor_file::write(&odd, &Tensor::from_matrix(&Matrix::zeros(3, 4)), DType::F32).unwrap();
    let out = dir.path().join("proj");
    let o = phm(&["project", "--input", s(&odd), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);

    let junk = dir.path().join("junk.phmt");
    fs::write(&junk, b"NOPE\x01\x00\x00\x00").unwrap();
    let o = phm(&["project", "--input", s(&junk), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    assert!(!out.exists());
}

#[test]
fn allocate_heuristic_budget_and_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let k0: AllocationPlan = serde_json::from_str(&fs::read_to_string(micro_plan(dir.path(), &config, "0")).unwrap()).unwrap();
    assert!(k0.assignments.values().all(|&b| b == 2));
    assert_eq!(k0.assignments.len(), 4);

    // A profile from a zero-step run (pretraining only).
    let run = dir.path().join("run");
    let plan = micro_plan(dir.path(), &config, "1");
    ok(&phm(&["train", "--config", s(&config), "--plan", s(&plan), "--steps-a", "0", "--steps-b", "0", "--out", s(&run)]));
    let profile = run.join("profile.json");
    let manifest = run.join("model_manifest.json");
    let m: ModelManifest = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    let floor: usize = m.layers.iter().filter(|l| k0.assignments.contains_key(&l.index)).map(|l| 2 * l.core_size()).sum();

    let out = dir.path().join("budget.json");
    let budget = floor.to_string();
    ok(&phm(&["allocate", "--manifest", s(&manifest), "--profile", s(&profile), "--budget", &budget, "--out", s(&out)]));
    let p: AllocationPlan = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(p.assignments, k0.assignments);

    let low = (floor - 1).to_string();
    let o = phm(&["allocate", "--manifest", s(&manifest), "--profile", s(&profile), "--budget", &low]);
    assert_eq!(o.status.code(), Some(3));

    let o = phm(&["allocate", "--manifest", s(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_zero_steps_writes_initialized_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let plan = micro_plan(dir.path(), &config, "1");
    let run = dir.path().join("run");
    let o = phm(&["train", "--config", s(&config), "--plan", s(&plan), "--steps-a", "0", "--steps-b", "0", "--out", s(&run)]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("initialized PHM-only val CE"));
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(run.join("run_summary.json")).unwrap()).unwrap();
    assert_eq!(summary.checkpoints, vec!["teacher", "init"]);
    assert!(summary.stage_a.unwrap().initial_val_ce_phm.unwrap().is_finite());
    assert!(run.join("checkpoints/init/manifest.json").exists());
    assert!(!run.join("checkpoints/final").exists());
}

#[test]
fn train_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let plan_path = micro_plan(dir.path(), &config, "1");
    let run = dir.path().join("run");
    ok(&phm(&["train", "--config", s(&config), "--plan", s(&plan_path), "--out", s(&run)]));
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(run.join("run_summary.json")).unwrap()).unwrap();
    assert_eq!(summary.status, "completed");
    assert_eq!(summary.checkpoints, vec!["teacher", "init", "stage_a", "collapsed", "final"]);
    assert_eq!(summary.collapsed_params, Some(summary.accounting.params_after));
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6 + 8 + 3);

    let plan: AllocationPlan = serde_json::from_str(&fs::read_to_string(&plan_path).unwrap()).unwrap();
    let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(run.join("model_manifest.json")).unwrap()).unwrap();
    let acc = accounting(&plan, &manifest.layers, summary.extras);

    let o = phm(&["report", "--run", s(&run), "--format", "json"]);
    ok(&o);
    let md = String::from_utf8(o.stdout).unwrap();
    for layer in plan.assignments.keys() {
        assert!(md.contains(&format!("| {layer} | ")), "missing layer {layer} in\n{md}");
    }
    let report: RunReport = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rho.to_bits(), acc.rho.to_bits());
    assert_eq!(report.rho.to_bits(), summary.accounting.rho.to_bits());
    assert_eq!(report.totals.params_phm, acc.params_after);

    let csv_out = dir.path().join("report.csv");
    ok(&phm(&["report", "--run", s(&run), "--out", s(&csv_out)]));
    let csv = fs::read_to_string(&csv_out).unwrap();
    let total = csv.lines().last().unwrap();
    assert_eq!(total.split(',').nth(17).unwrap().parse::<f64>().unwrap().to_bits(), acc.rho.to_bits());
}

#[test]
fn report_needs_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = phm(&["report", "--run", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablation_flag_and_divergence_exit() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let plan = micro_plan(dir.path(), &config, "1");
    let run = dir.path().join("nokd");
    ok(&phm(&["train", "--config", s(&config), "--plan", s(&plan), "--ablate", "no-kd", "--steps-b", "0", "--out", s(&run)]));
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    let a_lines: Vec<serde_json::Value> =
        log.lines().map(|l| serde_json::from_str(l).unwrap()).filter(|v: &serde_json::Value| v["stage"] == "A").collect();
    assert!(a_lines.iter().all(|v| v["lambda"] == 0.0 && v["kd"] == 0.0));

    let o = phm(&["train", "--config", s(&config), "--plan", s(&plan), "--ablate", "bogus", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));

    let mut cfg: RunConfig = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    cfg.train.divergence_threshold = 1e-3;
    cfg.train.steps_pretrain = 0;
    let bad = dir.path().join("bad.json");
    fs::write(&bad, serde_json::to_string(&cfg).unwrap()).unwrap();
    let run = dir.path().join("diverged");
    let o = phm(&["train", "--config", s(&bad), "--plan", s(&plan), "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(4));
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(run.join("run_summary.json")).unwrap()).unwrap();
    assert_eq!(summary.status, "diverged");
    assert!(run.join("checkpoints/last_good/manifest.json").exists());

    // existing output is refused
    let o = phm(&["train", "--config", s(&config), "--plan", s(&plan), "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_csv_and_json_agree() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let json = dir.path().join("b.json");
    let common = ["bench", "--dims", "8,4x12", "--bases", "2,3", "--tokens", "0,5", "--repeats", "2"];
    ok(&phm(&[&common[..], &["--out", s(&csv)]].concat()));
    ok(&phm(&[&common[..], &["--out", s(&json), "--format", "json"]].concat()));
    let report: RunReport = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + report.rows.len() + 1);
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for (line, row) in lines[1..].iter().zip(&report.rows) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[col("flops_dense")].parse::<usize>().unwrap(), row.flops_dense);
        assert_eq!(f[col("flops_phm")].parse::<usize>().unwrap(), row.flops_phm);
        assert_eq!(f[col("params_phm")].parse::<usize>().unwrap(), row.params_phm);
        assert_eq!(f[col("combine_c")].parse::<f64>().unwrap(), row.combine_c);
        if row.tokens == 0 {
            assert_eq!(row.flops_dense, 0);
            assert_eq!(f[col("wall_ns_dense")], "");
        }
    }
    let totals: Vec<&str> = lines.last().unwrap().split(',').collect();
    assert_eq!(totals[col("params_dense")].parse::<usize>().unwrap(), report.totals.params_dense);
    assert_eq!(totals[col("params_ratio")].parse::<f64>().unwrap(), report.rho);
    assert_eq!(report.totals.flops_phm, report.rows.iter().map(|r| r.flops_phm).sum::<usize>());
}

#[test]
fn bad_thread_setting_is_an_input_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_phm"))
        .args(["bench", "--dims", "4", "--tokens", "0"])
        .env("PHM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
