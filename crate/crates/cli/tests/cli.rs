use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
dataset = "mixture4"
output_dir = "out"

[schedule]
steps = 6

[pretrain]
steps = 300

[run]
gamma = 3.0
iterations = 6
eval_every = 2
eval_samples = 32

[sweep]
gammas = [0.0, 3.0]
betas = [0.5, 1.0]
seeds = [0]
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("exp.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_prefdiff"))
            .current_dir(self.dir.path())
            .env_remove("PREFDIFF_OUTPUT_ROOT")
            .args(["--config", "exp.toml"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const RUN: &str = "out/train/gamma_3_beta_0.5_seed_7";

#[test]
fn pretraining_lowers_the_loss_and_is_reproducible() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["pretrain"]);
    let report: serde_json::Value = serde_json::from_str(&ws.read("out/reference/report.json")).unwrap();
    assert!(report["final_loss"].as_f64().unwrap() < report["initial_loss"].as_f64().unwrap());
    assert_eq!(report["mode_coverage"].as_array().unwrap().len(), 4);

    let first = std::fs::read(ws.path("out/reference/denoiser.json")).unwrap();
    let refused = ws.run(&["pretrain"]);
    assert_eq!(code(&refused), 2, "{}", stderr(&refused));
    ws.ok(&["--force", "pretrain"]);
    assert_eq!(std::fs::read(ws.path("out/reference/denoiser.json")).unwrap(), first);
}

#[test]
fn a_missing_dataset_is_a_config_error_naming_the_field() {
    let ws = Workspace::new("output_dir = \"out\"\n");
    let out = ws.run(&["pretrain"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dataset"), "{}", stderr(&out));
}

#[test]
fn training_without_a_reference_is_a_missing_artifact() {
    let ws = Workspace::new(SMALL);
    let out = ws.run(&["train"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let out = ws.run(&["sweep"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn online_noise_space_training_is_refused() {
    let ws = Workspace::new(&SMALL.replace("gamma = 3.0", "gamma = 0.0\nvariant = \"diffusion-dpo-noise\""));
    let out = ws.run(&["train"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("offline"), "{}", stderr(&out));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["pretrain"]);
    ws.ok(&["train"]);
    let straight = ws.read(&format!("{RUN}/runlog.json"));
    assert_eq!(ws.read(&format!("{RUN}/runlog.csv")).lines().count(), 1 + 1 + 4);

    ws.ok(&["--force", "train", "--max-iterations", "3"]);
    assert_ne!(ws.read(&format!("{RUN}/runlog.json")), straight);
    ws.ok(&["train", "--resume"]);
    assert_eq!(ws.read(&format!("{RUN}/runlog.json")), straight);
}

#[test]
fn the_saved_config_is_a_fixed_point() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["pretrain"]);
    ws.ok(&["train"]);
    let saved = ws.read(&format!("{RUN}/config.toml"));
    std::fs::write(ws.path("exp.toml"), &saved).unwrap();
    ws.ok(&["--force", "train"]);
    assert_eq!(ws.read(&format!("{RUN}/config.toml")), saved);
}

#[test]
fn a_two_by_two_sweep_writes_four_cells_deterministically() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["pretrain"]);
    ws.ok(&["sweep"]);
    let cells: Vec<_> = std::fs::read_dir(ws.path("out/sweep/cells")).unwrap().collect();
    assert_eq!(cells.len(), 4);
    let matrix = ws.read("out/sweep/matrix.csv");
    assert_eq!(matrix.lines().filter(|l| l.contains(",ok,")).count(), 4);

    ws.ok(&["--force", "sweep"]);
    assert_eq!(ws.read("out/sweep/matrix.csv"), matrix);
}

#[test]
fn the_output_root_can_be_moved_by_environment() {
    let ws = Workspace::new(SMALL);
    let elsewhere = ws.path("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_prefdiff"))
        .current_dir(ws.dir.path())
        .env("PREFDIFF_OUTPUT_ROOT", &elsewhere)
        .args(["--config", "exp.toml", "pretrain"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(elsewhere.join("reference/denoiser.json").exists());
    assert!(!ws.path("out").exists());
}

fn toy_column(path: &Path) -> (Vec<usize>, usize) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# prefdiff.toy/"));
    let seeds = lines.next().unwrap().split(',').count() - 1;
    let steps = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    (steps, seeds)
}

#[test]
fn the_toy_writes_one_curve_per_gamma_and_the_largest_gamma_wins() {
    let ws = Workspace::new("dataset = \"mixture4\"\noutput_dir = \"out\"\n");
    ws.ok(&["toy"]);
    let gammas = [0.0, 1.0, 3.0, 5.0, 10.0];
    for g in gammas {
        let (steps, seeds) = toy_column(&ws.path(&format!("out/toy/gamma_{g}.csv")));
        assert_eq!(seeds, 5);
        assert_eq!(steps, (0..steps.len()).collect::<Vec<_>>());
    }

    let summary = ws.read("out/toy/summary.csv");
    let median = |gamma: f64| {
        let mut times: Vec<f64> = summary
            .lines()
            .skip(2)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|f| f[0].parse::<f64>().unwrap() == gamma)
            .map(|f| f[2].parse().unwrap_or(f64::INFINITY))
            .collect();
        times.sort_by(f64::total_cmp);
        times[times.len() / 2]
    };
    let largest = median(10.0);
    assert!(largest.is_finite());
    assert!(gammas[..4].iter().all(|&g| median(g) > largest));
}

#[test]
fn verify_reports_every_selected_property_and_catches_the_mutation() {
    let ws = Workspace::new(SMALL);
    let out = ws.ok(&["verify", "--only", "preference"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let outcomes = report["outcomes"].as_array().unwrap();
    assert_eq!(outcomes.len(), 3);
    assert!(outcomes.iter().all(|o| o["passed"] == true));

    let out = ws.run(&[
        "verify",
        "--only",
        "objectives",
        "--mutation",
        "gamma-scaling",
        "--report",
        "r.json",
    ]);
    assert_eq!(code(&out), 1);
    let report: serde_json::Value = serde_json::from_str(&ws.read("r.json")).unwrap();
    let failed: Vec<&str> = report["outcomes"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|o| o["passed"] == false)
        .map(|o| o["id"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["objectives.form_equivalence"]);
}
