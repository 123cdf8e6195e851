use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcdyn::csv::{Table, MAGIC};
use pcdyn::ScenarioConfig;
use serde_json::Value;
use tempfile::TempDir;

const PAIR: &str = r#"
epsilon = 0.01
t_end = 1.0
models = ["coulomb"]

[[particles]]
charge = 1.0
mass = 1.0
position = [0.5, 0.0, 0.05]
velocity = [0.0, 0.2, 0.02]

[[particles]]
charge = -1.0
mass = 2.0
position = [-0.5, 0.0, -0.05]
velocity = [0.0, -0.1, -0.01]
"#;

fn pcdyn(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pcdyn"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("PCDYN_THREADS", t),
        None => cmd.env_remove("PCDYN_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn scenario(name: &str) -> String {
    format!("{}/scenarios/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_a_monotone_coulomb_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "pair.toml", PAIR);
    let out = dir.path().join("out");
    let o = pcdyn(&["simulate", "-c", s(&cfg), "-o", s(&out)], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let text = fs::read_to_string(out.join("coulomb_eps1e-2.csv")).unwrap();
    assert!(text.starts_with(MAGIC));
    let table = Table::read(text.as_bytes()).unwrap();
    assert_eq!(table.meta("model"), Some("coulomb"));
    assert_eq!(table.meta("seed"), Some("0"));
    let t = table.column("t").unwrap();
    assert_eq!(t[0], 0.0);
    assert_eq!(*t.last().unwrap(), 1.0);
    assert!(t.windows(2).all(|w| w[1] > w[0]));
    let hc = table.column("H_C").unwrap();
    assert!(pcdyn_core::diagnostics::relative_drift(&hc) < 1e-7);

    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["runs"][0]["termination"], "completed");
    assert_eq!(summary["runs"][0]["file"], "coulomb_eps1e-2.csv");
}

#[test]
fn output_is_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario("cluster.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&pcdyn(&["simulate", "-c", &cfg, "-o", s(&a)], Some("1"))), 0);
    assert_eq!(code(&pcdyn(&["simulate", "-c", &cfg, "-o", s(&b)], Some("4"))), 0);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn seed_flag_changes_generated_particles() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario("cluster.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, seed) in [(&a, "7"), (&b, "8")] {
        let o = pcdyn(&["simulate", "-c", &cfg, "-o", s(out), "-s", seed, "-m", "coulomb", "-e", "0.01"], None);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let ta = Table::read(fs::read(a.join("coulomb_eps1e-2.csv")).unwrap().as_slice()).unwrap();
    let tb = Table::read(fs::read(b.join("coulomb_eps1e-2.csv")).unwrap().as_slice()).unwrap();
    assert_eq!(ta.meta("seed"), Some("7"));
    assert_eq!(tb.meta("seed"), Some("8"));
    assert_ne!(ta.rows[0], tb.rows[0]);
    // Only the overridden model and ε were run.
    assert_eq!(fs::read_dir(&a).unwrap().count(), 2);
}

#[test]
fn coincident_particles_are_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "bad.toml", &PAIR.replace("[-0.5, 0.0, -0.05]", "[0.5, 0.0, 0.05]"));
    let o = pcdyn(&["simulate", "-c", s(&cfg), "-o", s(dir.path())], None);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("particles[1].position"), "{}", stderr(&o));
}

#[test]
fn parse_errors_name_the_field_and_line() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "typo.toml", &PAIR.replace("t_end = 1.0", "t_end = 1.0\nt_edn = 2.0"));
    let o = pcdyn(&["simulate", "-c", s(&cfg)], None);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("t_edn") && err.contains("line"), "{err}");
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "pair.toml", PAIR);
    let o = pcdyn(&["simulate", "-c", s(&cfg), "-o", s(dir.path())], Some("zero"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("PCDYN_THREADS"));
}

#[test]
fn equal_ratios_make_darwin_and_reduced_agree() {
    let dir = TempDir::new().unwrap();
    let o = pcdyn(&["compare", "-c", &scenario("equal_ratio.toml"), "-o", s(dir.path())], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&dir.path().join("compare.json"));
    let norms = &report["comparisons"][0]["norms"];
    assert_eq!(report["comparisons"][0]["model"], "rr_reduced");
    for k in ["sup_dr", "sup_du", "sup_dudot", "sup_dh_d"] {
        assert!(norms[k].as_f64().unwrap() <= 1e-12, "{k} = {}", norms[k]);
    }
}

#[test]
fn reduced_and_third_order_agree_closer_than_either_with_darwin() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "pair.toml",
        &PAIR.replace(r#"models = ["coulomb"]"#, r#"models = ["rr_reduced", "darwin", "third_order"]"#),
    );
    let o = pcdyn(&["compare", "-c", s(&cfg), "-o", s(dir.path())], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&dir.path().join("compare.json"));
    let gap = |i: usize| report["comparisons"][i]["norms"]["sup_du"].as_f64().unwrap();
    assert_eq!(report["comparisons"][1]["model"], "third_order");
    // The reduced model is one power of ε closer to the third-order one
    // than Darwin is; ε = 0.01 here.
    assert!(gap(1) < 5e-2 * gap(0), "third_order {} vs darwin {}", gap(1), gap(0));
    assert_eq!(report["runs"][2]["shooting"]["converged"], true);
}

#[test]
fn synthetic_scaling_recovers_the_power() {
    let o = pcdyn(&["scaling-study", "--synthetic", "1.5"], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("slope 1.5000"));
    let o = pcdyn(&["scaling-study", "--synthetic", "1.5", "--expect-slope", "1.0"], None);
    assert_eq!(code(&o), 7);
}

#[test]
fn darwin_coulomb_gap_is_first_order() {
    let dir = TempDir::new().unwrap();
    let o = pcdyn(
        &[
            "scaling-study",
            "-c",
            &scenario("scaling.toml"),
            "-o",
            s(dir.path()),
            "--expect-slope",
            "1",
            "--slope-tol",
            "0.05",
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = json(&dir.path().join("scaling.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(report["passed"], true);
    // Rows are in ascending ε; the gap grows with it.
    let gaps: Vec<f64> = rows.iter().map(|r| r["errors"]["sup_dudot"].as_f64().unwrap()).collect();
    assert!(gaps.windows(2).all(|w| w[1] > w[0]), "{gaps:?}");
}

#[test]
fn third_order_reduced_gap_has_positive_slope() {
    let dir = TempDir::new().unwrap();
    let o = pcdyn(
        &[
            "scaling-study",
            "-c",
            &scenario("scaling.toml"),
            "-o",
            s(dir.path()),
            "-m",
            "third_order",
            "-m",
            "rr_reduced",
            "-e",
            "0.04",
            "-e",
            "0.02",
            "-e",
            "0.01",
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&dir.path().join("scaling.json"));
    for fit in report["fits"].as_array().unwrap() {
        assert!(fit["slope"].as_f64().unwrap() > 0.5, "{fit}");
    }
    let du = report["fits"].as_array().unwrap().iter().find(|f| f["metric"] == "sup_du").unwrap();
    assert!(du["slope"].as_f64().unwrap() > 1.5, "{du}");
}

#[test]
fn scaling_study_needs_three_epsilons() {
    let dir = TempDir::new().unwrap();
    let o = pcdyn(
        &["scaling-study", "-c", &scenario("scaling.toml"), "-o", s(dir.path()), "-e", "0.1", "-e", "0.01"],
        None,
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_algebra_passes_and_fails_honestly() {
    let o = pcdyn(&["verify-algebra"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(text.lines().count(), 10);
    assert!(text.contains("fast_jacobian_random: 100 cases"));

    let dir = TempDir::new().unwrap();
    let o = pcdyn(&["verify-algebra", "--trials", "0", "-o", s(dir.path())], None);
    assert_eq!(code(&o), 0);
    let report = json(&dir.path().join("verify.json"));
    assert_eq!(report["checks"].as_array().unwrap().len(), 4);

    let o = pcdyn(&["verify-algebra", "--trials", "3", "--tol=-1"], None);
    assert_eq!(code(&o), 7);
}

#[test]
fn energy_audit_accepts_output_and_catches_tampering() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "pair.toml", &PAIR.replace(r#"models = ["coulomb"]"#, r#"models = ["rr_reduced"]"#));
    assert_eq!(code(&pcdyn(&["simulate", "-c", s(&cfg), "-o", s(dir.path())], None)), 0);
    let csv = dir.path().join("rr_reduced_eps1e-2.csv");
    let o = pcdyn(&["energy-audit", s(&csv), "-o", s(dir.path())], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = json(&dir.path().join("audit.json"));
    assert_eq!(report["recompute_error"], 0.0);
    assert!(report["h_rr_max_increase"].as_f64().unwrap() <= 0.0);

    let mut table = Table::read(fs::read(&csv).unwrap().as_slice()).unwrap();
    let col = table.column_index("H_C").unwrap();
    table.rows[3][col] += 1e-6;
    let bad = dir.path().join("bad.csv");
    table.write(fs::File::create(&bad).unwrap()).unwrap();
    assert_eq!(code(&pcdyn(&["energy-audit", s(&bad)], None)), 7);

    let garbage = write(&dir, "garbage.csv", "t,x\n0,1\n");
    assert_eq!(code(&pcdyn(&["energy-audit", s(&garbage)], None)), 1);
}

const HEAD_ON: &str = r#"
epsilon = 0.01
t_end = 5.0
models = ["MODEL"]

[[particles]]
charge = 1.0
mass = 1.0
position = [0.5, 0.0, 0.0]
velocity = [V, 0.0, 0.0]

[[particles]]
charge = CHARGE
mass = 2.0
position = [-0.5, 0.0, 0.0]
velocity = [-V, 0.1, 0.0]
"#;

fn head_on(model: &str, charge: &str, v: &str, extra: &str) -> String {
    format!("{}{extra}", HEAD_ON.replace("MODEL", model).replace("CHARGE", charge).replace("V", v))
}

#[test]
fn terminations_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let cases = [
        ("collision", head_on("darwin", "-1.0", "0.0", "[guard]\nmin_separation = 0.2\nescape_radius = 100.0\n"), 3),
        ("escape", head_on("darwin", "1.0", "1.0", "[guard]\nmin_separation = 0.1\nescape_radius = 3.0\n"), 4),
        ("steps", head_on("darwin", "1.0", "0.0", "[stepper]\nmax_steps = 3\n"), 5),
        (
            "runaway",
            head_on(
                "third_order",
                "1.0",
                "0.0",
                "[third_order]\nmode = \"forward\"\ny_offset = [1e-3, 0.0, 0.0]\nrunaway_threshold = 10.0\n",
            ),
            6,
        ),
        ("ok", head_on("darwin", "1.0", "0.0", ""), 0),
    ];
    for (name, text, want) in cases {
        let cfg = write(&dir, &format!("{name}.toml"), &text);
        let out = dir.path().join(name);
        let o = pcdyn(&["simulate", "-c", s(&cfg), "-o", s(&out)], None);
        assert_eq!(code(&o), want, "{name}: {}", String::from_utf8_lossy(&o.stdout));
        let summary = json(&out.join("summary.json"));
        let term = summary["runs"][0]["termination"].as_str().unwrap().to_string();
        let expect = ["completed", "", "", "collision", "escape", "solver-failure", "runaway-suspected"];
        let idx = if want == 0 { 0 } else { want as usize };
        assert_eq!(term, expect[idx], "{name}");
    }
}

#[test]
fn shipped_scenarios_round_trip_and_build() {
    for entry in fs::read_dir(format!("{}/scenarios", env!("CARGO_MANIFEST_DIR"))).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ScenarioConfig::load(&path).unwrap();
        let again = ScenarioConfig::from_toml_str(&cfg.to_toml_string(), "round trip").unwrap();
        assert_eq!(cfg, again, "{path:?}");
        again.build().unwrap();
    }
}

#[test]
fn tol_flag_tightens_the_stepper() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "pair.toml", PAIR);
    let loose = dir.path().join("loose");
    let tight = dir.path().join("tight");
    assert_eq!(code(&pcdyn(&["simulate", "-c", s(&cfg), "-o", s(&loose), "--tol", "1e-5"], None)), 0);
    assert_eq!(code(&pcdyn(&["simulate", "-c", s(&cfg), "-o", s(&tight), "--tol", "1e-11"], None)), 0);
    let steps = |d: &Path| json(&d.join("summary.json"))["runs"][0]["steps_accepted"].as_u64().unwrap();
    assert!(steps(&tight) > steps(&loose));
}
