use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lakesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lakesim"))
        .args(args)
        .env_remove("LAKESIM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn failed(out: &Output) -> String {
    assert!(!out.status.success());
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SPEC: &str = r#"
preset = "loogle_like"
rate_lambda = 2.0
sessions = 120
seed = 3
loogle_mean_len = 6000.0
loogle_documents = 40
output_mean = 32.0
"#;

fn write_config(dir: &Path, name: &str, policy: &str, slot_capacity: u64) -> PathBuf {
    let text = format!(
        "seed = 5\n[policy]\nkind = \"{policy}\"\n[pool]\nn_instances = 4\nslot_capacity = {slot_capacity}\n\
         [metrics]\ncv_window = 10.0\n[trace.spec]\n{SMALL_SPEC}"
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn summary_value(dir: &Path, key: &str) -> f64 {
    let text = fs::read_to_string(dir.join("summary.toml")).unwrap();
    let table: toml::Table = text.parse().unwrap();
    table[key].as_float().unwrap()
}

#[test]
fn gen_trace_with_zero_rate_writes_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "preset = \"mixed\"\nrate_lambda = 0.0\nduration = 100.0\n").unwrap();
    let trace = dir.path().join("t.jsonl");
    let stdout = ok(&lakesim(&["gen-trace", "--config", s(&spec), "--trace", s(&trace)]));
    assert!(stdout.contains("records=0"));
    assert_eq!(fs::read_to_string(&trace).unwrap(), "");
}

#[test]
fn gen_trace_scbench_reports_about_five_turns() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(
        &spec,
        "preset = \"scbench_like\"\nrate_lambda = 1.0\nsessions = 1500\nseed = 11\n",
    )
    .unwrap();
    let stdout = ok(&lakesim(&["gen-trace", "--config", s(&spec), "--out", s(dir.path())]));
    let turns: f64 = stdout
        .split_whitespace()
        .find_map(|w| w.strip_prefix("mean_turns="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((turns - 5.0).abs() <= 0.2, "{turns}");
    assert!(dir.path().join("trace.jsonl").exists());
}

#[test]
fn gen_trace_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let missing = dir.path().join("absent").join("t.jsonl");
    failed(&lakesim(&["gen-trace", "--config", s(&spec), "--trace", s(&missing)]));
    assert!(!missing.exists());

    fs::write(&spec, "preset = \"mixed\"\nrate_lambda = -1.0\n").unwrap();
    let err = failed(&lakesim(&["gen-trace", "--config", s(&spec), "--out", s(dir.path())]));
    assert!(err.contains("rate_lambda"), "{err}");
}

#[test]
fn run_with_an_empty_trace_writes_empty_reports() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[policy]\nkind = \"pooled\"\n[trace]\npath = \"empty.jsonl\"\n").unwrap();
    let out = dir.path().join("o");
    let stdout = ok(&lakesim(&["run", "--config", s(&cfg), "--out", s(&out)]));
    assert!(stdout.contains("hit_rate=n/a"));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.contains("requests,cluster,,0\n"));
    assert!(!csv.contains("request:"));
    assert!(out.join("summary.toml").exists());
}

#[test]
fn runs_are_byte_identical_under_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "pooled", 256);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&lakesim(&["run", "--config", s(&cfg), "--seed", "9", "--out", s(&a)]));
    ok(&lakesim(&["run", "--config", s(&cfg), "--seed", "9", "--out", s(&b)]));
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("summary.toml")).unwrap(),
        fs::read(b.join("summary.toml")).unwrap()
    );
}

#[test]
fn router_is_less_balanced_than_pooled_on_a_paired_run() {
    let dir = tempfile::tempdir().unwrap();
    let pooled = write_config(dir.path(), "p.toml", "pooled", 256);
    let router = write_config(dir.path(), "r.toml", "cache_aware_router", 256);
    let (p, r) = (dir.path().join("p"), dir.path().join("r"));
    ok(&lakesim(&["run", "--config", s(&pooled), "--out", s(&p)]));
    ok(&lakesim(&["run", "--config", s(&router), "--out", s(&r)]));
    let (cp, cr) = (summary_value(&p, "mean_access_cv"), summary_value(&r, "mean_access_cv"));
    assert!(cr > cp, "router {cr} pooled {cp}");
}

#[test]
fn single_value_sweep_is_the_run_plus_a_key_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "pooled", 256);
    let run_dir = dir.path().join("run");
    let sweep_dir = dir.path().join("sweep");
    ok(&lakesim(&["run", "--config", s(&cfg), "--out", s(&run_dir)]));
    ok(&lakesim(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&sweep_dir),
        "--param",
        "pool.slot_capacity",
        "--values",
        "256",
    ]));
    let run = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let expect: String = run
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                format!("pool.slot_capacity,{l}\n")
            } else {
                format!("256,{l}\n")
            }
        })
        .collect();
    assert_eq!(fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap(), expect);
    assert_eq!(
        fs::read_to_string(sweep_dir.join("pool.slot_capacity=256").join("metrics.csv")).unwrap(),
        run
    );
}

#[test]
fn hit_rate_never_falls_as_capacity_grows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "pooled", 256);
    let out = dir.path().join("o");
    ok(&lakesim(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--jobs",
        "2",
        "--param",
        "pool.slot_capacity",
        "--values",
        "4,8,16,32,64,128,512",
    ]));
    let merged = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rates: Vec<f64> = merged
        .lines()
        .filter(|l| l.contains(",hit_rate,cluster,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(rates.len(), 7);
    assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
    assert!(rates[6] > rates[0]);
}

#[test]
fn sweep_rejects_unknown_keys_and_empty_lists() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "pooled", 256);
    let out = dir.path().join("o");
    let err = failed(&lakesim(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--param",
        "pool.slots",
        "--values",
        "1,2",
    ]));
    assert!(
        err.contains("pool.slot_capacity") && err.contains("scheduler.chunk_size"),
        "{err}"
    );
    failed(&lakesim(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--param",
        "pool.slot_capacity",
        "--values",
        "",
    ]));
    failed(&lakesim(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--param",
        "pool.slot_capacity",
        "--values",
        "8,,16",
    ]));
    assert!(!out.exists());
}

#[test]
fn environment_variable_sets_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "pooled", 256);
    let env_out = dir.path().join("env");
    let status = Command::new(env!("CARGO_BIN_EXE_lakesim"))
        .args(["run", "--config", s(&cfg)])
        .env("LAKESIM_OUT_DIR", &env_out)
        .output()
        .unwrap();
    ok(&status);
    assert!(env_out.join("metrics.csv").exists());
    assert!(!dir.path().join("out").exists());

    // --out wins over the variable.
    let flag_out = dir.path().join("flag");
    let status = Command::new(env!("CARGO_BIN_EXE_lakesim"))
        .args(["run", "--config", s(&cfg), "--out", s(&flag_out)])
        .env("LAKESIM_OUT_DIR", dir.path().join("unused"))
        .output()
        .unwrap();
    ok(&status);
    assert!(flag_out.join("metrics.csv").exists());
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn validate_checks_before_simulating() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "pooled", 256);
    let stdout = ok(&lakesim(&["validate", "--config", s(&cfg)]));
    assert!(stdout.starts_with("ok: 4 instances, segment_size 640"), "{stdout}");

    let small = dir.path().join("small.toml");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("n_instances = 4", "n_instances = 4\nsegment_size = 512");
    fs::write(&small, text).unwrap();
    let out = dir.path().join("o");
    let err = failed(&lakesim(&["run", "--config", s(&small), "--out", s(&out)]));
    assert!(err.contains("segment_size"), "{err}");
    assert!(!out.exists());

    let missing = dir.path().join("m.toml");
    fs::write(
        &missing,
        "[policy]\nkind = \"pooled\"\n[trace]\npath = \"nope.jsonl\"\n",
    )
    .unwrap();
    failed(&lakesim(&["validate", "--config", s(&missing)]));
}

#[test]
fn run_accepts_a_generated_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let trace = dir.path().join("t.jsonl");
    ok(&lakesim(&["gen-trace", "--config", s(&spec), "--trace", s(&trace)]));
    let cfg = write_config(dir.path(), "c.toml", "pooled", 256);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&lakesim(&[
        "run",
        "--config",
        s(&cfg),
        "--trace",
        s(&trace),
        "--out",
        s(&a),
    ]));
    ok(&lakesim(&["run", "--config", s(&cfg), "--out", s(&b)]));
    // The config generates the same trace from the same spec and seed.
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    ok(&lakesim(&["validate", "--config", s(&root.join("example.toml"))]));
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    ok(&lakesim(&[
        "gen-trace",
        "--config",
        s(&root.join("trace_scbench.toml")),
        "--trace",
        s(&trace),
    ]));
}
