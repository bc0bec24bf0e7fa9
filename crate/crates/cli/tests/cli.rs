use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cspe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cspe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_data(dir: &Path) -> String {
    let mut text = String::new();
    for i in 0..6 {
        let row: Vec<String> = (0..5)
            .map(|j| {
                if (i, j) == (2, 3) {
                    "NA".to_string()
                } else {
                    let x = (i as f64 - 2.5) * (j as f64 - 2.0) * 0.4
                        + ((i * 5 + j) as f64 * 1.7).sin() * 0.2;
                    format!("{x}")
                }
            })
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    let p = dir.join("y.csv");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("run.toml");
    fs::write(
        &p,
        "[sampler]\niterations = 60\nburn_in = 20\n[sampler.nuts]\nadapt_iterations = 20\n",
    )
    .unwrap();
    p.display().to_string()
}

#[test]
fn elicit_prints_alpha() {
    let o = cspe(&["elicit", "--q", "0.5", "--k", "13"]);
    assert!(o.status.success());
    let s = String::from_utf8(o.stdout).unwrap();
    assert!(s.contains("alpha = 18.2"), "{s}");
    assert_eq!(s.lines().count(), 2 + 14);
}

#[test]
fn bad_q_is_a_config_error() {
    let o = cspe(&["elicit", "--q", "1.5", "--k", "3"]);
    assert_eq!(o.status.code(), Some(78));
}

#[test]
fn fit_then_summarize_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let cfg = write_config(dir.path());
    let out = dir.path().join("fit");
    let o = cspe(&[
        "fit",
        "--config",
        &cfg,
        "--data",
        &data,
        "--k",
        "2",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "draws.csv",
        "draws.json",
        "theta_mean.csv",
        "summary.json",
        "summary.csv",
        "tau_inv_density.csv",
    ] {
        let text = fs::read_to_string(out.join(f)).unwrap();
        assert!(text.contains("config_hash"), "{f} lacks provenance");
    }
    let again = dir.path().join("again");
    let o = cspe(&[
        "summarize",
        out.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    for f in ["summary.json", "summary.csv", "tau_inv_density.csv"] {
        assert_eq!(
            fs::read(out.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn same_seed_same_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let cfg = write_config(dir.path());
    let run = |name: &str, z: &str| {
        let out = dir.path().join(name);
        let o = cspe(&[
            "fit",
            "--config",
            &cfg,
            "--data",
            &data,
            "--k",
            "2",
            "--z-weights",
            z,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("draws.csv")).unwrap()
    };
    assert_eq!(run("a", "stick"), run("b", "stick"));
    assert_ne!(run("a", "stick"), run("c", "cumulative"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let ragged = dir.path().join("ragged.csv");
    fs::write(&ragged, "1,2,3\n4,5\n").unwrap();
    let o = cspe(&["fit", "--config", &cfg, "--data", ragged.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(65));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ragged"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[sampler]\niterations = 5\nburn_in = 10\n").unwrap();
    let data = write_data(dir.path());
    let o = cspe(&["fit", "--config", bad.to_str().unwrap(), "--data", &data]);
    assert_eq!(o.status.code(), Some(78));

    let o = cspe(&["summarize", dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(74));

    let o = cspe(&["fit", "--config", &cfg, "--data", &data, "--k", "9"]);
    assert_eq!(o.status.code(), Some(78));
}

#[test]
fn simulate_writes_timing_table() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sim.toml");
    fs::write(
        &p,
        "[sampler]\niterations = 40\nburn_in = 10\n[sampler.nuts]\nadapt_iterations = 10\n\
         [scenario]\nj = 6\nt = 6\ntrue_ranks = [1]\nmissing_fractions = [0.0]\nreplications = 2\nthreads = 1\n\
         [[scenario.priors]]\nlabel = \"noninformative\"\nfamily = \"noninformative\"\n\
         [[scenario.priors]]\nlabel = \"cspe aggressive\"\nfamily = \"cspe\"\nq = 0.9\n",
    )
    .unwrap();
    let out = dir.path().join("sim");
    let o = cspe(&[
        "simulate",
        "--config",
        p.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let timing = fs::read_to_string(out.join("timing.csv")).unwrap();
    assert!(timing.starts_with("# config_hash="), "{timing}");
    assert!(timing.lines().count() >= 4, "{timing}");
    assert!(timing.contains("cspe aggressive"));
    let text = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(
        text.to_lowercase().contains("seconds per 1,000 iterations"),
        "{text}"
    );
}

#[test]
fn shipped_scenario_files_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for f in [
        "desk.toml",
        "desk-pair.toml",
        "full.toml",
        "fit-example.toml",
    ] {
        let cfg = cspe::cli_io::RunConfig::load(&dir.join(f)).unwrap();
        assert!(!cfg.scenario.scenarios().unwrap().is_empty(), "{f}");
    }
}
