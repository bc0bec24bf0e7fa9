use std::fs;

use cspe::cli_io::{fit, read_matrix_csv, summarize, RowScaling, RunConfig};

/// Labeled panel with sector names, year headers and a few gaps.
fn panel() -> String {
    let mut s = String::from("sector");
    for y in 0..12 {
        s.push_str(&format!(",{}", 2000 + y));
    }
    s.push('\n');
    for i in 0..8 {
        s.push_str(&format!("sector {i}"));
        for t in 0..12 {
            if (i + t) % 17 == 3 {
                s.push_str(",NA");
            } else {
                let v = 100.0 * (i as f64 + 1.0)
                    + (i as f64 + 1.0) * 3.0 * ((t as f64) * 0.7 + i as f64).sin()
                    + t as f64;
                s.push_str(&format!(",{v}"));
            }
        }
        s.push('\n');
    }
    s
}

#[test]
fn standardized_fit_writes_original_units() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("panel.csv");
    fs::write(&data, panel()).unwrap();
    let out = dir.path().join("out");
    let cfg = RunConfig::from_toml_str(&format!(
        "[data]\npath = {data:?}\nheader = true\nrow_labels = true\nstandardize = true\nback_transform = true\n\
         [sampler]\niterations = 400\nburn_in = 200\n[sampler.nuts]\nadapt_iterations = 200\n\
         [output]\ndir = {out:?}\n"
    ))
    .unwrap();
    let result = fit(&cfg).unwrap();
    assert_eq!(result.summary.k, 4, "auto rank for 8 x 12");

    let scaling: RowScaling =
        serde_json::from_str(&fs::read_to_string(out.join("row_scaling.json")).unwrap()).unwrap();
    let original = fs::read_to_string(out.join("theta_mean_original_units.csv")).unwrap();
    let rows: Vec<Vec<f64>> = original
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let raw = read_matrix_csv(&data, &cfg.csv_options()).unwrap();
    for (i, row) in rows.iter().enumerate() {
        let fitted = row.iter().sum::<f64>() / row.len() as f64;
        // Row levels come back on the original scale.
        assert!(
            (fitted - scaling.mean[i]).abs() < 3.0 * scaling.sd[i],
            "row {i}: {fitted} vs {}",
            scaling.mean[i]
        );
    }
    assert_eq!(raw.row_names.unwrap()[7], "sector 7");

    let again = summarize(&out).unwrap();
    assert_eq!(again.to_json(), result.summary.to_json());
}
