mod common;

use common::{names, read, tiny};
use lqpg_bench::report::{band, convergence_csv, convergence_svg, mesh_sweep_svg};
use lqpg_bench::run::SPREAD_NOTE;
use lqpg_bench::{emit_report, run_benchmark, Format, ReportBundle, RunOptions};
use lqpg_core::pg::MeshSweepTable;

fn bundle(mode: &str) -> ReportBundle {
    run_benchmark(&tiny(mode), RunOptions::default()).unwrap()
}

#[test]
fn band_is_mean_min_max() {
    let traces = vec![vec![1.0, 4.0, 2.0], vec![3.0, 0.0], vec![2.0, 2.0, 8.0]];
    let b = band(&traces);
    assert_eq!(b, vec![(2.0, 1.0, 3.0), (2.0, 0.0, 4.0), (5.0, 2.0, 8.0)]);
    assert!(band(&[]).is_empty());
}

#[test]
fn model_based_bundle_is_complete_and_monotone() {
    let b = bundle("model-based");
    let m = &b.manifest;
    assert_eq!(m.status, "complete");
    assert!(m.seeds.is_empty() && b.model_free.is_empty());
    assert!((m.c_star.unwrap() - 0.0393).abs() < 1e-3);
    let csv = convergence_csv(&b);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iter,subopt,mf_mean,mf_min,mf_max"));
    let subopt: Vec<f64> = lines
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            assert_eq!(&cols[2..], ["NA", "NA", "NA"]);
            cols[1].parse().unwrap()
        })
        .collect();
    assert!(subopt.len() > 10);
    assert!(subopt.windows(2).all(|w| w[1] <= w[0]));
    let sweep = b.sweep.as_ref().unwrap();
    assert_eq!(sweep.rows.len(), 2);
    assert_eq!(sweep.n_continuous.map(|n| n.to_string()), m.n_continuous.clone());
}

#[test]
fn model_free_bundle_records_seeds_and_spread() {
    let b = bundle("model-free");
    assert_eq!(b.manifest.seeds, vec![1, 2]);
    assert_eq!(b.model_free.len(), 2);
    assert!(b.model_free.iter().all(|t| t.len() == 11));
    assert_eq!(b.manifest.spread, SPREAD_NOTE);
    let csv = convergence_csv(&b);
    assert!(csv.starts_with("iter,subopt,mf_mean,mf_min,mf_max,rep_0,rep_1\n"));
    let row: Vec<f64> = csv.lines().nth(5).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    let (lo, hi) = (row[5].min(row[6]), row[5].max(row[6]));
    assert_eq!((row[3], row[4]), (lo, hi));
    assert!((row[2] - 0.5 * (row[5] + row[6])).abs() < 1e-15);
    let svg = convergence_svg(&b);
    assert!(svg.contains("<polygon") && svg.contains("model-free mean"));
}

#[test]
fn convergence_panel_uses_decade_ticks() {
    let b = bundle("model-based");
    let svg = convergence_svg(&b);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains(">1e-1<") && svg.contains(">1e-3<"));
    assert!(svg.contains("<polyline") && !svg.contains("<polygon"));
}

#[test]
fn same_bundle_gives_identical_bytes() {
    let b = bundle("model-free");
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&b, d1.path(), Format::Both).unwrap();
    emit_report(&b, d2.path(), Format::Both).unwrap();
    let files = names(d1.path());
    assert_eq!(files, names(d2.path()));
    for f in &files {
        assert_eq!(read(d1.path(), f), read(d2.path(), f), "{f}");
    }
    // A fresh run with the same spec reproduces the bundle.
    let d3 = tempfile::tempdir().unwrap();
    emit_report(&bundle("model-free"), d3.path(), Format::Both).unwrap();
    for f in &files {
        assert_eq!(read(d1.path(), f), read(d3.path(), f), "{f}");
    }
}

#[test]
fn format_selects_files() {
    let b = bundle("model-based");
    let csv = tempfile::tempdir().unwrap();
    emit_report(&b, csv.path(), Format::Csv).unwrap();
    let files = names(csv.path());
    assert_eq!(
        files,
        ["config.toml", "convergence.csv", "manifest.toml", "mesh_sweep.csv", "pg_run.csv"]
    );
    let svg = tempfile::tempdir().unwrap();
    emit_report(&b, svg.path(), Format::Svg).unwrap();
    assert_eq!(
        names(svg.path()),
        ["config.toml", "convergence.svg", "manifest.toml", "mesh_sweep.svg"]
    );
    let manifest = read(svg.path(), "manifest.toml");
    assert!(manifest.contains("files = [\"config.toml\", \"convergence.svg\", \"mesh_sweep.svg\"]"), "{manifest}");
}

#[test]
fn dry_run_writes_only_the_manifest() {
    let spec = tiny("model-free");
    let b = run_benchmark(&spec, RunOptions { dry_run: true }).unwrap();
    assert!(b.convergence.is_none() && b.sweep.is_none());
    let dir = tempfile::tempdir().unwrap();
    emit_report(&b, dir.path(), Format::Both).unwrap();
    assert_eq!(names(dir.path()), ["manifest.toml"]);
    let manifest = read(dir.path(), "manifest.toml");
    assert!(manifest.contains("status = \"dry-run\""));
    assert!(manifest.contains(&spec.hash()));
    assert!(manifest.contains("seeds = [1, 2]"));
}

#[test]
fn empty_sweep_table_is_header_only() {
    let table = MeshSweepTable {
        epsilon: 0.01,
        n_continuous: None,
        rows: Vec::new(),
    };
    let mut b = run_benchmark(&tiny("model-based"), RunOptions { dry_run: true }).unwrap();
    b.sweep = Some(table.clone());
    let dir = tempfile::tempdir().unwrap();
    emit_report(&b, dir.path(), Format::Both).unwrap();
    assert_eq!(read(dir.path(), "mesh_sweep.csv"), "m,mesh,c_star_pi,n_scaled,n_unscaled,n_continuous\n");
    let svg = mesh_sweep_svg(&table);
    assert!(svg.trim_end().ends_with("</svg>"));
}

#[test]
fn unwritable_path_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let b = run_benchmark(&tiny("model-based"), RunOptions { dry_run: true }).unwrap();
    let err = emit_report(&b, &blocker.join("out"), Format::Csv).unwrap_err();
    assert!(err.path.contains("file"));
}

#[test]
fn failure_keeps_partial_results() {
    let mut spec = tiny("model-based");
    spec.pg.tau_unscaled = 50.0;
    let f = run_benchmark(&spec, RunOptions::default()).unwrap_err();
    assert_eq!(f.partial.manifest.status, "failed");
    assert!(f.partial.manifest.error.is_some());
    assert!(f.partial.convergence.is_some() && f.partial.sweep.is_none());
    let dir = tempfile::tempdir().unwrap();
    emit_report(&f.partial, dir.path(), Format::Csv).unwrap();
    assert!(read(dir.path(), "manifest.toml").contains("status = \"failed\""));
}
