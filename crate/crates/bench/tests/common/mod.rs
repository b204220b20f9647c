#![allow(dead_code)]

use lqpg_bench::config::{parse_config, RunSpec};

/// The benchmark on a coarse grid with a short model-free run.
pub fn tiny(mode: &str) -> RunSpec {
    parse_config(&format!(
        "preset = \"mean-variance\"\n\
         [pg]\ngrid = 16\nmeshes = [8, 16]\nconvergence_tolerance = 1e-3\n\
         [mc]\npaths = 64\nrepetitions = 2\niterations = 10\n\
         [run]\nmode = \"{mode}\"\n"
    ))
    .unwrap()
}

pub fn read(dir: &std::path::Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

pub fn names(dir: &std::path::Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}
