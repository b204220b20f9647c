use lqpg_bench::config::{mean_variance, parse_config, preset, ConfigError, Mode, Overrides, RunSpec};
use lqpg_core::benchmark::{initial_policy, mean_variance_model, mesh};
use lqpg_core::Mat;
use proptest::prelude::*;
use toml::{Table, Value};

const SMALL: &str = r#"
name = "small"

[model]
state_dim = 2
action_dim = 1
horizon = 1
rho = 0.5
a = [[0.0, 1.0], [-1.0, 0.0]]
b = [[0.0], [1.0]]
q = [[1.0, 0.0], [0.0, 1.0]]
terminal_cost = [[1.0, 0.0], [0.0, 1.0]]
xi0_mean = [1.0, 0.0]
xi0_cov = [[0.1, 0.0], [0.0, 0.1]]

[[model.noise]]
c = [[0.1, 0.0], [0.0, 0.1]]
d = [[0.0], [0.2]]

[policy]
gain = [[0.0, 0.0]]
covariance = [[1.0]]
"#;

fn close(a: &Mat, b: &Mat) -> bool {
    (a - b).amax() < 1e-15
}

#[test]
fn preset_reproduces_benchmark_model() {
    let spec = preset("mean-variance").unwrap();
    let model = spec.build_model().unwrap();
    let reference = mean_variance_model();
    assert_eq!(model.rho(), reference.rho());
    assert_eq!(model.horizon(), reference.horizon());
    assert!(close(model.terminal_cost(), reference.terminal_cost()));
    assert!(close(model.sigma0(), reference.sigma0()));
    assert_eq!(model.noise_channels(), 3);
    for t in [0.0, 0.1, 0.37, 0.75, 1.0] {
        assert!(close(&model.b().at(t), &reference.b().at(t)));
        assert!(close(&model.vbar().at(t), &reference.vbar().at(t)));
        for j in 0..3 {
            assert!(close(&model.d()[j].at(t), &reference.d()[j].at(t)));
            assert!(close(&model.c()[j].at(t), &reference.c()[j].at(t)));
        }
    }
    let fine = mesh(128);
    assert_eq!(spec.theta0(&fine).unwrap(), initial_policy(&fine).unwrap());
    assert_eq!(spec.pg.meshes, vec![8, 16, 32, 64, 128]);
    assert_eq!((spec.pg.tau, spec.pg.tau_unscaled, spec.pg.epsilon), (0.01, 0.08, 0.01));
    assert_eq!((spec.mc.paths, spec.mc.repetitions), (100_000, 10));
    assert_eq!(spec.run.mode, Mode::ModelBased);
}

#[test]
fn preset_file_without_overrides_is_the_preset() {
    assert_eq!(parse_config("preset = \"mean-variance\"\n").unwrap(), mean_variance());
}

#[test]
fn emit_load_emit_is_identical() {
    for spec in [mean_variance(), parse_config(SMALL).unwrap()] {
        let text = spec.emit();
        let again = parse_config(&text).unwrap();
        assert_eq!(again, spec);
        assert_eq!(again.emit(), text);
    }
}

#[test]
fn small_config_fills_defaults() {
    let spec = parse_config(SMALL).unwrap();
    let model = spec.build_model().unwrap();
    assert_eq!((model.state_dim(), model.action_dim()), (2, 1));
    assert!(close(&model.r().at(0.0), &Mat::zeros(1, 1)));
    assert!(close(&model.vbar().at(0.0), &Mat::identity(1, 1)));
    assert_eq!(spec.pg.grid, 128);
    assert_eq!(spec.name, "small");
}

#[test]
fn tau_override_is_reflected_and_changes_hash() {
    let base = mean_variance();
    let file = parse_config("preset = \"mean-variance\"\n[pg]\ntau = 0.02\n").unwrap();
    assert_eq!(file.pg.tau, 0.02);
    assert_eq!(file.pg.epsilon, base.pg.epsilon);
    assert_ne!(file.hash(), base.hash());
    let mut flag = mean_variance();
    flag.apply(&Overrides { tau: Some(0.02), ..Overrides::default() }).unwrap();
    assert_eq!(flag, file);
    assert_eq!(flag.hash(), file.hash());
}

#[test]
fn hash_is_stable_hex() {
    let h = mean_variance().hash();
    assert_eq!(h.len(), 64);
    assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(h, mean_variance().hash());
}

#[test]
fn unknown_keys_are_all_listed() {
    let text = "preset = \"mean-variance\"\ncolour = 1\n[pg]\ntua = 0.1\n[model]\nrho = 0.02\nfoo = 3\n";
    match parse_config(text) {
        Err(ConfigError::UnknownKeys(keys)) => {
            assert_eq!(keys.len(), 3, "{keys:?}");
            for k in ["colour", "pg.tua", "model.foo"] {
                assert!(keys.iter().any(|x| x == k), "{keys:?}");
            }
        }
        other => panic!("{other:?}"),
    }
    let nested = SMALL.replace("d = [[0.0], [0.2]]", "d = [[0.0], [0.2]]\nextra = 1");
    let err = parse_config(&nested).unwrap_err().to_string();
    assert!(err.contains("model.noise[0].extra"), "{err}");
}

#[test]
fn missing_required_keys_are_listed() {
    let text = SMALL.replace("rho = 0.5\n", "").replace("covariance = [[1.0]]\n", "");
    match parse_config(&text) {
        Err(ConfigError::MissingKeys(keys)) => assert_eq!(keys, vec!["model.rho", "policy.covariance"]),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_config(""), Err(ConfigError::MissingKeys(_))));
}

#[test]
fn malformed_matrix_names_the_key() {
    let cases = [
        ("terminal_cost = [[1.0, 0.0], [0.0, 1.0]]", "terminal_cost = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]", "model.terminal_cost"),
        ("q = [[1.0, 0.0], [0.0, 1.0]]", "q = [[1.0, 0.0], [0.0]]", "model.q"),
        ("gain = [[0.0, 0.0]]", "gain = [[0.0], [0.0]]", "policy.gain"),
        ("d = [[0.0], [0.2]]", "d = [[0.0, 0.2]]", "model.noise[0].d"),
        ("xi0_mean = [1.0, 0.0]", "xi0_mean = [1.0]", "model.xi0_mean"),
    ];
    for (from, to, key) in cases {
        let text = SMALL.replace(from, to);
        assert_ne!(text, SMALL);
        match parse_config(&text) {
            Err(ConfigError::Invalid { key: k, .. }) => assert_eq!(k, key),
            other => panic!("{key}: {other:?}"),
        }
    }
}

#[test]
fn named_coefficients_are_checked() {
    let text = SMALL.replace("b = [[0.0], [1.0]]", "b = \"sinusoidal_B\"");
    let err = parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("model.b") && err.contains("1x3"), "{err}");
    let text = SMALL.replace("b = [[0.0], [1.0]]", "b = \"nope\"");
    let err = parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("nope") && err.contains("sinusoidal_B"), "{err}");
}

#[test]
fn invalid_values_are_rejected() {
    assert!(matches!(
        parse_config("preset = \"other\"\n"),
        Err(ConfigError::UnknownPreset(_))
    ));
    let both = "preset = \"mean-variance\"\n[[model.noise]]\nc = [[0.0]]\nd = [[0.0, 0.0, 0.0]]\n";
    assert!(parse_config(both).unwrap_err().to_string().contains("noise_gram"));
    let bad_tau = "preset = \"mean-variance\"\n[pg]\ntau = -1.0\n";
    assert!(parse_config(bad_tau).unwrap_err().to_string().contains("pg.tau"));
    let bad_mode = "preset = \"mean-variance\"\n[run]\nmode = \"sideways\"\n";
    assert!(matches!(parse_config(bad_mode), Err(ConfigError::Parse(_))));
    let bad_optimum = "preset = \"mean-variance\"\n[pg]\noptimum = \"best\"\n";
    assert!(parse_config(bad_optimum).unwrap_err().to_string().contains("pg.optimum"));
    let mut spec = mean_variance();
    assert!(spec.apply(&Overrides { paths: Some(0), ..Overrides::default() }).is_err());
}

/// Paths to every numeric leaf of a TOML table.
fn numeric_leaves(v: &Value, path: Vec<String>, out: &mut Vec<Vec<String>>) {
    match v {
        Value::Table(t) => {
            for (k, x) in t {
                let mut p = path.clone();
                p.push(k.clone());
                numeric_leaves(x, p, out);
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                let mut p = path.clone();
                p.push(i.to_string());
                numeric_leaves(x, p, out);
            }
        }
        Value::Float(_) | Value::Integer(_) => out.push(path),
        _ => {}
    }
}

fn leaf_mut<'a>(v: &'a mut Value, path: &[String]) -> &'a mut Value {
    path.iter().fold(v, |cur, p| match cur {
        Value::Table(t) => t.get_mut(p).unwrap(),
        Value::Array(a) => a.get_mut(p.parse::<usize>().unwrap()).unwrap(),
        _ => unreachable!(),
    })
}

fn canonical_tree(spec: &RunSpec) -> Value {
    Value::Table(spec.emit().parse::<Table>().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_numeric_input_moves_the_hash(idx in 0usize..1000, bump in 1i64..4) {
        let spec = parse_config(SMALL).unwrap();
        let mut tree = canonical_tree(&spec);
        let mut leaves = Vec::new();
        numeric_leaves(&tree, Vec::new(), &mut leaves);
        let path = &leaves[idx % leaves.len()];
        let leaf = leaf_mut(&mut tree, path);
        *leaf = match leaf {
            Value::Float(x) => Value::Float(*x * 1.5 + 0.25 * bump as f64),
            Value::Integer(n) => Value::Integer(*n + bump),
            _ => unreachable!(),
        };
        let Value::Table(t) = tree else { unreachable!() };
        // Some perturbations are invalid (e.g. a dimension); those must be
        // rejected rather than hashed like the original.
        if let Ok(other) = lqpg_bench::config::resolve(t) {
            prop_assert_ne!(other.hash(), spec.hash(), "{:?}", path);
        }
    }

    #[test]
    fn overrides_round_trip(tau in 1e-4f64..1.0, eps in 1e-6f64..0.5, seed in 0u64..1_000_000, paths in 1usize..1_000_000) {
        let mut spec = mean_variance();
        spec.apply(&Overrides {
            tau: Some(tau),
            epsilon: Some(eps),
            seed: Some(seed),
            paths: Some(paths),
            ..Overrides::default()
        })
        .unwrap();
        let again = parse_config(&spec.emit()).unwrap();
        prop_assert_eq!(&again, &spec);
        prop_assert_eq!(again.hash(), spec.hash());
    }
}
