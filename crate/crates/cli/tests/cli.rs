mod support;

use support::{code, Experiment};

#[test]
fn subcommand_contract() {
    match support::contract() {
        Ok(summary) => println!("{summary}"),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn help_lists_subcommands() {
    let ex = Experiment::new("");
    let o = ex.ogan_bare(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = support::stdout(&o);
    for sub in ["gen-data", "train-extractor", "train-labelnet", "train", "eval", "sample", "plot"] {
        assert!(text.contains(sub), "{sub} missing from --help");
    }
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let ex = Experiment::new("\n[gan]\nwidth = 3\n");
    let o = ex.ogan(&["gen-data"]);
    assert_eq!(code(&o), 2, "{}", support::stderr(&o));
}

#[test]
fn out_flag_overrides_config() {
    let ex = Experiment::new("");
    let elsewhere = ex.dir.path().join("elsewhere");
    let o = ex.ogan(&["gen-data", "--out", elsewhere.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", support::stderr(&o));
    assert!(elsewhere.join("data/manifest.jsonl").is_file());
    assert!(!ex.out().exists());
}

#[test]
fn shipped_example_config_loads() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let cfg = ogan_cli::config::LoadedConfig::load(&root.join("experiment.example.toml")).unwrap();
    assert!(cfg.ontology_path().is_file());
    assert_eq!(cfg.gan.max_resolution, 32);
}
