use std::path::PathBuf;

use sbi_lmc::pipeline::ExperimentConfig;

fn shipped() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut out: Vec<PathBuf> = std::fs::read_dir(&dir)
        .expect("configs directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    out.sort();
    out
}

#[test]
fn shipped_configs_load_and_round_trip() {
    let files = shipped();
    assert!(files.len() >= 4, "{files:?}");
    for f in files {
        let cfg = ExperimentConfig::load(&f).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
        let again = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, again, "{}", f.display());
    }
}
