use std::path::Path;

use spechomog::config::RunConfig;

#[test]
fn shipped_configs_load_and_build() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.build_model().unwrap();
        assert_eq!(cfg.hash().len(), 64);
        seen += 1;
    }
    assert!(seen >= 3);
}
