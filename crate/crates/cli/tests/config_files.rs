use std::path::Path;

use uapscan_cli::RunConfig;

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist.toml");
    let cfg = RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.detectors.len(), 2);
    assert_eq!(cfg.attack("adaptive").unwrap().detector.as_deref(), Some("mask"));
}
