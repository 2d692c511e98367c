//! The architecture listing in `docs/architecture.txt` must match the
//! manifests compiled into the library. Set `GRADMASK_BLESS=1` to rewrite it.

use std::fmt::Write;
use std::path::Path;

use gradmask::nn::ModelKind;

fn listing() -> String {
    let mut s = String::new();
    for kind in [ModelKind::Autoencoder, ModelKind::Ldm, ModelKind::Classifier, ModelKind::DualEncoder] {
        let m = kind.manifest();
        let _ = writeln!(s, "[{}] {} parameters, hash {:016x}", kind.name(), m.param_count(), m.hash());
        let _ = writeln!(s, "{}\n", m.canonical());
    }
    s
}

#[test]
fn documented_architecture_matches_manifests() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/architecture.txt");
    let want = listing();
    if std::env::var_os("GRADMASK_BLESS").is_some() {
        std::fs::write(&path, &want).unwrap();
    }
    let have = std::fs::read_to_string(&path).unwrap_or_default();
    assert!(have == want, "{} is stale; rerun with GRADMASK_BLESS=1", path.display());
}
