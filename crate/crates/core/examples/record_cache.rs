//! Re-records the response cache under tests/fixtures/corpus/cache from the
//! gold sidecars, without network access. Run after any prompt change:
//!
//!     cargo run -p protocheck --example record_cache

use std::path::Path;
use std::sync::Arc;

use protocheck::corpus::{load_protocols, Pipeline, RunConfig, TaskRegistry};
use protocheck::extraction::GoldStore;
use protocheck::llm::ProviderKind;
use protocheck::corpus::GoldScriptedProvider;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus");
    let cache = fixtures.join("cache");
    if cache.exists() {
        std::fs::remove_dir_all(&cache)?;
    }
    let protocols = load_protocols(&fixtures.join("protocols"))?;
    let gold = GoldStore::load_dir(&fixtures.join("gold"))?;

    let mut cfg = RunConfig::default();
    cfg.llm.provider = ProviderKind::RemoteChatApi;
    cfg.llm.cache_dir = cache.clone();
    let provider = Arc::new(GoldScriptedProvider::new(gold));
    let pipe = Pipeline::with_provider(cfg, TaskRegistry::builtin(), None, Some(provider))?;

    let mut features = std::collections::BTreeMap::new();
    for (id, res) in pipe.extract(&protocols) {
        features.insert(id, res?);
    }
    pipe.detect(&protocols, &features);
    let entries = std::fs::read_dir(&cache)?.count();
    println!("recorded {entries} responses into {}", cache.display());
    Ok(())
}
