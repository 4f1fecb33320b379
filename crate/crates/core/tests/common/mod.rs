#![allow(dead_code)]

use std::sync::Arc;

use serde_json::Value;
use tempfile::TempDir;
use vista_core::bench::deduction::{DeductionItem, Predicate};
use vista_core::bench::DeductionPlugin;
use vista_core::providers::{ModelConfig, ProviderSpec, ScriptedBehavior};
use vista_core::store::{FileStore, SharedStore};
use vista_core::{Workbench, WorkbenchConfig};

pub const BENCH: &str = DeductionPlugin::ID;

/// Hidden code (2,4,5) with verifiers sum_even, digit_1_odd, all_distinct, digit_3_is_max.
pub fn item_001() -> Value {
    DeductionItem::new(
        "item-001",
        vec![2, 4, 5],
        &[Predicate::SumEven, Predicate::DigitOdd(1), Predicate::AllDistinct, Predicate::DigitIsMax(3)],
    )
    .to_value()
}

pub struct Fixture {
    pub dir: TempDir,
    pub store: SharedStore,
    pub wb: Workbench,
}

pub fn fixture() -> Fixture {
    fixture_with(WorkbenchConfig::default())
}

pub fn fixture_with(config: WorkbenchConfig) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store: SharedStore = Arc::new(FileStore::open_with(dir.path().join("store.jsonl"), false).unwrap());
    let wb = Workbench::new(store.clone(), config);
    wb.put_item(BENCH, item_001(), true).unwrap();
    Fixture { dir, store, wb }
}

/// Registers a scripted provider plus a model config of the same id.
pub fn scripted(wb: &Workbench, id: &str, behavior: ScriptedBehavior) {
    wb.put_provider(ProviderSpec::scripted(id, behavior), true, None).unwrap();
    wb.put_model_config(ModelConfig::new(id, id, "scripted"), true, None).unwrap();
}

pub fn sequence(wb: &Workbench, id: &str, replies: &[&str], default: &str) {
    scripted(wb, id, ScriptedBehavior::sequence(id, replies, default));
}
