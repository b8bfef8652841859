#![allow(dead_code)]

use std::io::Write;
use std::sync::{Mutex, MutexGuard};

use ckge_core::synthetic::{generate, SyntheticSpec};
use ckge_core::{GrowingKg, TrainingConfig, TrainingMode};

static HEAVY: Mutex<()> = Mutex::new(());

/// Serializes the training-heavy tests of one binary so wall-clock
/// measurements are not disturbed by each other.
pub fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Desk-scale configuration the training tests share.
pub fn desk_config(mode: TrainingMode, seed: u64) -> TrainingConfig {
    TrainingConfig {
        dim: 16,
        margin: 16.0,
        learning_rate: 0.01,
        batch_size: 32,
        r_base: 16,
        num_layers: 3,
        early_stop_patience: 20,
        max_epochs: 300,
        mode,
        seed,
        ..TrainingConfig::default()
    }
}

pub fn lattice(seed: u64) -> GrowingKg {
    generate(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })
    .expect("synthetic graph")
}

/// Writes straight to the process stdout so the line shows up even when
/// the harness captures test output.
pub fn verdict(id: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "acceptance {id:>2} {}  {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
