//! Fixtures shared by the criterion benches: seeded models and inputs at the
//! benchmark shapes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpgn_core::baselines::GruParams;
use tpgn_core::pgn::PgnParams;
use tpgn_core::tpgn::{prepare_batch, PreparedBatch, SeriesWindow, TpgnConfig, TpgnParams};
use tpgn_core::Tensor;

pub const SEED: u64 = 2023;

fn rng(offset: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(SEED + offset)
}

/// `[batch, len, 1]` values in `[-1, 1]`.
pub fn sequence(batch: usize, len: usize) -> Tensor {
    Tensor::uniform(&[batch, len, 1], 1.0, &mut rng(1))
}

pub fn pgn(len: usize, hidden: usize) -> PgnParams {
    PgnParams::init(len, 1, hidden, &mut rng(2)).expect("valid PGN shape")
}

pub fn gru(hidden: usize) -> GruParams {
    GruParams::init(1, hidden, &mut rng(3)).expect("valid GRU shape")
}

pub fn tpgn_config(history_len: usize, forecast_len: usize, hidden: usize) -> TpgnConfig {
    TpgnConfig { history_len, forecast_len, hidden, ..TpgnConfig::default() }
}

pub fn tpgn(config: &TpgnConfig) -> TpgnParams {
    TpgnParams::init(config, &mut rng(4)).expect("valid TPGN config")
}

/// Random windows matching `config`.
pub fn windows(config: &TpgnConfig, batch: usize) -> Vec<SeriesWindow> {
    let mut r = rng(5);
    (0..batch)
        .map(|_| {
            SeriesWindow::new(
                Tensor::uniform(&[config.history_len], 1.0, &mut r),
                Tensor::uniform(&[config.history_len, config.time_features], 0.5, &mut r),
                Tensor::uniform(&[config.forecast_len], 1.0, &mut r),
            )
            .expect("consistent window")
        })
        .collect()
}

pub fn batch(config: &TpgnConfig, windows: &[SeriesWindow]) -> PreparedBatch {
    let refs: Vec<&SeriesWindow> = windows.iter().collect();
    prepare_batch(&refs, config).expect("windows match config")
}
