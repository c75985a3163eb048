//! Trains the full model and the single-extractor ablation on the
//! two-regime synthetic set and compares test error and gate behavior.
//!
//! cargo run --release -p duet --example two_regime

use duet::data::SplitSpec;
use duet::model::{dense_gates, duet_forward};
use duet::pipeline::{prepare, train_and_evaluate};
use duet::rng::{substream, Stream};
use duet::synthetic::{generate, SyntheticKind, SyntheticSpec};
use duet::{DuetConfig, Mode, VariantKind};

fn main() -> duet::Result<()> {
    let (t, f) = (48, 24);
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(100);
    for seed in 0..3u64 {
        let series = generate(&SyntheticSpec::new(SyntheticKind::TwoRegime, 4000, 4, seed))?;
        let data = prepare(&series.dataset, SplitSpec::default(), t, f)?;
        for variant in [VariantKind::Full, VariantKind::NoTcm] {
            let mut cfg = DuetConfig::new(t, f, 4);
            cfg.variant = variant;
            cfg.seed = seed;
            cfg.max_epochs = epochs;
            let start = std::time::Instant::now();
            let out = train_and_evaluate("two_regime", &data, &cfg, SplitSpec::default(), |_| {})?;
            let mut by_regime: [Vec<ndarray::Array2<f64>>; 2] = [vec![], vec![]];
            for (i, w) in data.test.iter().enumerate() {
                if let Some(r) = series.window_regime(w.origin_index, t, f) {
                    let mut rng = substream(seed, Stream::Eval, 0, i as u64);
                    let fc = duet_forward(w.x.view(), &out.state.best_params, &cfg, Mode::Eval, &mut rng)?;
                    by_regime[r as usize].push(dense_gates(&fc.gates));
                }
            }
            let mut tv = 0.0;
            let mut pairs = 0;
            for a in &by_regime[0] {
                for b in &by_regime[1] {
                    tv += 0.5 * (a - b).mapv(f64::abs).sum() / a.nrows() as f64;
                    pairs += 1;
                }
            }
            println!(
                "seed {seed} {variant:>8}: test mse {:.4} mae {:.4} epochs {} gate tv {:.3} ({:.1}s)",
                out.test.mse,
                out.test.mae,
                out.state.history.len(),
                tv / pairs.max(1) as f64,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
