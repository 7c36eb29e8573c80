//! Online ML-Poly aggregation of three experts, one of which degrades halfway
//! through, against the two hindsight oracles.

use frucast::aggregation::{
    aggregate_series, best_expert_oracle, convex_oracle, AggregationState, ConvexOracleConfig,
    LossKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> frucast::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let len = 1500;
    let (mut f, mut y) = (Vec::new(), Vec::new());
    for t in 0..len {
        let truth = 1.0 + 0.5 * (t as f64 / 48.0).sin() + rng.random_range(-0.1..0.1);
        let drift = if t < len / 2 { 0.0 } else { 0.4 };
        f.extend([
            truth + drift + noise.sample(&mut rng),
            truth - 0.15 + noise.sample(&mut rng),
            truth + 0.15 + noise.sample(&mut rng),
        ]);
        y.push(truth);
    }
    let observed: Vec<Option<f64>> = y.iter().map(|v| Some(*v)).collect();
    let run = aggregate_series(AggregationState::new(3)?, &f, &observed)?;
    for t in [0, 100, 700, 800, 1000, len - 1] {
        let w = run.weights_at(t);
        println!(
            "round {t:>4}: weights [{:.3}, {:.3}, {:.3}]",
            w[0], w[1], w[2]
        );
    }
    let mse = |loss: f64| loss / len as f64;
    let agg: f64 = run
        .predictions
        .iter()
        .zip(&y)
        .map(|(p, y)| (p - y).powi(2))
        .sum();
    let best = best_expert_oracle(&f, &y, 3, LossKind::Squared)?;
    let convex = convex_oracle(&f, &y, 3, LossKind::Squared, &ConvexOracleConfig::default())?;
    println!("aggregation    MSE {:.5}", mse(agg));
    println!(
        "best expert    MSE {:.5} (weights {:?})",
        mse(best.cumulative_loss),
        best.weights
    );
    println!(
        "convex oracle  MSE {:.5} (weights [{:.3}, {:.3}, {:.3}])",
        mse(convex.cumulative_loss),
        convex.weights[0],
        convex.weights[1],
        convex.weights[2]
    );
    Ok(())
}
