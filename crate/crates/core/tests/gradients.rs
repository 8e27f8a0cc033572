use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ranp::loss::Margins;
use ranp::mining::{RelevanceMatrix, Tau};
use ranp::model::{loss_gradients, BatchFeatures, ModelParams};
use ranp::train::{mine_prepared, PreparedBatch};
use ranp::Matrix;

fn batch(rng: &mut ChaCha8Rng, n: usize, dv: usize, dt: usize) -> PreparedBatch {
    let mut fill = |r: usize, c: usize| {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let videos = fill(n, dv);
    let captions = fill(n, dt);
    let mut rel = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            rel.set(i, j, if i == j { 1.0 } else { [0.0, 0.25, 0.5, 1.0][rng.random_range(0..4)] });
        }
    }
    PreparedBatch { features: BatchFeatures { videos, captions }, relevance: RelevanceMatrix::new(rel).unwrap() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // Mined triplets are held fixed, so the loss is piecewise linear in the
    // similarities; samples where a perturbation flips a hinge are skipped.
    #[test]
    fn analytic_gradients_match_central_differences(seed in any::<u64>(), strat in 0usize..3, tau in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, dv, dt, d) = (rng.random_range(2..7), rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..5));
        let b = batch(&mut rng, n, dv, dt);
        let params = ModelParams::init(dv, dt, d, seed).unwrap();
        let margins = Margins::new(0.3, 0.2).unwrap();
        let strategy = ranp::mining::Strategy::ALL[strat];
        let mined = mine_prepared(&b, &params, Tau::new(tau).unwrap(), strategy).unwrap();
        let (base, grads) = loss_gradients(&b.features, &params, &mined.0, &mined.1, margins, 0.7).unwrap();
        let h = 1e-5;
        for tower in 0..2 {
            let len = if tower == 0 { params.w_video.as_slice().len() } else { params.w_text.as_slice().len() };
            for k in 0..len {
                let shifted = |delta: f64| {
                    let mut p = params.clone();
                    let w = if tower == 0 { &mut p.w_video } else { &mut p.w_text };
                    w.as_mut_slice()[k] += delta;
                    let (loss, _) = loss_gradients(&b.features, &p, &mined.0, &mined.1, margins, 0.7).unwrap();
                    (loss.total, loss.active_negatives + loss.active_positives)
                };
                let ((lp, ap), (lm, am)) = (shifted(h), shifted(-h));
                let active = base.active_negatives + base.active_positives;
                prop_assume!(ap == active && am == active);
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = if tower == 0 { grads.w_video.as_slice()[k] } else { grads.w_text.as_slice()[k] };
                prop_assert!((numeric - analytic).abs() <= 1e-6 + 1e-4 * analytic.abs().max(numeric.abs()),
                    "param {k} of tower {tower}: analytic {analytic}, numeric {numeric}");
            }
        }
    }
}
