use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempo_core::models::{LatentGeometry, ModelConfig, Regressor, TempoConfig};
use tempo_core::paths::{PathFamily, PathSchedule};
use tempo_core::training::{build_batch, draw_examples, flow_matching_loss, LatentSet};
use tempo_nn::Module;

const H: f64 = 1e-5;
/// Gradients below this are dominated by rounding in the difference quotient.
const MIN_GRAD: f64 = 1e-4;

/// Parameter gradients of the flow-matching loss of a small TempO on a
/// 4×4 latent, against central differences.
#[test]
fn tempo_loss_gradient_matches_finite_differences() {
    let trajs = (0..3)
        .map(|k| Array4::from_shape_fn((8, 2, 4, 4), |(t, c, i, j)| ((t + 2 * k) as f64 * 0.37 + c as f64 * 0.5 + (i * 4 + j) as f64 * 0.13).cos()))
        .collect();
    let set = LatentSet::new(trajs).unwrap();
    let cfg = ModelConfig::Tempo(TempoConfig { hidden: 6, projection: 6, depth: 2, embed_dim: 8, groups: 2, n_modes: 2, ..Default::default() });
    let model = Regressor::build(&cfg, LatentGeometry { channels: 2, height: 4, width: 4 }, 11).unwrap();
    // Zero-initialized heads would leave most gradients exactly zero.
    for p in model.params() {
        p.update(|w| w.iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i as f64) * 0.7 + 0.3).sin()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ex = draw_examples(&set, 3, 3, &mut rng).unwrap();
    let batch = build_batch(&set, &ex, &PathSchedule::default_for(PathFamily::River), &mut rng).unwrap();
    let grads = flow_matching_loss(&model, &batch).backward();

    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, p) in model.named_params() {
        let g = p.grad(&grads).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]);
        for i in (0..p.numel()).step_by((p.numel() / 4).max(1)) {
            let base = p.to_vec();
            let eval = |v: f64| {
                let mut w = base.clone();
                w[i] = v;
                p.set(w);
                flow_matching_loss(&model, &batch).item()
            };
            let fd = (eval(base[i] + H) - eval(base[i] - H)) / (2.0 * H);
            p.set(base);
            if g[i].abs() < MIN_GRAD {
                continue;
            }
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs());
            assert!(rel < 1e-4, "{name}[{i}]: analytic {} vs fd {fd} (rel {rel:.2e})", g[i]);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} coordinates had a gradient");
    eprintln!("{checked} coordinates, worst rel error {worst:.2e}");
}
