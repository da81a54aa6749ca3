use super::{batch_of, forward, random_studies, tiny_model};
use itemclip::objectives::LossWeights;

/// Denominator floor: round-off in the difference quotient is about
/// `eps * |loss| / h`, i.e. 1e-9 here, and key-projection biases have an
/// exactly zero gradient (softmax is shift invariant).
pub const FD_FLOOR: f64 = 1e-5;

/// Central differences for every entry of every parameter tensor.
/// Returns the worst relative error and where it occurred.
pub fn worst_fd_error(seed: u64) -> (f64, String) {
    let model = tiny_model(seed);
    let studies = random_studies(2, &[], seed + 100);
    let batch = batch_of(&model, &studies, seed + 200);
    let w = LossWeights { p_mask: 0.2, key_frac: 0.5, lambda_mps: 0.5, ..Default::default() };
    let (g, out) = forward(&model, &studies, &batch, &w, 7);
    let grads = g.backward(out.total).unwrap().param_grads(&model.store);
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for (p, id) in model.store.ids().enumerate() {
        for e in 0..model.store.get(id).len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.store.get_mut(id).data_mut()[e] += delta;
                forward(&m, &studies, &batch, &w, 7).1.breakdown.total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads[p][e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{}[{e}] analytic {a:e} fd {fd:e}", model.store.entry(id).name));
            }
        }
    }
    worst
}
