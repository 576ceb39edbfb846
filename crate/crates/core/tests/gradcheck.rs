//! Central finite-difference checks of every analytic gradient path.

use rand::Rng;
use sdft_core::estimators::{sequence_kl_exact, sequence_kl_grad_exact};
use sdft_core::policy::{grad_logprob, init_policy, logprob_response, PolicyParams, Shape, TransformerShape, Vocab};
use sdft_core::rng::rng_from_seed;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

/// Central differences of `f` at `theta`, one coordinate at a time.
fn fd_gradient(theta: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            x[i] = theta[i] + H;
            let up = f(&x);
            x[i] = theta[i] - H;
            let down = f(&x);
            x[i] = theta[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

fn random_seq(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

#[test]
fn transformer_logprob_gradient_matches_finite_differences() {
    let vocab = Vocab::standard(16).unwrap();
    let mut rng = rng_from_seed(2024);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let shape = TransformerShape {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ctx_len: 16,
            mlp_hidden: [8, 16, 32][case % 3],
        };
        let mut p = init_policy(vocab, Shape::Transformer(shape), case as u64).unwrap();
        // move LayerNorm gains/biases off their initial constants
        for x in p.theta.iter_mut() {
            *x += 0.1 * (rng.gen::<f64>() - 0.5);
        }
        let mut prompt = vec![vocab.bos];
        let n = rng.gen_range(0..5);
        prompt.extend(random_seq(&mut rng, 16, n));
        let n = rng.gen_range(1..6);
        let response = random_seq(&mut rng, 16, n);
        let g = grad_logprob(&p, &prompt, &response).unwrap();
        let num = fd_gradient(&p.theta, |t| logprob_response(&p.with_theta(t.to_vec()), &prompt, &response).unwrap().total);
        let e = rel_err(&g.0, &num);
        worst = worst.max(e);
        assert!(e < REL_TOL, "case {case}: relative error {e}");
    }
    println!("transformer worst relative error {worst:.2e}");
}

#[test]
fn tabular_logprob_gradient_matches_finite_differences() {
    let mut rng = rng_from_seed(77);
    for case in 0..20 {
        let v = 4 + case % 3;
        let window = 1 + case % 2;
        let p = init_policy(Vocab::standard(v).unwrap(), Shape::Tabular { window }, case as u64).unwrap();
        let mut prompt = vec![1];
        let n = rng.gen_range(0..3);
        prompt.extend(random_seq(&mut rng, v, n));
        let n = rng.gen_range(1..5);
        let response = random_seq(&mut rng, v, n);
        let g = grad_logprob(&p, &prompt, &response).unwrap();
        let num = fd_gradient(&p.theta, |t| logprob_response(&p.with_theta(t.to_vec()), &prompt, &response).unwrap().total);
        assert!(rel_err(&g.0, &num) < REL_TOL, "case {case}");
    }
}

fn perturbed(p: &PolicyParams, rng: &mut impl Rng, scale: f64) -> PolicyParams {
    p.with_theta(p.theta.iter().map(|x| x + scale * (rng.gen::<f64>() - 0.5)).collect())
}

#[test]
fn exact_sequence_kl_gradient_matches_finite_differences() {
    let mut rng = rng_from_seed(5);
    for case in 0..6 {
        let vocab = Vocab::standard(5 + case % 2).unwrap();
        let base = init_policy(vocab, Shape::Tabular { window: 1 }, case as u64).unwrap();
        let student = perturbed(&base, &mut rng, 2.0);
        let teacher = perturbed(&base, &mut rng, 2.0);
        let (sp, tp) = (vec![1, 4], vec![1, 4, 3, 0, 3]);
        let g = sequence_kl_grad_exact(&student, &teacher, &sp, &tp, 3).unwrap();
        let num = fd_gradient(&student.theta, |t| {
            sequence_kl_exact(&student.with_theta(t.to_vec()), &teacher, &sp, &tp, 3).unwrap()
        });
        let e = rel_err(&g.0, &num);
        assert!(e < REL_TOL, "case {case}: {e}");
    }
}
