//! Full-size layer checks against plain loop implementations.

use gcaps::capsule::{capsule_fc_forward, Capsules, CouplingMode, SquashVariant};
use gcaps::model::{Arch, Model, ModelSpec};
use gcaps::objectives::one_hot;
use gcaps::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn squash_ratio(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    let k = n2 / (1.0 + n2) / n2.sqrt();
    s.iter().map(|x| x * k).collect()
}

#[test]
fn fc_layer_1152_to_10_matches_unfused_loops() {
    let (n, m, din, dout) = (1152, 10, 8, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(1152);
    let u: Vec<f64> = (0..n * din).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..n * m * din * dout).map(|_| rng.random_range(-0.1..0.1)).collect();
    let c: Vec<f64> = (0..n * m).map(|_| rng.random_range(-0.5..0.5)).collect();

    let tape = Tape::new();
    let uv = Capsules::new(tape.constant(Tensor::new(&[1, n, din], u.clone()).unwrap()), 1).unwrap();
    let wv = tape.constant(Tensor::new(&[n, m, din, dout], w.clone()).unwrap());
    let cv = tape.constant(Tensor::new(&[n, m], c.clone()).unwrap());
    let v = capsule_fc_forward(&uv, wv, cv, CouplingMode::Raw, SquashVariant::Ratio).unwrap();
    let got = v.var.value();

    for j in 0..m {
        let mut s = vec![0.0; dout];
        for i in 0..n {
            for (e, se) in s.iter_mut().enumerate() {
                let mut pred = 0.0;
                for d in 0..din {
                    pred += w[((i * m + j) * din + d) * dout + e] * u[i * din + d];
                }
                *se += c[i * m + j] * pred;
            }
        }
        let want = squash_ratio(&s);
        for e in 0..dout {
            let g = got.data()[j * dout + e];
            assert!((g - want[e]).abs() < 1e-8, "parent {j} elem {e}: {g} vs {}", want[e]);
        }
    }
}

#[test]
fn full_size_forward_has_bounded_norms() {
    for arch in [Arch::FcGcaps, Arch::ConvGcaps, Arch::MultiLayer] {
        let m = Model::<f32>::new(ModelSpec::preset(arch), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Tensor::from_fn(&[2, 1, 28, 28], |i| ((i * 7919) % 256) as f32 / 255.0);
        let tape = Tape::new();
        let f = m.forward(&tape, &x, &one_hot(&[3, 8], 10)).unwrap();
        assert_eq!(f.norms.shape(), vec![2, 10], "{arch:?}");
        assert!(f.loss.value().item().is_finite(), "{arch:?}");
        assert!(f.norms.value().data().iter().all(|&v| (0.0..1.0).contains(&v)), "{arch:?}");
    }
}
