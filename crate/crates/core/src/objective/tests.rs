use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{time_grid, ModelConfig};
use crate::nn::check_param_grads;
use crate::tensor::Tape;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn value(f: impl for<'t> FnOnce(&'t Tape) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    f(&tape).value().item()
}

fn offset(x: &Tensor, c: f64) -> Tensor {
    x.map(|v| v + c)
}

// Loop-coded derivative of one series.
fn oracle_derivative(x: &[f64], order: usize) -> Vec<f64> {
    let n = x.len();
    if order == 1 {
        (0..n)
            .map(|t| match t {
                0 => x[1] - x[0],
                t if t == n - 1 => x[n - 1] - x[n - 2],
                t => (x[t + 1] - x[t - 1]) / 2.0,
            })
            .collect()
    } else {
        (1..n - 1).map(|t| x[t + 1] - 2.0 * x[t] + x[t - 1]).collect()
    }
}

fn oracle_derivative_loss(p: &Tensor, y: &Tensor, order: usize) -> f64 {
    let (b, t, n) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let (mut sum, mut count) = (0.0, 0);
    for bi in 0..b {
        for j in 0..n {
            let series = |x: &Tensor| (0..t).map(|i| x.at(&[bi, i, j])).collect::<Vec<_>>();
            let (dp, dy) = (oracle_derivative(&series(p), order), oracle_derivative(&series(y), order));
            for (a, c) in dp.iter().zip(&dy) {
                sum += (a - c) * (a - c);
                count += 1;
            }
        }
    }
    sum / count as f64
}

#[test]
fn recon_loss() {
    let y = random(&[2, 11, 4], 1);
    assert_eq!(value(|t| loss_recon(t.constant(y.clone()), t.constant(y.clone())).unwrap()), 0.0);
    let l = value(|t| loss_recon(t.constant(offset(&y, 0.3)), t.constant(y.clone())).unwrap());
    assert!((l - 0.09).abs() < 1e-15);

    let p = random(&[2, 11, 4], 2);
    let mut sum = 0.0;
    for (a, b) in p.data().iter().zip(y.data()) {
        sum += (a - b) * (a - b);
    }
    let l = value(|t| loss_recon(t.constant(p.clone()), t.constant(y.clone())).unwrap());
    assert!((l - sum / p.numel() as f64).abs() < 1e-15);

    let tape = Tape::new();
    assert!(loss_recon(tape.constant(p), tape.constant(random(&[2, 11, 3], 3))).is_err());
}

#[test]
fn derivative_losses_match_stencil_oracle() {
    let p = random(&[3, 11, 5], 4);
    let y = random(&[3, 11, 5], 5);
    for order in [1, 2] {
        let l = value(|t| loss_derivative(t.constant(p.clone()), t.constant(y.clone()), order).unwrap());
        assert!((l - oracle_derivative_loss(&p, &y, order)).abs() < 1e-12, "order {order}");
    }
}

#[test]
fn derivative_losses_ignore_offsets_and_lines() {
    let y = random(&[2, 11, 3], 6);
    for order in [1, 2] {
        let l = value(|t| loss_derivative(t.constant(offset(&y, 0.7)), t.constant(y.clone()), order).unwrap());
        assert!(l < 1e-28, "order {order}: {l}");
    }
    // Per-species offsets added to both sides.
    let shift = Tensor::from_fn(&[2, 11, 3], |i| (i % 3) as f64 * 0.25);
    let p = random(&[2, 11, 3], 7);
    let mut p2 = p.clone();
    let mut y2 = y.clone();
    for ((a, b), s) in p2.data_mut().iter_mut().zip(y2.data_mut()).zip(shift.data()) {
        *a += s;
        *b += s;
    }
    for order in [1, 2] {
        let a = value(|t| loss_derivative(t.constant(p.clone()), t.constant(y.clone()), order).unwrap());
        let b = value(|t| loss_derivative(t.constant(p2.clone()), t.constant(y2.clone()), order).unwrap());
        assert!((a - b).abs() < 1e-12);
    }
    let line = Tensor::from_fn(&[1, 11, 2], |i| 0.1 * (i / 2) as f64 - 0.3 * (i % 2) as f64);
    let l = value(|t| loss_derivative(t.constant(line.clone()), t.constant(Tensor::zeros(&[1, 11, 2])), 2).unwrap());
    assert!(l < 1e-28);
}

#[test]
fn derivative_losses_need_enough_steps() {
    let tape = Tape::new();
    let two = tape.constant(Tensor::zeros(&[1, 2, 1]));
    let one = tape.constant(Tensor::zeros(&[1, 1, 1]));
    assert!(loss_derivative(two, two, 1).is_ok());
    assert!(matches!(loss_derivative(two, two, 2), Err(TensorError::Contract(_))));
    assert!(matches!(loss_derivative(one, one, 1), Err(TensorError::Contract(_))));
}

#[test]
fn mass_loss() {
    let y = random(&[2, 11, 4], 8);
    assert_eq!(value(|t| loss_mass(t.constant(y.clone()), t.constant(y.clone())).unwrap()), 0.0);
    let swapped = Tensor::from_fn(&[2, 11, 4], |i| {
        let j = match i % 4 {
            0 => i + 2,
            2 => i - 2,
            _ => i,
        };
        y.data()[j]
    });
    let l = value(|t| loss_mass(t.constant(swapped.clone()), t.constant(y.clone())).unwrap());
    assert!(l < 1e-28);

    let p = random(&[2, 11, 4], 9);
    let mut acc = 0.0;
    for r in 0..22 {
        let sp: f64 = p.data()[r * 4..r * 4 + 4].iter().sum();
        let sy: f64 = y.data()[r * 4..r * 4 + 4].iter().sum();
        acc += (sp - sy) * (sp - sy);
    }
    let l = value(|t| loss_mass(t.constant(p.clone()), t.constant(y.clone())).unwrap());
    assert!((l - acc / 22.0).abs() < 1e-12);
}

#[test]
fn raw_mass_loss_is_zero_on_equal_inputs() {
    let y = random(&[2, 11, 4], 10);
    assert_eq!(value(|t| loss_mass_raw(t.constant(y.clone()), t.constant(y.clone()), 3.0).unwrap()), 0.0);
}

fn small_model(n_in: usize, n_out: usize, seed: u64) -> ChemNNEModel {
    let cfg = ModelConfig::for_task(n_in, n_out).with_width(16);
    ChemNNEModel::build(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn species_maps() {
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    assert_eq!(SpeciesMap::shared(&names(&["a", "b"]), &names(&["a", "b"])), SpeciesMap::identity(2));
    let m = SpeciesMap::shared(&names(&["a", "b", "c"]), &names(&["x", "c", "a"]));
    assert_eq!(m.input, vec![0, 2]);
    assert_eq!(m.output, vec![2, 1]);
    assert!(SpeciesMap::shared(&names(&["a"]), &names(&["b"])).is_empty());
}

#[test]
fn identity_loss_matches_manual_computation() {
    let m = small_model(3, 4, 11);
    let (x, k) = (random(&[5, 3], 12), random(&[5, 3], 13));
    let map = SpeciesMap {
        input: vec![0, 2],
        output: vec![3, 1],
    };
    let init = m.predict_initial(&x, &k).unwrap();
    let mut sum = 0.0;
    for b in 0..5 {
        for (&i, &o) in map.input.iter().zip(&map.output) {
            let e = x.at(&[b, i]) - init.at(&[b, o]);
            sum += e * e;
        }
    }
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let l = loss_identity(&m, &p, tape.constant(x.clone()), tape.constant(k.clone()), &map).unwrap();
    assert!((l.value().item() - sum / 10.0).abs() < 1e-14);
    let err = loss_identity(&m, &p, tape.constant(x), tape.constant(k), &SpeciesMap::default());
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn identity_loss_is_zero_for_perfect_autoencoding() {
    let mut m = small_model(2, 2, 14);
    let (x, k) = (random(&[3, 2], 15), random(&[3, 3], 16));
    let init = m.predict_initial(&x, &k).unwrap();
    // Shift the output bias so the t = 0 reconstruction of row 0 is exact.
    let bias = m.params.find("decoder.out.b").unwrap();
    let mut b = m.params.get(bias).value.clone();
    for j in 0..2 {
        b.data_mut()[j] += x.at(&[0, j]) - init.at(&[0, j]);
    }
    m.params.get_mut(bias).value = b;
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let x0 = tape.constant(x.gather_rows(&[0]));
    let k0 = tape.constant(k.gather_rows(&[0]));
    let l = loss_identity(&m, &p, x0, k0, &SpeciesMap::identity(2)).unwrap();
    assert!(l.value().item() < 1e-28);
}

fn terms_for<'t>(
    tape: &'t Tape,
    m: &ChemNNEModel,
    p: &crate::nn::Bound<'t>,
    map: &SpeciesMap,
    seed: u64,
) -> LossTerms<'t> {
    let x = tape.constant(random(&[4, m.config.n_in], seed));
    let k = tape.constant(random(&[4, 3], seed + 1));
    let y = tape.constant(random(&[4, 11, m.config.n_out], seed + 2));
    let pred = m.forward(p, x, k, tape.constant(time_grid(11))).unwrap();
    LossTerms::compute(m, p, x, k, pred, y, map).unwrap()
}

#[test]
fn total_loss_weights() {
    let m = small_model(3, 3, 17);
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let terms = terms_for(&tape, &m, &p, &SpeciesMap::identity(3), 18);
    let zero = LossWeights {
        recon: 0.0,
        d1: 0.0,
        d2: 0.0,
        identity: 0.0,
        mass: 0.0,
    };
    assert_eq!(loss_total(&terms, &zero).unwrap().1.total, 0.0);

    let (_, parts) = loss_total(&terms, &LossWeights::default()).unwrap();
    let expect = parts.recon + 10.0 * parts.d1 + 10.0 * parts.d2 + parts.identity + 0.001 * parts.mass;
    assert!((parts.total - expect).abs() < 1e-12 * expect);

    let (_, only) = loss_total(&terms, &LossWeights::mse_only()).unwrap();
    assert_eq!(only.total, parts.recon);

    // Linear in each weight.
    for i in 0..5 {
        let mut w = LossWeights::default().as_array();
        let base = w;
        w[i] *= 3.0;
        let lw = |a: [f64; 5]| LossWeights {
            recon: a[0],
            d1: a[1],
            d2: a[2],
            identity: a[3],
            mass: a[4],
        };
        let t1 = loss_total(&terms, &lw(base)).unwrap().1.total;
        let t3 = loss_total(&terms, &lw(w)).unwrap().1.total;
        let term = [parts.recon, parts.d1, parts.d2, parts.identity, parts.mass][i];
        assert!((t3 - t1 - 2.0 * base[i] * term).abs() < 1e-12 * t3.max(1.0));
    }

    let neg = LossWeights { d1: -1.0, ..LossWeights::default() };
    assert!(matches!(loss_total(&terms, &neg), Err(Error::Config(_))));
}

#[test]
fn all_terms_vanish_at_the_truth() {
    let tape = Tape::new();
    let y = tape.constant(random(&[3, 11, 4], 19));
    let terms = LossTerms {
        recon: loss_recon(y, y).unwrap(),
        d1: loss_derivative(y, y, 1).unwrap(),
        d2: loss_derivative(y, y, 2).unwrap(),
        identity: Some(loss_recon(y, y).unwrap()),
        mass: loss_mass(y, y).unwrap(),
    };
    assert_eq!(loss_total(&terms, &LossWeights::default()).unwrap().1.total, 0.0);
}

#[test]
fn positive_identity_weight_without_shared_species_is_an_error() {
    let m = small_model(3, 4, 20);
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let terms = terms_for(&tape, &m, &p, &SpeciesMap::default(), 21);
    assert!(terms.identity.is_none());
    assert!(matches!(loss_total(&terms, &LossWeights::default()), Err(Error::Config(_))));
    let w = LossWeights { identity: 0.0, ..LossWeights::default() };
    assert!(loss_total(&terms, &w).is_ok());
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        n_in: 3,
        n_out: 3,
        n_steps: 4,
        fno_modes: 3,
        attn_blocks: 1,
        fno_blocks: 2,
        ..ModelConfig::default().with_width(8)
    };
    let m = ChemNNEModel::build(&cfg, &mut ChaCha8Rng::seed_from_u64(22)).unwrap();
    let (x, k, y) = (random(&[3, 3], 23), random(&[3, 3], 24), random(&[3, 4, 3], 25));
    let err = check_param_grads(
        &m.params,
        |tape, p| {
            let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
            let run = || -> Result<Var<'_>> {
                let pred = m.forward(p, xv, kv, tape.constant(time_grid(4)))?;
                let terms = LossTerms::compute(&m, p, xv, kv, pred, tape.constant(y.clone()), &SpeciesMap::identity(3))?;
                Ok(loss_total(&terms, &LossWeights::default())?.0)
            };
            run().map_err(|e| TensorError::Contract(e.to_string()))
        },
        1e-5,
        Some(2000),
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn metric_closed_forms() {
    let y = random(&[2, 11, 3], 26);
    assert_eq!(metrics(&y, &y).unwrap(), Metrics::default());
    let m = metrics(&offset(&y, 0.5), &y).unwrap();
    for v in [m.mae, m.rmse, m.mbe] {
        assert!((v - 0.5).abs() < 1e-12);
    }
    let m = metrics(&Tensor::vector(vec![1.0, -1.0]), &Tensor::vector(vec![0.0, 0.0])).unwrap();
    assert_eq!((m.mae, m.rmse, m.mbe), (1.0, 1.0, 0.0));
    assert!(metrics(&Tensor::zeros(&[0]), &Tensor::zeros(&[0])).is_err());
}

#[test]
fn metric_inequalities_on_random_sets() {
    for seed in 0..50 {
        let p = random(&[4, 11, 3], 100 + seed).map(|v| v + 0.1 * (seed as f64 - 25.0) / 25.0);
        let m = metrics(&p, &random(&[4, 11, 3], 200 + seed)).unwrap();
        assert!(m.rmse >= m.mbe.abs() && m.mae >= m.mbe.abs());
    }
}

// Streaming Welford update over the sample axis.
fn welford(p: &Tensor, y: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (s, cells) = (p.shape()[0], p.shape()[1] * p.shape()[2]);
    let (mut mean, mut m2) = (vec![0.0; cells], vec![0.0; cells]);
    for i in 0..s {
        for c in 0..cells {
            let e = p.data()[i * cells + c] - y.data()[i * cells + c];
            let delta = e - mean[c];
            mean[c] += delta / (i + 1) as f64;
            m2[c] += delta * (e - mean[c]);
        }
    }
    (mean, m2.into_iter().map(|v| v / s as f64).collect())
}

#[test]
fn error_statistics() {
    let y = random(&[6, 11, 3], 27);
    let st = error_stats(&y, &y, false).unwrap();
    assert!(st.mean.data().iter().chain(st.variance.data()).all(|&v| v == 0.0));

    let single = error_stats(&random(&[1, 11, 3], 28), &random(&[1, 11, 3], 29), true).unwrap();
    assert!(single.variance.data().iter().all(|&v| v == 0.0));
    assert_eq!(single.errors.unwrap().shape(), &[1, 11, 3]);

    let p = random(&[40, 11, 3], 30);
    let st = error_stats(&p, &y.gather_rows(&(0..40).map(|i| i % 6).collect::<Vec<_>>()), false).unwrap();
    let (wm, wv) = welford(&p, &y.gather_rows(&(0..40).map(|i| i % 6).collect::<Vec<_>>()));
    for c in 0..33 {
        assert!((st.mean.data()[c] - wm[c]).abs() <= 1e-10 * wm[c].abs().max(1e-3));
        assert!((st.variance.data()[c] - wv[c]).abs() <= 1e-10 * wv[c]);
        assert!(st.variance.data()[c] >= 0.0);
    }
    assert!(error_stats(&Tensor::zeros(&[0, 11, 3]), &Tensor::zeros(&[0, 11, 3]), false).is_err());
}

#[test]
fn worst_species_and_csv() {
    let y = Tensor::zeros(&[2, 3, 3]);
    let p = Tensor::from_fn(&[2, 3, 3], |i| [0.1, 0.5, 0.2][i % 3]);
    let st = error_stats(&p, &y, false).unwrap();
    let worst = st.worst_species(2);
    assert_eq!(worst.iter().map(|w| w.0).collect::<Vec<_>>(), vec![1, 2]);
    assert!((worst[0].1 - 0.5).abs() < 1e-12);
    let names: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
    let csv = st.to_csv(&names);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], STATS_CSV_HEADER);
    assert_eq!(lines.len(), 1 + 9);
    assert!(lines[1].starts_with("0,A,1,"));
    assert!(!csv.contains('\r'));
}
