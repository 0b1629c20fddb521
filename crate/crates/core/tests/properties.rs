use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpgn_core::data::{inject_noise, split_and_window, split_lengths, synthetic_sinusoid, NoiseSpec, SplitSpec};
use tpgn_core::params::ParamSet;
use tpgn_core::pgn::{pgn_forward, PgnParams};
use tpgn_core::tpgn::{long_branch, prepare_batch, tpgn_forward, SeriesWindow, TpgnConfig, TpgnParams};
use tpgn_core::train::{adam_step, AdamState};
use tpgn_core::{finite_diff_check, Graph, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An output shape plus two operand shapes that broadcast to it.
fn broadcast_case() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>)> {
    prop::collection::vec(1usize..=3, 1..=4).prop_flat_map(|out| {
        let r = out.len();
        let operand = (0..=r, prop::collection::vec(any::<bool>(), r)).prop_map({
            let out = out.clone();
            move |(drop, ones)| {
                (drop.min(r - 1)..r).map(|i| if ones[i] { 1 } else { out[i] }).collect::<Vec<_>>()
            }
        });
        (Just(out), operand.clone(), operand)
    })
}

/// Reads `t` at the output multi-index `idx`, aligning trailing dimensions.
fn broadcast_read(t: &Tensor, idx: &[usize]) -> f64 {
    let off = idx.len() - t.rank();
    let pos: Vec<usize> = t.shape().iter().enumerate().map(|(i, &d)| if d == 1 { 0 } else { idx[off + i] }).collect();
    t.at(&pos)
}

fn multi_index(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for i in (0..shape.len()).rev() {
        idx[i] = flat % shape[i];
        flat /= shape[i];
    }
    idx
}

fn tiny_tpgn(history_len: usize, forecast_len: usize, period: usize, hidden: usize, variant: &str) -> TpgnConfig {
    TpgnConfig { history_len, forecast_len, period, hidden, variant: variant.parse().unwrap(), ..TpgnConfig::default() }
}

fn random_window(cfg: &TpgnConfig, seed: u64) -> SeriesWindow {
    let mut r = rng(seed);
    SeriesWindow::new(
        Tensor::uniform(&[cfg.history_len], 2.0, &mut r),
        Tensor::uniform(&[cfg.history_len, cfg.time_features], 0.5, &mut r),
        Tensor::uniform(&[cfg.forecast_len], 2.0, &mut r),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcasting_matches_materialized_expansion((out, sa, sb) in broadcast_case(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::uniform(&sa, 1.0, &mut r);
        let b = Tensor::uniform(&sb, 1.0, &mut r);
        let mut g = Graph::new();
        let sum = g.add(&a, &b).unwrap();
        let prod = g.mul(&a, &b).unwrap();
        let expected_shape: Vec<usize> = {
            let rank = sa.len().max(sb.len());
            (0..rank).map(|i| {
                let da = if i + sa.len() >= rank { sa[i + sa.len() - rank] } else { 1 };
                let db = if i + sb.len() >= rank { sb[i + sb.len() - rank] } else { 1 };
                da.max(db)
            }).collect()
        };
        prop_assert_eq!(sum.shape(), expected_shape.as_slice());
        prop_assert!(expected_shape.len() <= out.len());
        for flat in 0..sum.len() {
            let idx = multi_index(flat, &expected_shape);
            let (x, y) = (broadcast_read(&a, &idx), broadcast_read(&b, &idx));
            prop_assert_eq!(sum.data()[flat].to_bits(), (x + y).to_bits());
            prop_assert_eq!(prod.data()[flat].to_bits(), (x * y).to_bits());
        }
    }

    #[test]
    fn reshape_and_permute_round_trip(shape in prop::collection::vec(1usize..=4, 1..=4), seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = Tensor::uniform(&shape, 1.0, &mut r);
        let mut g = Graph::new();
        let flat = g.reshape(&t, &[t.len()]).unwrap();
        let back = g.reshape(&flat, &shape).unwrap();
        prop_assert!(back.bitwise_eq(&t));
        let mut order: Vec<usize> = (0..shape.len()).collect();
        order.rotate_left(seed as usize % shape.len());
        let mut inverse = vec![0; order.len()];
        for (i, &o) in order.iter().enumerate() {
            inverse[o] = i;
        }
        let p = g.permute(&t, &order).unwrap();
        let q = g.permute(&p, &inverse).unwrap();
        prop_assert!(q.bitwise_eq(&t));
    }

    #[test]
    fn differentiable_ops_pass_gradcheck(rows in 1usize..=3, inner in 1usize..=3, cols in 1usize..=3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::uniform(&[rows, inner], 1.0, &mut r);
        let w = Tensor::uniform(&[inner, cols], 1.0, &mut r);
        let bias = Tensor::uniform(&[cols], 1.0, &mut r);
        let err = finite_diff_check(
            |g, x| {
                let y = g.matmul(x, &w)?;
                let y = g.add(&y, &bias)?;
                let s = g.sigmoid(&y)?;
                let t = g.tanh(&y)?;
                let m = g.mul(&s, &t)?;
                let c = g.concat(1, &[m, x.clone()])?;
                let p = g.pad_front(&c, 1)?;
                let z = g.sub(&p, &Tensor::scalar(0.25))?;
                let z = g.mul(&z, &z)?;
                g.mean_all(&z)
            },
            &x,
            1e-4,
        ).unwrap();
        prop_assert!(err < 1e-5, "relative error {}", err);
    }

    #[test]
    fn backward_is_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = tiny_tpgn(8, 8, 4, 3, "full");
        let params = TpgnParams::init(&cfg, &mut r).unwrap();
        let window = random_window(&cfg, seed ^ 1);
        let grads = || {
            let mut g = Graph::new();
            let p = params.track(&mut g);
            let y = tpgn_forward(&mut g, &window, &p).unwrap();
            let loss = g.mean_all(&y).unwrap();
            let grads = g.backward(&loss).unwrap();
            p.tensors().iter().map(|t| grads.get_or_zeros(t)).collect::<Vec<_>>()
        };
        let (a, b) = (grads(), grads());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.bitwise_eq(y));
        }
    }

    #[test]
    fn pgn_is_causal_and_gated(l in 2usize..=24, c in 1usize..=3, d in 1usize..=6, s in 0usize..24, seed in any::<u64>()) {
        let s = s % l;
        let mut r = rng(seed);
        let params = PgnParams::init(l, c, d, &mut r).unwrap();
        let x = Tensor::uniform(&[l, c], 1.0, &mut r);
        let base = pgn_forward(&mut Graph::new(), &x, &params).unwrap();
        prop_assert!(base.gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let mut bumped = x.to_vec();
        for v in &mut bumped[s * c..(s + 1) * c] {
            *v += 0.5;
        }
        let moved = pgn_forward(&mut Graph::new(), &Tensor::new(&[l, c], bumped).unwrap(), &params).unwrap();
        for t in 0..s {
            for j in 0..d {
                prop_assert_eq!(base.out.at(&[t, j]).to_bits(), moved.out.at(&[t, j]).to_bits(), "t={} s={}", t, s);
            }
        }
    }

    #[test]
    fn forecast_length_follows_config(period in 1usize..=6, rows in 2usize..=5, future in 1usize..=4, hidden in 1usize..=4, v in 0usize..6, seed in any::<u64>()) {
        let variant = ["full", "long", "short", "gru", "lstm", "mlp"][v];
        let cfg = tiny_tpgn(rows * period, future * period, period, hidden, variant);
        let params = TpgnParams::init(&cfg, &mut rng(seed)).unwrap();
        let y = tpgn_forward(&mut Graph::new(), &random_window(&cfg, seed), &params).unwrap();
        prop_assert_eq!(y.shape(), &[cfg.forecast_len]);
        prop_assert!(y.all_finite());
    }

    #[test]
    fn long_branch_columns_are_independent(period in 2usize..=5, rows in 2usize..=5, col in 0usize..5, seed in any::<u64>()) {
        let col = col % period;
        let cfg = tiny_tpgn(rows * period, period, period, 3, "long");
        let params = TpgnParams::init(&cfg, &mut rng(seed)).unwrap();
        let window = random_window(&cfg, seed ^ 7);
        let batch = prepare_batch(&[&window], &cfg).unwrap();
        let base = long_branch(&mut Graph::new(), &batch.grid, &params).unwrap();
        let mut zeroed = batch.grid.to_vec();
        let ch = cfg.channels();
        for r in 0..rows {
            for k in 0..ch {
                zeroed[(r * period + col) * ch + k] = 0.0;
            }
        }
        let grid = Tensor::new(batch.grid.shape(), zeroed).unwrap();
        let moved = long_branch(&mut Graph::new(), &grid, &params).unwrap();
        let d = cfg.hidden;
        for q in (0..period).filter(|&q| q != col) {
            for j in 0..d {
                prop_assert_eq!(base.data()[q * d + j].to_bits(), moved.data()[q * d + j].to_bits());
            }
        }
    }

    #[test]
    fn windows_respect_splits(n in 40usize..400, lh in 1usize..8, lf in 1usize..8) {
        let series = synthetic_sinusoid(n, 24, 0.0);
        let [a, b, c] = split_lengths(n);
        prop_assert_eq!(a + b + c, n);
        match split_and_window(&series, SplitSpec { history_len: lh, forecast_len: lf }, true) {
            Ok(s) => {
                for (set, len) in [(&s.train, a), (&s.val, b), (&s.test, c)] {
                    prop_assert_eq!(set.len(), len - lh - lf + 1);
                }
                let last_train = s.train.target_timestamps(s.train.len() - 1).last().copied().unwrap();
                let first_test = s.test.history_timestamps(0)[0];
                prop_assert!(first_test > last_train);
            }
            Err(_) => prop_assert!([a, b, c].iter().any(|&len| len < lh + lf)),
        }
    }

    #[test]
    fn noise_is_reproducible_and_bounded(values in prop::collection::vec(0.01f64..10.0, 1..64), eps in 0.0f64..=1.0, seed in any::<u64>()) {
        let spec = NoiseSpec { epsilon: eps, seed };
        prop_assert!(spec.validate().is_ok());
        let a = inject_noise(&values, eps, &mut rng(seed));
        let b = inject_noise(&values, eps, &mut rng(seed));
        prop_assert_eq!(&a, &b);
        let changed = a.iter().zip(&values).filter(|(x, y)| x != y).count();
        prop_assert!(changed <= (eps * values.len() as f64).floor() as usize);
        for (x, v) in a.iter().zip(&values) {
            prop_assert!(*x >= -v - 1e-12 && *x <= 3.0 * v + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn wide_sliding_windows_match_direct_sum(width in 128usize..200, extra in 1usize..40, c in 1usize..=2, d in 1usize..=5, lead in 0usize..150, seed in any::<u64>()) {
        let mut r = rng(seed);
        let len = width + extra;
        let count = len - width + 1;
        let mut x = Tensor::uniform(&[2, len, c], 1.0, &mut r).to_vec();
        for s in 0..2 {
            for v in &mut x[s * len * c..(s * len + lead.min(len)) * c] {
                *v = 0.0;
            }
        }
        let x = Tensor::new(&[2, len, c], x).unwrap();
        let w = Tensor::uniform(&[d, width * c], 1.0, &mut r);
        let y = Graph::new().sliding_matmul(&x, &w, width, count).unwrap();
        prop_assert_eq!(y.shape(), &[2, count, d]);
        for s in 0..2 {
            for t in 0..count {
                for j in 0..d {
                    let direct: f64 = (0..width * c).map(|q| w.data()[j * width * c + q] * x.data()[(s * len + t) * c + q]).sum();
                    prop_assert!((y.at(&[s, t, j]) - direct).abs() < 1e-11);
                }
            }
        }
    }
}

#[test]
fn adam_descends_a_quadratic() {
    let mut theta = vec![Tensor::scalar(1.0)];
    let mut state = AdamState::new(&theta);
    let mut last = 1.0;
    for _ in 0..100 {
        let g = Tensor::scalar(2.0 * theta[0].item());
        theta = adam_step(&theta, &[g], &mut state, 1e-3).unwrap();
        let f = theta[0].item() * theta[0].item();
        assert!(f < last);
        last = f;
    }
}
