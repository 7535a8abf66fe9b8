use super::*;
use crate::discretise::all_codes;
use crate::nn::grad_check;

fn random_table(heads: usize, mode: BinMode, scale: f64, rng: &mut Rng) -> UtilityTable {
    let values = (0..heads * mode.bins())
        .map(|_| scale * rng.normal())
        .collect();
    UtilityTable::new(heads, mode.bins(), values).unwrap()
}

/// Joint softmax over every code, by brute force.
fn joint_probabilities(table: &UtilityTable, mode: BinMode, temperature: f64) -> Vec<f64> {
    let qs: Vec<f64> = all_codes(table.heads(), mode)
        .iter()
        .map(|c| table.q_value(&c.digits()) / temperature)
        .collect();
    let max = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = qs.iter().map(|q| (q - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

#[test]
fn q_value_is_mean_of_selected_utilities() {
    let t = UtilityTable::new(2, 3, vec![1.0, 2.0, 3.0, -4.0, 0.0, 8.0]).unwrap();
    // code (+1, -1): U_0(+1) = 3, U_1(-1) = -4
    assert_eq!(t.q_value(&[2, 0]), -0.5);
    assert_eq!(t.greedy_digits(BinMode::Three), vec![2, 2]);
}

#[test]
fn greedy_matches_enumeration() {
    let mut rng = Rng::new(5);
    for mode in [BinMode::Two, BinMode::Three] {
        for heads in 1..=3 {
            for _ in 0..200 {
                let t = random_table(heads, mode, 2.0, &mut rng);
                let codes = all_codes(heads, mode);
                let best = codes
                    .iter()
                    .map(|c| t.q_value(&c.digits()))
                    .fold(f64::NEG_INFINITY, f64::max);
                let greedy = t.greedy_digits(mode);
                assert!((t.q_value(&greedy) - best).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn ties_prefer_no_change() {
    let flat = UtilityTable::new(3, 3, vec![0.5; 9]).unwrap();
    assert_eq!(flat.greedy_digits(BinMode::Three), vec![1, 1, 1]);
    // a tie between -1 and +1 only goes to the lower digit
    let t = UtilityTable::new(1, 3, vec![2.0, 0.0, 2.0]).unwrap();
    assert_eq!(t.greedy_digits(BinMode::Three), vec![0]);
    let two = UtilityTable::new(2, 2, vec![1.0; 4]).unwrap();
    assert_eq!(two.greedy_digits(BinMode::Two), vec![0, 0]);
}

#[test]
fn logsumexp_matches_enumeration() {
    let mut rng = Rng::new(6);
    for mode in [BinMode::Two, BinMode::Three] {
        for heads in 1..=3 {
            for _ in 0..100 {
                let t = random_table(heads, mode, 3.0, &mut rng);
                let brute = log_sum_exp(
                    all_codes(heads, mode)
                        .iter()
                        .map(|c| t.q_value(&c.digits()))
                        .collect::<Vec<_>>()
                        .into_iter(),
                );
                assert!((t.logsumexp() - brute).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn logsumexp_is_stable_for_large_utilities() {
    let t = UtilityTable::new(2, 3, vec![1e4, 1e4 - 1.0, 0.0, -1e4, 5e3, 5e3]).unwrap();
    let v = t.logsumexp();
    assert!(v.is_finite());
    // head 0 dominated by 1e4/2, head 1 by two equal 2.5e3 entries
    let expected = 5e3 + (1.0 + (-0.5f64).exp()).ln() + 2.5e3 + 2f64.ln();
    assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
}

#[test]
fn constant_shift_per_head_leaves_regulariser_and_greedy_unchanged() {
    let mut rng = Rng::new(7);
    let t = random_table(3, BinMode::Three, 1.0, &mut rng);
    let shifted: Vec<f64> = t
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| v + [4.0, -2.5, 100.0][i / 3])
        .collect();
    let s = UtilityTable::new(3, 3, shifted).unwrap();
    let code = [0, 2, 1];
    let reg_t = t.logsumexp() - t.q_value(&code);
    let reg_s = s.logsumexp() - s.q_value(&code);
    assert!((reg_t - reg_s).abs() < 1e-9);
    assert_eq!(t.greedy_digits(BinMode::Three), s.greedy_digits(BinMode::Three));
}

#[test]
fn factorised_sampler_matches_joint_softmax() {
    let mut rng = Rng::new(8);
    let mode = BinMode::Three;
    let t = random_table(2, mode, 1.5, &mut rng);
    for temperature in [1.0, 0.5] {
        let probs = joint_probabilities(&t, mode, temperature);
        let n = 40_000;
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..n {
            let d = sample_digits(&t, temperature, &mut rng);
            counts[d[0] * 3 + d[1]] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(c, p)| {
                let e = p * n as f64;
                (*c as f64 - e).powi(2) / e
            })
            .sum();
        // 8 degrees of freedom, 0.1% critical value
        assert!(chi2 < 26.12, "chi2 {chi2} at T={temperature}");
    }
}

#[test]
fn head_probabilities_multiply_to_joint() {
    let mut rng = Rng::new(9);
    for mode in [BinMode::Two, BinMode::Three] {
        let t = random_table(3, mode, 2.0, &mut rng);
        let joint = joint_probabilities(&t, mode, 0.7);
        for (code, p) in all_codes(3, mode).iter().zip(&joint) {
            let product: f64 = code
                .digits()
                .iter()
                .enumerate()
                .map(|(j, d)| t.head_probabilities(j, 0.7)[*d])
                .product();
            assert!((product - p).abs() < 1e-12);
        }
    }
}

fn small_critic(heads: usize, mode: BinMode, ensemble: usize, seed: u64) -> DecomposedQ {
    DecomposedQ::new(3, heads, mode, &[8, 8], ensemble, &mut Rng::new(seed))
}

fn batch(rows: usize, heads: usize, mode: BinMode, rng: &mut Rng) -> (Matrix, Vec<Vec<usize>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..rows).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
    let codes = (0..rows)
        .map(|_| (0..heads).map(|_| rng.index(mode.bins())).collect())
        .collect();
    let y = (0..rows).map(|_| rng.normal()).collect();
    (Matrix::from_rows(3, &x).unwrap(), codes, y)
}

/// Mean negative log-likelihood of `codes` under the joint softmax of `Q`,
/// enumerating every code.
fn enumerated_nll(net: &Mlp, heads: usize, mode: BinMode, x: &Matrix, codes: &[Vec<usize>]) -> f64 {
    let out = net.forward_batch(x).unwrap();
    let all = all_codes(heads, mode);
    let mut total = 0.0;
    for (r, code) in codes.iter().enumerate() {
        let t = UtilityTable::new(heads, mode.bins(), out.row(r).to_vec()).unwrap();
        let lse = log_sum_exp(all.iter().map(|c| t.q_value(&c.digits())).collect::<Vec<_>>().into_iter());
        total += lse - t.q_value(code);
    }
    total / codes.len() as f64
}

#[test]
fn regulariser_value_equals_enumerated_nll() {
    let mut rng = Rng::new(10);
    for mode in [BinMode::Two, BinMode::Three] {
        let critic = small_critic(3, mode, 1, 11);
        let (x, codes, _) = batch(16, 3, mode, &mut rng);
        let reg = critic.regulariser(0, &x, &codes).unwrap();
        let nll = enumerated_nll(critic.member(0), 3, mode, &x, &codes);
        assert!((reg - nll).abs() < 1e-10);
    }
}

#[test]
fn regulariser_gradient_equals_nll_gradient() {
    let mut rng = Rng::new(12);
    for mode in [BinMode::Two, BinMode::Three] {
        let heads = 3;
        let critic = small_critic(heads, mode, 1, 13);
        let net = critic.member(0);
        let (x, codes, y) = batch(12, heads, mode, &mut rng);
        let (_, with) = critic
            .member_loss_and_grad(0, &x, &codes, &y, 1.0, TdLoss::Mse)
            .unwrap();
        let (_, without) = critic
            .member_loss_and_grad(0, &x, &codes, &y, 0.0, TdLoss::Mse)
            .unwrap();
        let reg_grad: Vec<f64> = with
            .flat()
            .iter()
            .zip(without.flat())
            .map(|(a, b)| a - b)
            .collect();

        // Oracle: NLL gradient w.r.t. utilities from enumerated code
        // marginals, pushed through the network.
        let trace = net.forward_traced(&x).unwrap();
        let all = all_codes(heads, mode);
        let bins = mode.bins();
        let mut upstream = Matrix::zeros(x.rows(), heads * bins);
        for (r, code) in codes.iter().enumerate() {
            let t = UtilityTable::new(heads, bins, trace.output().row(r).to_vec()).unwrap();
            let probs = joint_probabilities(&t, mode, 1.0);
            for (c, p) in all.iter().zip(&probs) {
                for (j, d) in c.digits().iter().enumerate() {
                    let g = upstream.get(r, j * bins + d) + p / heads as f64;
                    upstream.set(r, j * bins + d, g);
                }
            }
            for (j, d) in code.iter().enumerate() {
                let g = upstream.get(r, j * bins + d) - 1.0 / heads as f64;
                upstream.set(r, j * bins + d, g);
            }
        }
        for v in upstream.as_mut_slice() {
            *v /= x.rows() as f64;
        }
        let (oracle, _) = net.backward(&trace, &upstream).unwrap();
        let worst = reg_grad
            .iter()
            .zip(oracle.flat())
            .map(|(a, b)| (a - b).abs() / (a.abs() + b.abs() + 1e-12))
            .filter(|e| e.is_finite())
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "identity error {worst}");

        // And the same gradient against finite differences of the NLL.
        let params = net.flat_params();
        let mut probe = net.clone();
        let err = grad_check(
            |p| {
                probe.set_flat_params(p).unwrap();
                enumerated_nll(&probe, heads, mode, &x, &codes)
            },
            &params,
            &reg_grad,
            params.len(),
            1e-5,
            &mut rng,
        );
        assert!(err < 1e-4, "finite-difference error {err}");
    }
}

#[test]
fn member_loss_gradient_checks() {
    let mut rng = Rng::new(14);
    for (loss, alpha) in [(TdLoss::Mse, 0.0), (TdLoss::Mse, 5.0), (TdLoss::Huber, 2.0)] {
        let critic = small_critic(2, BinMode::Three, 1, 15);
        let (x, codes, mut y) = batch(10, 2, BinMode::Three, &mut rng);
        if loss == TdLoss::Huber {
            y.iter_mut().for_each(|v| *v *= 5.0);
        }
        let (value, grads) = critic
            .member_loss_and_grad(0, &x, &codes, &y, alpha, loss)
            .unwrap();
        assert!((value.total - value.td - alpha * value.regulariser).abs() < 1e-12);
        let params = critic.member(0).flat_params();
        let mut probe = critic.member(0).clone();
        let err = grad_check(
            |p| {
                probe.set_flat_params(p).unwrap();
                member_loss_and_grad(&probe, 2, 3, &x, &codes, &y, alpha, loss)
                    .unwrap()
                    .0
                    .total
            },
            &params,
            &grads.flat(),
            params.len(),
            1e-5,
            &mut rng,
        );
        assert!(err < 1e-4, "{loss:?} alpha={alpha}: {err}");
    }
}

fn constant_net(value: f32, outputs: usize) -> Mlp {
    let mut net = Mlp::zeros(&[3, 4, outputs], Activation::Relu, Activation::Identity);
    let last = net.layers_mut().last_mut().unwrap();
    last.bias.iter_mut().for_each(|b| *b = value);
    net
}

#[test]
fn td_target_takes_minimum_of_two_targets() {
    let outputs = 2 * 3;
    let critic = DecomposedQ::from_parts(
        vec![constant_net(0.0, outputs), constant_net(0.0, outputs)],
        vec![constant_net(1.0, outputs), constant_net(3.0, outputs)],
        2,
        BinMode::Three,
    )
    .unwrap();
    let x = Matrix::from_rows(3, &[[0.1, 0.2, 0.3], [1.0, 1.0, 1.0]]).unwrap();
    let mut rng = Rng::new(1);
    let y = critic
        .td_targets(&x, &[0.5, -1.0], &[1.0, 0.0], &[0.9, 0.9], 1.0, &mut rng)
        .unwrap();
    assert!((y[0] - (0.5 + 0.9 * 1.0)).abs() < 1e-12);
    assert_eq!(y[1], -1.0);
}

#[test]
fn single_member_td_target_uses_itself() {
    let critic = DecomposedQ::from_parts(
        vec![constant_net(0.0, 4)],
        vec![constant_net(2.0, 4)],
        2,
        BinMode::Two,
    )
    .unwrap();
    let x = Matrix::from_rows(3, &[[0.0; 3]]).unwrap();
    let y = critic
        .td_targets(&x, &[1.0], &[1.0], &[0.5], 1.0, &mut Rng::new(2))
        .unwrap();
    assert_eq!(y, vec![2.0]);
}

#[test]
fn soft_update_limits() {
    let mut critic = small_critic(2, BinMode::Three, 2, 16);
    let before = critic.targets().to_vec();
    for k in 0..2 {
        let p: Vec<f32> = critic.member(k).flat_params().iter().map(|v| v + 1.0).collect();
        critic.member_mut(k).set_flat_params(&p).unwrap();
    }
    critic.soft_update(0.0);
    assert_eq!(critic.targets(), &before[..]);
    critic.soft_update(1.0);
    assert_eq!(critic.targets(), critic.members());
}

#[test]
fn greedy_code_uses_ensemble_mean() {
    let outputs = 3;
    let mut a = constant_net(0.0, outputs);
    let mut b = constant_net(0.0, outputs);
    // member a prefers -1 strongly, b prefers +1 weakly: the mean picks -1
    a.layers_mut().last_mut().unwrap().bias = vec![4.0, 0.0, -1.0];
    b.layers_mut().last_mut().unwrap().bias = vec![-1.0, 0.0, 2.0];
    let critic = DecomposedQ::from_parts(vec![a.clone(), b.clone()], vec![a, b], 1, BinMode::Three).unwrap();
    let code = critic.greedy_code(&[0.0, 0.0, 0.0]).unwrap();
    assert_eq!(code.values(), &[-1]);
}

#[test]
fn rejects_bad_inputs() {
    let critic = small_critic(2, BinMode::Three, 1, 17);
    assert!(critic.utilities(0, &[f64::NAN, 0.0, 0.0]).is_err());
    assert!(critic.utilities(0, &[0.0, 0.0]).is_err());
    assert!(critic.sample_code(0, &[0.0; 3], 0.0, &mut Rng::new(1)).is_err());
    let wrong = DeltaCode::from_digits(&[0, 1], BinMode::Two);
    assert!(critic.q_value(0, &[0.0; 3], &wrong).is_err());
}
