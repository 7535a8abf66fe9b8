use super::*;
use crate::discretise::{all_codes, BinMode, DeltaCode, NormStats};
use crate::env::{generate_dataset, make_behaviour_policy, strip_actions, EnvSpec, Quality};
use crate::nn::{grad_check, Activation, Adam, AdamConfig, Matrix, Mlp};
use crate::offline::{train_model, ModelKind, OfflineConfig};
use crate::rng::Rng;

fn small_td3() -> Td3Config {
    Td3Config {
        hidden: vec![16, 16],
        batch_size: 16,
        start_steps: 50,
        tau: 0.05,
        ..Td3Config::default()
    }
}

fn small_decqn() -> DecqnConfig {
    DecqnConfig {
        hidden: vec![16, 16],
        batch_size: 16,
        ensemble: 2,
        ..DecqnConfig::default()
    }
}

fn small_guided(total: u64) -> GuidedConfig {
    GuidedConfig {
        total_steps: total,
        eval_interval: total / 2,
        eval_episodes: 2,
        schedule: GuidanceSchedule::scaled(total),
        idm_warmup: 50,
        idm_min_fill: 32,
        idm_batch: 16,
        idm_hidden: vec![16, 16],
        replay_capacity: 10_000,
        td3: small_td3(),
        decqn: small_decqn(),
        ..GuidedConfig::default()
    }
}

fn random_batch(m: usize, n: usize, rows: usize, rng: &mut Rng) -> Batch {
    let gen = |cols: usize, rng: &mut Rng| {
        let data = (0..rows * cols).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    };
    Batch {
        states: gen(m, rng),
        actions: gen(n, rng),
        rewards: (0..rows).map(|_| rng.normal()).collect(),
        next_states: gen(m, rng),
        not_done: (0..rows).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect(),
        discount: vec![0.99; rows],
    }
}

fn pretrained(seed: u64) -> (crate::offline::PretrainedModel, crate::env::Dataset) {
    let spec = EnvSpec::point_mass();
    let mut policy = make_behaviour_policy(&spec, Quality::Random, None).unwrap();
    let ds = generate_dataset(&spec, &mut policy, Quality::Random, 400, &mut Rng::new(seed)).unwrap();
    let free = strip_actions(&ds);
    let config = OfflineConfig {
        steps: 50,
        batch_size: 32,
        ensemble: 2,
        hidden: vec![16],
        log_every: 10,
        ..OfflineConfig::default()
    };
    (train_model(ModelKind::Oso, &free, &config, &mut Rng::new(seed)).unwrap(), free)
}

#[test]
fn beta_schedule_examples() {
    let s = GuidanceSchedule::default();
    assert_eq!(s.beta(0), 0.5);
    assert!((s.beta(150_000) - 0.4).abs() < 1e-12);
    assert_eq!(s.beta(600_000), 0.0);
    assert_eq!(s.beta(10_000_000), 0.0);
    let scaled = GuidanceSchedule::scaled(100_000);
    assert_eq!(scaled.interval, 10_000);
    assert!((scaled.beta(25_000) - 0.3).abs() < 1e-12);
    assert_eq!(GuidanceSchedule::scaled(2_000_000).interval, 100_000);
    let fixed = GuidanceSchedule::fixed(0.8);
    assert_eq!(fixed.beta(0), 0.8);
    assert_eq!(fixed.beta(999_999), 0.8);
    assert!(GuidanceSchedule { beta_min: 0.6, ..s }.validate().is_err());
}

#[test]
fn warmup_and_unguided_force_zero_beta() {
    let config = small_guided(1000);
    assert_eq!(config.beta_at(10), 0.0);
    assert_eq!(config.beta_at(50), 0.5);
    let plain = GuidedConfig { guide: false, ..config };
    assert_eq!(plain.beta_at(500), 0.0);
}

#[test]
fn switch_limits_and_frequency() {
    let spec = EnvSpec::point_mass();
    let (model, _) = pretrained(3);
    let mut rng = Rng::new(5);
    let agent = OnlineAgent::new(AgentKind::Td3, &spec, &small_td3(), &small_decqn(), &mut rng);
    let idm = IdmNet::new(
        model.stats.clone(),
        spec.action_low.clone(),
        spec.action_high.clone(),
        IdmInput::Code,
        &[8],
        &mut rng,
    );
    let state = spec.reset(&mut rng);
    let (mut sw, mut ag) = (Rng::new(1), Rng::new(2));
    let expected = idm.predict(&state, &model.greedy_code(&state).unwrap()).unwrap();
    for step in 0..200 {
        let (a, b) = select_action(&agent, &model, &idm, &spec, &state, 1.0, step, &mut sw, &mut ag).unwrap();
        assert_eq!(b, Branch::Offline);
        assert_eq!(a, expected);
        let (_, b) = select_action(&agent, &model, &idm, &spec, &state, 0.0, step, &mut sw, &mut ag).unwrap();
        assert_eq!(b, Branch::Online);
    }
    let n = 4000;
    let hits = (0..n)
        .filter(|&step| {
            let (_, b) = select_action(&agent, &model, &idm, &spec, &state, 0.3, step, &mut sw, &mut ag).unwrap();
            b == Branch::Offline
        })
        .count() as f64;
    let sd = (n as f64 * 0.3 * 0.7).sqrt();
    assert!((hits - 0.3 * n as f64).abs() < 4.0 * sd, "{hits}");
}

#[test]
fn zero_weight_idm_predicts_the_box_centre() {
    let stats = NormStats::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
    let mut idm = IdmNet::new(stats, vec![-2.0, 0.0], vec![2.0, 1.0], IdmInput::Code, &[4], &mut Rng::new(0));
    idm.net = Mlp::zeros(&[4, 4, 2], Activation::Relu, Activation::Tanh);
    for code in all_codes(2, BinMode::Three) {
        assert_eq!(idm.predict(&[0.3, -0.1], &code).unwrap(), vec![0.0, 0.5]);
    }
    assert!(idm.predict_difference(&[0.0, 0.0], &[0.1, 0.1]).is_err());
}

#[test]
fn idm_l1_loss_is_zero_at_its_own_predictions_and_checks_gradients() {
    let mut rng = Rng::new(9);
    let stats = NormStats::new(vec![0.5, -0.5], vec![2.0, 0.5]).unwrap();
    let idm = IdmNet::new(stats, vec![-1.0; 2], vec![1.0; 2], IdmInput::Code, &[8, 8], &mut rng);
    let rows: Vec<Vec<f64>> = (0..10)
        .map(|_| {
            let code = DeltaCode::from_digits(&[rng.index(3), rng.index(3)], BinMode::Three);
            idm.features(&[rng.normal(), rng.normal()], &code.as_reals()).unwrap()
        })
        .collect();
    let x = Matrix::from_rows(4, &rows).unwrap();
    let own = idm.predict_batch(&x).unwrap();
    assert!(idm.l1_loss_and_grad(&x, &own).unwrap().0 < 1e-12);
    let targets = Matrix::from_vec(10, 2, (0..20).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap();
    let (_, grads) = idm.l1_loss_and_grad(&x, &targets).unwrap();
    let mut probe = idm.clone();
    let err = grad_check(
        |p| {
            probe.net.set_flat_params(p).unwrap();
            probe.l1_loss_and_grad(&x, &targets).unwrap().0
        },
        &idm.net.flat_params(),
        &grads.flat(),
        usize::MAX,
        1e-5,
        &mut rng,
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn idm_learns_a_linear_inverse() {
    let mut rng = Rng::new(21);
    let stats = NormStats::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
    let mut idm = IdmNet::new(stats, vec![-1.0; 2], vec![1.0; 2], IdmInput::Continuous, &[32, 32], &mut rng);
    let mut adam = Adam::new(&idm.net, AdamConfig::with_lr(3e-3));
    let sample = |rng: &mut Rng, n: usize| {
        let mut x = Matrix::zeros(n, 4);
        let mut a = Matrix::zeros(n, 2);
        for r in 0..n {
            let s = [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)];
            let act = [rng.uniform_in(-0.8, 0.8), rng.uniform_in(-0.8, 0.8)];
            let diff = [0.5 * act[0] - 0.1 * s[0], 0.5 * act[1]];
            x.row_mut(r).copy_from_slice(&[s[0], s[1], diff[0], diff[1]]);
            a.row_mut(r).copy_from_slice(&act);
        }
        (x, a)
    };
    for _ in 0..3000 {
        let (x, a) = sample(&mut rng, 64);
        idm.update(&mut adam, (&x, &a), None).unwrap();
    }
    let (x, a) = sample(&mut rng, 500);
    let (loss, _) = idm.l1_loss_and_grad(&x, &a).unwrap();
    assert!(loss / 2.0 < 0.05, "per-dimension L1 {loss}");
}

#[test]
fn idm_update_reports_both_terms() {
    let mut rng = Rng::new(4);
    let stats = NormStats::new(vec![0.0], vec![1.0]).unwrap();
    let mut idm = IdmNet::new(stats, vec![-1.0], vec![1.0], IdmInput::Code, &[4], &mut rng);
    let mut adam = Adam::new(&idm.net, AdamConfig::with_lr(1e-3));
    let x = Matrix::from_rows(2, &[[0.1, 1.0], [0.2, -1.0]]).unwrap();
    let a = Matrix::from_rows(1, &[[0.5], [-0.5]]).unwrap();
    let only = idm.clone().update(&mut adam.clone(), (&x, &a), None).unwrap();
    assert_eq!(only.offline, 0.0);
    let both = idm.update(&mut adam, (&x, &a), Some((&x, &a))).unwrap();
    assert_eq!(both.online, both.offline);
    assert!((both.total - 2.0 * only.online).abs() < 1e-12);
}

#[test]
fn td3_gradients_check() {
    let mut rng = Rng::new(13);
    let spec = EnvSpec::point_mass();
    let agent = Td3Agent::new(&spec, Td3Config { hidden: vec![8, 8], ..small_td3() }, &mut rng);
    let batch = random_batch(4, 2, 10, &mut rng);
    let targets: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
    let (_, grads) = agent.critic_loss_and_grad(0, &batch, &targets).unwrap();
    let mut probe = agent.critics[0].clone();
    let err = grad_check(
        |p| {
            probe.set_flat_params(p).unwrap();
            critic_loss_and_grad(&probe, &batch, &targets).unwrap().0
        },
        &agent.critics[0].flat_params(),
        &grads.flat(),
        usize::MAX,
        1e-5,
        &mut rng,
    );
    assert!(err < 1e-4, "critic {err}");
    let (_, grads) = agent.actor_loss_and_grad(&batch.states).unwrap();
    let mut probe = agent.actor.clone();
    let err = grad_check(
        |p| {
            probe.net.set_flat_params(p).unwrap();
            actor_loss_and_grad(&probe, &agent.critics[0], &batch.states).unwrap().0
        },
        &agent.actor.net.flat_params(),
        &grads.flat(),
        usize::MAX,
        1e-5,
        &mut rng,
    );
    assert!(err < 1e-4, "actor {err}");
}

#[test]
fn td3_critic_learns_zero_rewards() {
    let mut rng = Rng::new(17);
    let spec = EnvSpec::point_mass();
    let mut agent = Td3Agent::new(&spec, Td3Config { critic_lr: 3e-3, ..small_td3() }, &mut rng);
    let mut batch = random_batch(4, 2, 64, &mut rng);
    batch.rewards = vec![0.0; 64];
    batch.discount = vec![0.5; 64];
    for _ in 0..1500 {
        agent.update(&batch, &mut rng).unwrap();
    }
    let x = batch.states.hconcat(&batch.actions).unwrap();
    let q = agent.critics[0].forward_batch(&x).unwrap();
    let worst = q.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 0.05, "{worst}");
    assert!(agent.updates() == 1500);
}

#[test]
fn td3_explores_uniformly_then_near_the_actor() {
    let mut rng = Rng::new(2);
    let spec = EnvSpec::point_mass();
    let agent = Td3Agent::new(&spec, small_td3(), &mut rng);
    let s = spec.reset(&mut rng);
    let det = agent.act(&s).unwrap();
    for _ in 0..100 {
        let a = agent.explore(&s, 10, &mut rng).unwrap();
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        let b = agent.explore(&s, 10_000, &mut rng).unwrap();
        assert!(b.iter().zip(&det).all(|(x, y)| (x - y).abs() < 0.6));
    }
}

#[test]
fn replay_n_step_truncates_at_episode_end() {
    let mut buf = ReplayBuffer::new(1, 1, 16);
    for t in 0..6 {
        let end = t == 2;
        buf.push(&[t as f64], &[0.0], 1.0, &[t as f64 + 1.0], end, end).unwrap();
    }
    let mut rng = Rng::new(0);
    let b = buf.sample_n_step(200, 3, 0.5, &mut rng).unwrap();
    for r in 0..200 {
        let s = b.states.get(r, 0) as usize;
        let (ret, next, not_done, disc) = match s {
            0 => (1.75, 3.0, 0.0, 0.125),
            1 => (1.5, 3.0, 0.0, 0.25),
            2 => (1.0, 3.0, 0.0, 0.5),
            3 => (1.75, 6.0, 1.0, 0.125),
            4 => (1.5, 6.0, 1.0, 0.25),
            5 => (1.0, 6.0, 1.0, 0.5),
            _ => unreachable!(),
        };
        assert_eq!(b.rewards[r], ret, "state {s}");
        assert_eq!(b.next_states.get(r, 0), next, "state {s}");
        assert_eq!(b.not_done[r], not_done, "state {s}");
        assert_eq!(b.discount[r], disc, "state {s}");
    }
    let one = buf.sample(50, 0.9, &mut rng).unwrap();
    assert!(one.discount.iter().all(|d| *d == 0.9));
}

#[test]
fn replay_wraps_at_capacity() {
    let mut buf = ReplayBuffer::new(1, 1, 4);
    for t in 0..10 {
        buf.push(&[t as f64], &[0.0], 0.0, &[t as f64], false, false).unwrap();
    }
    assert_eq!(buf.len(), 4);
    let mut seen: Vec<f64> = (0..4).map(|i| buf.state(i)[0]).collect();
    seen.sort_by(f64::total_cmp);
    assert_eq!(seen, vec![6.0, 7.0, 8.0, 9.0]);
    assert!(ReplayBuffer::new(1, 1, 4).sample(2, 0.9, &mut Rng::new(0)).is_err());
}

#[test]
fn decqn_epsilon_and_action_mapping() {
    let spec = EnvSpec::point_mass();
    let agent = DecqnOnlineAgent::new(&spec, small_decqn(), &mut Rng::new(0));
    assert_eq!(agent.epsilon(0), 1.0);
    assert!((agent.epsilon(1000) - 0.999f64.powi(1000)).abs() < 1e-12);
    assert_eq!(agent.epsilon(1_000_000), 0.05);
    for code in all_codes(2, BinMode::Three) {
        let a = agent.digits_to_action(&code.digits());
        assert_eq!(agent.action_to_digits(&a).unwrap(), code.digits());
    }
    assert_eq!(agent.digits_to_action(&[0, 1]), vec![-1.0, 0.0]);
}

#[test]
fn decqn_agent_trains_finitely() {
    let spec = EnvSpec::point_mass();
    let mut rng = Rng::new(8);
    let mut agent = DecqnOnlineAgent::new(&spec, small_decqn(), &mut rng);
    let mut buf = ReplayBuffer::new(4, 2, 100);
    let mut s = spec.reset(&mut rng);
    assert!(agent.train_step(&buf, &mut rng).unwrap().is_none());
    for step in 0..60 {
        let a = agent.explore(&s, step, &mut rng).unwrap();
        let out = spec.step(&s, &a).unwrap();
        buf.push(&s, &a, out.reward, &out.next_state, false, false).unwrap();
        s = out.next_state;
        if let Some(l) = agent.train_step(&buf, &mut rng).unwrap() {
            assert!(l.is_finite());
        }
    }
}

#[test]
fn zero_beta_guidance_matches_the_unguided_agent() {
    let spec = EnvSpec::point_mass();
    let (model, data) = pretrained(1);
    let mut config = small_guided(300);
    config.schedule = GuidanceSchedule::fixed(0.0);
    let guided = guided_train(&spec, Some(&model), Some(&data), &config, &mut Rng::new(4)).unwrap();
    let plain = GuidedConfig { guide: false, ..config };
    let unguided = guided_train(&spec, None, None, &plain, &mut Rng::new(4)).unwrap();
    assert_eq!(guided.offline_actions, 0);
    assert_eq!(write_agent(&guided.agent, "point_mass"), write_agent(&unguided.agent, "point_mass"));
    let returns = |r: &GuidedRun| r.curve.iter().map(|c| c.mean_return).collect::<Vec<_>>();
    assert_eq!(returns(&guided), returns(&unguided));
    assert!(guided.idm_trace.iter().all(|t| t.online.is_finite() && t.offline > 0.0));
    assert!(unguided.idm.is_none() && unguided.curve.iter().all(|c| c.idm_loss.is_nan()));
}

#[test]
fn guided_run_is_reproducible_and_switches() {
    let spec = EnvSpec::point_mass();
    let (model, data) = pretrained(2);
    let config = small_guided(300);
    let a = guided_train(&spec, Some(&model), Some(&data), &config, &mut Rng::new(6)).unwrap();
    let b = guided_train(&spec, Some(&model), Some(&data), &config, &mut Rng::new(6)).unwrap();
    assert_eq!(curve_csv(&a.curve), curve_csv(&b.curve));
    assert!(a.offline_actions > 0);
    assert_eq!(a.curve.len(), 2);
    assert!(curve_csv(&a.curve).starts_with("env_step,mean_return,std_return,beta,idm_loss\n"));
    assert!(guided_train(&spec, None, None, &config, &mut Rng::new(0)).is_err());
}

#[test]
fn decqn_agent_runs_under_guidance() {
    let spec = EnvSpec::point_mass();
    let (model, data) = pretrained(5);
    let config = GuidedConfig { agent: AgentKind::Decqn, ..small_guided(200) };
    let run = guided_train(&spec, Some(&model), Some(&data), &config, &mut Rng::new(1)).unwrap();
    assert!(run.curve.iter().all(|c| c.mean_return.is_finite()));
    assert_eq!(run.agent.kind(), AgentKind::Decqn);
}

#[test]
fn agent_actor_and_idm_files_round_trip() {
    let spec = EnvSpec::point_mass();
    let mut rng = Rng::new(3);
    let s = spec.reset(&mut rng);
    for kind in [AgentKind::Td3, AgentKind::Decqn] {
        let agent = OnlineAgent::new(kind, &spec, &small_td3(), &small_decqn(), &mut rng);
        let bytes = write_agent(&agent, &spec.name);
        let (name, back) = read_agent(&bytes).unwrap();
        assert_eq!(name, spec.name);
        assert_eq!(back.kind(), kind);
        assert_eq!(back.act(&s).unwrap(), agent.act(&s).unwrap());
        assert_eq!(write_agent(&back, &spec.name), bytes);
        assert!(read_agent(&bytes[..bytes.len() - 3]).is_err());
    }
    let agent = Td3Agent::new(&spec, small_td3(), &mut rng);
    let bytes = write_actor(&agent.actor, &spec.name);
    assert_eq!(read_actor(&bytes, &spec).unwrap().action(&s).unwrap(), agent.act(&s).unwrap());
    assert!(read_actor(&bytes, &EnvSpec::pendulum()).is_err());
    let idm = IdmNet::new(
        NormStats::new(vec![0.0; 4], vec![1.0; 4]).unwrap(),
        spec.action_low.clone(),
        spec.action_high.clone(),
        IdmInput::Continuous,
        &[8],
        &mut rng,
    );
    assert_eq!(read_idm(&write_idm(&idm)).unwrap(), idm);
    assert!(read_idm(b"NOPE").is_err());
}

#[test]
fn train_expert_returns_an_actor() {
    let spec = EnvSpec::point_mass();
    let (actor, curve) = train_expert(&spec, &small_guided(200), &mut Rng::new(0)).unwrap();
    assert_eq!(curve.len(), 2);
    assert_eq!(actor.action(&spec.reset(&mut Rng::new(1))).unwrap().len(), 2);
}
