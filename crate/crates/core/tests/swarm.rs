mod common;

use common::{tiny_centers, tiny_config, tiny_data};
use swarmseg::model::{init_global, init_personal, Method};
use swarmseg::rng::{stream, tag};
use swarmseg::swarm::*;

fn opts() -> RunOptions {
    RunOptions {
        keep_messages: true,
        ..RunOptions::default()
    }
}

fn global_bytes(out: &RunOutput) -> Vec<Vec<u8>> {
    out.centers.iter().map(|c| c.global.to_bytes()).collect()
}

#[test]
fn runs_are_deterministic_and_independent_of_jobs() {
    let fed = tiny_data(&tiny_centers(), 11);
    let cfg = tiny_config(11, Method::Ours, 2);
    let a = run_swarm(&cfg, &fed, &opts()).unwrap();
    let b = run_swarm(&cfg, &fed, &opts()).unwrap();
    let c = run_swarm(&cfg, &fed, &RunOptions { jobs: 3, ..opts() }).unwrap();
    for other in [&b, &c] {
        assert_eq!(a.history_csv(), other.history_csv());
        assert_eq!(a.messages, other.messages);
        assert_eq!(global_bytes(&a), global_bytes(other));
        for (x, y) in a.centers.iter().zip(&other.centers) {
            assert_eq!(x.personal.to_bytes(), y.personal.to_bytes());
        }
    }
}

#[test]
fn every_center_holds_the_same_global_part_and_replay_reproduces_it() {
    let fed = tiny_data(&tiny_centers(), 12);
    let cfg = tiny_config(12, Method::Ours, 3);
    let dir = tempfile::tempdir().unwrap();
    let out = run_swarm(
        &cfg,
        &fed,
        &RunOptions {
            log_dir: Some(dir.path().to_path_buf()),
            ..opts()
        },
    )
    .unwrap();
    let bytes = global_bytes(&out);
    assert!(bytes.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(out.messages_sent, 3 * 4);

    let schema = &out.centers[0].global;
    let replayed = replay_round(&out.last_round, schema).unwrap();
    assert_eq!(replayed.to_bytes(), bytes[0]);

    // Offline, from the logged files, in reverse file order.
    let mut logged: Vec<Vec<u8>> = (0..4)
        .rev()
        .map(|c| std::fs::read(dir.path().join(format!("round_0002_center_{c}.msg"))).unwrap())
        .collect();
    assert_eq!(replay_round(&logged, schema).unwrap().to_bytes(), bytes[0]);
    logged.pop();
    assert_ne!(replay_round(&logged, schema).unwrap().to_bytes(), bytes[0]);
}

#[test]
fn messages_never_carry_personalized_parameters() {
    let fed = tiny_data(&tiny_centers(), 13);
    for method in [Method::Ours, Method::FixedAdapt, Method::ImgAdapt] {
        let out = run_swarm(&tiny_config(13, method, 2), &fed, &opts()).unwrap();
        audit_messages(&out.messages, &out.centers).unwrap();
        for m in &out.messages {
            let msg = RoundMessage::decode(m, &out.centers[0].global).unwrap();
            assert!(msg.params.names().iter().all(|n| !n.starts_with("da.")));
        }
        // A message that smuggles a personal tensor is caught.
        let mut leaky = out.centers[1].global.clone();
        leaky.extend(&out.centers[1].personal).unwrap();
        let bad = RoundMessage {
            center_id: 1,
            round: 0,
            n_k: 3,
            params: leaky,
        }
        .encode();
        assert!(matches!(
            audit_messages(&[bad], &out.centers),
            Err(SwarmError::Privacy(_))
        ));
    }
}

#[test]
fn zero_rounds_returns_the_initial_parameters() {
    let fed = tiny_data(&tiny_centers(), 14);
    let cfg = tiny_config(14, Method::Ours, 0);
    let out = run_swarm(&cfg, &fed, &opts()).unwrap();
    assert_eq!(out.messages_sent, 0);
    assert!(out.history.is_empty());
    let g0 = init_global(&cfg.net, cfg.method, &mut stream(&[14, tag::INIT, u64::MAX])).unwrap();
    for c in &out.centers {
        assert_eq!(c.global.to_bytes(), g0.to_bytes());
        let p0 = init_personal(&cfg.net, cfg.method, &mut stream(&[14, tag::INIT, c.center_id as u64])).unwrap();
        assert_eq!(c.personal.to_bytes(), p0.to_bytes());
    }
}

#[test]
fn single_center_swarm_equals_plain_local_training() {
    let specs = vec![tiny_centers().remove(2)];
    let fed = tiny_data(&specs, 15);
    let cfg = tiny_config(15, Method::Ours, 3);
    let out = run_swarm(&cfg, &fed, &opts()).unwrap();

    let mut centers = init_centers(&cfg, &fed).unwrap();
    let state = &mut centers[0];
    for round in 0..3 {
        local_train(state, &cfg, round, cfg.schedule.local_epochs).unwrap();
    }
    assert_eq!(out.centers[0].global.to_bytes(), state.global.to_bytes());
    assert_eq!(out.centers[0].personal.to_bytes(), state.personal.to_bytes());
}

#[test]
fn zero_local_epochs_leave_the_state_unchanged() {
    let fed = tiny_data(&tiny_centers(), 16);
    let cfg = tiny_config(16, Method::Ours, 1);
    let mut centers = init_centers(&cfg, &fed).unwrap();
    let before = (centers[0].global.to_bytes(), centers[0].personal.to_bytes());
    let metrics = local_train(&mut centers[0], &cfg, 0, 0).unwrap();
    assert!(metrics.is_empty());
    assert_eq!(before, (centers[0].global.to_bytes(), centers[0].personal.to_bytes()));
    assert_eq!(centers[0].optimizer_steps(), 0);
}

#[test]
fn baselines_have_the_expected_structure() {
    let fed = tiny_data(&tiny_centers(), 17);
    let cfg = tiny_config(17, Method::Ours, 2);

    let single = run_baseline(&cfg, &fed, Method::Single, &opts()).unwrap();
    assert_eq!(single.messages_sent, 0);
    assert!(single.messages.is_empty());
    assert_ne!(single.centers[0].global.to_bytes(), single.centers[1].global.to_bytes());

    let plain = run_baseline(&cfg, &fed, Method::SwarmPlain, &opts()).unwrap();
    for c in &plain.centers {
        assert!(c.personal.is_empty());
        assert!(c.global.names().iter().all(|n| n.starts_with("seg.")));
    }

    let ours = run_swarm(&cfg, &fed, &opts()).unwrap();
    let fixed = run_baseline(&cfg, &fed, Method::FixedAdapt, &opts()).unwrap();
    assert_eq!(ours.centers[0].global.names(), fixed.centers[0].global.names());
    assert_ne!(ours.centers[0].personal.names(), fixed.centers[0].personal.names());

    assert!(matches!(
        run_swarm(&tiny_config(17, Method::Single, 1), &fed, &opts()),
        Err(SwarmError::Config(_))
    ));
}

#[test]
fn warmup_comes_first_and_lasts_the_configured_epochs() {
    let fed = tiny_data(&tiny_centers(), 18);
    let mut cfg = tiny_config(18, Method::Ours, 3);
    cfg.schedule.warmup_epochs = Some(2);
    let out = run_swarm(&cfg, &fed, &opts()).unwrap();
    for c in 0..4 {
        let phases: Vec<_> = out.history.iter().filter(|r| r.center == c).map(|r| r.phase).collect();
        use swarmseg::model::Phase::*;
        assert_eq!(phases, vec![Warmup, Warmup, Main]);
    }
}

#[test]
fn non_finite_loss_names_round_center_and_term() {
    let mut fed = tiny_data(&tiny_centers(), 19);
    fed.centers[2].train[1].image[5] = f64::NAN;
    let mut cfg = tiny_config(19, Method::Ours, 2);
    cfg.schedule.augment = false;
    match run_swarm(&cfg, &fed, &opts()) {
        Err(SwarmError::NonFinite { round, center, term }) => {
            assert_eq!((round, center), (0, 2));
            assert!(!term.is_empty());
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn data_grid_must_match_the_network() {
    let fed = tiny_data(&tiny_centers(), 20);
    let mut cfg = tiny_config(20, Method::Ours, 1);
    cfg.net.height = 32;
    cfg.net.width = 32;
    assert!(matches!(init_centers(&cfg, &fed), Err(SwarmError::Config(_))));
}
