use scgi::config::Config;
use scgi::synth::generate_dataset;
use scgi::trainer::{class_map, train, RunLog};
use scgi::Error;

fn short(epochs: &str, steps: &str) -> Config {
    let mut c = Config::default();
    for (k, v) in [
        ("train.epochs", epochs),
        ("train.steps_per_epoch", steps),
        ("train.warmup_epochs", "1"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn check_log_shape(log: &RunLog, c: &Config) {
    assert_eq!(log.config_hash, c.hash());
    assert_eq!(log.records.len(), c.train.epochs * c.train.steps_per_epoch);
    assert!(log.records.windows(2).all(|w| w[0].epoch <= w[1].epoch));
    let text = log.to_text();
    assert!(text.starts_with(&format!("# config_hash {}\n", c.hash())));
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), log.records.len());
    assert!(rows.iter().all(|r| r.split(' ').count() == 8));
}

#[test]
fn two_hundred_steps_reduce_the_loss() {
    let data = generate_dataset(16, 8, 3, 7).unwrap();
    let c = short("10", "20");
    let (_, log) = train::<f32>(&c, &data).unwrap();
    check_log_shape(&log, &c);
    let means = log.epoch_means();
    let first = means.first().unwrap().1.total();
    let last = means.last().unwrap().1.total();
    assert!(last < first, "epoch-mean loss went from {first} to {last}");
    assert!(log.final_total().unwrap() < log.initial_total().unwrap());
}

#[test]
fn every_parameter_is_in_exactly_one_logged_group() {
    let data = generate_dataset(4, 4, 2, 0).unwrap();
    let mut c = short("1", "1");
    c.set("train.p_ids", "2").unwrap();
    let (model, log) = train::<f32>(&c, &data).unwrap();
    assert_eq!(log.groups.len(), model.store.len());
    for (_, p) in model.store.iter() {
        assert_eq!(log.groups[&p.name], p.group);
    }
    assert_eq!(class_map(&data).len(), model.n_classes);
}

#[test]
fn plain_prompt_arm_runs_to_completion() {
    let data = generate_dataset(6, 4, 2, 1).unwrap();
    let mut c = short("2", "3");
    c.set("train.p_ids", "3").unwrap();
    c.cgi.enabled = false;
    let (model, log) = train::<f32>(&c, &data).unwrap();
    assert!(model.cgi.is_none());
    assert!(log.records.iter().all(|r| r.losses.total().is_finite()));
}

#[test]
fn divergence_aborts_naming_a_tensor() {
    let data = generate_dataset(4, 4, 2, 0).unwrap();
    let mut c = short("3", "20");
    c.set("train.p_ids", "2").unwrap();
    c.set("train.base_lr", "1e30").unwrap();
    c.set("train.new_module_lr", "1e31").unwrap();
    match train::<f32>(&c, &data) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains('#') || msg.contains("gradient of"), "{msg}"),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn dataset_without_enough_identities_is_rejected() {
    let data = generate_dataset(4, 4, 2, 0).unwrap();
    let c = short("1", "1");
    assert!(matches!(train::<f32>(&c, &data), Err(Error::Contract(_))));
}
