use skdlab::data::Dataset;
use skdlab::harness::*;
use skdlab::nn::Mlp;
use skdlab::sampling::{DistributionKind, DistributionSpec, SamplingDistribution, TeacherTeam};

fn small_cfg() -> ExperimentConfig {
    ExperimentConfig {
        epochs: 10,
        batch_size: 30,
        seeds: vec![0, 1],
        dataset: DatasetConfig {
            points_per_class: 100,
            test_points_per_class: 50,
            ..Default::default()
        },
        teachers: TeamConfig {
            hidden: vec![vec![4], vec![16], vec![32]],
            epochs: 30,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn setup(cfg: &ExperimentConfig) -> (Dataset<f64>, Dataset<f64>, TeacherTeam<f64>) {
    let (train, test) = cfg.dataset.build().unwrap();
    let team = build_team(cfg, &train, &test).unwrap();
    (train, test, team)
}

fn single(team: &TeacherTeam<f64>, k: usize) -> TeacherTeam<f64> {
    TeacherTeam::new(
        vec![team.teachers()[k].clone()],
        vec![team.names()[k].clone()],
        SamplingDistribution::Uniform { n: 1 },
    )
    .unwrap()
}

#[test]
fn teacher_accuracy_grows_with_width() {
    let base = ExperimentConfig::default();
    let mut means = vec![0.0; 5];
    for seed in 0..5u64 {
        let cfg = ExperimentConfig {
            teachers: TeamConfig {
                seed,
                ..base.teachers.clone()
            },
            ..base.clone()
        };
        let (train, test) = cfg.dataset.build().unwrap();
        for (i, (m, _)) in train_teachers(&cfg, &train, &test).unwrap().iter().enumerate() {
            means[i] += evaluate(m, &test).unwrap().accuracy.unwrap() / 5.0;
        }
    }
    let falling = means.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(falling <= 1, "5-seed mean accuracy by width: {means:?}");
}

#[test]
fn teacher_training_is_deterministic() {
    let cfg = small_cfg();
    let (train, test) = cfg.dataset.build().unwrap();
    let a = train_teachers(&cfg, &train, &test).unwrap();
    let b = train_teachers(&cfg, &train, &test).unwrap();
    for ((ma, ra), (mb, rb)) in a.iter().zip(&b) {
        assert_eq!(ma, mb);
        assert!(ra.same_metrics(rb));
        assert_eq!(ra.epochs.len(), cfg.teachers.epochs);
    }
}

#[test]
fn teacher_checkpoints_reload_into_the_same_team() {
    let cfg = small_cfg();
    let (train, test, team) = setup(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = team
        .teachers()
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let p = dir.path().join(format!("T{i}.model"));
            m.save(&p).unwrap();
            p
        })
        .collect();
    let loaded_cfg = ExperimentConfig {
        teachers: TeamConfig {
            checkpoints: Some(paths),
            ..cfg.teachers.clone()
        },
        ..cfg.clone()
    };
    let loaded = build_team(&loaded_cfg, &train, &test).unwrap();
    assert_eq!(loaded.teachers(), team.teachers());
    let missing = ExperimentConfig {
        teachers: TeamConfig {
            checkpoints: Some(vec![dir.path().join("absent.model")]),
            ..cfg.teachers.clone()
        },
        ..cfg
    };
    assert!(build_team(&missing, &train, &test).is_err());
}

#[test]
fn runs_are_bit_reproducible() {
    let cfg = small_cfg();
    let (train, test, team) = setup(&cfg);
    for regime in Regime::ALL {
        let c = ExperimentConfig { regime, ..cfg.clone() };
        let t = if regime == Regime::VanillaKd {
            single(&team, 0)
        } else {
            team.clone()
        };
        let a = distill(&c, Some(&t), &train, &test, 3).unwrap();
        let b = distill(&c, Some(&t), &train, &test, 3).unwrap();
        assert!(a.same_metrics(&b), "{regime:?}");
        assert_eq!(a.epochs.len(), c.epochs);
    }
}

#[test]
fn skd_on_single_teacher_team_equals_vanilla_kd() {
    let cfg = small_cfg();
    let (train, test, team) = setup(&cfg);
    let one = single(&team, 1);
    let vanilla = distill(
        &ExperimentConfig {
            regime: Regime::VanillaKd,
            ..cfg.clone()
        },
        Some(&one),
        &train,
        &test,
        5,
    )
    .unwrap();
    let skd = distill(
        &ExperimentConfig {
            regime: Regime::Skd,
            ..cfg.clone()
        },
        Some(&one),
        &train,
        &test,
        5,
    )
    .unwrap();
    assert_eq!(skd.step_losses, vanilla.step_losses);
    assert_eq!(skd.final_metrics, vanilla.final_metrics);
}

#[test]
fn skd_on_point_mass_equals_vanilla_kd_on_that_teacher() {
    let cfg = small_cfg();
    let (train, test, team) = setup(&cfg);
    let last = team.len() - 1;
    let mut weights = vec![0.0; team.len()];
    weights[last] = 1.0;
    let point = TeacherTeam::new(
        team.teachers().to_vec(),
        team.names().to_vec(),
        SamplingDistribution::Explicit { weights },
    )
    .unwrap();
    let skd = distill(
        &ExperimentConfig {
            regime: Regime::Skd,
            ..cfg.clone()
        },
        Some(&point),
        &train,
        &test,
        2,
    )
    .unwrap();
    let vanilla = distill(
        &ExperimentConfig {
            regime: Regime::VanillaKd,
            ..cfg.clone()
        },
        Some(&single(&team, last)),
        &train,
        &test,
        2,
    )
    .unwrap();
    assert_eq!(skd.step_losses, vanilla.step_losses);
    let counts = skd.teacher_sample_counts.unwrap();
    assert_eq!(counts[last], skd.step_losses.len() as u64);
}

#[test]
fn teacher_forwards_per_iteration() {
    let cfg = small_cfg();
    let (train, test, team) = setup(&cfg);
    let n = team.len() as u64;
    for (regime, expected) in [(Regime::Skd, 1), (Regime::AvgEnsemble, n), (Regime::Mtbert, n)] {
        let r = distill(
            &ExperimentConfig { regime, ..cfg.clone() },
            Some(&team),
            &train,
            &test,
            0,
        )
        .unwrap();
        let c = r.counters;
        assert_eq!(c.iterations, r.step_losses.len() as u64);
        assert_eq!(
            (c.min_forwards_per_iteration, c.max_forwards_per_iteration),
            (expected, expected)
        );
        assert_eq!(c.teacher_forwards, expected * c.iterations);
    }
    let none = distill(
        &ExperimentConfig {
            regime: Regime::None,
            ..cfg
        },
        None,
        &train,
        &test,
        0,
    )
    .unwrap();
    assert_eq!(none.counters.teacher_forwards, 0);
}

#[test]
fn skd_counts_match_distribution_within_three_sigma() {
    let mut cfg = small_cfg();
    cfg.epochs = 40;
    cfg.distribution = DistributionSpec {
        kind: DistributionKind::Explicit,
        weights: Some(vec![0.2, 0.5, 0.3]),
        ..Default::default()
    };
    let (train, test, team) = setup(&cfg);
    let r = distill(&cfg, Some(&team), &train, &test, 4).unwrap();
    let counts = r.teacher_sample_counts.unwrap();
    let total: u64 = counts.iter().sum();
    assert_eq!(total, r.step_losses.len() as u64);
    for (&c, p) in counts.iter().zip([0.2, 0.5, 0.3]) {
        let mean = p * total as f64;
        let sd = (total as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
    }
}

/// Nearest-centre linear classifier for the blobs layout, scaled until every
/// training point's ground-truth cross-entropy rounds to exactly 0.
fn saturated_blob_teacher(classes: usize, separation: f64) -> Mlp<f64> {
    let mut m = Mlp::<f64>::init(&[2, classes], skdlab::nn::Activation::Relu, 0).unwrap();
    for k in 0..classes {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
        let c = [separation * angle.cos(), separation * angle.sin()];
        m.layers_mut()[0].weight[[k, 0]] = c[0];
        m.layers_mut()[0].weight[[k, 1]] = c[1];
        m.layers_mut()[0].bias[k] = -(c[0] * c[0] + c[1] * c[1]) / 2.0;
    }
    m
}

#[test]
fn mtbert_with_one_perfect_teacher_equals_pure_distillation() {
    let mut cfg = small_cfg();
    cfg.kd.beta = 0.0;
    cfg.dataset = DatasetConfig {
        kind: DatasetKind::Blobs,
        separation: 20.0,
        points_per_class: 100,
        test_points_per_class: 20,
        ..Default::default()
    };
    let (train, test) = cfg.dataset.build().unwrap();
    let teacher = saturated_blob_teacher(3, 20.0);
    let labels = train.labels().unwrap();
    let logits = teacher.infer(train.features.view()).unwrap();
    for (i, &y) in labels.iter().enumerate() {
        let z = skdlab::kd::LogitVector::new(logits.row(i).to_vec()).unwrap();
        let label = skdlab::kd::OneHotLabel::new(y, 3).unwrap();
        assert_eq!(skdlab::kd::mtbert_teacher_weight(&z, label, 1.0).unwrap(), 1.0);
    }
    let team = TeacherTeam::new(
        vec![teacher],
        vec!["T01".into()],
        SamplingDistribution::Uniform { n: 1 },
    )
    .unwrap();
    let mt = distill(
        &ExperimentConfig {
            regime: Regime::Mtbert,
            ..cfg.clone()
        },
        Some(&team),
        &train,
        &test,
        1,
    )
    .unwrap();
    let vk = distill(
        &ExperimentConfig {
            regime: Regime::VanillaKd,
            ..cfg.clone()
        },
        Some(&team),
        &train,
        &test,
        1,
    )
    .unwrap();
    assert_eq!(mt.step_losses, vk.step_losses);
}

#[test]
fn comparison_rows_carry_arrows() {
    let cfg = small_cfg();
    let (train, test, team) = setup(&cfg);
    let regimes = [Regime::None, Regime::AvgEnsemble, Regime::Mtbert, Regime::Skd];
    let (table, runs) = compare_regimes(&cfg, &regimes, &[("TT1".into(), team)], &train, &test).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.arrow == "↑" || r.arrow == "↓"));
    let none = &table.rows[0];
    assert_eq!((none.regime, none.delta_vs_none, none.arrow), (Regime::None, 0.0, "↑"));
    assert!(runs.values().all(|v| v.len() == cfg.seeds.len()));
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.ends_with('↑') || l.ends_with('↓')));
}

#[test]
fn duplicated_regimes_give_identical_rows() {
    let mut cfg = small_cfg();
    cfg.seeds = vec![7];
    let (train, test, team) = setup(&cfg);
    let (table, _) = compare_regimes(
        &cfg,
        &[Regime::Skd, Regime::Skd],
        &[("TT1".into(), team)],
        &train,
        &test,
    )
    .unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[0], table.rows[1]);
}

#[test]
fn sample_stats_uniform_fourteen() {
    let s = sample_stats(&DistributionSpec::default(), 14, 100_000, 0).unwrap();
    assert_eq!(s.counts.iter().sum::<u64>(), 100_000);
    assert!(s.chi_square.p_value > 0.001);
    let point = DistributionSpec {
        kind: DistributionKind::Explicit,
        weights: Some(vec![0.0, 1.0, 0.0]),
        ..Default::default()
    };
    assert_eq!(
        sample_stats(&point, 3, 1000, 0).unwrap().frequencies,
        vec![0.0, 1.0, 0.0]
    );
}

#[test]
fn report_json_round_trips_through_disk() {
    let cfg = small_cfg();
    let (train, test, team) = setup(&cfg);
    let r = distill(&cfg, Some(&team), &train, &test, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("runs").join("skd-0.json");
    r.save(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["regime"], "skd");
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(v["epochs"].as_array().unwrap().len(), cfg.epochs);
    assert_eq!(v["kd"]["temperature"], 4.0);
}
