//! Acceptance suite: one test per numbered criterion, asserting the stated
//! tolerances. Each prints a `criterion N` line with the measured values
//! (visible with `--nocapture`); cargo prints the pass/fail verdict per test.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use splitsim_core::dataset::SyntheticSpec;
use splitsim_core::harness::{compare_strategies, ExperimentConfig, PartitionSettings};
use splitsim_core::partition::PartitionKind;
use splitsim_core::rng;
use splitsim_core::sampling::Strategy;
use splitsim_core::{
    analyze_schedule, centralized_train_epoch, client_backward, client_forward,
    empirical_deviation_tail, exact_composition_distribution, extended_dirichlet_partition,
    fls_schedule, fpls_schedule, gpsl_schedule, rounding_bias, serfling_union_bound,
    server_forward_loss, train_epoch_with, Architecture, BoundInputs, ClassDistribution,
    GradientWeighting, LayerSpec, Matrix, OptimizerConfig, Partition, PartitionSpec, SplitModel,
};

fn synthetic(
    classes: usize,
    per_class: usize,
    feature_dim: usize,
    seed: u64,
) -> splitsim_core::LabeledDataset {
    SyntheticSpec {
        classes,
        per_class_count: per_class,
        feature_dim,
        class_separation: 1.0,
        noise_sigma: 0.3,
        seed,
    }
    .generate()
    .unwrap()
}

/// Criterion 1: the first-step composition of the dynamic sampling procedure
/// matches the exact subset-enumeration law within total variation 0.01 at
/// 1e5 draws, on three instances; spot value P(1,1,1) = 0.3 for D=[2,3,1], B=3.
#[test]
fn criterion_1_gpsl_first_step_matches_exact_composition_law() {
    let instances: [(&[usize], usize); 3] = [(&[2, 3, 1], 3), (&[4, 4], 4), (&[1, 2, 3, 4], 5)];
    let trials = 100_000u64;
    for (i, (sizes, batch)) in instances.iter().enumerate() {
        let exact = exact_composition_distribution(sizes, *batch).unwrap();
        if i == 0 {
            let spot = exact[[1usize, 1, 1].as_slice()];
            assert!((spot - 0.3).abs() < 1e-12, "spot P(1,1,1) = {spot}");
        }
        let mut observed: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
        for t in 0..trials {
            let schedule =
                gpsl_schedule(sizes, *batch, rng::derive_seed(1000 + i as u64, "c1", t)).unwrap();
            *observed.entry(schedule.steps[0].clone()).or_default() += 1;
        }
        let mut tv = 0.0;
        for (composition, &probability) in &exact {
            let empirical = observed.get(composition).copied().unwrap_or(0) as f64 / trials as f64;
            tv += (empirical - probability).abs();
        }
        for composition in observed.keys() {
            assert!(
                exact.contains_key(composition),
                "impossible composition {composition:?} observed"
            );
        }
        tv /= 2.0;
        println!("criterion 1 instance {sizes:?} B={batch}: TV distance {tv:.5}");
        assert!(tv < 0.01, "TV distance {tv} on instance {sizes:?}");
    }
}

/// Criterion 2: on D_0=1000, M=5, B=100 the empirical deviation tail of 1e5
/// first-step batches stays below the clipped union bound plus three Monte
/// Carlo standard errors for eps in {0.05, 0.1, 0.2}.
#[test]
fn criterion_2_serfling_union_bound_holds_empirically() {
    let dataset = synthetic(5, 200, 2, 77);
    let spec = PartitionSpec::extended_dirichlet(10, 2, 3.0, 78);
    let partition = extended_dirichlet_partition(&dataset, &spec).unwrap();
    for epsilon in [0.05, 0.1, 0.2] {
        let tail = empirical_deviation_tail(
            Strategy::Gpsl,
            &partition,
            &dataset,
            100,
            epsilon,
            100_000,
            79,
        )
        .unwrap();
        let bound = serfling_union_bound(&BoundInputs {
            epsilon,
            batch: 100,
            pool: dataset.len(),
            classes: dataset.num_classes(),
        })
        .unwrap();
        println!(
            "criterion 2 eps={epsilon}: empirical {:.6} <= bound {:.6} + 3se {:.6}",
            tail.probability, bound.clipped, tail.std_error
        );
        assert!(
            tail.probability <= bound.clipped + 3.0 * tail.std_error,
            "eps {epsilon}: tail {} exceeds bound {}",
            tail.probability,
            bound.clipped
        );
    }
}

/// Criterion 3: dynamic sampling consumes every client exactly and always
/// takes ceil(D_0/B) steps, on 100 randomized instances.
#[test]
fn criterion_3_gpsl_conservation_and_step_count() {
    let mut case_rng = rng::stream(3, "c3-cases", 0);
    use rand::Rng;
    for case in 0..100 {
        let clients = case_rng.random_range(1..10);
        let sizes: Vec<usize> = (0..clients).map(|_| case_rng.random_range(0..80)).collect();
        let pool: usize = sizes.iter().sum();
        if pool == 0 {
            continue;
        }
        let batch = case_rng.random_range(1..100);
        let schedule = gpsl_schedule(&sizes, batch, case as u64).unwrap();
        assert_eq!(schedule.per_client_totals(), sizes, "case {case}");
        assert_eq!(
            schedule.steps_per_epoch(),
            pool.div_ceil(batch),
            "case {case}: sizes {sizes:?} B={batch}"
        );
    }
    println!("criterion 3: conservation and step count hold on 100 randomized cases");
}

/// Criterion 4: the per-class rounding bias never exceeds the size-mismatch
/// sum (1000 randomized cases), and fixed-local schedules with K=256, B=128
/// produce a first-step global batch of at least 256.
#[test]
fn criterion_4_rounding_bias_inequality_and_batch_inflation() {
    let mut case_rng = rng::stream(4, "c4-cases", 0);
    use rand::Rng;
    for case in 0..1000 {
        let clients = case_rng.random_range(2..20);
        let classes = case_rng.random_range(2..8);
        let sizes: Vec<usize> = (0..clients)
            .map(|_| case_rng.random_range(1..500))
            .collect();
        let dists: Vec<ClassDistribution> = (0..clients)
            .map(|_| {
                let weights: Vec<f64> = (0..classes)
                    .map(|_| case_rng.random_range(1..10) as f64)
                    .collect();
                let total: f64 = weights.iter().sum();
                ClassDistribution::new(weights.into_iter().map(|w| w / total).collect()).unwrap()
            })
            .collect();
        let batch = case_rng.random_range(1..400);
        let bias = rounding_bias(&sizes, &dists, batch).unwrap();
        for (m, &b) in bias.per_class_bias.iter().enumerate() {
            assert!(
                b <= bias.size_mismatch_sum + 1e-12,
                "case {case} class {m}: bias {b} exceeds mismatch {}",
                bias.size_mismatch_sum
            );
        }
    }

    let mut size_rng = rng::stream(4, "c4-sizes", 1);
    let sizes: Vec<usize> = (0..256).map(|_| size_rng.random_range(1..100)).collect();
    let fls = fls_schedule(&sizes, 128).unwrap();
    let fpls = fpls_schedule(&sizes, 128).unwrap();
    println!(
        "criterion 4: bias inequality on 1000 cases; first-step batches fls={} fpls={}",
        fls.global_size(0),
        fpls.global_size(0)
    );
    assert!(fls.global_size(0) >= 256, "fls {}", fls.global_size(0));
    assert!(fpls.global_size(0) >= 256, "fpls {}", fpls.global_size(0));
}

/// Criterion 5: on the severe partition (M=10, K=64, C=2, alpha=3, D_0=10000,
/// B=128), the epoch-mean per-step deviation of dynamic sampling is less than
/// half that of FLS and of FPLS, averaged over 5 seeds.
#[test]
fn criterion_5_deviation_separation_over_an_epoch() {
    let dataset = synthetic(10, 1000, 2, 55);
    let mut means: HashMap<Strategy, f64> = HashMap::new();
    for strategy in [Strategy::Gpsl, Strategy::Fls, Strategy::Fpls] {
        let mut acc = 0.0;
        for seed in 0..5u64 {
            let spec = PartitionSpec::extended_dirichlet(64, 2, 3.0, 500 + seed);
            let partition = extended_dirichlet_partition(&dataset, &spec).unwrap();
            let schedule =
                splitsim_core::schedule(strategy, partition.client_sizes(), 128, 600 + seed)
                    .unwrap();
            let report =
                analyze_schedule(&schedule, &partition, &dataset, 1, &[], 0.1, 700 + seed).unwrap();
            acc += report.mean_delta;
        }
        means.insert(strategy, acc / 5.0);
    }
    let gpsl = means[&Strategy::Gpsl];
    let fls = means[&Strategy::Fls];
    let fpls = means[&Strategy::Fpls];
    println!(
        "criterion 5: mean deviation gpsl={gpsl:.4} fls={fls:.4} fpls={fpls:.4} \
         (requires gpsl < 0.5*fls and gpsl < 0.5*fpls)"
    );
    assert!(
        gpsl < 0.5 * fls,
        "gpsl {gpsl:.4} not below half of fls {fls:.4}"
    );
    assert!(
        gpsl < 0.5 * fpls,
        "gpsl {gpsl:.4} not below half of fpls {fpls:.4}"
    );
}

/// Criterion 6: split-model backprop matches central finite differences
/// within 1e-4 relative error on every parameter with |g| > 1e-6, on a fixed
/// 3-layer network with 2 clients and a global batch of 8.
#[test]
fn criterion_6_gradient_correctness_against_finite_differences() {
    let arch = Architecture::new(
        vec![
            LayerSpec::Dense {
                inputs: 6,
                outputs: 8,
                activation: splitsim_core::engine::Activation::Relu,
            },
            LayerSpec::Dense {
                inputs: 8,
                outputs: 6,
                activation: splitsim_core::engine::Activation::Relu,
            },
            LayerSpec::Dense {
                inputs: 6,
                outputs: 3,
                activation: splitsim_core::engine::Activation::Linear,
            },
        ],
        1,
    )
    .unwrap();
    let mut model = SplitModel::new(arch, 2, 66).unwrap();
    let dataset = synthetic(3, 10, 6, 67);
    let gather = |rows: &[usize]| -> (Matrix, Vec<usize>) {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for &r in rows {
            data.extend_from_slice(dataset.row(r));
            labels.push(dataset.label(r));
        }
        (Matrix::from_vec(rows.len(), 6, data).unwrap(), labels)
    };
    let (f0, l0) = gather(&[0, 5, 12, 20]);
    let (f1, l1) = gather(&[2, 8, 17, 25]);
    let batches = vec![(0usize, f0, l0), (1usize, f1, l1)];

    // Analytic gradients of one protocol step.
    let mut acts = Vec::new();
    let mut caches = Vec::new();
    let mut labels = Vec::new();
    for (k, features, batch_labels) in &batches {
        let (act, cache) = client_forward(&model, *k, features).unwrap();
        acts.push(act);
        caches.push(cache);
        labels.extend_from_slice(batch_labels);
    }
    let refs: Vec<&Matrix> = acts.iter().collect();
    let global = Matrix::vstack(&refs).unwrap();
    let (_, _, server_cache) = server_forward_loss(&model, &global, &labels).unwrap();
    let (server_grads, cut) = splitsim_core::engine::server_gradients(&model, &server_cache);
    let client_grads = [
        client_backward(&model, 0, &caches[0], &cut.slice_rows(0, 4)).unwrap(),
        client_backward(&model, 1, &caches[1], &cut.slice_rows(4, 4)).unwrap(),
    ];

    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    {
        let fd_check = |model: &mut SplitModel,
                        value_at: &dyn Fn(&mut SplitModel, f64),
                        read: f64,
                        analytic: f64,
                        worst: &mut f64| {
            let h = 1e-5 * read.abs().max(1.0);
            value_at(model, read + h);
            let plus = splitsim_core::split_loss(model, &batches).unwrap();
            value_at(model, read - h);
            let minus = splitsim_core::split_loss(model, &batches).unwrap();
            value_at(model, read);
            let fd = (plus - minus) / (2.0 * h);
            let rel = (fd - analytic).abs() / analytic.abs().max(fd.abs());
            *worst = worst.max(rel);
            assert!(
                rel < 1e-4,
                "relative error {rel} (fd {fd}, analytic {analytic})"
            );
        };
        for (j, &analytic) in server_grads.iter().enumerate() {
            if analytic.abs() <= 1e-6 {
                continue;
            }
            let read = model.server_params()[j];
            fd_check(
                &mut model,
                &|m: &mut SplitModel, v: f64| m.server_params_mut()[j] = v,
                read,
                analytic,
                &mut worst,
            );
            checked += 1;
        }
        for (k, grads) in client_grads.iter().enumerate() {
            for (j, &analytic) in grads.iter().enumerate() {
                if analytic.abs() <= 1e-6 {
                    continue;
                }
                let read = model.client_params(k)[j];
                fd_check(
                    &mut model,
                    &|m: &mut SplitModel, v: f64| m.client_params_mut(k)[j] = v,
                    read,
                    analytic,
                    &mut worst,
                );
                checked += 1;
            }
        }
    }
    println!("criterion 6: {checked} parameters checked, worst relative error {worst:.2e}");
    assert!(checked > 50, "only {checked} parameters had |g| > 1e-6");
}

/// Criterion 7: client replicas stay bit-identical after every step of a
/// 10-epoch run with K=8, and single-client dynamic-sampling training matches
/// centralized training step for step to 1e-12.
#[test]
fn criterion_7_client_sync_and_single_client_equivalence() {
    // Part 1: per-step bitwise synchronization.
    let dataset = synthetic(5, 100, 8, 71);
    let spec = PartitionSpec::extended_dirichlet(8, 2, 3.0, 72);
    let partition = extended_dirichlet_partition(&dataset, &spec).unwrap();
    let arch = Architecture::mlp(8, &[16, 12], 5, false).unwrap();
    let mut model = SplitModel::new(arch.clone(), 8, 73).unwrap();
    let mut opt = model.optimizer_state(OptimizerConfig::default());
    let mut steps = 0usize;
    let mut desyncs = 0usize;
    for epoch in 0..10u64 {
        let schedule = gpsl_schedule(partition.client_sizes(), 32, 80 + epoch).unwrap();
        train_epoch_with(
            &mut model,
            &mut opt,
            &dataset,
            &partition,
            &schedule,
            90 + epoch,
            GradientWeighting::DatasetFraction,
            |m, _| {
                steps += 1;
                if !m.replicas_identical() {
                    desyncs += 1;
                }
            },
        )
        .unwrap();
    }
    println!("criterion 7a: {steps} steps, {desyncs} desyncs");
    assert!(steps >= 100);
    assert_eq!(desyncs, 0);

    // Part 2: K=1 split training vs the centralized path on identical batch
    // sequences.
    let single = Partition::single(&dataset).unwrap();
    let mut split_model = SplitModel::new(arch.clone(), 1, 74).unwrap();
    let mut central_model = split_model.clone();
    let mut split_opt = split_model.optimizer_state(OptimizerConfig::default());
    let mut central_opt = central_model.optimizer_state(OptimizerConfig::default());
    let mut worst: f64 = 0.0;
    for epoch in 0..10u64 {
        let schedule = gpsl_schedule(single.client_sizes(), 32, 200 + epoch).unwrap();
        let split_traces = splitsim_core::train_epoch(
            &mut split_model,
            &mut split_opt,
            &dataset,
            &single,
            &schedule,
            300 + epoch,
            GradientWeighting::DatasetFraction,
        )
        .unwrap();
        let central_traces = centralized_train_epoch(
            &mut central_model,
            &mut central_opt,
            &dataset,
            32,
            300 + epoch,
        )
        .unwrap();
        assert_eq!(split_traces.len(), central_traces.len());
        for (a, b) in split_traces.iter().zip(&central_traces) {
            worst = worst.max((a.loss - b.loss).abs());
        }
    }
    println!("criterion 7b: worst loss divergence {worst:.3e}");
    assert!(worst <= 1e-12, "loss trajectories diverge by {worst}");
}

/// Criterion 8: on the severe setting (K=16, B=128, E=50, 5 seeds), dynamic
/// sampling lands within 2 accuracy points of centralized training, and its
/// across-seed accuracy standard deviation is strictly below both FLS's and
/// FPLS's.
#[test]
fn criterion_8_end_to_end_accuracy_pattern() {
    let base = ExperimentConfig {
        dataset: SyntheticSpec {
            classes: 10,
            per_class_count: 1000,
            feature_dim: 32,
            class_separation: 1.0,
            noise_sigma: 2.5,
            seed: 7,
        },
        partition: PartitionSettings {
            kind: PartitionKind::ExtendedDirichlet,
            clients: 16,
            classes_per_client: 2,
            alpha: 3.0,
        },
        strategy: Strategy::Gpsl,
        global_batch: 128,
        epochs: 50,
        optimizer: OptimizerConfig::default(),
        seeds: vec![1, 2, 3, 4, 5],
        hidden_layers: vec![32, 32],
        group_norm: false,
        gradient_weighting: GradientWeighting::DatasetFraction,
        test_per_class: None,
        output_dir: None,
    };
    let configs: Vec<ExperimentConfig> = [
        Strategy::Centralized,
        Strategy::Gpsl,
        Strategy::Fls,
        Strategy::Fpls,
    ]
    .into_iter()
    .map(|strategy| {
        let mut config = base.clone();
        config.strategy = strategy;
        config
    })
    .collect();
    let (table, _) = compare_strategies(&configs).unwrap();
    let row = |s: Strategy| table.rows.iter().find(|r| r.strategy == s).unwrap();
    let cl = row(Strategy::Centralized);
    let gpsl = row(Strategy::Gpsl);
    let fls = row(Strategy::Fls);
    let fpls = row(Strategy::Fpls);
    println!(
        "criterion 8: acc cl={:.4} gpsl={:.4}+-{:.4} fls={:.4}+-{:.4} fpls={:.4}+-{:.4}",
        cl.mean_accuracy,
        gpsl.mean_accuracy,
        gpsl.std_accuracy.unwrap(),
        fls.mean_accuracy,
        fls.std_accuracy.unwrap(),
        fpls.mean_accuracy,
        fpls.std_accuracy.unwrap(),
    );
    assert!(
        (gpsl.mean_accuracy - cl.mean_accuracy).abs() <= 0.02,
        "gpsl {} vs cl {}",
        gpsl.mean_accuracy,
        cl.mean_accuracy
    );
    assert!(
        gpsl.std_accuracy.unwrap() < fls.std_accuracy.unwrap(),
        "gpsl std {} not below fls std {}",
        gpsl.std_accuracy.unwrap(),
        fls.std_accuracy.unwrap()
    );
    assert!(
        gpsl.std_accuracy.unwrap() < fpls.std_accuracy.unwrap(),
        "gpsl std {} not below fpls std {}",
        gpsl.std_accuracy.unwrap(),
        fpls.std_accuracy.unwrap()
    );
}

fn splitsim(args: &[&str], out_env: Option<&Path>) -> std::process::Output {
    let mut command = Command::new(env!("CARGO_BIN_EXE_splitsim"));
    command.args(args);
    if let Some(dir) = out_env {
        command.env("SPLITSIM_OUT_DIR", dir);
    }
    command.output().expect("binary runs")
}

fn snapshot_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.clone(), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// Criterion 9: every subcommand, run twice with identical arguments,
/// produces byte-identical output files (and identical stdout).
#[test]
fn criterion_9_cli_outputs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let dataset_spec = SyntheticSpec {
        classes: 3,
        per_class_count: 50,
        feature_dim: 4,
        class_separation: 2.0,
        noise_sigma: 0.5,
        seed: 91,
    };
    let dataset_path = root.join("dataset.json");
    std::fs::write(
        &dataset_path,
        serde_json::to_string_pretty(&dataset_spec).unwrap(),
    )
    .unwrap();

    let train_config = serde_json::json!({
        "dataset": dataset_spec,
        "partition": {"kind": "extended_dirichlet", "clients": 3,
                      "classes_per_client": 2, "alpha": 2.0},
        "strategy": "gpsl",
        "global_batch": 30,
        "epochs": 2,
        "seeds": [1, 2],
        "hidden_layers": [8],
        "test_per_class": 10
    });
    let train_config_path = root.join("train.json");
    std::fs::write(&train_config_path, train_config.to_string()).unwrap();

    let compare_config = serde_json::json!({
        "base": train_config,
        "strategies": ["gpsl", "fls", "cl"],
        "clients": [3],
        "batches": [30]
    });
    let compare_config_path = root.join("compare.json");
    std::fs::write(&compare_config_path, compare_config.to_string()).unwrap();

    let dataset = dataset_path.to_str().unwrap().to_string();
    let partition_path = root.join("partition.json");
    let schedule_path = root.join("schedule.json");
    let report_path = root.join("report.json");
    let train_dir = root.join("train-out");
    let compare_dir = root.join("compare-out");

    let invocations: Vec<(Vec<String>, Option<PathBuf>)> = vec![
        (
            vec![
                "partition".into(),
                "--dataset".into(),
                dataset.clone(),
                "--kind".into(),
                "dirichlet".into(),
                "--clients".into(),
                "3".into(),
                "--classes-per-client".into(),
                "2".into(),
                "--alpha".into(),
                "2.0".into(),
                "--seed".into(),
                "5".into(),
                "--out".into(),
                partition_path.to_str().unwrap().into(),
            ],
            None,
        ),
        (
            vec![
                "schedule".into(),
                "--strategy".into(),
                "gpsl".into(),
                "--global-batch".into(),
                "30".into(),
                "--partition".into(),
                partition_path.to_str().unwrap().into(),
                "--seed".into(),
                "6".into(),
                "--out".into(),
                schedule_path.to_str().unwrap().into(),
            ],
            None,
        ),
        (
            vec![
                "bound".into(),
                "--eps".into(),
                "0.1".into(),
                "--batch".into(),
                "30".into(),
                "--pool".into(),
                "150".into(),
                "--classes".into(),
                "3".into(),
                "--json".into(),
            ],
            None,
        ),
        (
            vec![
                "analyze".into(),
                "--schedule".into(),
                schedule_path.to_str().unwrap().into(),
                "--partition".into(),
                partition_path.to_str().unwrap().into(),
                "--dataset".into(),
                dataset.clone(),
                "--trials".into(),
                "500".into(),
                "--seed".into(),
                "7".into(),
                "--out".into(),
                report_path.to_str().unwrap().into(),
            ],
            None,
        ),
        (
            vec![
                "train".into(),
                "--config".into(),
                train_config_path.to_str().unwrap().into(),
                "--out-dir".into(),
                train_dir.to_str().unwrap().into(),
            ],
            None,
        ),
        (
            vec![
                "compare".into(),
                "--config".into(),
                compare_config_path.to_str().unwrap().into(),
            ],
            Some(compare_dir.clone()),
        ),
    ];

    let mut stdouts = Vec::new();
    for (args, env) in &invocations {
        let arg_refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = splitsim(&arg_refs, env.as_deref());
        assert!(
            out.status.success(),
            "{:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
        stdouts.push(out.stdout);
    }
    let first = snapshot_files(root);

    for ((args, env), first_stdout) in invocations.iter().zip(&stdouts) {
        let arg_refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = splitsim(&arg_refs, env.as_deref());
        assert!(out.status.success(), "{args:?} failed on rerun");
        assert_eq!(&out.stdout, first_stdout, "stdout differs for {args:?}");
    }
    let second = snapshot_files(root);

    assert_eq!(first.len(), second.len());
    let mut compared = 0usize;
    for (path, bytes) in &first {
        let rerun = second.get(path).expect("file set identical");
        assert_eq!(bytes, rerun, "{} differs between runs", path.display());
        compared += 1;
    }
    println!("criterion 9: {compared} output files byte-identical across reruns");
    assert!(compared >= 10);
}
