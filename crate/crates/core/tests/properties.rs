use breadcrumbs::analysis::{check_duplication, class_loss, loss_report};
use breadcrumbs::classifier::LinearClassifier;
use breadcrumbs::container::{Container, ContainerWriter};
use breadcrumbs::numkit::ce_loss_and_grad;
use breadcrumbs::trailstore::{backtrack_depth, MeanAlignment, MeanVarianceAlignment, Retention, StorePolicy};
use breadcrumbs::{Matrix, SeededRng, TrailStore};
use proptest::prelude::*;
use rand::Rng;

fn matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Mean cross-entropy straight from the definition, in f64.
fn oracle_loss(w: &[f64], b: &[f64], classes: usize, z: &Matrix, labels: &[usize]) -> f64 {
    let d = z.cols();
    let mut total = 0.0;
    for (row, &y) in z.iter_rows().zip(labels) {
        let logits: Vec<f64> = (0..classes)
            .map(|c| b[c] + (0..d).map(|k| w[c * d + k] * row[k] as f64).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    total / labels.len() as f64
}

fn random_store(seed: u64, counts: &[usize], n_b: usize, epochs: u32, dim: usize) -> TrailStore {
    let mut rng = SeededRng::new(seed);
    let policy = StorePolicy::new(n_b, counts, Retention::All).unwrap();
    let mut store = TrailStore::new(counts.to_vec(), dim, policy).unwrap();
    let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(j, &n)| std::iter::repeat_n(j, n)).collect();
    for e in 1..=epochs {
        let shift = rng.random_range(-2.0f32..2.0);
        let mut z = matrix(&mut rng, labels.len(), dim, 3.0);
        z.data_mut().iter_mut().for_each(|v| *v += shift);
        store.record(e, &z, &labels).unwrap();
    }
    store
}

fn variance(m: &Matrix) -> Vec<f64> {
    m.column_stds().iter().map(|s| s * s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_gradient_matches_central_differences(seed in any::<u64>(), classes in 2usize..6, dim in 1usize..6, rows in 1usize..12) {
        let mut rng = SeededRng::new(seed);
        let w = matrix(&mut rng, classes, dim, 1.0);
        let b: Vec<f32> = (0..classes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = matrix(&mut rng, rows, dim, 2.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let got = ce_loss_and_grad(&w, &b, &z, &labels).unwrap();

        let w64: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        prop_assert!((got.loss - oracle_loss(&w64, &b64, classes, &z, &labels)).abs() < 1e-9);
        let h = 1e-3;
        let mut numeric = Vec::new();
        for k in 0..w64.len() {
            let (mut up, mut down) = (w64.clone(), w64.clone());
            up[k] += h;
            down[k] -= h;
            numeric.push((oracle_loss(&up, &b64, classes, &z, &labels) - oracle_loss(&down, &b64, classes, &z, &labels)) / (2.0 * h));
        }
        for k in 0..b64.len() {
            let (mut up, mut down) = (b64.clone(), b64.clone());
            up[k] += h;
            down[k] -= h;
            numeric.push((oracle_loss(&w64, &up, classes, &z, &labels) - oracle_loss(&w64, &down, classes, &z, &labels)) / (2.0 * h));
        }
        let analytic: Vec<f64> = got.grad_w.data().iter().chain(&got.grad_b).map(|&v| v as f64).collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        prop_assert!(diff <= 1e-4 * scale.max(1e-12), "relative error {}", diff / scale);
    }

    #[test]
    fn duplicated_class_has_the_same_loss(seed in any::<u64>(), rows in 1usize..20, r in 2usize..11) {
        let mut rng = SeededRng::new(seed);
        let clf = LinearClassifier::new(matrix(&mut rng, 4, 3, 2.0), vec![0.3, -0.1, 0.0, 1.0]).unwrap();
        let z = matrix(&mut rng, rows, 3, 3.0);
        let v = check_duplication(&z, 2, &clf, r).unwrap();
        prop_assert!(v.equal, "{v:?}");
    }

    #[test]
    fn total_loss_is_additive(seed in any::<u64>(), counts in prop::collection::vec(1usize..15, 2..6)) {
        let mut rng = SeededRng::new(seed);
        let parts: Vec<Matrix> = counts.iter().map(|&n| matrix(&mut rng, n, 3, 2.0)).collect();
        let refs: Vec<&Matrix> = parts.iter().collect();
        let clf = LinearClassifier::new(matrix(&mut rng, counts.len(), 3, 1.0), vec![0.0; counts.len()]).unwrap();
        let rep = loss_report(&refs, &clf, "c", "s").unwrap();
        prop_assert!(rep.additivity_gap() < 1e-6);
        for (y, z) in parts.iter().enumerate() {
            prop_assert_eq!(rep.per_class[y], class_loss(z, y, &clf).unwrap());
        }
    }

    #[test]
    fn aligned_snapshots_take_target_means(seed in any::<u64>(), source in 1u32..5, target in 1u32..5) {
        let store = random_store(seed, &[9, 4, 2], 9, 4, 3);
        for class in 0..3 {
            let aligned = store.align(class, source, target).unwrap().features;
            for (got, want) in aligned.column_means().iter().zip(store.class_mean(class, target).unwrap()) {
                prop_assert!((got - want).abs() < 1e-5);
            }
            let before = variance(store.payload(class, source).unwrap());
            for (a, b) in variance(&aligned).iter().zip(&before) {
                prop_assert!((a - b).abs() < 1e-6 * (1.0 + b));
            }
            let scaled = store.align_with(&MeanVarianceAlignment, class, source, target).unwrap().features;
            for (got, want) in scaled.column_stds().iter().zip(store.class_std(class, target).unwrap()) {
                prop_assert!((got - want).abs() < 1e-4 * (1.0 + want));
            }
        }
    }

    #[test]
    fn trail_sets_have_n_b_rows_and_contiguous_history(
        seed in any::<u64>(),
        counts in prop::collection::vec(1usize..12, 1..5),
        n_b in 1usize..30,
    ) {
        let epochs = 8;
        let store = random_store(seed, &counts, n_b, epochs, 2);
        let mut rng = SeededRng::new(seed ^ 1);
        for (class, &n) in counts.iter().enumerate() {
            let k = backtrack_depth(n_b, n);
            for e in 1..=epochs {
                match store.assemble(class, e, &MeanAlignment, &mut rng) {
                    Ok(t) => {
                        prop_assert_eq!(t.len(), n_b);
                        prop_assert_eq!(t.features.rows(), n_b);
                        let src = t.source_epochs();
                        let want: Vec<u32> = (0..k as u32).map(|i| e - i).collect();
                        prop_assert_eq!(src, want);
                    }
                    Err(breadcrumbs::Error::InsufficientHistory { needed, .. }) => {
                        prop_assert_eq!(needed, k);
                        prop_assert!((e as usize) < k);
                    }
                    Err(other) => prop_assert!(false, "{other}"),
                }
            }
        }
    }

    #[test]
    fn container_round_trips_any_store(seed in any::<u64>(), counts in prop::collection::vec(1usize..6, 1..4), n_b in 1usize..10) {
        let store = random_store(seed, &counts, n_b, 3, 2);
        let mut w = ContainerWriter::new(2, &[1; 32]).unwrap();
        w.store(&store).unwrap();
        let back = Container::decode(&w.finish()).unwrap().store().unwrap();
        prop_assert_eq!(back.snapshots(), store.snapshots());
        prop_assert_eq!(back.policy(), store.policy());
    }
}
