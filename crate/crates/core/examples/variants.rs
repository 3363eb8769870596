//! Compare synthetic-mean constructions by how reliably the masked arm
//! trains: dense signed means (current), dense nonnegative means, and
//! sparse positive "signature coordinate" means closer to flattened CNN
//! features. Prints FC/OS stats and the bad-round count per variant.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use osl_lab::data::{Dataset, Provenance, SplitTag};
use osl_lab::linalg::Matrix;
use osl_lab::losses::LossKind;
use osl_lab::training::{train, ClassifierKind, ModelSpec, TrainConfig};

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= n;
    }
}

#[derive(Clone, Copy, Debug)]
enum MeanKind {
    DenseSigned,
    DenseNonneg,
    SparsePositive { support: usize },
}

fn make_dataset(
    kind: MeanKind,
    k: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    noise: f64,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::new();
    for _ in 0..k {
        let mut m = vec![0.0; dim];
        match kind {
            MeanKind::DenseSigned => {
                for v in m.iter_mut() {
                    *v = gaussian(&mut rng);
                }
            }
            MeanKind::DenseNonneg => {
                for v in m.iter_mut() {
                    *v = gaussian(&mut rng).abs();
                }
            }
            MeanKind::SparsePositive { support } => {
                let mut idx: Vec<usize> = (0..dim).collect();
                for i in 0..support {
                    let j = rng.gen_range(i..dim);
                    idx.swap(i, j);
                }
                for &i in &idx[..support] {
                    m[i] = gaussian(&mut rng).abs();
                }
            }
        }
        normalize(&mut m);
        means.push(m);
    }
    let per_class = train_per_class + test_per_class;
    let n = k * per_class;
    let mut features = Matrix::zeros(dim, n);
    let mut labels = Vec::new();
    let mut split = Vec::new();
    let mut col = 0;
    for (class, mean) in means.iter().enumerate() {
        for s in 0..per_class {
            for (r, &mv) in mean.iter().enumerate() {
                features.set(r, col, mv + noise * gaussian(&mut rng));
            }
            labels.push(class);
            split.push(if s < train_per_class {
                SplitTag::Train
            } else {
                SplitTag::Test
            });
            col += 1;
        }
    }
    Dataset::new(features, labels, k, split, Provenance::Synthetic).unwrap()
}

fn spec(classifier: ClassifierKind, dim: usize, hidden: usize) -> ModelSpec {
    ModelSpec {
        input_dim: dim,
        hidden_widths: vec![hidden],
        classifier,
        hidden_dropout: None,
        hidden_dropconnect: None,
        loss: LossKind::CrossEntropy,
        classifier_bias: false,
    }
}

fn main() {
    let rounds = 20;
    let variants: Vec<(&str, MeanKind, usize, f64)> = vec![
        ("dense_signed d64", MeanKind::DenseSigned, 64, 0.30),
        ("dense_nonneg d64", MeanKind::DenseNonneg, 64, 0.30),
        ("sparse8 d64", MeanKind::SparsePositive { support: 8 }, 64, 0.30),
        ("sparse16 d64", MeanKind::SparsePositive { support: 16 }, 64, 0.30),
        ("dense_signed d256", MeanKind::DenseSigned, 256, 0.30),
    ];
    for (name, kind, dim, noise) in variants {
        let mut fc_accs = Vec::new();
        let mut os_accs = Vec::new();
        let mut bad = 0;
        for round in 0..rounds {
            let data = make_dataset(kind, 8, dim, 100, 100, noise, 9000 + round);
            let config = TrainConfig {
                seed: 100 + round,
                ..TrainConfig::small_sample(0)
            };
            let fc = train(&spec(ClassifierKind::Fc, dim, 32), &config, &data).unwrap();
            let os = train(&spec(ClassifierKind::Osl, dim, 32), &config, &data).unwrap();
            fc_accs.push(fc.result.test_acc);
            os_accs.push(os.result.test_acc);
            if os.result.final_train_loss > 0.05 {
                bad += 1;
            }
        }
        let stats = |a: &[f64]| {
            let n = a.len() as f64;
            let m = a.iter().sum::<f64>() / n;
            let s = (a.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt();
            (m, s)
        };
        let (fm, fs) = stats(&fc_accs);
        let (om, os_) = stats(&os_accs);
        println!(
            "{name:<18} FC {fm:.4}±{fs:.4} | OS {om:.4}±{os_:.4} | bad OS rounds {bad}/{rounds} | ord={}",
            om > fm && os_ < fs
        );
    }
}
