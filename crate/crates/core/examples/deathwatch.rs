//! Epoch-by-epoch view of one round where a class block fails: train the
//! same configuration manually and report the failing class's block
//! activity, classifier column norm, and recall every few epochs.

use osl_lab::config::DataConfig;
use osl_lab::data::SplitTag;
use osl_lab::linalg::{relu, Matrix};
use osl_lab::losses::LossKind;
use osl_lab::training::{train, ClassifierKind, DataProvider, ModelSpec, TrainConfig};

fn main() {
    let data_config = DataConfig::Blobs {
        classes: 8,
        dim: 64,
        train_per_class: 100,
        test_per_class: 100,
        noise_scale: 0.30,
        seed: 9000,
        resample_per_round: true,
        reduce_per_class: 0,
    };
    let provider = data_config.provider().unwrap();
    let round = 3; // class 6 fails here
    let dataset = provider.dataset_for_round(round).unwrap();
    let spec = ModelSpec {
        input_dim: 64,
        hidden_widths: vec![32],
        classifier: ClassifierKind::Osl,
        hidden_dropout: None,
        hidden_dropconnect: None,
        loss: LossKind::CrossEntropy,
        classifier_bias: false,
    };

    // Re-train with increasing epoch budgets to watch the trajectory; the
    // run seed makes every prefix identical.
    for epochs in [1usize, 2, 4, 6, 10, 20, 40, 70, 100] {
        let config = TrainConfig {
            epochs,
            seed: 103,
            ..TrainConfig::small_sample(0)
        };
        let out = train(&spec, &config, &dataset).unwrap();
        let model = &out.model;
        let (test_x, test_y) = dataset.subset(SplitTag::Test);
        let dense = match &model.hidden[0] {
            osl_lab::training::HiddenUnit::Plain(d) => d,
            _ => unreachable!(),
        };
        let h = relu(&dense.linear(&test_x).unwrap());
        let probs = osl_lab::optim::ProbPredictor::predict_probs(model, &test_x).unwrap();
        let (mask, weights) = match &model.classifier {
            osl_lab::training::Classifier::Osl(o) => (&o.mask, &o.weights),
            _ => unreachable!(),
        };

        let mut line = format!("epochs {epochs:>3} |");
        for class in [6usize, 0] {
            let members: Vec<usize> =
                (0..test_y.len()).filter(|&i| test_y[i] == class).collect();
            let mut correct = 0;
            let mut mean_logit = 0.0;
            for &i in &members {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for r in 0..8 {
                    if probs.get(r, i) > best_v {
                        best_v = probs.get(r, i);
                        best = r;
                    }
                }
                if best == class {
                    correct += 1;
                }
            }
            let range = mask.block_range(class);
            let mut mean_act = 0.0;
            for &i in &members {
                let mut logit = 0.0;
                for r in range.clone() {
                    mean_act += h.get(r, i);
                    logit += weights.get(r, class) * h.get(r, i);
                }
                mean_logit += logit;
            }
            mean_act /= (members.len() * range.len()) as f64;
            mean_logit /= members.len() as f64;
            let wnorm: f64 = range
                .clone()
                .map(|r| weights.get(r, class) * weights.get(r, class))
                .sum::<f64>()
                .sqrt();
            line.push_str(&format!(
                " c{class}: recall={:.2} act={mean_act:.3} wnorm={wnorm:.3} logit={mean_logit:.2} |",
                correct as f64 / members.len() as f64
            ));
        }
        println!("{line} trainCE={:.4}", out.result.final_train_loss);
    }
}
