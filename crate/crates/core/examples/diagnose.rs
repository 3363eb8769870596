//! Per-round diagnosis of the masked-classifier arm: test accuracy,
//! per-class recall, and per-class block activity (largest hidden
//! activation of the class's dedicated neurons over that class's test
//! samples). Checks whether bad rounds coincide with dead blocks.

use osl_lab::config::DataConfig;
use osl_lab::data::SplitTag;
use osl_lab::linalg::{relu, Matrix};
use osl_lab::losses::LossKind;
use osl_lab::training::{train, ClassifierKind, DataProvider, ModelSpec, TrainConfig};

fn main() {
    let data = DataConfig::Blobs {
        classes: 8,
        dim: 64,
        train_per_class: 100,
        test_per_class: 100,
        noise_scale: 0.30,
        seed: 9000,
        resample_per_round: true,
        reduce_per_class: 0,
    };
    let provider = data.provider().unwrap();
    let spec = ModelSpec {
        input_dim: 64,
        hidden_widths: vec![32],
        classifier: ClassifierKind::Osl,
        hidden_dropout: None,
        hidden_dropconnect: None,
        loss: LossKind::CrossEntropy,
        classifier_bias: false,
    };

    for round in 0..20 {
        let dataset = provider.dataset_for_round(round).unwrap();
        let config = TrainConfig {
            seed: 100 + round as u64,
            ..TrainConfig::small_sample(0)
        };
        let out = train(&spec, &config, &dataset).unwrap();
        let model = &out.model;

        let (test_x, test_y) = dataset.subset(SplitTag::Test);
        // Hidden activations of the single hidden layer.
        let dense = match &model.hidden[0] {
            osl_lab::training::HiddenUnit::Plain(d) => d,
            _ => unreachable!(),
        };
        let h = relu(&dense.linear(&test_x).unwrap());
        let probs = osl_lab::optim::ProbPredictor::predict_probs(model, &test_x).unwrap();

        let mask = match &model.classifier {
            osl_lab::training::Classifier::Osl(o) => &o.mask,
            _ => unreachable!(),
        };

        let mut recalls = Vec::new();
        let mut activity = Vec::new();
        for class in 0..8 {
            let members: Vec<usize> = (0..test_y.len()).filter(|&i| test_y[i] == class).collect();
            let mut correct = 0;
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
            recalls.push(correct as f64 / members.len() as f64);

            let range = mask.block_range(class);
            let mut max_act = 0.0f64;
            for &i in &members {
                for r in range.clone() {
                    max_act = max_act.max(h.get(r, i));
                }
            }
            activity.push(max_act);
        }
        let acc = out.result.test_acc;
        let ce = out.result.final_train_loss;
        let recalls_s: Vec<String> = recalls.iter().map(|r| format!("{r:.2}")).collect();
        let act_s: Vec<String> = activity.iter().map(|a| format!("{a:.2}")).collect();
        println!(
            "round {round:>2} acc={acc:.4} trainCE={ce:.4} recall=[{}] block_max_act=[{}]",
            recalls_s.join(","),
            act_s.join(",")
        );
    }
}
