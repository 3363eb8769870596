//! Grid search over the synthetic benchmark knobs (noise scale, training
//! samples per class) printing, per point: FC and OS accuracy stats, the
//! paired t-test, snapshot gain, train-loss parity and the width ordering.
//! Used to pick the default desk-benchmark constants.

use osl_lab::analysis::paired_ttest;
use osl_lab::config::DataConfig;
use osl_lab::losses::LossKind;
use osl_lab::training::{
    run_rounds, ClassifierKind, DataProvider, ModelSpec, RunResult, TrainConfig,
};

fn spec(classifier: ClassifierKind, hidden: usize) -> ModelSpec {
    ModelSpec {
        input_dim: 64,
        hidden_widths: vec![hidden],
        classifier,
        hidden_dropout: None,
        hidden_dropconnect: None,
        loss: LossKind::CrossEntropy,
        classifier_bias: false,
    }
}

fn stats(results: &[RunResult]) -> (f64, f64, f64) {
    let accs: Vec<f64> = results.iter().map(|r| r.test_acc).collect();
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let std =
        (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let train_ce = results.iter().map(|r| r.final_train_loss).sum::<f64>() / n;
    (mean, std, train_ce)
}

fn run_arm(
    model: &ModelSpec,
    config: &TrainConfig,
    provider: &dyn DataProvider,
    rounds: usize,
) -> Vec<RunResult> {
    run_rounds(model, config, provider, rounds, 4, "")
        .unwrap()
        .into_iter()
        .map(|o| o.outcome.expect("round trains").result)
        .collect()
}

fn main() {
    let rounds = 20;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let noises: Vec<f64> = if args.is_empty() {
        vec![0.30, 0.33]
    } else {
        args.iter().map(|a| a.parse().unwrap()).collect()
    };

    for &train_per_class in &[30usize, 50, 100] {
        for &noise in &noises {
            let data = DataConfig::Blobs {
                classes: 8,
                dim: 64,
                train_per_class,
                test_per_class: 100,
                noise_scale: noise,
                seed: 9000,
                resample_per_round: true,
                reduce_per_class: 0,
            };
            let provider = data.provider().unwrap();
            let config = TrainConfig::small_sample(100);

            let fc = run_arm(&spec(ClassifierKind::Fc, 32), &config, &provider, rounds);
            let os = run_arm(&spec(ClassifierKind::Osl, 32), &config, &provider, rounds);
            let os_snap_config = config.clone().with_snapshots(2);
            let os_snap = run_arm(&spec(ClassifierKind::Osl, 32), &os_snap_config, &provider, rounds);
            let os16 = run_arm(&spec(ClassifierKind::Osl, 16), &config, &provider, rounds);
            let os512 = run_arm(&spec(ClassifierKind::Osl, 512), &config, &provider, rounds);

            let (fc_m, fc_s, fc_ce) = stats(&fc);
            let (os_m, os_s, os_ce) = stats(&os);
            let (snap_m, _, _) = stats(&os_snap);
            let (m16, _, ce16) = stats(&os16);
            let (m512, _, ce512) = stats(&os512);

            let accs_os: Vec<f64> = os.iter().map(|r| r.test_acc).collect();
            let accs_fc: Vec<f64> = fc.iter().map(|r| r.test_acc).collect();
            let p = match paired_ttest(&accs_os, &accs_fc) {
                Ok(r) => r.p_value,
                Err(_) => f64::NAN,
            };

            let band = (0.85..=0.92).contains(&fc_m);
            let ordered = os_m > fc_m && os_s < fc_s;
            let snap_ok = snap_m >= os_m;
            let parity = fc_ce < 0.05 && os_ce < 0.05;
            let width_ok = m16 > m512 && os_m > m512;
            println!(
                "tpc={train_per_class:>3} noise={noise:.2} | FC {fc_m:.4}±{fc_s:.4} ce={fc_ce:.4} | OS {os_m:.4}±{os_s:.4} ce={os_ce:.4} | p={p:.2e} | snap {snap_m:.4} | w16 {m16:.4} ce{ce16:.3} w512 {m512:.4} ce{ce512:.3} | band={band} ord={ordered} snap_ok={snap_ok} parity={parity} width_ok={width_ok}"
            );
        }
    }
}
