//! Quick oracle suites: each fast path against its brute-force counterpart.

use hinova_core::detector::{kendall_tau, pair_counts, pair_counts_brute};
use hinova_core::eval::{auprc, auprc_brute};
use hinova_core::nn::{grad_check, grad_check_linear, ConvBlock, Head, Linear, ModelSpec, Network};
use hinova_core::preprocess::{autocorrelate, SLICE_LEN};
use hinova_core::seed::rng_for;
use rand::Rng;

pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn suite(name: &'static str, run: impl FnOnce() -> Result<String, String>) -> SuiteResult {
    match run() {
        Ok(detail) => SuiteResult {
            name,
            passed: true,
            detail,
        },
        Err(detail) => SuiteResult {
            name,
            passed: false,
            detail,
        },
    }
}

fn autocorrelation() -> Result<String, String> {
    let mut rng = rng_for(&[0x5E1F, 1]);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..SLICE_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = autocorrelate(&x).map_err(|e| e.to_string())?;
        for (lag, a) in fast.iter().enumerate() {
            let b: f64 = (0..SLICE_LEN - lag).map(|t| x[t] * x[t + lag]).sum();
            worst = worst.max((a - b).abs() / b.abs().max(1e-9 * fast[0]));
        }
    }
    if worst < 1e-4 {
        Ok(format!("20 channels, max relative error {worst:.1e}"))
    } else {
        Err(format!("max relative error {worst:.1e}"))
    }
}

fn kendall() -> Result<String, String> {
    let mut rng = rng_for(&[0x5E1F, 2]);
    for case in 0..300 {
        let n = rng.random_range(2..=120);
        let levels = rng.random_range(1..=8);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        if pair_counts(&x, &y) != pair_counts_brute(&x, &y) {
            return Err(format!("case {case}: pair counts differ"));
        }
    }
    let hand = kendall_tau(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    if (hand - 0.8).abs() > 1e-12 {
        return Err(format!("hand case gave {hand}"));
    }
    Ok("300 tie-bearing cases, hand case 0.8".into())
}

fn gradients() -> Result<String, String> {
    let spec = ModelSpec {
        head: Head::Lstm,
        input_height: 2,
        input_width: 24,
        kernel: (2, 4),
        blocks: vec![
            ConvBlock {
                out_channels: 2,
                dropout: 0.1,
            },
            ConvBlock {
                out_channels: 2,
                dropout: 0.0,
            },
        ],
        pool: (2, 3),
        hidden: 3,
        n_classes: 3,
        bn_momentum: 0.1,
        bn_eps: 1e-5,
        forget_bias: 1.0,
    };
    let mut rng = rng_for(&[0x5E1F, 3]);
    let xs: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..spec.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let mut net = Network::<f64>::new(&spec, 1).map_err(|e| e.to_string())?;
    let full = grad_check(&mut net, &refs, &[0, 2, 1], 1e-5, usize::MAX).map_err(|e| e.to_string())?;
    let mut layer = Linear::<f64>::new("fc", 4, 3, &mut rng);
    let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let linear = grad_check_linear(&mut layer, &x, &[1, 2], 1e-5);
    let detail = format!(
        "network max rel {:.1e} over {} entries, linear {:.1e}",
        full.max_rel_error, full.checked, linear.max_rel_error
    );
    if full.max_rel_error < 1e-2 && linear.max_rel_error < 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn precision_recall() -> Result<String, String> {
    let mut rng = rng_for(&[0x5E1F, 4]);
    let mut cases = 0;
    for _ in 0..400 {
        let n = rng.random_range(1..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if !labels.contains(&true) || !labels.contains(&false) {
            continue;
        }
        let a = auprc(&scores, &labels).map_err(|e| e.to_string())?;
        let b = auprc_brute(&scores, &labels).map_err(|e| e.to_string())?;
        if (a - b).abs() > 1e-9 {
            return Err(format!("{scores:?} {labels:?}: {a} vs {b}"));
        }
        cases += 1;
    }
    let hand = auprc(&[0.9, 0.8, 0.1], &[false, true, true]).map_err(|e| e.to_string())?;
    if (hand - 0.583_333_333).abs() > 1e-6 {
        return Err(format!("hand case gave {hand}"));
    }
    Ok(format!("{cases} tied instances, hand case {hand:.4}"))
}

pub fn run_all() -> Vec<SuiteResult> {
    vec![
        suite("autocorrelation", autocorrelation),
        suite("kendall-tau", kendall),
        suite("gradients", gradients),
        suite("auprc", precision_recall),
    ]
}
