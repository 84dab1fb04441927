//! Perplexity measurement and comparative reporting.
//!
//! A token stream is split into non-overlapping windows of the model's
//! context length; within each window every token after the first is
//! scored by the model's predictive distribution. Negative log-likelihoods
//! are computed and accumulated in 64-bit floats regardless of the model's
//! working precision, window by window in a fixed order, so a rerun
//! reproduces the report byte for byte and a long stream cannot silently
//! lose precision into a plausible-looking number.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ToyTransformer;
use crate::tensor::Scalar;

/// Everything one evaluation produces. `nll_digest` fingerprints the full
/// per-position NLL stream (SHA-256 of the little-endian 64-bit values),
/// so two reports agree on the digest only if they agree on every single
/// token's likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    /// Number of scored tokens (window starts are never predicted).
    pub token_count: usize,
    pub perplexity: f64,
    pub nll_digest: String,
    /// A non-finite NLL poisons the mean and raises this flag; it is never
    /// dropped from the stream.
    pub nan_encountered: bool,
}

/// Per-target NLL from raw logits, all in f64. `logits` holds
/// `targets.len()` rows of `vocab` scores. Uses the max-shifted
/// log-sum-exp, so an oracle-confident row costs exactly zero.
pub fn window_nlls(logits: &[f64], targets: &[u32], vocab: usize) -> Vec<f64> {
    assert_eq!(logits.len(), targets.len() * vocab, "one logit row per target");
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = &logits[i * vocab..(i + 1) * vocab];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            lse - row[t as usize]
        })
        .collect()
}

/// Score `tokens` under `model`, returning one NLL vector per
/// non-overlapping context-length window. A final partial window is kept
/// as long as it still contains something to predict (two tokens); a
/// trailing single token is dropped, since nothing conditions it.
pub fn nll_stream<T: Scalar>(
    model: &ToyTransformer<T>,
    tokens: &[u32],
) -> Result<Vec<Vec<f64>>> {
    if tokens.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 tokens to measure perplexity, got {}",
            tokens.len()
        )));
    }
    let ctx = model.cfg.max_seq;
    let mut windows = Vec::new();
    let mut start = 0;
    while start + 2 <= tokens.len() {
        let end = (start + ctx).min(tokens.len());
        let window = &tokens[start..end];
        let t = window.len() - 1;
        let logits = model.forward_ids(&window[..t], 1, t);
        let logits: Vec<f64> = logits.to_vec().iter().map(|v| v.as_f64()).collect();
        windows.push(window_nlls(&logits, &window[1..], model.cfg.vocab));
        start = end;
    }
    Ok(windows)
}

/// Reduce window NLLs to `(perplexity, token_count, nan_encountered)`.
///
/// Each window is summed on its own, and the window sums are then summed
/// in order — the one fixed reduction tree. Evaluating a stream in one
/// call therefore equals evaluating its windows separately and combining,
/// bit for bit.
pub fn ppl_from_windows(windows: &[Vec<f64>]) -> (f64, usize, bool) {
    let mut total = 0.0;
    let mut count = 0;
    let mut nan = false;
    for w in windows {
        let s: f64 = w.iter().sum();
        nan |= !s.is_finite();
        total += s;
        count += w.len();
    }
    if count == 0 {
        return (f64::NAN, 0, true);
    }
    (f64::exp(total / count as f64), count, nan)
}

/// Perplexity of a flat NLL sequence: `exp(mean)`.
pub fn ppl_from_nlls(nlls: &[f64]) -> f64 {
    assert!(!nlls.is_empty(), "perplexity of an empty stream is undefined");
    f64::exp(nlls.iter().sum::<f64>() / nlls.len() as f64)
}

fn digest_nlls(windows: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    for w in windows {
        for v in w {
            h.update(v.to_le_bytes());
        }
    }
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Evaluate `model` on `tokens` and assemble the report.
pub fn evaluate<T: Scalar>(
    model: &ToyTransformer<T>,
    tokens: &[u32],
    model_id: &str,
    dataset_id: &str,
) -> Result<EvalReport> {
    let windows = nll_stream(model, tokens)?;
    let (perplexity, token_count, nan_encountered) = ppl_from_windows(&windows);
    Ok(EvalReport {
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        token_count,
        perplexity,
        nll_digest: digest_nlls(&windows),
        nan_encountered,
    })
}

/// Share of the quality lost to quantization that a method wins back:
/// `(base − method) / (base − fp) · 100`. The unimproved baseline scores
/// 0%, full recovery of the full-precision perplexity scores 100%.
pub fn gap_recovered(base_ppl: f64, method_ppl: f64, fp_ppl: f64) -> f64 {
    (base_ppl - method_ppl) / (base_ppl - fp_ppl) * 100.0
}

/// Comparison table over several reports on the same dataset, as CSV.
/// `fp_model` and `base_model` name the rows anchoring the gap statistic.
pub fn compare(reports: &[EvalReport], fp_model: &str, base_model: &str) -> Result<String> {
    if reports.len() < 2 {
        return Err(Error::config("need at least two reports to compare"));
    }
    let dataset = &reports[0].dataset_id;
    for r in reports {
        if &r.dataset_id != dataset {
            return Err(Error::config(format!(
                "reports mix datasets '{}' and '{}'; compare like with like",
                dataset, r.dataset_id
            )));
        }
    }
    let ppl_of = |id: &str| -> Result<f64> {
        reports
            .iter()
            .find(|r| r.model_id == id)
            .map(|r| r.perplexity)
            .ok_or_else(|| Error::config(format!("no report for model '{id}'")))
    };
    let fp = ppl_of(fp_model)?;
    let base = ppl_of(base_model)?;
    if base == fp {
        return Err(Error::config(
            "baseline and full-precision perplexities coincide; the gap statistic is undefined",
        ));
    }
    let mut out = String::from("model,dataset,tokens,perplexity,gap_recovered_pct\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.model_id,
            r.dataset_id,
            r.token_count,
            r.perplexity,
            gap_recovered(base, r.perplexity, fp)
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn tiny_model(vocab: usize, max_seq: usize, seed: u64) -> ToyTransformer<f32> {
        let cfg = ModelConfig { vocab, d_model: 8, n_heads: 2, n_blocks: 1, d_mlp: 16, max_seq };
        let mut rng = Rng::stream(seed, "init");
        ToyTransformer::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn uniform_logits_cost_ln_vocab_each() {
        let logits = vec![0.0; 3 * 4];
        let nlls = window_nlls(&logits, &[0, 3, 2], 4);
        for nll in nlls {
            assert_eq!(nll, 4.0f64.ln());
        }
    }

    #[test]
    fn an_oracle_model_has_perplexity_exactly_one() {
        // +50 logits on the true token: the residual probability mass is
        // ~e^-50, far below f64 resolution around 1.0, so the NLL is
        // exactly 0 and the perplexity exactly 1.
        let vocab = 6;
        let targets = [1u32, 4, 0, 5];
        let mut logits = vec![0.0; targets.len() * vocab];
        for (i, &t) in targets.iter().enumerate() {
            logits[i * vocab + t as usize] = 50.0;
        }
        let nlls = window_nlls(&logits, &targets, vocab);
        assert!(nlls.iter().all(|&n| n == 0.0), "{nlls:?}");
        assert_eq!(ppl_from_nlls(&nlls), 1.0);
    }

    #[test]
    fn a_zeroed_head_scores_like_the_uniform_distribution() {
        let mut model = tiny_model(5, 8, 1);
        let numel = model.head.numel();
        model.head = Tensor::leaf(model.head.shape(), vec![0.0f32; numel], false);
        let tokens: Vec<u32> = (0..23).map(|i| i % 5).collect();
        let report = evaluate(&model, &tokens, "uniform", "synthetic").unwrap();
        assert!(
            (report.perplexity - 5.0).abs() <= 1e-12 * 5.0,
            "uniform model should score the vocabulary size, got {}",
            report.perplexity
        );
        assert!(!report.nan_encountered);
    }

    #[test]
    fn half_and_quarter_probabilities_give_two_root_two() {
        let ppl = ppl_from_nlls(&[2.0f64.ln(), 4.0f64.ln()]);
        assert!((ppl - 2.0 * 2.0f64.sqrt()).abs() <= 1e-9, "got {ppl}");
    }

    #[test]
    fn perplexity_is_at_least_one_for_any_softmax_model() {
        let model = tiny_model(7, 6, 3);
        let tokens: Vec<u32> = (0..40).map(|i| (i * 3 + 1) % 7).collect();
        let report = evaluate(&model, &tokens, "random", "synthetic").unwrap();
        assert!(report.perplexity >= 1.0);
        assert!(report.perplexity.is_finite());
    }

    #[test]
    fn whole_stream_equals_combined_windows_bit_for_bit() {
        let model = tiny_model(5, 8, 4);
        // 21 tokens: windows of 8, 8, and a partial 5.
        let tokens: Vec<u32> = (0..21).map(|i| (i * 2 + 3) % 5).collect();
        let full = evaluate(&model, &tokens, "m", "d").unwrap();

        let mut combined = Vec::new();
        for chunk in tokens.chunks(model.cfg.max_seq) {
            combined.extend(nll_stream(&model, chunk).unwrap());
        }
        let (ppl, count, _) = ppl_from_windows(&combined);
        assert_eq!(full.perplexity, ppl);
        assert_eq!(full.token_count, count);
        assert_eq!(count, (8 - 1) + (8 - 1) + (5 - 1));
    }

    #[test]
    fn a_trailing_single_token_is_not_scored() {
        let model = tiny_model(5, 4, 5);
        // 9 tokens: windows of 4 and 4 plus one orphan token.
        let tokens: Vec<u32> = (0..9).map(|i| i % 5).collect();
        let windows = nll_stream(&model, &tokens).unwrap();
        assert_eq!(windows.len(), 2);
        assert_eq!(windows.iter().map(Vec::len).sum::<usize>(), 6);
    }

    #[test]
    fn too_short_streams_are_rejected() {
        let model = tiny_model(5, 4, 6);
        assert!(nll_stream(&model, &[2]).is_err());
        assert!(nll_stream(&model, &[]).is_err());
    }

    #[test]
    fn non_finite_nll_flags_the_report_instead_of_vanishing() {
        let windows = vec![vec![0.5, f64::INFINITY], vec![0.25]];
        let (ppl, count, nan) = ppl_from_windows(&windows);
        assert!(nan);
        assert_eq!(count, 3);
        assert!(!ppl.is_finite());
    }

    #[test]
    fn gap_statistic_matches_hand_arithmetic() {
        // Endpoints of the scale.
        assert_eq!(gap_recovered(10.0, 10.0, 5.0), 0.0);
        assert_eq!(gap_recovered(10.0, 5.0, 5.0), 100.0);
        // A method between the baseline and full precision.
        let pct = gap_recovered(7.56, 7.3332, 5.47);
        assert!((pct - 10.85).abs() <= 0.01, "got {pct}");
    }

    #[test]
    fn comparison_table_reports_every_config_against_the_anchors() {
        let mk = |id: &str, ppl: f64| EvalReport {
            model_id: id.to_string(),
            dataset_id: "test".to_string(),
            token_count: 100,
            perplexity: ppl,
            nll_digest: String::new(),
            nan_encountered: false,
        };
        let reports = vec![mk("fp", 5.47), mk("rtn", 7.56), mk("method", 7.3332)];
        let csv = compare(&reports, "fp", "rtn").unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("fp,test,100,5.47,100"));
        assert!(lines[2].starts_with("rtn,test,100,7.56,0"));
        let method_pct: f64 = lines[3].rsplit(',').next().unwrap().parse().unwrap();
        assert!((method_pct - 10.85).abs() <= 0.01);

        // Mixed datasets are an error, as is a missing anchor.
        let mut bad = reports.clone();
        bad[1].dataset_id = "other".to_string();
        assert!(compare(&bad, "fp", "rtn").is_err());
        assert!(compare(&reports, "fp", "nonexistent").is_err());
        assert!(compare(&reports[..1], "fp", "rtn").is_err());
    }
}
