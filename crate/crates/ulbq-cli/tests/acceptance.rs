//! Release gate for the toolkit: ten numbered checks covering the autodiff
//! engine, the quantizers, the saliency-weighted penalty, block-wise
//! calibration efficacy on the seeded reference model, perplexity
//! arithmetic, and end-to-end pipeline determinism.
//!
//! Each check prints exactly one line to stderr:
//!
//! ```text
//! [ 6/10] PASS calibration recovers quantization loss — ...
//! ```
//!
//! The reference-model numbers were recorded from the first seeded run and
//! are asserted with ±0.1% headroom for cross-toolchain floating-point
//! drift; everything else is property-based or exact.

use std::io::Write;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use ulbq::calib::{calibrate_model, CalibrationConfig, Variant};
use ulbq::data::TextDataset;
use ulbq::eval::{compare, gap_recovered, ppl_from_nlls, window_nlls, EvalReport};
use ulbq::model::{ModelConfig, ToyTransformer};
use ulbq::quant::dual::dual_binarize_group;
use ulbq::quant::learnable::LearnableClip;
use ulbq::quant::mos::MixtureOfScales;
use ulbq::quant::pack::{pack_codes, packed_len, unpack_codes};
use ulbq::quant::{qmax, rtn_roundtrip, GroupSize};
use ulbq::rng::Rng;
use ulbq::saliency::{compute_saliency, saliency_penalty};
use ulbq::tensor::Tensor;

// ── Reference-run constants ─────────────────────────────────────────────────
//
// Test-split perplexities of the seeded reference pipeline (seed 0, 2-block
// d_model-64 model, 2000 pretraining steps on the bundled corpus, 2-bit
// groups of 64, 32 calibration sequences). Recorded once, asserted since.

const REF_FP_PPL: f64 = 15.065206958286202;
const REF_RTN_PPL: f64 = 20.26132577300934;
const REF_PLAIN_CAL_PPL: f64 = 15.66065644071399;
const REF_SALIENCY_CAL_PPL: f64 = 15.629097965941865;
const REF_Q8_PPL: f64 = 15.051360933549766;
/// Allowed relative drift of a pinned value (±0.1%).
const PIN_TOL: f64 = 1e-3;
/// Reference-pipeline time budget, seconds.
const REF_BUDGET: f64 = 900.0;

// ── Reporting ───────────────────────────────────────────────────────────────

/// Write one line straight to stderr, bypassing the harness capture so the
/// verdict is visible in any test run.
fn announce(line: &str) {
    let mut err = std::io::stderr();
    let _ = err.write_all(line.as_bytes());
    let _ = err.write_all(b"\n");
}

/// Run one numbered check. The body returns a short success detail; a panic
/// inside it becomes the FAIL detail and still fails the test.
fn criterion(number: usize, label: &str, body: impl FnOnce() -> String) {
    match std::panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(detail) => announce(&format!("[{number:2}/10] PASS {label} — {detail}")),
        Err(payload) => {
            let why = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked without a message".to_string());
            let first = why.lines().next().unwrap_or("");
            announce(&format!("[{number:2}/10] FAIL {label} — {first}"));
            std::panic::resume_unwind(payload);
        }
    }
}

// ── Shared plumbing ─────────────────────────────────────────────────────────

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus.txt")
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ulbq")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "`ulbq {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_ppl(path: &Path) -> f64 {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    v["perplexity"].as_f64().expect("perplexity field")
}

fn within_pin(got: f64, pinned: f64, what: &str) {
    let drift = (got - pinned).abs() / pinned;
    assert!(
        drift <= PIN_TOL,
        "{what} drifted from its recorded value: got {got}, pinned {pinned} ({:.3}%)",
        drift * 100.0
    );
}

/// Outcome of the seeded reference pipeline, built once and shared by the
/// checks that read it. Everything runs through the installed binary so the
/// numbers are exactly what an operator would reproduce.
struct Reference {
    fp: f64,
    rtn: f64,
    q8: f64,
    plain: f64,
    saliency: f64,
    seconds: f64,
}

fn reference() -> &'static Reference {
    static CELL: OnceLock<Reference> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let write_cfg = |name: &str, calibration: serde_json::Value| -> String {
            let cfg = serde_json::json!({
                "dataset": corpus().to_str().unwrap(),
                "out_dir": out.to_str().unwrap(),
                "calibration": calibration,
            });
            let path = dir.path().join(name);
            std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
            path.to_str().unwrap().to_string()
        };
        // The calibrated arms train the default quantizer with its low-rank
        // correction on 32 held-in sequences; the baseline arm is plain
        // round-to-nearest with no correction at all.
        let base = write_cfg("base.json", serde_json::json!({ "samples": 32 }));
        let rtn = write_cfg("rtn.json", serde_json::json!({ "quantizer": "rtn", "lora_rank": 0 }));

        let model = out.join("model.ulbq");
        let quantized = out.join("quantized.ulbq");
        let calibrated = out.join("calibrated.ulbq");

        run_ok(&["pretrain", "--config", &base]);
        run_ok(&["eval", "--config", &base, model.to_str().unwrap()]);
        run_ok(&["quantize", "--config", &rtn]);
        run_ok(&["eval", "--config", &rtn, quantized.to_str().unwrap(), "--id", "rtn"]);
        run_ok(&["quantize", "--config", &rtn, "--bits", "8"]);
        run_ok(&["eval", "--config", &rtn, quantized.to_str().unwrap(), "--id", "q8"]);
        run_ok(&["saliency", "--config", &base]);
        run_ok(&["calibrate", "--config", &base, "--variant", "none"]);
        run_ok(&["eval", "--config", &base, calibrated.to_str().unwrap(), "--id", "plain"]);
        run_ok(&["calibrate", "--config", &base, "--variant", "saliency", "--coef", "3e-6"]);
        run_ok(&["eval", "--config", &base, calibrated.to_str().unwrap(), "--id", "saliency"]);

        Reference {
            fp: read_ppl(&out.join("eval-fp.json")),
            rtn: read_ppl(&out.join("eval-rtn.json")),
            q8: read_ppl(&out.join("eval-q8.json")),
            plain: read_ppl(&out.join("eval-plain.json")),
            saliency: read_ppl(&out.join("eval-saliency.json")),
            seconds: started.elapsed().as_secs_f64(),
        }
    })
}

// ── 1. Autodiff vs central differences ──────────────────────────────────────

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_CASES: usize = 100;

fn rel_err(autodiff: f64, fd: f64) -> f64 {
    (autodiff - fd).abs() / fd.abs().max(1.0)
}

/// Worst relative error between the backward pass and central differences,
/// probing every element of every listed leaf.
fn grad_check(
    points: &[(Vec<usize>, Vec<f64>)],
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
) -> f64 {
    let leaves: Vec<Tensor<f64>> =
        points.iter().map(|(s, d)| Tensor::<f64>::from_f64(s, d, true)).collect();
    let loss = f(&leaves);
    loss.backward();
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |li: usize, i: usize, dv: f64| -> f64 {
        let leaves: Vec<Tensor<f64>> = points
            .iter()
            .enumerate()
            .map(|(lj, (s, d))| {
                let mut d = d.clone();
                if lj == li {
                    d[i] += dv;
                }
                Tensor::<f64>::from_f64(s, &d, false)
            })
            .collect();
        f(&leaves).item()
    };

    let mut worst = 0.0f64;
    for (li, (_, data)) in points.iter().enumerate() {
        for i in 0..data.len() {
            let fd = (eval(li, i, FD_H) - eval(li, i, -FD_H)) / (2.0 * FD_H);
            worst = worst.max(rel_err(grads[li][i], fd));
        }
    }
    worst
}

fn random_point(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
}

/// Random data at distance > margin from the given values, so one-sided
/// kinks (min/max ties, clamp edges) don't poison the central difference.
fn away_from(rng: &mut Rng, n: usize, avoid: &[f64], margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.uniform_in(-1.0, 1.0);
            if avoid.iter().all(|&a| (v - a).abs() > margin) {
                break v;
            }
        })
        .collect()
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    criterion(1, "gradients match central differences", || {
        let started = Instant::now();
        let mut worst = 0.0f64;
        let mut patterns = 0usize;
        let mut sweep = |name: &str, mut case: Box<dyn FnMut(&mut Rng) -> f64>| {
            let mut rng = Rng::stream(0xacce97, name);
            let mut local = 0.0f64;
            for _ in 0..FD_CASES {
                local = local.max(case(&mut rng));
            }
            assert!(local <= FD_TOL, "{name}: worst relative error {local:e} > {FD_TOL:e}");
            worst = worst.max(local);
            patterns += 1;
        };

        sweep("add", Box::new(|rng| {
            let (a, b) = (random_point(rng, 6), random_point(rng, 6));
            grad_check(&[(vec![2, 3], a), (vec![2, 3], b)], |t| t[0].add(&t[1]).square().sum())
        }));
        sweep("sub", Box::new(|rng| {
            let (a, b) = (random_point(rng, 6), random_point(rng, 6));
            grad_check(&[(vec![2, 3], a), (vec![2, 3], b)], |t| t[0].sub(&t[1]).square().sum())
        }));
        sweep("mul", Box::new(|rng| {
            let (a, b) = (random_point(rng, 6), random_point(rng, 6));
            grad_check(&[(vec![2, 3], a), (vec![2, 3], b)], |t| t[0].mul(&t[1]).sum())
        }));
        sweep("div", Box::new(|rng| {
            let a = random_point(rng, 6);
            let b: Vec<f64> = (0..6)
                .map(|_| {
                    let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                    sign * rng.uniform_in(0.5, 1.5)
                })
                .collect();
            grad_check(&[(vec![6], a), (vec![6], b)], |t| t[0].div(&t[1]).sum())
        }));
        sweep("broadcast_add", Box::new(|rng| {
            let (a, b) = (random_point(rng, 12), random_point(rng, 4));
            grad_check(&[(vec![3, 4], a), (vec![4], b)], |t| t[0].add(&t[1]).square().sum())
        }));
        sweep("broadcast_mul_scalar", Box::new(|rng| {
            let (a, b) = (random_point(rng, 12), random_point(rng, 1));
            grad_check(&[(vec![3, 4], a), (vec![1], b)], |t| t[0].mul(&t[1]).square().sum())
        }));
        sweep("maximum", Box::new(|rng| {
            let a = random_point(rng, 8);
            let b: Vec<f64> =
                a.iter().map(|&v| v + if rng.uniform() < 0.5 { 0.3 } else { -0.3 }).collect();
            grad_check(&[(vec![8], a), (vec![8], b)], |t| t[0].maximum(&t[1]).square().sum())
        }));
        sweep("minimum", Box::new(|rng| {
            let a = random_point(rng, 8);
            let b: Vec<f64> =
                a.iter().map(|&v| v + if rng.uniform() < 0.5 { 0.4 } else { -0.4 }).collect();
            grad_check(&[(vec![8], a), (vec![8], b)], |t| t[0].minimum(&t[1]).square().sum())
        }));
        sweep("clamp", Box::new(|rng| {
            let x = away_from(rng, 8, &[-0.5, 0.5], 1e-3);
            grad_check(&[(vec![8], x)], |t| t[0].clamp_const(-0.5, 0.5).square().sum())
        }));
        sweep("sigmoid", Box::new(|rng| {
            let x = random_point(rng, 8);
            grad_check(&[(vec![8], x)], |t| t[0].sigmoid().square().sum())
        }));
        sweep("silu", Box::new(|rng| {
            let x = random_point(rng, 8);
            grad_check(&[(vec![8], x)], |t| t[0].silu().square().sum())
        }));
        sweep("scale_add_scalar", Box::new(|rng| {
            let x = random_point(rng, 8);
            grad_check(&[(vec![8], x)], |t| t[0].scale(1.7).add_scalar(-0.3).square().sum())
        }));
        sweep("softmax", Box::new(|rng| {
            let x = random_point(rng, 12);
            let w = Tensor::<f64>::from_f64(&[3, 4], &random_point(rng, 12), false);
            grad_check(&[(vec![3, 4], x)], move |t| t[0].softmax().mul(&w).sum())
        }));
        sweep("rms_norm", Box::new(|rng| {
            let (x, g) = (random_point(rng, 12), random_point(rng, 4));
            grad_check(&[(vec![3, 4], x), (vec![4], g)], |t| {
                t[0].rms_norm(&t[1], 1e-5).square().sum()
            })
        }));
        sweep("matmul", Box::new(|rng| {
            let (a, b) = (random_point(rng, 6), random_point(rng, 8));
            grad_check(&[(vec![3, 2], a), (vec![2, 4], b)], |t| t[0].matmul(&t[1]).square().sum())
        }));
        sweep("matmul_batched_lhs", Box::new(|rng| {
            let (a, b) = (random_point(rng, 12), random_point(rng, 6));
            grad_check(&[(vec![2, 3, 2], a), (vec![2, 3], b)], |t| {
                t[0].matmul(&t[1]).square().sum()
            })
        }));
        sweep("matmul_batched_both", Box::new(|rng| {
            let (a, b) = (random_point(rng, 12), random_point(rng, 12));
            grad_check(&[(vec![2, 3, 2], a), (vec![2, 2, 3], b)], |t| {
                t[0].matmul(&t[1]).square().sum()
            })
        }));
        sweep("linear", Box::new(|rng| {
            let (x, w) = (random_point(rng, 8), random_point(rng, 12));
            grad_check(&[(vec![2, 4], x), (vec![3, 4], w)], |t| {
                t[0].linear(&t[1]).square().sum()
            })
        }));
        sweep("reshape", Box::new(|rng| {
            let x = random_point(rng, 12);
            grad_check(&[(vec![3, 4], x)], |t| t[0].reshape(&[2, 6]).square().sum())
        }));
        sweep("permute", Box::new(|rng| {
            let x = random_point(rng, 24);
            grad_check(&[(vec![2, 3, 4], x)], |t| t[0].permute(&[2, 0, 1]).square().sum())
        }));
        sweep("repeat_each", Box::new(|rng| {
            let x = random_point(rng, 4);
            grad_check(&[(vec![4], x)], |t| t[0].repeat_each(3).square().sum())
        }));
        sweep("sum", Box::new(|rng| {
            let x = random_point(rng, 9);
            grad_check(&[(vec![9], x)], |t| t[0].square().sum())
        }));
        sweep("mean", Box::new(|rng| {
            let x = random_point(rng, 9);
            grad_check(&[(vec![9], x)], |t| t[0].square().mean())
        }));
        sweep("embedding", Box::new(|rng| {
            let table = random_point(rng, 5 * 3);
            let ids: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
            grad_check(&[(vec![5, 3], table)], move |t| t[0].embedding(&ids, &[4]).square().sum())
        }));
        sweep("cross_entropy", Box::new(|rng| {
            let logits = random_point(rng, 4 * 5);
            let targets: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
            grad_check(&[(vec![4, 5], logits)], move |t| t[0].cross_entropy(&targets))
        }));

        // The straight-through estimator is exact by contract, not within
        // finite-difference tolerance: its Jacobian is the identity.
        let mut rng = Rng::stream(0xacce97, "ste");
        for _ in 0..FD_CASES {
            let x = Tensor::<f64>::from_f64(&[6], &random_point(&mut rng, 6), true);
            let c = random_point(&mut rng, 6);
            let ct = Tensor::<f64>::from_f64(&[6], &c, false);
            x.ste_round().mul(&ct).sum().backward();
            assert_eq!(x.grad().unwrap(), c, "rounding must pass gradients through unchanged");
        }
        patterns += 1;

        let secs = started.elapsed().as_secs_f64();
        assert!(secs < 60.0, "gradient sweep took {secs:.1}s, budget is 60s");
        format!("{patterns} op patterns x {FD_CASES} cases, worst rel err {worst:.1e}, {secs:.1}s")
    });
}

// ── 2. Quantizer contracts ──────────────────────────────────────────────────

#[test]
fn criterion_02_quantizer_contracts_hold() {
    criterion(2, "quantizer contracts hold", || {
        let started = Instant::now();
        let widths = [1u8, 2, 3, 4, 8];
        let mut rng = Rng::stream(0xacce97, "quant-contracts");

        // Reconstruction never strays more than half a group scale.
        for &bits in &widths {
            for _ in 0..100 {
                let w: Vec<f64> = (0..64).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
                let (spec, _, dq) = rtn_roundtrip(&w, &[4, 16], bits, GroupSize::Of(16)).unwrap();
                for (gi, (wg, dg)) in w.chunks(16).zip(dq.chunks(16)).enumerate() {
                    let bound = spec.scales[gi] / 2.0 * (1.0 + 1e-12) + 1e-15;
                    for (v, d) in wg.iter().zip(dg) {
                        assert!(
                            (v - d).abs() <= bound,
                            "{bits}-bit: |{v} - {d}| exceeds half-scale {bound}"
                        );
                    }
                }
            }
        }

        // More bits never hurt, and 8 bits are essentially transparent.
        for trial in 0..10 {
            let w: Vec<f64> = (0..64 * 64).map(|_| rng.normal() * 0.7).collect();
            let mut prev = f64::INFINITY;
            for &bits in &widths {
                let (_, _, dq) = rtn_roundtrip(&w, &[64, 64], bits, GroupSize::Of(64)).unwrap();
                let mse = w.iter().zip(&dq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    / w.len() as f64;
                assert!(
                    mse <= prev * (1.0 + 1e-12),
                    "trial {trial}: {bits}-bit mse {mse} exceeds coarser {prev}"
                );
                prev = mse;
            }
            assert!(prev < 1e-4, "8-bit mse {prev} is suspiciously large");
        }

        // Codes survive packing bit-for-bit at every width and length.
        for _ in 0..200 {
            let bits = widths[rng.below(widths.len())];
            let n = rng.below(131);
            let mask = qmax(bits) as u8;
            let codes: Vec<u8> = (0..n).map(|_| (rng.below(256) as u8) & mask).collect();
            let packed = pack_codes(&codes, bits);
            assert_eq!(packed.len(), packed_len(n, bits));
            assert_eq!(unpack_codes(&packed, bits, n).unwrap(), codes);
        }

        // With its gates wide open the trainable quantizer is plain
        // round-to-nearest (sigmoid(100) == 1.0 exactly, so the gated range
        // is the raw min/max range).
        for &bits in &widths {
            for _ in 0..20 {
                let w: Vec<f64> = (0..8 * 16).map(|_| rng.uniform_in(-1.2, 1.7)).collect();
                let clip = LearnableClip::new(&w, &[8, 16], bits, GroupSize::Of(16)).unwrap();
                clip.gamma_lo.set_data(&vec![100.0; clip.layout.groups]);
                clip.gamma_hi.set_data(&vec![100.0; clip.layout.groups]);
                let wt = Tensor::leaf(&[8, 16], w.clone(), false);
                let got = clip.fake_quant(&wt).to_vec();
                let (_, _, want) = rtn_roundtrip(&w, &[8, 16], bits, GroupSize::Of(16)).unwrap();
                for (g, r) in got.iter().zip(&want) {
                    assert!(
                        (g - r).abs() <= 1e-6,
                        "{bits}-bit open-gate output {g} differs from plain rounding {r}"
                    );
                }
            }
        }

        let secs = started.elapsed().as_secs_f64();
        assert!(secs < 30.0, "quantizer contract suite took {secs:.1}s, budget is 30s");
        format!("bound/monotone/pack/open-gate over widths {widths:?}, {secs:.1}s")
    });
}

// ── 3. Weighted preservation penalty ────────────────────────────────────────

#[test]
fn criterion_03_weighted_penalty_matches_dense_oracle() {
    criterion(3, "weighted penalty matches a dense oracle", || {
        let mut rng = Rng::stream(0xacce97, "penalty-oracle");
        let mut worst = 0.0f64;

        for _ in 0..100 {
            let w: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
            let t: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
            let a: Vec<f64> = (0..64).map(|_| rng.uniform_in(0.0, 3.0)).collect();
            let got = saliency_penalty(
                &Tensor::<f64>::leaf(&[8, 8], w.clone(), false),
                &Tensor::<f64>::leaf(&[8, 8], t.clone(), false),
                &Tensor::<f64>::leaf(&[8, 8], a.clone(), false),
            )
            .item();
            let want: f64 =
                w.iter().zip(&t).zip(&a).map(|((w, t), a)| a * (w - t) * (w - t)).sum();
            let rel = (got - want).abs() / want.abs().max(1e-300);
            assert!(rel <= 1e-12, "penalty {got} vs hand oracle {want} (rel {rel:e})");
            worst = worst.max(rel);
        }

        // Unit weights reduce the penalty to the plain squared distance,
        // bit for bit.
        for _ in 0..20 {
            let w = Tensor::<f64>::leaf(&[4, 4], (0..16).map(|_| rng.normal()).collect(), false);
            let t = Tensor::<f64>::leaf(&[4, 4], (0..16).map(|_| rng.normal()).collect(), false);
            let ones = Tensor::<f64>::leaf(&[4, 4], vec![1.0; 16], false);
            assert_eq!(
                saliency_penalty(&w, &t, &ones).item(),
                w.sub(&t).square().sum().item(),
                "unit weights must give exactly the unweighted penalty"
            );
        }

        // The normalized sensitivity map is invariant to rescaling the loss.
        let coeffs: Vec<Vec<f64>> = (0..6).map(|_| (0..12).map(|_| rng.normal()).collect()).collect();
        let map_at = |scale: f64| {
            let w = Tensor::<f64>::leaf(&[3, 4], (0..12).map(|i| (i as f64).sin()).collect(), true);
            let params = vec![("w".to_string(), w.clone())];
            compute_saliency(&params, coeffs.len(), |i| {
                let c = Tensor::<f64>::leaf(&[3, 4], coeffs[i].clone(), false);
                w.mul(&c).sum().square().scale(scale)
            })
            .unwrap()
        };
        let base = map_at(1.0);
        for scale in [2.0, 3.0, 0.25] {
            let scaled = map_at(scale);
            for ((_, b), (_, s)) in base.entries().iter().zip(scaled.entries()) {
                for (x, y) in b.iter().zip(s) {
                    let rel = (x - y).abs() / x.abs().max(1e-300);
                    assert!(
                        rel <= 1e-12,
                        "map changed under loss scale {scale}: {x} vs {y} (rel {rel:e})"
                    );
                }
            }
        }

        format!("100 dense oracles (worst rel {worst:.1e}), unit-weight identity, scale invariance")
    });
}

// ── 4. Two-term binary decomposition quality ────────────────────────────────

/// Best MSE over a 41×41 magnitude grid on `[0, max|w|]²` with the exactly
/// optimal per-element sign choice at each pair.
fn grid_oracle_mse(w: &[f64]) -> f64 {
    const GRID: usize = 41;
    let a = w.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if a == 0.0 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for i in 0..GRID {
        for j in 0..GRID {
            let a1 = a * i as f64 / (GRID - 1) as f64;
            let a2 = a * j as f64 / (GRID - 1) as f64;
            let mut sse = 0.0;
            for &v in w {
                let e = [a1 + a2, a1 - a2, -a1 + a2, -a1 - a2]
                    .iter()
                    .map(|&l| (v - l) * (v - l))
                    .fold(f64::INFINITY, f64::min);
                sse += e;
            }
            best = best.min(sse / w.len() as f64);
        }
    }
    best
}

/// MSE of rounding to the four-level symmetric grid {-a, -a/3, a/3, a}.
fn symmetric_two_bit_mse(w: &[f64]) -> f64 {
    let a = w.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let grid = [-a, -a / 3.0, a / 3.0, a];
    w.iter()
        .map(|&v| {
            let d = grid.iter().map(|&l| (v - l).abs()).fold(f64::INFINITY, f64::min);
            d * d
        })
        .sum::<f64>()
        / w.len() as f64
}

#[test]
fn criterion_04_dual_binarization_beats_brute_force_and_symmetric_grid() {
    criterion(4, "two-term binarization matches brute force", || {
        let mut rng = Rng::stream(0xacce97, "dual-oracle");
        let mut worst_excess = 0.0f64;
        for trial in 0..1000 {
            let w: Vec<f64> = match trial % 3 {
                0 => (0..16).map(|_| rng.normal()).collect(),
                1 => (0..16).map(|_| rng.normal().powi(3)).collect(),
                _ => (0..16).map(|_| rng.normal() * 0.3 + 0.8).collect(),
            };
            let fit = dual_binarize_group(&w);
            let als = fit.mse(&w);
            let grid = grid_oracle_mse(&w);
            assert!(
                als <= grid + 1e-6,
                "trial {trial}: solver mse {als} loses to grid search {grid}"
            );
            worst_excess = worst_excess.max(als - grid);
            let sym = symmetric_two_bit_mse(&w);
            assert!(
                als <= sym + 1e-12,
                "trial {trial}: solver mse {als} loses to the symmetric grid {sym}"
            );
        }
        format!("1000 groups, worst excess over grid search {worst_excess:.1e}")
    });
}

// ── 5. Scale-mixture router ─────────────────────────────────────────────────

#[test]
fn criterion_05_scale_mixture_router_is_a_convex_combination() {
    criterion(5, "scale-mixture routing is convex", || {
        let mut rng = Rng::stream(0xacce97, "mos-contract");
        let w: Vec<f32> = (0..12 * 8).map(|_| rng.normal() as f32 * 0.1).collect();
        let mos = MixtureOfScales::new(&w, &[12, 8], 4, &mut rng);
        // Spread the router so the logits are far from uniform.
        let spread: Vec<f32> = (0..4 * 8).map(|_| rng.uniform_in(-3.0, 3.0) as f32).collect();
        mos.router.set_data(&spread);
        let x: Vec<f32> = (0..1000 * 8).map(|_| rng.normal() as f32).collect();
        let mix = mos.mixture(&Tensor::<f32>::leaf(&[1000, 8], x, false)).to_vec();
        let mut worst = 0.0f32;
        for token in mix.chunks(4) {
            let sum: f32 = token.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "mixture weights sum to {sum}");
            assert!(token.iter().all(|&p| p >= 0.0), "negative mixture weight");
            worst = worst.max((sum - 1.0).abs());
        }

        // One expert leaves nothing to mix: every token must get that
        // expert's scale row bit for bit.
        let w: Vec<f32> = (0..6 * 4).map(|_| rng.normal() as f32).collect();
        let single = MixtureOfScales::new(&w, &[6, 4], 1, &mut rng);
        let x: Vec<f32> = (0..50 * 4).map(|_| rng.normal() as f32).collect();
        let scales = single.scales(&Tensor::<f32>::leaf(&[50, 4], x, false)).to_vec();
        let expert = single.experts.to_vec();
        for row in scales.chunks(6) {
            assert_eq!(row, &expert[..], "single-expert path must be exact");
        }

        format!("1000 tokens sum to 1 within {worst:.1e}; single-expert path bit-exact")
    });
}

// ── 6. Calibration efficacy on the reference model ──────────────────────────

#[test]
fn criterion_06_calibration_recovers_quantization_loss() {
    criterion(6, "calibration recovers quantization loss", || {
        let r = reference();
        within_pin(r.fp, REF_FP_PPL, "full-precision perplexity");
        within_pin(r.rtn, REF_RTN_PPL, "2-bit round-to-nearest perplexity");
        within_pin(r.plain, REF_PLAIN_CAL_PPL, "calibrated (no penalty) perplexity");
        within_pin(r.saliency, REF_SALIENCY_CAL_PPL, "calibrated (weighted penalty) perplexity");

        let efficacy = (r.rtn - r.plain) / r.plain;
        assert!(
            efficacy >= 0.05,
            "calibration only improved on round-to-nearest by {:.2}% (need >= 5%)",
            efficacy * 100.0
        );
        assert!(
            r.saliency <= r.plain * 1.005,
            "weighted penalty hurt beyond noise: {} vs {} (+0.5% cap)",
            r.saliency,
            r.plain
        );
        assert!(
            r.saliency < r.plain,
            "the pinned seeded run no longer shows the penalty helping: {} vs {}",
            r.saliency,
            r.plain
        );
        assert!(
            r.seconds < REF_BUDGET,
            "reference pipeline took {:.0}s, budget is {REF_BUDGET:.0}s",
            r.seconds
        );
        format!(
            "fp {:.4} | rtn {:.4} | calibrated {:.4} | +penalty {:.4}; {:.1}% recovered base-to-calibrated, {:.0}s",
            r.fp,
            r.rtn,
            r.plain,
            r.saliency,
            efficacy * 100.0,
            r.seconds
        )
    });
}

// ── 7. Disabling the penalty equals a zero coefficient, bit for bit ─────────

#[test]
fn criterion_07_disabling_the_regularizer_matches_zero_coefficient_exactly() {
    criterion(7, "variant 'none' is bit-identical to coefficient 0", || {
        let dataset = TextDataset::load(&corpus()).unwrap();
        let model_cfg = ModelConfig {
            vocab: dataset.tokenizer.vocab(),
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            d_mlp: 32,
            max_seq: 48,
        };
        let fresh = || {
            let mut rng = Rng::stream(7, "init");
            ToyTransformer::<f32>::init(model_cfg.clone(), &mut rng).unwrap()
        };
        let cfg = |variant: Variant, lambda0: f64| CalibrationConfig {
            variant,
            lambda0,
            group: GroupSize::Of(8),
            lora_rank: 2,
            epochs: 3,
            batch_size: 2,
            samples: 6,
            seq_len: 32,
            seed: 7,
            ..CalibrationConfig::default()
        };

        // Arm A: the penalty switched off by variant, with a coefficient
        // that would bite if anything still read it.
        let mut off = fresh();
        let report_off = calibrate_model(&mut off, &dataset, None, &cfg(Variant::None, 0.7)).unwrap();
        // Arm B: the penalty term active in the loss, scaled by zero.
        let mut zero = fresh();
        let report_zero =
            calibrate_model(&mut zero, &dataset, None, &cfg(Variant::Naive, 0.0)).unwrap();

        assert_eq!(report_off.csv(), report_zero.csv(), "training traces differ");
        let (a, b) = (off.named_params(), zero.named_params());
        assert_eq!(a.len(), b.len());
        for ((name_a, pa), (name_b, pb)) in a.iter().zip(&b) {
            assert_eq!(name_a, name_b);
            assert_eq!(pa.to_vec(), pb.to_vec(), "weights diverged at {name_a}");
        }
        format!("{} trace rows and {} tensors identical", report_off.rows.len(), a.len())
    });
}

// ── 8. Perplexity units and 8-bit fidelity ──────────────────────────────────

#[test]
fn criterion_08_perplexity_units_and_eight_bit_fidelity() {
    criterion(8, "perplexity units and 8-bit fidelity", || {
        // A uniform model over V symbols scores exactly V.
        let vocab = 4;
        let logits = vec![0.0; 7 * vocab];
        let targets = [0u32, 3, 2, 1, 2, 0, 3];
        let nlls = window_nlls(&logits, &targets, vocab);
        assert!(nlls.iter().all(|&n| n == 4.0f64.ln()), "uniform rows must cost ln V each");
        assert_eq!(ppl_from_nlls(&nlls), 4.0, "uniform perplexity must equal the vocabulary");

        // Two tokens at probabilities 1/2 and 1/4 score 2*sqrt(2).
        let ppl = ppl_from_nlls(&[2.0f64.ln(), 4.0f64.ln()]);
        assert!(
            (ppl - 2.0 * 2.0f64.sqrt()).abs() <= 1e-9,
            "half/quarter case gave {ppl}, want 2*sqrt(2)"
        );

        // 8-bit quantization of the reference model is within 2% of full
        // precision.
        let r = reference();
        within_pin(r.q8, REF_Q8_PPL, "8-bit perplexity");
        let drift = (r.q8 - r.fp).abs() / r.fp;
        assert!(
            drift < 0.02,
            "8-bit perplexity {} drifted {:.2}% from full precision {}",
            r.q8,
            drift * 100.0,
            r.fp
        );
        format!(
            "uniform = V exact, two-token = 2*sqrt(2) +/- 1e-9, 8-bit within {:.2}% of fp",
            drift * 100.0
        )
    });
}

// ── 9. Gap-recovered statistic ──────────────────────────────────────────────

#[test]
fn criterion_09_gap_recovered_statistic() {
    criterion(9, "gap-recovered statistic", || {
        let direct = gap_recovered(7.56, 7.3332, 5.47);
        assert!(
            (direct - 10.85).abs() <= 0.01,
            "gap_recovered(7.56, 7.3332, 5.47) = {direct}, want 10.85 +/- 0.01"
        );

        // The same number must come out of the comparison table.
        let report = |id: &str, ppl: f64| EvalReport {
            model_id: id.to_string(),
            dataset_id: "corpus#test".to_string(),
            token_count: 1000,
            perplexity: ppl,
            nll_digest: String::new(),
            nan_encountered: false,
        };
        let table = compare(
            &[report("fp", 5.47), report("rtn", 7.56), report("method", 7.3332)],
            "fp",
            "rtn",
        )
        .unwrap();
        let row = table
            .lines()
            .find(|l| l.starts_with("method,"))
            .expect("method row in the comparison table");
        let from_table: f64 = row.split(',').last().unwrap().parse().unwrap();
        assert!(
            (from_table - 10.85).abs() <= 0.01,
            "comparison table reports {from_table}, want 10.85 +/- 0.01"
        );
        format!("direct {direct:.4}% and tabulated {from_table:.4}% both at 10.85 +/- 0.01")
    });
}

// ── 10. Pipeline determinism ────────────────────────────────────────────────

#[test]
fn criterion_10_pipeline_commands_are_deterministic() {
    criterion(10, "pipeline reruns are byte-identical", || {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = serde_json::json!({
            "seed": 11,
            "dataset": corpus().to_str().unwrap(),
            "out_dir": out.to_str().unwrap(),
            "model": { "d_model": 16, "n_heads": 2, "n_blocks": 2, "d_mlp": 32, "max_seq": 48 },
            "pretrain": { "steps": 60, "batch_size": 8, "seq_len": 32 },
            "saliency": { "samples": 6, "seq_len": 32 },
            "calibration": {
                "bits": 2, "group_size": 8, "lora_rank": 2,
                "epochs": 2, "batch_size": 4, "samples": 8, "seq_len": 32
            },
            "eval": { "split": "test", "max_tokens": 400 }
        });
        let cfg_path = dir.path().join("exp.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let cfg = cfg_path.to_str().unwrap();

        let model = out.join("model.ulbq");
        let quantized = out.join("quantized.ulbq");
        let calibrated = out.join("calibrated.ulbq");
        let pipeline = |_: ()| {
            run_ok(&["pretrain", "--config", cfg]);
            run_ok(&["saliency", "--config", cfg]);
            run_ok(&["quantize", "--config", cfg]);
            run_ok(&["calibrate", "--config", cfg, "--variant", "saliency", "--coef", "1e-3"]);
            run_ok(&["eval", "--config", cfg, model.to_str().unwrap()]);
            run_ok(&["eval", "--config", cfg, quantized.to_str().unwrap(), "--id", "rtn"]);
            run_ok(&["eval", "--config", cfg, calibrated.to_str().unwrap(), "--id", "method"]);
            run_ok(&["pack", "--config", cfg, calibrated.to_str().unwrap()]);
            run_ok(&[
                "report",
                "--config",
                cfg,
                out.join("eval-fp.json").to_str().unwrap(),
                out.join("eval-rtn.json").to_str().unwrap(),
                out.join("eval-method.json").to_str().unwrap(),
            ]);
        };

        // Every content artifact of every command; wall-clock lives in the
        // separate timing-*.json files, which are exempt by design.
        let artifacts = [
            "model.ulbq",
            "pretrain.json",
            "saliency.ulbq",
            "saliency.json",
            "quantized.ulbq",
            "calibrated.ulbq",
            "calibration.csv",
            "calibration.json",
            "eval-fp.json",
            "eval-rtn.json",
            "eval-method.json",
            "pack.json",
            "report.csv",
        ];

        pipeline(());
        let first: Vec<Vec<u8>> =
            artifacts.iter().map(|name| std::fs::read(out.join(name)).unwrap()).collect();
        pipeline(());
        for (name, before) in artifacts.iter().zip(&first) {
            let after = std::fs::read(out.join(name)).unwrap();
            assert_eq!(&after, before, "{name} changed across a rerun with the same seed");
        }
        format!("{} artifacts byte-identical across a full rerun", artifacts.len())
    });
}
