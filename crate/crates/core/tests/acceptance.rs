//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.
//!
//! The lines are written straight to the process stdout so they show up in
//! the test log even when the test passes.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hfwave::bench::{self, LayerKind, ScalingConfig};
use hfwave::harness::{self, GradTarget, TrainConfig, Trainer, GRADCHECK_TOLERANCE};
use hfwave::hfqe::{self, QuantizationConfig};
use hfwave::losses::{hf_augmentation_loss, momentum_update, ProxyQueue, ProxyTable};
use hfwave::numerics::{Real, Tape, Tensor};
use hfwave::wavelet;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, title: &str, elapsed: Duration, o: &Outcome) {
    let line = format!(
        "criterion {n} [{}] {title}: {} ({:.1}s)\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn random_tensor<T: Real>(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    c: usize,
    scale: f64,
) -> Tensor<T> {
    Tensor::from_fn(&[h, w, c], |_| T::lit(rng.random_range(-scale..scale)))
}

fn even_side(rng: &mut ChaCha8Rng) -> usize {
    2 * rng.random_range(1..=32)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reconstruction error and relative Parseval error for one precision.
fn wavelet_errors<T: Real>(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (h, w, c) = (even_side(rng), even_side(rng), rng.random_range(1..=8));
    let x: Tensor<T> = random_tensor(rng, h, w, c, 1.0);
    let s = wavelet::forward(&x).unwrap();
    let back = wavelet::inverse(&s).unwrap();
    let recon = back.max_abs_diff(&x).unwrap().as_f64();
    let ex = x.sum_sq().as_f64();
    let parseval = (s.energy().as_f64() - ex).abs() / ex.max(f64::MIN_POSITIVE);
    (recon, parseval)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut r64, mut p64, mut r32, mut p32) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (r, p) = wavelet_errors::<f64>(&mut rng);
        r64 = r64.max(r);
        p64 = p64.max(p);
        let (r, p) = wavelet_errors::<f32>(&mut rng);
        r32 = r32.max(r);
        p32 = p32.max(p);
    }
    Outcome {
        pass: r64 <= 1e-12 && p64 <= 1e-12 && r32 <= 1e-5 && p32 <= 1e-5,
        detail: format!(
            "1000 tensors per precision; f64 recon={r64:.2e} parseval={p64:.2e}, f32 recon={r32:.2e} parseval={p32:.2e}"
        ),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = QuantizationConfig::new(15.0).unwrap();
    let (mut hf_err, mut grid_err, mut idem_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (h, w, c) = (
            even_side(&mut rng),
            even_side(&mut rng),
            rng.random_range(1..=8),
        );
        let x: Tensor = random_tensor(&mut rng, h, w, c, 100.0);
        let y = hfqe::hfqe_enhance(&x, cfg).unwrap();
        let (sx, sy) = (wavelet::forward(&x).unwrap(), wavelet::forward(&y).unwrap());
        for (a, b) in [(&sx.lh, &sy.lh), (&sx.hl, &sy.hl), (&sx.hh, &sy.hh)] {
            hf_err = hf_err.max(a.max_abs_diff(b).unwrap());
        }
        for &v in sy.ll.data() {
            grid_err = grid_err.max((v - 15.0 * (v / 15.0).round()).abs());
        }
        let yy = hfqe::hfqe_enhance(&y, cfg).unwrap();
        idem_err = idem_err.max(yy.max_abs_diff(&y).unwrap());
    }
    Outcome {
        pass: hf_err <= 1e-5 && grid_err <= 1e-5 && idem_err <= 1e-5,
        detail: format!("200 tensors, q=15; HF drift={hf_err:.2e} LL off-grid={grid_err:.2e} idempotence={idem_err:.2e}"),
    }
}

fn criterion_3() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for t in GradTarget::ALL {
        let mut worst = 0.0f64;
        for seed in 0..20 {
            match harness::gradcheck_target(t, seed) {
                Ok(e) => worst = worst.max(e),
                Err(e) => {
                    worst = f64::INFINITY;
                    parts.push(format!("{t} seed {seed} errored: {e}"));
                }
            }
        }
        pass &= worst <= GRADCHECK_TOLERANCE;
        parts.push(format!("{t}={worst:.2e}"));
    }
    Outcome {
        pass,
        detail: format!("20 seeds each, max rel err {}", parts.join(" ")),
    }
}

fn criterion_4() -> Outcome {
    let mut notes = Vec::new();

    // Single proxy, perfect match.
    let tape = Tape::new();
    let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).cos());
    let mut table = ProxyTable::new();
    table.insert(5, x.clone()).unwrap();
    let queue = ProxyQueue::new(4).unwrap();
    let lp = hf_augmentation_loss(tape.constant(x), &table, &queue, 5)
        .unwrap()
        .item();
    let lp_ok = lp.abs() <= 1e-12;
    notes.push(format!("single-proxy L_P={lp:.1e}"));

    // Momentum contraction.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut contraction = 0.0f64;
    for _ in 0..100 {
        let lambda: f64 = rng.random_range(0.0..1.0);
        let v = Tensor::from_fn(&[3, 4], |_| rng.random_range(-5.0..5.0));
        let x = Tensor::from_fn(&[3, 4], |_| rng.random_range(-5.0..5.0));
        let mut v2 = v.clone();
        momentum_update(&mut v2, &x, lambda).unwrap();
        let before: Vec<f64> = v.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let after: Vec<f64> = v2.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let rel = (norm(&after) - lambda * norm(&before)).abs() / norm(&before);
        contraction = contraction.max(rel);
    }
    let contraction_ok = contraction <= 1e-12;
    notes.push(format!("contraction rel err={contraction:.1e}"));

    // Stage gating: no store writes while only stage 1 trains.
    let cfg = TrainConfig {
        steps: 12,
        stage1_steps: 8,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&cfg).unwrap();
    let mut gating_ok = true;
    for _ in 0..cfg.stage1_steps {
        trainer.step().unwrap();
        gating_ok &= trainer.store_mutations() == 0;
    }
    trainer.step().unwrap();
    let after_stage1 = trainer.store_mutations();
    gating_ok &= (2..=3).all(|t| trainer.memory(t).mutations() > 0);
    notes.push(format!(
        "mutations during stage 1=0: {gating_ok}, after first stage-2 step={after_stage1}"
    ));

    Outcome {
        pass: lp_ok && contraction_ok && gating_ok,
        detail: notes.join("; "),
    }
}

fn criterion_5() -> Outcome {
    let report = bench::run_scaling_study(&ScalingConfig::default()).unwrap();
    let mixing = report.slope(LayerKind::Mixing).unwrap();
    let attention = report.slope(LayerKind::Attention).unwrap();
    let top = *bench::DEFAULT_SIZES.last().unwrap();
    let m_top = report.median_at(LayerKind::Mixing, top).unwrap();
    let a_top = report.median_at(LayerKind::Attention, top).unwrap();
    Outcome {
        pass: mixing <= 1.3 && attention >= 1.7 && m_top < a_top,
        detail: format!(
            "slopes mixing={mixing:.3} attention={attention:.3}; at n={top} mixing={:.2}ms attention={:.2}ms",
            m_top / 1e6,
            a_top / 1e6
        ),
    }
}

fn top1(cfg: &TrainConfig) -> f64 {
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.run(|_| {}).unwrap();
    harness::evaluate_retrieval(&trainer.model, &trainer.data.gallery, &trainer.data.query)
        .unwrap()
        .top1
}

fn criterion_6() -> Outcome {
    let base = TrainConfig::default();
    assert_eq!(
        (base.k_ratio, base.proxy_momentum, base.q),
        (0.3, 0.5, 15.0)
    );
    assert_eq!(
        (
            base.data.n_ids,
            base.data.samples_per_id,
            base.data.patch_size
        ),
        (8, 16, 16)
    );
    assert!(base.steps <= 500);
    let mut passing = 0;
    let mut per_seed = Vec::new();
    for seed in 0..10 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.data.seed = seed;
        let full = top1(&cfg);
        let ablated = top1(&cfg.ablated());
        let ok = full >= 0.5 && full > ablated;
        passing += ok as usize;
        per_seed.push(format!(
            "{seed}:{full:.3}/{ablated:.3}{}",
            if ok { "" } else { "x" }
        ));
    }
    Outcome {
        pass: passing >= 7,
        detail: format!(
            "{passing}/10 seeds with top-1>=0.5 and above ablation (full/ablated: {})",
            per_seed.join(" ")
        ),
    }
}

fn criterion_7() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files = Vec::new();
    for d in &dirs {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let args = [
            "hfwave",
            "train",
            "--seed",
            "3",
            "--out-dir",
            d.path().to_str().unwrap(),
        ];
        let code = hfwave::cli::dispatch(args, &mut out, &mut err);
        assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
        files.push(std::fs::read(d.path().join("losses.csv")).unwrap());
    }
    Outcome {
        pass: files[0] == files[1] && !files[0].is_empty(),
        detail: format!(
            "two train runs, seed 3: {} bytes each, identical={}",
            files[0].len(),
            files[0] == files[1]
        ),
    }
}

#[test]
fn acceptance() {
    let criteria: [(&str, Duration, fn() -> Outcome); 7] = [
        (
            "wavelet reconstruction and Parseval",
            Duration::from_secs(10),
            criterion_1,
        ),
        ("HFQE contract", Duration::from_secs(60), criterion_2),
        ("gradient suite", Duration::from_secs(120), criterion_3),
        (
            "loss algebra and stage gating",
            Duration::from_secs(60),
            criterion_4,
        ),
        ("scaling study", Duration::from_secs(300), criterion_5),
        (
            "toy training against ablation",
            Duration::from_secs(600),
            criterion_6,
        ),
        (
            "determinism of train",
            Duration::from_secs(300),
            criterion_7,
        ),
    ];
    let mut failed = Vec::new();
    for (i, (title, budget, run)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let mut o = run();
        let elapsed = t.elapsed();
        if elapsed > budget {
            o.pass = false;
            o.detail
                .push_str(&format!("; over the {}s budget", budget.as_secs()));
        }
        report(i + 1, title, elapsed, &o);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
