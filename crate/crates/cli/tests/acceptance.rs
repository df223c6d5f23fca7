//! Acceptance suite: one test per criterion, each printing its own
//! pass/fail line through the harness. The training-heavy criteria share a
//! lazily built fixture of 6 seeds x {grpo, cappo} full runs.

use cappo_core::config::TrainingConfig;
use cappo_core::env::{self, build_samples, CorruptionConfig};
use cappo_core::metrics::MetricsRow;
use cappo_core::objective::{group_advantage, group_normalize_kl, kl_weight, token_kl_k3};
use cappo_core::policy::PolicyParams;
use cappo_core::rng::Rng;
use cappo_core::tensor::log_softmax_row;
use cappo_core::trainer::{evaluate_accuracy, train_loop, Conditioning, Mode};
use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;

const SEEDS: [u64; 6] = [1, 2, 3, 4, 5, 6];
const FINAL_WINDOW: usize = 60; // last 20% of 300 steps

fn temp_root(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cappo-acceptance-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn desk_corruption() -> CorruptionConfig {
    CorruptionConfig { p_attr: 0.3, noise_sigma: 0.25, caption_p_attr: 0.0 }
}

struct RunData {
    rows: Vec<MetricsRow>,
    final_params: PolicyParams<f64>,
    config: TrainingConfig,
}

struct Fixture {
    cappo: Vec<RunData>,
    grpo: Vec<RunData>,
}

/// 6 seeds, both modes, 300 steps at desk-scale defaults with image
/// corruption 0.3 and faithful captions.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = temp_root("fixture");
        let mut cappo = Vec::new();
        let mut grpo = Vec::new();
        for (i, &seed) in SEEDS.iter().enumerate() {
            let dataset = build_samples(512, 1000 + seed, 6, &desk_corruption()).unwrap();
            let cfg = TrainingConfig { seed, total_steps: 300, ..TrainingConfig::default() };
            assert_eq!(cfg.alpha, 0.01);
            assert_eq!(cfg.beta, 0.1);
            for (mode, bucket) in [(Mode::Cappo, &mut cappo), (Mode::Grpo, &mut grpo)] {
                let dir = root.join(format!("{}-s{i}", mode.name()));
                let outcome = train_loop(&cfg, &dataset, mode, &dir, None).unwrap();
                bucket.push(RunData {
                    rows: outcome.rows,
                    final_params: outcome.final_params,
                    config: cfg.clone(),
                });
            }
        }
        Fixture { cappo, grpo }
    })
}

fn final_window_mean(rows: &[MetricsRow], metric: &str) -> f64 {
    let tail = &rows[rows.len() - FINAL_WINDOW..];
    tail.iter().map(|r| r.metric(metric).unwrap()).sum::<f64>() / FINAL_WINDOW as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

#[test]
fn criterion_1_grpo_reduction_byte_identical() {
    let root = temp_root("c1");
    let dataset = build_samples(256, 4242, 6, &desk_corruption()).unwrap();
    let cfg = TrainingConfig {
        seed: 7,
        total_steps: 50,
        alpha: 0.0,
        beta: 0.0,
        ..TrainingConfig::default()
    };
    let a = train_loop(&cfg, &dataset, Mode::Grpo, &root.join("grpo"), None).unwrap();
    let b = train_loop(&cfg, &dataset, Mode::Cappo, &root.join("cappo00"), None).unwrap();
    let bytes_a = std::fs::read(&a.metrics_path).unwrap();
    let bytes_b = std::fs::read(&b.metrics_path).unwrap();
    assert_eq!(bytes_a, bytes_b, "metrics CSVs must be byte-identical");
    assert_eq!(a.final_params, b.final_params);
}

#[test]
fn criterion_2_gradient_integrity_via_cmd_gradcheck() {
    let out = Command::new(env!("CARGO_BIN_EXE_cappo"))
        .args(["gradcheck", "--configs", "20", "--seed", "7", "--h", "1e-5", "--tol", "1e-4"])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "gradcheck exit: {:?}\n{stdout}", out.status.code());
    assert_eq!(stdout.matches("PASS").count(), 3, "{stdout}");
    for check in ["policy-network", "caption-consistency-loss", "full-objective"] {
        assert!(stdout.contains(check), "missing {check} in report:\n{stdout}");
    }
}

#[test]
fn criterion_3_k3_grid_and_monte_carlo_unbiasedness() {
    // exact non-negativity on the 4001-point grid over [-20, 20]
    for i in 0..=4000 {
        let delta = -20.0 + i as f64 * 0.01;
        let v = token_kl_k3(delta);
        assert!(v >= 0.0, "k3({delta}) = {v}");
        assert_eq!(v == 0.0, delta == 0.0, "zero iff delta is zero: {delta}");
    }

    // Monte-Carlo unbiasedness against exact categorical KL, 20 pairs
    let mut rng = Rng::seed_from_u64(0xACC3);
    for pair in 0..20 {
        let v = 2 + rng.next_below(7) as usize; // V <= 8
        let zp: Vec<f64> = (0..v).map(|_| rng.uniform(-1.5, 1.5)).collect();
        let zq: Vec<f64> = (0..v).map(|_| rng.uniform(-1.5, 1.5)).collect();
        let mut lp = vec![0.0; v];
        let mut lq = vec![0.0; v];
        log_softmax_row(&zp, None, &mut lp);
        log_softmax_row(&zq, None, &mut lq);
        let exact: f64 = (0..v).map(|j| lp[j].exp() * (lp[j] - lq[j])).sum();

        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let u = rng.next_f64();
            let mut acc = 0.0;
            let mut tok = v - 1;
            for j in 0..v {
                acc += lp[j].exp();
                if u < acc {
                    tok = j;
                    break;
                }
            }
            let est = token_kl_k3(lq[tok] - lp[tok]);
            sum += est;
            sumsq += est * est;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * se + 1e-12,
            "pair {pair}: mc {mean} vs exact {exact} (se {se})"
        );
    }
}

#[test]
fn criterion_4_normalization_properties() {
    let mut rng = Rng::seed_from_u64(0xACC4);
    let tol = 1e-8;
    for trial in 0..10_000 {
        let g = 2 + rng.next_below(15) as usize;
        // mix in degenerate all-equal groups
        let values: Vec<f64> = if trial % 7 == 0 {
            vec![rng.uniform(0.0, 1.0); g]
        } else {
            (0..g).map(|_| rng.uniform(0.0, 1.0)).collect()
        };
        let in_mean = values.iter().sum::<f64>() / g as f64;
        let in_std =
            (values.iter().map(|v| (v - in_mean) * (v - in_mean)).sum::<f64>() / g as f64).sqrt();

        for out in [group_advantage(&values, tol).unwrap(), group_normalize_kl(&values, tol)] {
            if in_std < tol {
                assert!(out.iter().all(|&v| v == 0.0), "trial {trial}: degenerate group");
            } else {
                let mean = out.iter().sum::<f64>() / g as f64;
                let std =
                    (out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g as f64).sqrt();
                assert!(mean.abs() <= 1e-10, "trial {trial}: mean {mean}");
                assert!((std - 1.0).abs() <= 1e-10, "trial {trial}: std {std}");
            }
        }
    }
}

#[test]
fn criterion_5_weight_contract() {
    // closed-form spot values at the default bounds
    assert!((kl_weight(2.0f64, 1.0, 0.1, 0.5, 1.5) - 0.81873).abs() < 1e-5);
    assert!(((-0.2f64).exp() - kl_weight(2.0, 1.0, 0.1, 0.5, 1.5)).abs() < 1e-6);
    assert!((kl_weight(2.0f64, -1.0, 0.1, 0.5, 1.5) - 1.22140).abs() < 1e-5);
    assert!(((0.2f64).exp() - kl_weight(2.0, -1.0, 0.1, 0.5, 1.5)).abs() < 1e-6);

    // every logged weight across full training runs stays within bounds
    let fx = fixture();
    for run in fx.cappo.iter().chain(&fx.grpo) {
        for row in &run.rows {
            assert!(
                row.w_min >= run.config.w_min && row.w_max <= run.config.w_max,
                "step {}: weights [{}, {}] outside [{}, {}]",
                row.step,
                row.w_min,
                row.w_max,
                run.config.w_min,
                run.config.w_max
            );
        }
    }
}

#[test]
fn criterion_6_reward_table_against_regular_language_oracle() {
    use cappo_core::vocab::*;

    // independent oracle: recursive-descent membership test of
    // THINK_OPEN any* THINK_CLOSE BOX_OPEN digit+ BOX_CLOSE EOS
    fn matches_from(tokens: &[u8]) -> bool {
        if tokens.first() != Some(&THINK_OPEN) {
            return false;
        }
        // try every possible end of the think body
        (1..tokens.len()).any(|j| tokens[j] == THINK_CLOSE && tail_matches(&tokens[j + 1..]))
    }
    fn tail_matches(rest: &[u8]) -> bool {
        if rest.first() != Some(&BOX_OPEN) {
            return false;
        }
        let digits = rest[1..].iter().take_while(|t| token_digit(**t).is_some()).count();
        digits >= 1
            && rest.len() == digits + 3
            && rest[1 + digits] == BOX_CLOSE
            && rest[2 + digits] == EOS
    }
    fn oracle_answer(tokens: &[u8]) -> Option<u32> {
        if !matches_from(tokens) {
            return None;
        }
        let close = tokens.len() - 2;
        let mut start = close;
        while start > 0 && token_digit(tokens[start - 1]).is_some() {
            start -= 1;
        }
        let mut v: u32 = 0;
        for &t in &tokens[start..close] {
            v = v.saturating_mul(10).saturating_add(token_digit(t).unwrap() as u32).min(999_999);
        }
        Some(v)
    }

    let mut rng = Rng::seed_from_u64(0xACC6);
    let mut accepted = 0;
    for trial in 0..10_000 {
        let tokens: Vec<u8> = if trial % 2 == 0 {
            let len = rng.next_below(16) as usize;
            (0..len).map(|_| rng.next_below(32) as u8).collect()
        } else {
            // well-formed skeleton with random think body and random edits
            let mut t = vec![THINK_OPEN];
            for _ in 0..rng.next_below(6) {
                t.push(rng.next_below(32) as u8);
            }
            t.extend([THINK_CLOSE, BOX_OPEN]);
            for _ in 0..1 + rng.next_below(2) {
                t.push(digit_token(rng.next_below(10) as u8));
            }
            t.extend([BOX_CLOSE, EOS]);
            if rng.next_below(2) == 0 && !t.is_empty() {
                let i = rng.next_below(t.len() as u64) as usize;
                t[i] = rng.next_below(32) as u8;
            }
            t
        };
        let gold = rng.next_below(10) as u8;
        let verdict = env::verify(&tokens, gold);
        let expect = oracle_answer(&tokens);
        let reward = env::reward(verdict.status);
        match expect {
            None => assert_eq!(reward, 0.0, "tokens {tokens:?}"),
            Some(ans) => {
                accepted += 1;
                assert_eq!(verdict.answer, Some(ans), "tokens {tokens:?}");
                if ans == gold as u32 {
                    assert_eq!(reward, 1.0, "tokens {tokens:?}");
                } else {
                    assert_eq!(reward, 0.1, "tokens {tokens:?}");
                }
            }
        }
    }
    assert!(accepted > 1_500, "fuzz corpus must exercise every reward row: {accepted}");
}

#[test]
fn criterion_7_directional_training_analog() {
    let fx = fixture();

    // (a) cappo final-window mean training reward >= grpo's in >= 4/6 seeds
    let mut wins = 0;
    for (c, g) in fx.cappo.iter().zip(&fx.grpo) {
        let rc = final_window_mean(&c.rows, "mean_reward");
        let rg = final_window_mean(&g.rows, "mean_reward");
        if rc >= rg {
            wins += 1;
        }
    }
    assert!(wins >= 4, "cappo >= grpo reward in only {wins}/6 seeds");

    // (b) caption-KL declines by >= 20% from step 30 to the final window
    // in the median seed
    let declines: Vec<f64> = fx
        .cappo
        .iter()
        .map(|run| {
            let kl30 = run.rows[29].caption_kl;
            let fw = final_window_mean(&run.rows, "caption_kl");
            1.0 - fw / kl30
        })
        .collect();
    let med_decline = median(declines.clone());
    assert!(
        med_decline >= 0.20,
        "median caption-KL decline {med_decline:.3} (per seed: {declines:?})"
    );

    // (c) no entropy collapse: final-window entropy stays above 10% of the
    // step-30 value in the median seed
    let ratios: Vec<f64> = fx
        .cappo
        .iter()
        .map(|run| final_window_mean(&run.rows, "entropy") / run.rows[29].entropy)
        .collect();
    let med_ratio = median(ratios.clone());
    assert!(med_ratio > 0.10, "median entropy ratio {med_ratio:.3} (per seed: {ratios:?})");
}

#[test]
fn criterion_8_caption_substitute_analog() {
    // part 1: after training, caption-conditioned accuracy must not be
    // significantly below image-conditioned accuracy under image corruption
    let fx = fixture();
    let held_out = build_samples(1000, 990_001, 6, &desk_corruption()).unwrap();
    let run = &fx.cappo[0];
    let img = evaluate_accuracy(&run.final_params, &run.config, &held_out, Conditioning::Image);
    let cap = evaluate_accuracy(&run.final_params, &run.config, &held_out, Conditioning::Caption);
    // one-sided two-proportion z-test at 95%: reject (fail) only when the
    // image channel is significantly better
    let n = held_out.len() as f64;
    let pooled = (img.accuracy + cap.accuracy) / 2.0;
    let se = (pooled * (1.0 - pooled) * 2.0 / n).sqrt();
    if se > 0.0 {
        let z = (img.accuracy - cap.accuracy) / se;
        assert!(
            z <= 1.645,
            "image accuracy {:.4} significantly exceeds caption accuracy {:.4} (z = {z:.2})",
            img.accuracy,
            cap.accuracy
        );
    }

    // part 2: across captioner presets, caption-conditioned accuracy is
    // non-decreasing in caption quality (median over 3 seeds per preset)
    let root = temp_root("c8");
    let presets = [("low", 0.30), ("mid", 0.15), ("high", 0.00)];
    let mut medians = Vec::new();
    for (name, caption_p) in presets {
        let mut accs = Vec::new();
        for seed in [21u64, 22, 23] {
            let corruption =
                CorruptionConfig { p_attr: 0.3, noise_sigma: 0.25, caption_p_attr: caption_p };
            let dataset = build_samples(256, 7000 + seed, 6, &corruption).unwrap();
            let cfg = TrainingConfig {
                seed,
                total_steps: 100,
                caption_p_attr: caption_p,
                ..TrainingConfig::default()
            };
            let dir = root.join(format!("{name}-{seed}"));
            let outcome = train_loop(&cfg, &dataset, Mode::Cappo, &dir, None).unwrap();
            let eval_set = build_samples(500, 8200 + seed, 6, &corruption).unwrap();
            let report =
                evaluate_accuracy(&outcome.final_params, &cfg, &eval_set, Conditioning::Caption);
            accs.push(report.accuracy);
        }
        medians.push((name, median(accs)));
    }
    for pair in medians.windows(2) {
        assert!(
            pair[1].1 >= pair[0].1,
            "caption accuracy not non-decreasing across presets: {medians:?}"
        );
    }
}

#[test]
fn criterion_9_determinism_and_persistence() {
    let root = temp_root("c9");

    // dataset generation is byte-stable under a fixed seed
    let corruption = desk_corruption();
    let s1 = build_samples(300, 555, 6, &corruption).unwrap();
    let s2 = build_samples(300, 555, 6, &corruption).unwrap();
    let (p1, p2) = (root.join("d1.txt"), root.join("d2.txt"));
    env::write_dataset(&p1, &s1, 6).unwrap();
    env::write_dataset(&p2, &s2, 6).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    // two identical runs produce byte-identical metrics
    let dataset = build_samples(128, 777, 6, &corruption).unwrap();
    let cfg = TrainingConfig {
        seed: 5,
        total_steps: 20,
        rollout_batch: 16,
        train_batch: 8,
        group_size: 4,
        checkpoint_every: 10,
        ..TrainingConfig::default()
    };
    let a = train_loop(&cfg, &dataset, Mode::Cappo, &root.join("a"), None).unwrap();
    let b = train_loop(&cfg, &dataset, Mode::Cappo, &root.join("b"), None).unwrap();
    assert_eq!(
        std::fs::read(&a.metrics_path).unwrap(),
        std::fs::read(&b.metrics_path).unwrap()
    );

    // checkpoint-resume reproduces the remaining rows exactly
    let ckpt = root.join("a").join("ckpt-000010.ckpt");
    assert!(ckpt.exists());
    let resumed = train_loop(&cfg, &dataset, Mode::Cappo, &root.join("r"), Some(&ckpt)).unwrap();
    assert_eq!(resumed.rows.len(), 10);
    assert_eq!(&a.rows[10..], &resumed.rows[..]);
    assert_eq!(resumed.final_params, a.final_params);
}
