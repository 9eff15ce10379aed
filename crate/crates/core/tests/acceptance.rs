//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mixer::cli::random_instance;
use mixer::corpus::{gen_synthetic, TaskKind};
use mixer::decoding::{beam_generate_with, greedy_generate_with, sequence_logp, DecodeOptions};
use mixer::gradcheck::{
    check_xent, enumerate_sequences, exact_policy_gradient, fit_baseline, flatten_named, reinforce_stats,
    BaselineSource, TensorReport,
};
use mixer::metrics::{bleu_stats, corpus_bleu, rouge2, sentence_bleu, RewardMetric, Smoothing, REWARD_EPSILON};
use mixer::model::{CellKind, ModelConfig, ModelParams};
use mixer::numkern::{derive_seed, seeded_rng};
use mixer::training::{mean_metric, train, train_epoch, EpochRegime, RegimeKind, TrainOptions, TrainingSchedule};
use rand::RngExt;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("REINFORCE unbiasedness", reinforce_unbiased),
        ("baseline variance reduction", baseline_variance),
        ("regime reductions", regime_reductions),
        ("beam-search oracle", beam_oracle),
        ("metric oracles", metric_oracles),
        ("MIXER vs XENT on reverse task", mixer_beats_xent),
        ("reward-metric alignment", reward_alignment),
        ("MIXER schedule trace", schedule_trace),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {:>2} {} {name}: {} ({secs:.1}s)",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for i in 0..20u64 {
        let cell = if i % 2 == 0 { CellKind::Elman } else { CellKind::Lstm };
        let (params, ex) = random_instance(cell, &mut seeded_rng(derive_seed(2024, &[i]))).unwrap();
        assert!(params.hidden() <= 8 && params.vocab() <= 10 && ex.steps() <= 5);
        let reports = check_xent(&params, &ex).unwrap();
        worst = reports.iter().map(|r| r.max_rel_error).fold(worst, f64::max);
        if !reports.iter().all(TensorReport::passed) {
            bad.push(i);
        }
    }
    let fast = start.elapsed() < Duration::from_secs(60);
    outcome(
        bad.is_empty() && fast,
        format!("20 instances, worst rel err {worst:.2e}, failing {bad:?}"),
    )
}

/// W = 3, T = 2 decoding problem with a fixed random reward per sequence.
fn tiny_mdp() -> (ModelParams, Vec<usize>, Vec<f64>) {
    let cfg = ModelConfig {
        cell: CellKind::Elman,
        vocab: 3,
        hidden: 2,
        window: 1,
        max_source: 2,
    };
    let params = ModelParams::random(cfg, 0.8, &mut seeded_rng(31)).unwrap();
    let mut rng = seeded_rng(32);
    let table: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
    (params, vec![0, 2], table)
}

fn table_reward(table: &[f64]) -> impl Fn(&[usize]) -> f64 + Sync + '_ {
    move |seq: &[usize]| table[seq[0] * 3 + seq[1]]
}

const DRAWS: usize = 100_000;

fn reinforce_unbiased() -> Outcome {
    let (params, src, table) = tiny_mdp();
    let reward = table_reward(&table);
    let exact = flatten_named(&exact_policy_gradient(&params, &src, 2, &reward).unwrap());
    let stats = reinforce_stats(&params, &src, 2, &reward, BaselineSource::Zero, DRAWS, 5).unwrap();
    let mut worst = 0.0f64;
    let mut outside = 0;
    for ((m, se), e) in stats.mean.iter().zip(&stats.std_error).zip(&exact) {
        // the estimator targets the gradient of the loss -E[r]
        let dev = (m + e).abs();
        if *se > 0.0 {
            worst = worst.max(dev / se);
        }
        if dev > 3.0 * se + 1e-9 {
            outside += 1;
        }
    }
    outcome(
        outside == 0,
        format!(
            "{} coordinates, {DRAWS} draws, worst |mean - exact| = {worst:.2} SE, {outside} beyond 3 SE",
            exact.len()
        ),
    )
}

fn baseline_variance() -> Outcome {
    let (params, src, table) = tiny_mdp();
    let reward = table_reward(&table);
    let reg = fit_baseline(&params, &src, 2, &reward, 2000, 32, 0.1, 6).unwrap();
    let zero = reinforce_stats(&params, &src, 2, &reward, BaselineSource::Zero, DRAWS, 7).unwrap();
    let fitted = reinforce_stats(&params, &src, 2, &reward, BaselineSource::Regressor(&reg), DRAWS, 7).unwrap();
    let (vz, vf) = (zero.total_variance(), fitted.total_variance());
    outcome(
        vf < vz,
        format!("summed variance {vz:.5} with zero baseline, {vf:.5} with fitted"),
    )
}

fn regime_reductions() -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;
    for cell in [CellKind::Elman, CellKind::Lstm] {
        let data = gen_synthetic(TaskKind::Reverse, 6, (2, 5), 70, 9).unwrap();
        let p0 = common::model(cell, 10, 5, 0.3, 4);
        let t = 6;
        let opts = TrainOptions {
            schedule: TrainingSchedule {
                t,
                lr: 0.3,
                batch: 16,
                ..TrainingSchedule::default()
            },
            reward: RewardMetric::Bleu,
            seed: 99,
        };
        let run = |regime: EpochRegime| {
            let mut p = p0.clone();
            for e in 0..3 {
                train_epoch(&mut p, &data, regime, &opts, e).unwrap();
            }
            p
        };
        let xent = run(EpochRegime::Xent);
        let reference = common::bits(&xent);
        for (name, regime) in [
            ("dad(p=1)", EpochRegime::Dad { p_truth: 1.0 }),
            ("e2e(mixed=0)", EpochRegime::E2e { k: 3, mixed: 0 }),
            ("mixer(s=T)", EpochRegime::Mixer { s: t }),
        ] {
            let p = run(regime);
            let same = common::bits(&p) == reference && p.baseline == xent.baseline;
            pass &= same && xent != p0;
            if !same {
                detail.push(format!("{cell} {name} differs"));
            }
        }
    }
    if detail.is_empty() {
        detail.push("DAD, E2E and MIXER reductions bitwise equal to XENT for both cells".into());
    }
    outcome(pass, detail.join("; "))
}

fn beam_oracle() -> Outcome {
    let mut rng = seeded_rng(55);
    let mut failures = Vec::new();
    for m in 0..50 {
        let w = rng.random_range(2..=4usize);
        let t = rng.random_range(1..=4usize);
        let cell = if m % 2 == 0 { CellKind::Elman } else { CellKind::Lstm };
        let cfg = ModelConfig {
            cell,
            vocab: w,
            hidden: 3,
            window: 3,
            max_source: 3,
        };
        let params = ModelParams::random(cfg, 1.5, &mut rng).unwrap();
        let src: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..w)).collect();
        let opts = DecodeOptions { max_len: t, eos: None };

        let mut best: Option<(f64, Vec<usize>)> = None;
        for seq in enumerate_sequences(w, t).unwrap() {
            let lp = sequence_logp(&params, &src, &seq).unwrap();
            if best.as_ref().is_none_or(|(b, _)| lp > *b) {
                best = Some((lp, seq));
            }
        }
        let (opt_lp, opt_words) = best.unwrap();
        let full = beam_generate_with(&params, &src, w.pow(t as u32), opts).unwrap();
        if full[0].words != opt_words || (full[0].logp - opt_lp).abs() > 1e-12 {
            failures.push(format!("model {m}: exhaustive beam missed optimum"));
        }
        let greedy = greedy_generate_with(&params, &src, opts).unwrap();
        if beam_generate_with(&params, &src, 1, opts).unwrap()[0] != greedy {
            failures.push(format!("model {m}: beam 1 differs from greedy"));
        }
        let scores: Vec<f64> = [1, 2, 4, 8]
            .iter()
            .map(|&k| beam_generate_with(&params, &src, k, opts).unwrap()[0].logp)
            .collect();
        if scores.windows(2).any(|p| p[1] < p[0]) {
            failures.push(format!("model {m}: best score decreases with k {scores:?}"));
        }
    }
    let detail = if failures.is_empty() {
        "50 models: exhaustive beam optimal, beam 1 == greedy, scores monotone in k".to_string()
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn metric_oracles() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let bleu = |c: &str, r: &str| sentence_bleu(&words(c), &[words(r)], Smoothing::None).unwrap();
    let r2 = |c: &str, r: &str| rouge2(&words(c), &words(r));

    let mut checks: Vec<(&str, bool)> = vec![
        ("bleu identical", close(bleu("a b c d e", "a b c d e"), 1.0)),
        // p = 4/5, 3/4, 2/3, 1/2, equal lengths
        ("bleu partial", close(bleu("a b c d e", "a b c d f"), 0.2f64.powf(0.25))),
        // all precisions 1, c = 4, r = 6
        ("bleu brevity", close(bleu("a b c d", "a b c d e f"), (-0.5f64).exp())),
        ("bleu zero overlap", bleu("w x y z", "a b c d") == 0.0),
        ("bleu missing 4-gram", bleu("a b c d e", "a b c x d e") == 0.0),
    ];

    // unigram counts clipped to the reference count of "the"
    let cand = words("the the the the the the the");
    let refr = words("the cat is on the mat");
    let st = bleu_stats(&cand, std::slice::from_ref(&refr)).unwrap();
    checks.push(("bleu clipped count", st.matched[0] == 2 && st.total[0] == 7));
    let floored = sentence_bleu(&cand, &[refr], Smoothing::Floor(REWARD_EPSILON)).unwrap();
    checks.push((
        "bleu clipped floor",
        close(floored, (2.0f64 / 7.0).powf(0.25) * REWARD_EPSILON.powf(0.75)),
    ));

    // pooled counts: matched 8,6,4,2 of 9,7,5,3 with c = 9, r = 13
    let corpus = corpus_bleu(&[
        (words("a b c d e"), vec![words("a b c d f")]),
        (words("a b c d"), vec![words("a b c d e f g h")]),
    ])
    .unwrap();
    let expect = (1.0f64 - 13.0 / 9.0).exp() * (8.0f64 / 9.0 * 6.0 / 7.0 * 4.0 / 5.0 * 2.0 / 3.0).powf(0.25);
    checks.push(("bleu corpus", close(corpus, expect)));

    checks.extend([
        ("rouge2 identical", close(r2("a b c d", "a b c d"), 1.0)),
        ("rouge2 partial", close(r2("a b x c d", "a b c d"), 2.0 / 3.0)),
        ("rouge2 clipped", close(r2("a b a b a b", "a b a b"), 1.0)),
        ("rouge2 under count", close(r2("a b", "a b a b"), 1.0 / 3.0)),
        ("rouge2 zero overlap", r2("b a", "a b") == 0.0),
        ("rouge2 short reference", r2("a", "a") == 0.0),
        ("rouge2 empty candidate", r2("", "a b c") == 0.0),
    ]);

    let bad: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(bad.is_empty(), format!("{} fixtures, failing {bad:?}", checks.len()))
}

const REVERSE_T: usize = 11;

struct ReverseRun {
    mixer_bleu: f64,
    mixer_rouge: f64,
    xent_bleu: f64,
}

/// MIXER and an XENT run with the same epoch budget on the reverse task.
fn reverse_task(seed: u64, reward: RewardMetric, with_xent: bool) -> ReverseRun {
    let train_d = gen_synthetic(TaskKind::Reverse, 20, (5, 10), 2000, 100 + seed).unwrap();
    let test_d = gen_synthetic(TaskKind::Reverse, 20, (5, 10), 200, 200 + seed).unwrap();
    let cfg = ModelConfig {
        cell: CellKind::Elman,
        vocab: 24,
        hidden: 32,
        window: 5,
        max_source: 10,
    };
    let p0 = ModelParams::random(cfg, 0.1, &mut seeded_rng(seed)).unwrap();
    let schedule = TrainingSchedule {
        n_xent: 20,
        n_xer: 5,
        delta: 2,
        t: REVERSE_T,
        lr: 0.5,
        lr_mixed: Some(0.1),
        lr_b: 0.1,
        ..TrainingSchedule::default()
    };
    let mut opts = TrainOptions {
        schedule,
        reward,
        seed: 7 + seed,
    };
    let mut mixer = p0.clone();
    let records = train(&mut mixer, &train_d, &[], RegimeKind::Mixer, &opts, |_| Ok(())).unwrap();
    let eval = |p: &ModelParams, m: RewardMetric| mean_metric(p, &test_d, m, REVERSE_T).unwrap();
    let mut run = ReverseRun {
        mixer_bleu: eval(&mixer, RewardMetric::Bleu),
        mixer_rouge: eval(&mixer, RewardMetric::Rouge2),
        xent_bleu: f64::NAN,
    };
    if with_xent {
        opts.schedule.epochs = records.len();
        let mut xent = p0;
        train(&mut xent, &train_d, &[], RegimeKind::Xent, &opts, |_| Ok(())).unwrap();
        run.xent_bleu = eval(&xent, RewardMetric::Bleu);
    }
    run
}

fn check_seeds(f: impl Fn(u64) -> (bool, String)) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let (ok, s) = f(seed);
        wins += ok as usize;
        parts.push(format!("seed {seed}: {s}"));
    }
    outcome(wins >= 2, format!("{wins}/3 seeds; {}", parts.join(", ")))
}

fn mixer_beats_xent() -> Outcome {
    check_seeds(|seed| {
        let r = reverse_task(seed, RewardMetric::Bleu, true);
        (
            r.mixer_bleu >= r.xent_bleu,
            format!("MIXER {:.4} vs XENT {:.4}", r.mixer_bleu, r.xent_bleu),
        )
    })
}

fn reward_alignment() -> Outcome {
    check_seeds(|seed| {
        let by_rouge = reverse_task(seed, RewardMetric::Rouge2, false).mixer_rouge;
        let by_bleu = reverse_task(seed, RewardMetric::Bleu, false).mixer_rouge;
        (
            by_rouge >= by_bleu,
            format!("ROUGE-2 {by_rouge:.4} (rouge2 reward) vs {by_bleu:.4} (bleu reward)"),
        )
    })
}

fn mixer_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mixer"))
}

fn run_ok(cmd: &mut Command) -> bool {
    cmd.output().map(|o| o.status.success()).unwrap_or(false)
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, body).unwrap();
    path
}

fn schedule_trace() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let made = run_ok(
        mixer_bin()
            .args(["gen-data", "--task", "copy", "--symbols", "6", "--min-len", "2"])
            .args(["--max-len", "14", "--n", "40", "--seed", "3", "--output"])
            .arg(d.join("train.tsv")),
    );
    let cfg = write_config(
        d,
        "train = train.tsv\ncheckpoint = m.ckpt\nlog = log.csv\nregime = mixer\nhidden = 4\nt = 15\ndelta = 2\nn_xent = 2\nn_xer = 1\n",
    );
    let trained = made && run_ok(mixer_bin().arg("train").arg(&cfg));
    if !trained {
        return outcome(false, "training run failed");
    }
    let mut reader = csv::Reader::from_path(d.join("log.csv")).unwrap();
    let s_col = reader.headers().unwrap().iter().position(|h| h == "s").unwrap();
    let mut trace: Vec<usize> = Vec::new();
    for rec in reader.records() {
        let s: usize = rec.unwrap()[s_col].parse().unwrap();
        if trace.last() != Some(&s) {
            trace.push(s);
        }
    }
    let expect: Vec<usize> = (0..8).map(|i| 15 - 2 * i).collect();
    outcome(trace == expect, format!("logged s values {trace:?}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data_ok = run_ok(
        mixer_bin()
            .args(["gen-data", "--task", "reverse", "--symbols", "8", "--min-len", "3"])
            .args(["--max-len", "6", "--n", "120", "--seed", "1", "--output"])
            .arg(d.join("train.tsv")),
    );
    if !data_ok {
        return outcome(false, "gen-data failed");
    }
    let mut same = true;
    let mut detail = Vec::new();
    for regime in ["xent", "mixer"] {
        let mut ckpts = Vec::new();
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = d.join(format!("{regime}{run}"));
            std::fs::create_dir(&out).unwrap();
            let cfg = write_config(
                &out,
                &format!(
                    "train = ../train.tsv\ncheckpoint = m.ckpt\nregime = {regime}\nhidden = 8\nt = 7\n\
                     epochs = 3\nn_xent = 2\nn_xer = 1\ndelta = 3\nseed = 12\n"
                ),
            );
            let ok = run_ok(mixer_bin().arg("train").arg(&cfg))
                && run_ok(
                    mixer_bin()
                        .arg("generate")
                        .arg("--checkpoint")
                        .arg(out.join("m.ckpt"))
                        .arg("--vocab")
                        .arg(out.join("m.vocab"))
                        .arg("--source")
                        .arg(d.join("train.tsv"))
                        .args(["--beam", "3", "--output"])
                        .arg(out.join("gen.txt")),
                );
            if !ok {
                return outcome(false, format!("{regime} run {run} failed"));
            }
            ckpts.push(std::fs::read(out.join("m.ckpt")).unwrap());
            outputs.push((
                std::fs::read(out.join("gen.txt")).unwrap(),
                std::fs::read(out.join("m.csv")).unwrap(),
            ));
        }
        let eq = ckpts[0] == ckpts[1] && outputs[0] == outputs[1];
        same &= eq;
        detail.push(format!("{regime}: {}", if eq { "identical" } else { "differs" }));
    }
    outcome(
        same,
        format!("checkpoints, logs and generations across reruns: {}", detail.join(", ")),
    )
}
