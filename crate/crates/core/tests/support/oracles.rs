//! Brute-force counterparts of the analytics routines, compared on seeded
//! random datasets. Each check returns the first disagreement it finds.

use std::collections::BTreeMap;

use gradepipe_core::analytics::{
    cross_model, histogram, stability, summarize_gaps, verdict_distribution, GapRecord,
    GradingVerdict, OcrVerdict, Percent, VerdictRecord,
};
use gradepipe_core::Score;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DATASETS: u64 = 1000;
const TOL: f64 = 1e-9;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Scores mostly on the half-point grid with occasional off-grid values.
fn random_score(rng: &mut ChaCha8Rng, max_tenths: u32) -> Score {
    if rng.random_bool(0.1) {
        Score::from_tenths(rng.random_range(0..=max_tenths))
    } else {
        Score::from_tenths(5 * rng.random_range(0..=max_tenths / 5))
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

pub fn summarize_gaps_matches(datasets: u64) -> Result<(), String> {
    for seed in 0..datasets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..300);
        let records: Vec<GapRecord> = (0..n)
            .map(|i| {
                let ai = random_score(&mut rng, 50);
                let ta = random_score(&mut rng, 50);
                GapRecord::new(&format!("c{i}"), "Q", "P1", ai, ta)
            })
            .collect();

        let gaps: Vec<f64> = records
            .iter()
            .map(|r| r.ai_score.points() - r.ta_score.points())
            .collect();
        let nf = n as f64;
        let mean = gaps.iter().sum::<f64>() / nf;
        let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / nf;
        let mae = gaps.iter().map(|g| g.abs()).sum::<f64>() / nf;
        // tenths are exact in the integers, so count agreement there
        let within = records
            .iter()
            .filter(|r| (r.ai_score.tenths() as i64 - r.ta_score.tenths() as i64).abs() <= 10)
            .count();

        let s = summarize_gaps(&records).map_err(|e| e.to_string())?;
        ensure!(s.n == n, "seed {seed}: n {} vs {n}", s.n);
        ensure!(
            close(s.mean_gap, mean),
            "seed {seed}: mean {} vs {mean}",
            s.mean_gap
        );
        ensure!(
            close(s.std_gap, var.sqrt()),
            "seed {seed}: std {} vs {}",
            s.std_gap,
            var.sqrt()
        );
        ensure!(close(s.mae, mae), "seed {seed}: mae {} vs {mae}", s.mae);
        let pct = 100.0 * within as f64 / nf;
        ensure!(
            close(s.within1_pct, pct),
            "seed {seed}: within {} vs {pct}",
            s.within1_pct
        );
    }
    Ok(())
}

fn random_runs(rng: &mut ChaCha8Rng, questions: usize, k: usize) -> BTreeMap<String, Vec<Score>> {
    (0..questions)
        .map(|q| {
            let base = random_score(rng, 40);
            let runs = (0..k)
                .map(|_| {
                    // mostly agreeing runs so σ = 0 is common
                    if rng.random_bool(0.6) {
                        base
                    } else {
                        random_score(rng, 40)
                    }
                })
                .collect();
            (format!("item{q:03}"), runs)
        })
        .collect()
}

fn mean_points(runs: &[Score]) -> f64 {
    runs.iter().map(|s| s.points()).sum::<f64>() / runs.len() as f64
}

pub fn stability_matches(datasets: u64) -> Result<(), String> {
    for seed in 0..datasets {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let k = rng.random_range(2..6);
        let questions = rng.random_range(1..120);
        let runs = random_runs(&mut rng, questions, k);

        let mut sigma_sum = 0.0;
        let mut zero = 0;
        for scores in runs.values() {
            let m = mean_points(scores);
            let var = scores.iter().map(|s| (s.points() - m).powi(2)).sum::<f64>() / k as f64;
            sigma_sum += var.sqrt();
            if scores.iter().all(|s| s == &scores[0]) {
                zero += 1;
            }
        }
        let st = stability(&runs, "m").map_err(|e| e.to_string())?;
        ensure!(
            (st.n_questions, st.runs_per_question) == (questions, k),
            "seed {seed}: shape"
        );
        let expected = sigma_sum / questions as f64;
        ensure!(
            close(st.mean_sigma, expected),
            "seed {seed}: σ {} vs {expected}",
            st.mean_sigma
        );
        let p = zero as f64 / questions as f64;
        ensure!(
            st.prob_sigma_zero == p,
            "seed {seed}: P(σ=0) {} vs {p}",
            st.prob_sigma_zero
        );
    }
    Ok(())
}

pub fn cross_model_matches(datasets: u64) -> Result<(), String> {
    for seed in 0..datasets {
        let mut rng = ChaCha8Rng::seed_from_u64(20_000 + seed);
        let questions = rng.random_range(1..120);
        let ka = rng.random_range(1..6);
        let kb = rng.random_range(1..6);
        let a = random_runs(&mut rng, questions, ka);
        let mut b = random_runs(&mut rng, questions, kb);
        // force some identical means across models
        for (key, runs) in &a {
            if rng.random_bool(0.3) && ka == kb {
                b.insert(key.clone(), runs.iter().rev().copied().collect());
            }
        }

        let deltas: Vec<f64> = a
            .keys()
            .map(|k| mean_points(&a[k]) - mean_points(&b[k]))
            .collect();
        let n = deltas.len() as f64;
        // nonzero deltas are at least 0.1 / (ka·kb) ≥ 0.004 pt
        let zero = deltas.iter().filter(|d| d.abs() < 1e-6).count();
        let d = cross_model(&a, &b).map_err(|e| e.to_string())?;
        ensure!(d.n_questions == questions, "seed {seed}: n");
        let mean = deltas.iter().sum::<f64>() / n;
        ensure!(
            close(d.mean_delta, mean),
            "seed {seed}: Δ {} vs {mean}",
            d.mean_delta
        );
        let mean_abs = deltas.iter().map(|x| x.abs()).sum::<f64>() / n;
        ensure!(
            close(d.mean_abs_delta, mean_abs),
            "seed {seed}: |Δ| {} vs {mean_abs}",
            d.mean_abs_delta
        );
        let p = zero as f64 / n;
        ensure!(
            d.prob_delta_zero == p,
            "seed {seed}: P(Δ=0) {} vs {p}",
            d.prob_delta_zero
        );
    }
    Ok(())
}

/// Nearest hundredth of 100·count/total by search, ties upward.
fn oracle_percent(count: usize, total: usize) -> Percent {
    let target = 10_000 * count as i64;
    let n = total as i64;
    let guess = target / n;
    let best = (guess - 2..=guess + 2)
        .filter(|h| *h >= 0)
        .min_by_key(|h| ((h * n - target).abs(), -h))
        .expect("non-empty range");
    Percent(best as u32)
}

pub fn verdict_distribution_matches(datasets: u64) -> Result<(), String> {
    for seed in 0..datasets {
        let mut rng = ChaCha8Rng::seed_from_u64(30_000 + seed);
        let n = rng.random_range(1..400);
        let verdicts: Vec<VerdictRecord> = (0..n)
            .map(|i| VerdictRecord {
                test_code: format!("c{i}"),
                question_id: "P1".into(),
                ocr_verdict: if rng.random_bool(0.85) {
                    OcrVerdict::Acceptable
                } else {
                    OcrVerdict::Problematic
                },
                grading_verdict: match rng.random_range(0..10) {
                    0..=6 => GradingVerdict::Correct,
                    7 => GradingVerdict::Acceptable,
                    _ => GradingVerdict::Incorrect,
                },
                reviewer_score: Score::ZERO,
            })
            .collect();
        let count = |f: &dyn Fn(&VerdictRecord) -> bool| verdicts.iter().filter(|v| f(v)).count();
        let expected = [
            count(&|v| v.ocr_verdict == OcrVerdict::Acceptable),
            count(&|v| v.ocr_verdict == OcrVerdict::Problematic),
            count(&|v| v.grading_verdict == GradingVerdict::Correct),
            count(&|v| v.grading_verdict == GradingVerdict::Acceptable),
            count(&|v| v.grading_verdict == GradingVerdict::Incorrect),
        ]
        .map(|c| oracle_percent(c, n));
        let d = verdict_distribution(&verdicts).map_err(|e| e.to_string())?;
        let got = [
            d.ocr.acceptable,
            d.ocr.problematic,
            d.grading.correct,
            d.grading.acceptable,
            d.grading.incorrect,
        ];
        ensure!(d.n == n, "seed {seed}: n");
        ensure!(got == expected, "seed {seed}: {got:?} vs {expected:?}");
    }
    Ok(())
}

pub fn histogram_matches(datasets: u64) -> Result<(), String> {
    for seed in 0..datasets {
        let mut rng = ChaCha8Rng::seed_from_u64(40_000 + seed);
        let width: i64 = rng.random_range(1..16);
        let n = rng.random_range(1..200);
        let values: Vec<i64> = (0..n).map(|_| rng.random_range(-50..=50)).collect();

        // a value belongs to centre c when c − ⌊w/2⌋ ≤ v < c − ⌊w/2⌋ + w
        let owner = |v: i64| {
            (-60 / width - 2..=60 / width + 2)
                .map(|i| i * width)
                .find(|c| c - width / 2 <= v && v < c - width / 2 + width)
                .expect("some bin owns every value")
        };
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for &v in &values {
            *counts.entry(owner(v)).or_default() += 1;
        }
        let lo = *counts.keys().next().expect("non-empty");
        let hi = *counts.keys().next_back().expect("non-empty");
        let expected: Vec<(i64, usize)> = (lo / width..=hi / width)
            .map(|i| (i * width, counts.get(&(i * width)).copied().unwrap_or(0)))
            .collect();

        let bins = histogram(&values, width).map_err(|e| e.to_string())?;
        let got: Vec<(i64, usize)> = bins.iter().map(|b| (b.center_tenths, b.count)).collect();
        ensure!(got == expected, "seed {seed}, width {width}: bins differ");
    }
    Ok(())
}
