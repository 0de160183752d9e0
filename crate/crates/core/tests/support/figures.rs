//! Constructed datasets with known summary statistics. Each builder lays
//! out a fixed count of records per gap or spread pattern; the comments
//! give the arithmetic the expected values follow from.

use std::collections::BTreeMap;

use gradepipe_core::analytics::{GapRecord, GradingVerdict, OcrVerdict, VerdictRecord};
use gradepipe_core::Score;

fn t(tenths: u32) -> Score {
    Score::from_tenths(tenths)
}

/// 3,950 linked records. Gap counts in tenths:
/// −30×190, +30×90, −20×400, +20×80, −10×892, +10×252, −12×1, +12×1, 0×2044.
/// Σg = −15,800 → mean −4 tenths; Σg² = 558,688 → variance 141.44 − 16 =
/// 125.44 → σ = 11.2 tenths.
pub fn global_gaps() -> Vec<GapRecord> {
    const COUNTS: [(i64, usize); 9] = [
        (-30, 190),
        (30, 90),
        (-20, 400),
        (20, 80),
        (-10, 892),
        (10, 252),
        (-12, 1),
        (12, 1),
        (0, 2044),
    ];
    let mut out = Vec::new();
    for (gap, count) in COUNTS {
        for _ in 0..count {
            let i = out.len();
            // TA 3.0 for negative gaps, 0.0 for positive, 2.0 for agreement
            let (ai, ta) = match gap {
                g if g < 0 => (30 + g, 30),
                g if g > 0 => (g, 0),
                _ => (20, 20),
            };
            out.push(GapRecord::new(
                &format!("S{i:04}"),
                &format!("Q{}", 1 + i % 9),
                &format!("P{}", 1 + i % 3),
                t(ai as u32),
                t(ta as u32),
            ));
        }
    }
    out
}

fn items(groups: &[(usize, [u32; 3])]) -> BTreeMap<String, Vec<Score>> {
    let mut out = BTreeMap::new();
    for &(count, runs) in groups {
        for _ in 0..count {
            let key = format!("item{:03}", out.len());
            out.insert(key, runs.iter().map(|&r| t(r)).collect());
        }
    }
    out
}

/// Three runs on each of 171 items, first model.
/// 132 unanimous, 18 of the form (a,a,a+0.5), 21 of the form (a,a,a+1).
/// σ(a,a,a+d) = d·√2/3, so mean σ = (18·0.5 + 21·1)·√2/3/171 ≈ 0.0827
/// and P(σ = 0) = 132/171 ≈ 0.7719.
pub fn stability_first_model() -> BTreeMap<String, Vec<Score>> {
    items(&[(132, [20, 20, 20]), (18, [20, 20, 25]), (21, [10, 20, 10])])
}

/// Three runs on each of 171 items, second model.
/// 124 unanimous, 5 with three distinct scores one point apart
/// (σ = √(2/3)), 19 of the form (a,a,a+2) and 23 of the form (a,a,a+3).
/// Mean σ ≈ 0.3188, P(σ = 0) = 124/171 ≈ 0.7251.
pub fn stability_second_model() -> BTreeMap<String, Vec<Score>> {
    items(&[
        (124, [30, 30, 30]),
        (5, [10, 20, 30]),
        (19, [0, 20, 0]),
        (23, [30, 0, 0]),
    ])
}

/// Paired three-run samples on 250 items. Per item
/// Δ = (Σa − Σb)/30 in points with sums in tenths:
/// 116 items with Δ = 0; +10 ×29, +30 ×40, +15 ×1; −10 ×42, −20 ×21, −15 ×1.
/// Mean Δ = 21.6667/250 ≈ 0.0867, mean |Δ| = 78.6667/250 ≈ 0.3147,
/// P(Δ = 0) = 116/250 = 0.464.
pub fn cross_model_pair() -> (BTreeMap<String, Vec<Score>>, BTreeMap<String, Vec<Score>>) {
    const BASE: [u32; 3] = [20, 20, 20];
    let groups: [(usize, [u32; 3], [u32; 3]); 8] = [
        (100, BASE, BASE),
        // equal means from different runs
        (16, [20, 25, 30], [25, 25, 25]),
        (29, [20, 20, 30], BASE),
        (40, [30, 30, 30], BASE),
        (1, [20, 25, 30], BASE),
        (42, BASE, [20, 20, 30]),
        (21, BASE, [20, 30, 30]),
        (1, BASE, [20, 25, 30]),
    ];
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    for (count, ra, rb) in groups {
        for _ in 0..count {
            let key = format!("item{:03}", a.len());
            a.insert(key.clone(), ra.iter().map(|&r| t(r)).collect());
            b.insert(key, rb.iter().map(|&r| t(r)).collect());
        }
    }
    (a, b)
}

/// 2,419 reviewer verdicts. Grading: 1,930 Correct, 231 Acceptable,
/// 258 Incorrect. OCR: 2,120 Acceptable, 299 Problematic. The two
/// dimensions are interleaved so they do not line up.
pub fn reviewer_verdicts() -> Vec<VerdictRecord> {
    let grading = std::iter::repeat_n(GradingVerdict::Correct, 1930)
        .chain(std::iter::repeat_n(GradingVerdict::Acceptable, 231))
        .chain(std::iter::repeat_n(GradingVerdict::Incorrect, 258));
    grading
        .enumerate()
        .map(|(i, g)| VerdictRecord {
            test_code: format!("S{i:04}"),
            question_id: format!("P{}", 1 + i % 3),
            // i ↦ 7i mod 2419 is a bijection, so exactly 299 records land below 299
            ocr_verdict: if (i * 7) % 2419 < 299 {
                OcrVerdict::Problematic
            } else {
                OcrVerdict::Acceptable
            },
            grading_verdict: g,
            reviewer_score: t(20),
        })
        .collect()
}
