//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the summary lines are
//! always printed, and exits nonzero if any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use rand::Rng;
use serde_json::Value;
use statrs::function::gamma::ln_gamma as oracle_ln_gamma;

use tfbs_moe::attribution::{self, Method};
use tfbs_moe::expert::{ExpertHyperparams, ExpertModel};
use tfbs_moe::model::SequenceModel;
use tfbs_moe::moe::{mix, MoEModel};
use tfbs_moe::nn::finite_difference_check;
use tfbs_moe::seqdata::{
    circular_shift_rows, encode_sequence, generate_synthetic_dataset, seeded_rng, LabeledDataset,
    OneHotSequence, SyntheticSpec, ALPHABET,
};
use tfbs_moe::stats;
use tfbs_moe::trainer::{self, MoESearchSpace, SearchSpace, TrainConfig};

const FD_EPS: f64 = 1e-4;
const FD_TOL: f64 = 1e-5;
const FD_INSTANCES: usize = 100;
/// Instances closer than this to a ReLU / max-pool switch are resampled.
const KINK_MARGIN: f64 = 1e-2;

const MOTIFS: [&str; 3] = ["TTCAGATAAGCA", "ATGACTCATCGA", "GCCCGCGGGCTA"];
const SEQ_LEN: usize = 100;
const N_TRAIN: usize = 2000;
const N_VAL: usize = 400;
const N_TEST: usize = 400;
const MUTATION_RATE: f64 = 0.1;
const EXPERT_SEARCH_BUDGET: usize = 4;
const MOE_SEARCH_BUDGET: usize = 4;
const BOOTSTRAP_SEED: u64 = 2024;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// ---------------------------------------------------------------------------
// Criterion 1

fn random_hp(rng: &mut impl Rng) -> ExpertHyperparams {
    ExpertHyperparams {
        num_filters: rng.random_range(1..=8),
        motif_width: rng.random_range(1..=8),
        embed_dim: rng.random_range(1..=8),
        hidden_dim: rng.random_range(1..=8),
        ..ExpertHyperparams::default()
    }
}

fn random_input(rng: &mut impl Rng, len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, 4), |_| rng.random_range(0.0..1.0))
}

fn set_params(slots: Vec<&mut [f64]>, flat: &[f64]) {
    let mut off = 0;
    for s in slots {
        let n = s.len();
        s.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

fn expert_fd_error(model: &ExpertModel, x: &Array2<f64>) -> f64 {
    let shape = x.raw_dim();
    let trace = model.trace(x.view()).unwrap();
    let g = model.backward(x.view(), &trace, None, None, 1.0, true);
    let gx = g.input.unwrap();
    let input_err = finite_difference_check(
        |v| {
            model
                .logit(ndarray::aview1(v).into_shape_with_order(shape).unwrap())
                .unwrap()
        },
        &x.iter().copied().collect::<Vec<_>>(),
        &gx.iter().copied().collect::<Vec<_>>(),
        FD_EPS,
    );
    let base: Vec<f64> = model.parameters().concat();
    let mut probe = model.clone();
    let param_err = finite_difference_check(
        |p| {
            set_params(probe.parameters_mut(), p);
            probe.logit(x.view()).unwrap()
        },
        &base,
        &g.params.concat(),
        FD_EPS,
    );
    input_err.max(param_err)
}

fn moe_fd_error(model: &MoEModel, x: &Array2<f64>, label: u8) -> f64 {
    let shape = x.raw_dim();
    let (_, gx) = model.logit_input_gradient(x.view()).unwrap();
    let input_err = finite_difference_check(
        |v| {
            model
                .logit(ndarray::aview1(v).into_shape_with_order(shape).unwrap())
                .unwrap()
        },
        &x.iter().copied().collect::<Vec<_>>(),
        &gx.iter().copied().collect::<Vec<_>>(),
        FD_EPS,
    );
    // the head gradient is checked through the loss of one example
    let batch = vec![OneHotSequence::clone(
        &encode_sequence(&"A".repeat(shape[0])).unwrap(),
    )];
    let mut feats = model.extract_features(&batch).unwrap();
    let real = model
        .experts
        .iter()
        .map(|e| {
            let t = e.trace(x.view()).unwrap();
            (t.embedding, t.hidden)
        })
        .collect::<Vec<_>>();
    let e_dim = model.embed_dim();
    for (i, (e, h)) in real.iter().enumerate() {
        feats
            .concat
            .row_mut(0)
            .slice_mut(ndarray::s![i * e_dim..(i + 1) * e_dim])
            .assign(e);
        feats.hidden[i].row_mut(0).assign(h);
    }
    let (_, grads) = model.head_loss_and_gradient(&feats, &[label]).unwrap();
    let base: Vec<f64> = model.trainable_parameters().concat();
    let mut probe = model.clone();
    let param_err = finite_difference_check(
        |p| {
            set_params(probe.trainable_parameters_mut(), p);
            probe.head_loss_and_gradient(&feats, &[label]).unwrap().0
        },
        &base,
        &grads.concat(),
        FD_EPS,
    );
    input_err.max(param_err)
}

fn criterion_1() -> Verdict {
    let mut rng = seeded_rng(101);
    let (mut experts, mut moes, mut skipped) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    let mut attempts = 0;
    while experts < FD_INSTANCES && attempts < 20 * FD_INSTANCES {
        attempts += 1;
        let hp = random_hp(&mut rng);
        let len = rng.random_range(hp.motif_width.max(2)..=20);
        let model = ExpertModel::init("fd", &hp, rng.random()).unwrap();
        let x = random_input(&mut rng, len);
        if model.trace(x.view()).unwrap().nonsmooth_margin() < KINK_MARGIN {
            skipped += 1;
            continue;
        }
        worst = worst.max(expert_fd_error(&model, &x));
        experts += 1;
    }
    attempts = 0;
    while moes < FD_INSTANCES && attempts < 20 * FD_INSTANCES {
        attempts += 1;
        let mut hp = random_hp(&mut rng);
        let n_experts = rng.random_range(2..=3);
        let len = rng.random_range(8..=20);
        let parts: Vec<ExpertModel> = (0..n_experts)
            .map(|i| {
                hp.num_filters = rng.random_range(1..=8);
                hp.motif_width = rng.random_range(1..=8);
                ExpertModel::init(&format!("e{i}"), &hp, rng.random())
                    .unwrap()
                    .strip_head()
                    .unwrap()
            })
            .collect();
        let x = random_input(&mut rng, len);
        let margin = parts
            .iter()
            .map(|e| e.trace(x.view()).unwrap().nonsmooth_margin())
            .fold(f64::INFINITY, f64::min);
        if margin < KINK_MARGIN {
            skipped += 1;
            continue;
        }
        let model = MoEModel::init("fd", parts, rng.random()).unwrap();
        worst = worst.max(moe_fd_error(&model, &x, rng.random_range(0..2)));
        moes += 1;
    }
    verdict(
        experts >= FD_INSTANCES && moes >= FD_INSTANCES && worst < FD_TOL,
        format!(
            "{experts} experts + {moes} mixtures, max rel err {worst:.2e} (tol {FD_TOL:.0e}), {skipped} near-kink draws resampled"
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 2

fn random_text(rng: &mut impl Rng, len: usize) -> String {
    (0..len).map(|_| ALPHABET[rng.random_range(0..4)]).collect()
}

fn criterion_2() -> Verdict {
    let mut rng = seeded_rng(202);
    let mut failures = Vec::new();
    let trials = 50;
    for t in 0..trials {
        let hp = random_hp(&mut rng);
        let len = rng.random_range(hp.motif_width.max(5)..=30);
        let model = ExpertModel::init("ss", &hp, rng.random()).unwrap();
        let seq = encode_sequence(&random_text(&mut rng, len)).unwrap();

        let vanilla = attribution::vanilla_gradient(&model, &seq).unwrap();
        let zero = attribution::shift_smooth(&model, &seq, 0, 1).unwrap();
        let bits = |a: &Array2<f64>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&vanilla.channel_scores) != bits(&zero.channel_scores) {
            failures.push(format!("trial {t}: N=0 differs from vanilla"));
        }

        let mut sum: Option<Array2<f64>> = None;
        for n in -2i64..=2 {
            let shifted = circular_shift_rows(seq.view(), n);
            let (_, g) = model.logit_input_gradient(shifted.view()).unwrap();
            let mut back = Array2::zeros(g.raw_dim());
            for j in 0..len {
                let src = (j as i64 + n).rem_euclid(len as i64) as usize;
                back.row_mut(j).assign(&g.row(src));
            }
            sum = Some(match sum {
                None => back,
                Some(s) => s + &back,
            });
        }
        let hand = sum.unwrap() / 5.0;
        let two = attribution::shift_smooth(&model, &seq, 2, 1).unwrap();
        if bits(&hand) != bits(&two.channel_scores) {
            failures.push(format!("trial {t}: N=2 differs from hand composition"));
        }

        for n in [
            -(len as i64) - 3,
            -2,
            -1,
            0,
            1,
            3,
            len as i64,
            2 * len as i64 + 1,
        ] {
            let round = circular_shift_rows(circular_shift_rows(seq.view(), n).view(), -n);
            if round != seq.view() {
                failures.push(format!("trial {t}: shift {n} round trip inexact"));
            }
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{trials} random experts: N=0 bit-identical, N=2 exact, shift round trips exact"
            )
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------
// Criterion 3 (shared trained models)

struct Trained {
    sets: Vec<(LabeledDataset, LabeledDataset, LabeledDataset)>,
    experts: Vec<ExpertModel>,
    moe: MoEModel,
    union_test: LabeledDataset,
    frozen_bits_equal: bool,
    elapsed: Duration,
}

fn corpus(motif: &str, n: usize, seed: u64) -> LabeledDataset {
    generate_synthetic_dataset(
        &SyntheticSpec {
            motif: motif.into(),
            include_reverse: true,
            length: SEQ_LEN,
            n_positive: n / 2,
            n_negative: n - n / 2,
            mutation_rate: MUTATION_RATE,
        },
        seed,
    )
    .unwrap()
}

fn param_bits(e: &ExpertModel) -> Vec<u64> {
    e.parameters()
        .concat()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

fn train_all() -> Trained {
    let start = Instant::now();
    let sets: Vec<_> = MOTIFS
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let base = 100 * i as u64;
            (
                corpus(m, N_TRAIN, base + 1),
                corpus(m, N_VAL, base + 2),
                corpus(m, N_TEST, base + 3),
            )
        })
        .collect();
    let space = SearchSpace {
        budget: EXPERT_SEARCH_BUDGET,
        ..SearchSpace::default()
    };
    let experts: Vec<ExpertModel> = sets
        .iter()
        .enumerate()
        .map(|(i, (train, val, _))| {
            let cfg = TrainConfig::expert_defaults(1000 + 10 * i as u64);
            let name = format!("expert_{i}");
            trainer::hyperparameter_search(
                &space,
                &ExpertHyperparams::default(),
                train,
                val,
                &cfg,
                &name,
                1,
            )
            .unwrap()
            .model
        })
        .collect();

    let stripped: Vec<ExpertModel> = experts.iter().map(|e| e.strip_head().unwrap()).collect();
    let before: Vec<Vec<u64>> = stripped.iter().map(param_bits).collect();
    let trains: Vec<&LabeledDataset> = sets.iter().map(|s| &s.0).collect();
    let vals: Vec<&LabeledDataset> = sets.iter().map(|s| &s.1).collect();
    let tests: Vec<&LabeledDataset> = sets.iter().map(|s| &s.2).collect();
    let union_train = LabeledDataset::concat(&trains).unwrap();
    let union_val = LabeledDataset::concat(&vals).unwrap();
    let union_test = LabeledDataset::concat(&tests).unwrap();
    let moe_space = MoESearchSpace {
        budget: MOE_SEARCH_BUDGET,
        ..MoESearchSpace::default()
    };
    let moe = trainer::moe_search(
        &moe_space,
        &stripped,
        &union_train,
        &union_val,
        &TrainConfig::moe_defaults(3000),
        "moe",
        1,
    )
    .unwrap()
    .model;
    let frozen_bits_equal = moe.experts.iter().map(param_bits).collect::<Vec<_>>() == before;
    Trained {
        sets,
        experts,
        moe,
        union_test,
        frozen_bits_equal,
        elapsed: start.elapsed(),
    }
}

fn test_auc(model: &dyn SequenceModel, data: &LabeledDataset) -> f64 {
    stats::auc(&model.score_all(data.sequences()).unwrap(), data.labels()).unwrap()
}

fn criterion_3(t: &Trained) -> Verdict {
    let k = MOTIFS.len();
    let mut table = vec![vec![0.0; k]; k];
    for (i, e) in t.experts.iter().enumerate() {
        for (j, s) in t.sets.iter().enumerate() {
            table[i][j] = test_auc(e, &s.2);
        }
    }
    let moe: Vec<f64> = t.sets.iter().map(|s| test_auc(&t.moe, &s.2)).collect();
    let mut problems = Vec::new();
    for i in 0..k {
        if table[i][i] < 0.95 {
            problems.push(format!(
                "expert {i} own-motif AUC {:.4} < 0.95",
                table[i][i]
            ));
        }
        for j in (0..k).filter(|&j| j != i) {
            if table[i][j] >= table[i][i] {
                problems.push(format!("expert {i} not lower on motif {j}"));
            }
            if moe[j] <= table[i][j] {
                problems.push(format!(
                    "MoE {:.4} <= expert {i} {:.4} on motif {j}",
                    moe[j], table[i][j]
                ));
            }
        }
        if moe[i] < 0.90 {
            problems.push(format!("MoE AUC {:.4} < 0.90 on motif {i}", moe[i]));
        }
    }
    let limit = Duration::from_secs(600);
    if t.elapsed >= limit {
        problems.push(format!(
            "training took {:.0}s >= 600s",
            t.elapsed.as_secs_f64()
        ));
    }
    let rows: Vec<String> = table
        .iter()
        .enumerate()
        .map(|(i, r)| {
            format!(
                "e{i}=[{}]",
                r.iter()
                    .map(|v| format!("{v:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            )
        })
        .collect();
    let detail = format!(
        "{} moe=[{}] train {:.0}s",
        rows.join(" "),
        moe.iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(" "),
        t.elapsed.as_secs_f64()
    );
    if problems.is_empty() {
        verdict(true, detail)
    } else {
        verdict(false, format!("{detail}; {}", problems.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// Criterion 4

fn f_density(x: f64, d1: f64, d2: f64) -> f64 {
    let ln_b =
        oracle_ln_gamma(d1 / 2.0) + oracle_ln_gamma(d2 / 2.0) - oracle_ln_gamma((d1 + d2) / 2.0);
    ((d1 / 2.0) * (d1 / d2).ln() + (d1 / 2.0 - 1.0) * x.ln()
        - ((d1 + d2) / 2.0) * (1.0 + d1 * x / d2).ln()
        - ln_b)
        .exp()
}

/// Upper-tail probability by Simpson's rule on `t = 1 / (1 + x)`, which
/// maps `[f, inf)` onto `(0, 1 / (1 + f)]`.
fn quadrature_sf(f: f64, d1: f64, d2: f64) -> f64 {
    let n = 400_000;
    let b = 1.0 / (1.0 + f);
    let h = b / n as f64;
    let g = |t: f64| {
        if t <= 0.0 {
            return 0.0;
        }
        let x = 1.0 / t - 1.0;
        f_density(x, d1, d2) / (t * t)
    };
    let mut sum = g(0.0) + g(b);
    for i in 1..n {
        sum += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i as f64 * h);
    }
    sum * h / 3.0
}

fn criterion_4(t: &Trained) -> Verdict {
    let mut models: Vec<&dyn SequenceModel> =
        t.experts.iter().map(|e| e as &dyn SequenceModel).collect();
    models.push(&t.moe);
    let boot = stats::bootstrap_auc(&models, &t.union_test, 30, BOOTSTRAP_SEED, 1).unwrap();
    let groups: Vec<Vec<f64>> = boot.iter().map(|b| b.aucs.clone()).collect();
    let anova = stats::one_way_anova(&groups).unwrap();
    let counts_ok = boot.iter().all(|b| b.aucs.len() == 30);

    let fixture = stats::one_way_anova(&[vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0]]).unwrap();
    let f_ok = (fixture.f - 1.5).abs() <= 1e-12;
    let mut worst_p: f64 = 0.0;
    for (f, d1, d2) in [(1.5, 1u64, 4u64), (0.8, 3, 116), (2.9, 3, 116), (6.0, 2, 9)] {
        let ours = stats::f_sf(f, d1, d2);
        worst_p = worst_p.max((ours - quadrature_sf(f, d1 as f64, d2 as f64)).abs());
    }
    worst_p = worst_p.max((fixture.p_value - quadrature_sf(1.5, 1.0, 4.0)).abs());
    let t975 = stats::t_quantile(0.975, 29);
    let t_ok = (t975 - 2.045).abs() <= 1e-3;
    let means: Vec<String> = boot
        .iter()
        .map(|b| format!("{}={:.4}", b.model, b.mean))
        .collect();
    verdict(
        anova.p_value < 0.05 && counts_ok && f_ok && worst_p <= 1e-6 && t_ok,
        format!(
            "bootstrap means [{}], ANOVA F={:.2} p={:.3e}; fixture F={} ; max |p - quadrature| {worst_p:.1e}; t(0.975,29)={t975:.4}",
            means.join(" "),
            anova.f,
            anova.p_value,
            fixture.f
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 5

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, _) in labels.iter().enumerate().filter(|(_, &y)| y == 1) {
        for (j, _) in labels.iter().enumerate().filter(|(_, &y)| y == 0) {
            pairs += 1.0;
            credit += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    credit / pairs
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let mut rng = seeded_rng(505);
    let mut mismatches = 0;
    for k in 0..1000 {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        // alternate between tie-heavy and continuous scores
        let scores: Vec<f64> = if k % 2 == 0 {
            (0..n)
                .map(|_| rng.random_range(0..6) as f64 * 0.1)
                .collect()
        } else {
            (0..n).map(|_| rng.random::<f64>()).collect()
        };
        if stats::auc(&scores, &labels).unwrap() != pair_count_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 5.0,
        format!("1000 instances, {mismatches} inexact, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------------------
// Criterion 6

fn criterion_6(t: &Trained) -> Verdict {
    let out = t.moe.forward(t.union_test.sequences()).unwrap();
    let worst_sum = out
        .weights
        .rows()
        .into_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let positive = out.weights.iter().all(|&a| a > 0.0);

    let feats = t
        .moe
        .extract_features(&t.union_test.sequences()[..64])
        .unwrap();
    let hidden: Vec<_> = feats.hidden.iter().map(|h| h.view()).collect();
    let mut selects = true;
    for k in 0..hidden.len() {
        let mut alpha = Array2::zeros((64, hidden.len()));
        alpha.column_mut(k).fill(1.0);
        let m = mix(alpha.view(), &hidden).unwrap();
        selects &= m == feats.hidden[k];
    }
    // mixed one-hot rows pick per-row experts
    let mut rng = seeded_rng(606);
    let picks: Vec<usize> = (0..64).map(|_| rng.random_range(0..hidden.len())).collect();
    let mut alpha = Array2::zeros((64, hidden.len()));
    for (r, &k) in picks.iter().enumerate() {
        alpha[[r, k]] = 1.0;
    }
    let m = mix(alpha.view(), &hidden).unwrap();
    for (r, &k) in picks.iter().enumerate() {
        selects &= m.row(r) == feats.hidden[k].row(r);
    }
    let sums_ok = worst_sum <= 1e-12 && positive;
    verdict(
        sums_ok && t.frozen_bits_equal && selects,
        format!(
            "max |sum(alpha)-1| = {worst_sum:.1e} over {} rows; expert params bit-identical: {}; one-hot alpha selects h_k: {selects}",
            out.weights.len_of(Axis(0)),
            t.frozen_bits_equal
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 7

fn criterion_7(t: &Trained) -> Verdict {
    let gata = &t.experts[0];
    let test = &t.sets[0].2;
    let positives: Vec<&OneHotSequence> = test
        .sequences()
        .iter()
        .zip(test.labels())
        .filter(|(_, &y)| y == 1)
        .map(|(s, _)| s)
        .take(50)
        .collect();
    let mean_diff = |method: Method, radius: usize| {
        let total: f64 = positives
            .iter()
            .map(|s| {
                [1i64, -1]
                    .iter()
                    .map(|&shift| {
                        attribution::shift_track_difference(gata, s, method, radius, shift).unwrap()
                    })
                    .sum::<f64>()
                    / 2.0
            })
            .sum();
        total / positives.len() as f64
    };
    let vanilla = mean_diff(Method::Vanilla, 0);
    let smooth = mean_diff(Method::ShiftSmooth, 2);
    verdict(
        positives.len() == 50 && smooth <= vanilla,
        format!(
            "{} positives, mean re-aligned |diff| vanilla {vanilla:.4e}, shiftsmooth(N=2) {smooth:.4e}",
            positives.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 8

fn manifest_outputs(manifest: &Path) -> Vec<PathBuf> {
    let m: Value = serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
    m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| PathBuf::from(o["path"].as_str().unwrap()))
        .collect()
}

fn criterion_8() -> Verdict {
    use common::{code, ok, p, stderr, tfbs};
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let f = |n: &str| d.join(n);
    let seq = "ACGTGATAAGCCATGCATTACGGATCCATGCA";

    let mut manifests = Vec::new();
    for (prefix, motif, seed) in [("a_", "GATAAG", "11"), ("b_", "CCGTCA", "12")] {
        ok(&[
            "gen-data",
            "--motif",
            motif,
            "--n",
            "200",
            "--len",
            "32",
            "--seed",
            seed,
            "--out-dir",
            p(d),
            "--prefix",
            prefix,
        ]);
        manifests.push(f(&format!("{prefix}gen-data.manifest.json")));
    }
    let small = [
        "--num-filters",
        "4",
        "--motif-width",
        "6",
        "--embed-dim",
        "6",
        "--hidden-dim",
        "6",
        "--max-epochs",
        "5",
    ];
    let paths: Vec<PathBuf> = [
        "a_train.tsv",
        "a_val.tsv",
        "a.json",
        "b_train.tsv",
        "b_val.tsv",
        "b.json",
    ]
    .iter()
    .map(|n| f(n))
    .collect();
    let mut a = vec![
        "train-expert",
        "--train",
        p(&paths[0]),
        "--val",
        p(&paths[1]),
        "--out",
        p(&paths[2]),
        "--seed",
        "21",
    ];
    a.extend(small);
    ok(&a);
    manifests.push(f("a.manifest.json"));
    let mut b = vec![
        "train-expert",
        "--train",
        p(&paths[3]),
        "--val",
        p(&paths[4]),
        "--out",
        p(&paths[5]),
        "--seed",
        "22",
        "--search-budget",
        "2",
        "--jobs",
        "2",
    ];
    b.extend(small);
    ok(&b);
    manifests.push(f("b.manifest.json"));
    ok(&[
        "train-moe",
        "--experts",
        p(&f("a.stripped.json")),
        p(&f("b.stripped.json")),
        "--train",
        p(&f("a_train.tsv")),
        "--val",
        p(&f("a_val.tsv")),
        "--out",
        p(&f("moe.json")),
        "--seed",
        "23",
        "--max-epochs",
        "4",
        "--search-budget",
        "2",
    ]);
    manifests.push(f("moe.manifest.json"));
    ok(&[
        "evaluate",
        "--models",
        p(&f("a.json")),
        p(&f("b.json")),
        p(&f("moe.json")),
        "--test",
        p(&f("a_test.tsv")),
        "--out",
        p(&f("report.json")),
        "--trials",
        "6",
        "--seed",
        "24",
        "--jobs",
        "3",
        "--roc-dir",
        p(&f("roc")),
    ]);
    manifests.push(f("report.manifest.json"));
    ok(&["compare", "--report", p(&f("report.json"))]);
    manifests.push(f("report.anova.manifest.json"));
    ok(&[
        "explain",
        "--model",
        p(&f("moe.json")),
        "--sequence",
        seq,
        "--method",
        "shiftsmooth",
        "--N",
        "2",
        "--out-dir",
        p(&f("explain")),
        "--jobs",
        "2",
    ]);
    manifests.push(f("explain/moe_shiftsmooth_N2.manifest.json"));

    let mut problems = Vec::new();
    let mut artifacts = 0;
    for m in &manifests {
        let mut files = manifest_outputs(m);
        files.push(m.clone());
        let before: Vec<Vec<u8>> = files.iter().map(|x| fs::read(x).unwrap()).collect();
        let out = tfbs(&["rerun", p(m)]);
        if code(&out) != 0 {
            problems.push(format!(
                "rerun {} exited {}: {}",
                m.display(),
                code(&out),
                stderr(&out).trim()
            ));
            continue;
        }
        for (x, old) in files.iter().zip(&before) {
            artifacts += 1;
            if &fs::read(x).unwrap() != old {
                problems.push(format!("{} changed", x.display()));
            }
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{} manifests over 6 commands, {artifacts} artifacts byte-identical on rerun",
                manifests.len()
            )
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Verdict) -> (Verdict, f64) {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        verdict(false, format!("panicked: {msg}"))
    });
    (v, start.elapsed().as_secs_f64())
}

fn main() {
    let mut lines = Vec::new();
    let mut record = |id: u32, name: &str, limit: Option<f64>, (mut v, secs): (Verdict, f64)| {
        if let Some(limit) = limit {
            if secs >= limit {
                v.pass = false;
                v.detail
                    .push_str(&format!("; runtime {secs:.1}s exceeds {limit}s"));
            }
        }
        let line = format!(
            "criterion {id} [{}] {name}: {} ({secs:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        println!("{line}");
        lines.push((v.pass, line));
    };

    record(1, "gradient correctness", Some(60.0), guarded(criterion_1));
    record(
        2,
        "ShiftSmooth identities",
        Some(10.0),
        guarded(criterion_2),
    );
    let (trained, train_secs) = {
        let start = Instant::now();
        let t = catch_unwind(train_all).ok();
        (t, start.elapsed().as_secs_f64())
    };
    match &trained {
        Some(t) => {
            record(
                3,
                "synthetic in-distribution reproduction",
                None,
                guarded(|| criterion_3(t)),
            );
            record(
                4,
                "bootstrap + ANOVA pipeline",
                None,
                guarded(|| criterion_4(t)),
            );
        }
        None => {
            let fail = || {
                (
                    verdict(
                        false,
                        format!("model training failed after {train_secs:.0}s"),
                    ),
                    0.0,
                )
            };
            record(3, "synthetic in-distribution reproduction", None, fail());
            record(4, "bootstrap + ANOVA pipeline", None, fail());
        }
    }
    record(5, "AUC oracle equivalence", Some(5.0), guarded(criterion_5));
    match &trained {
        Some(t) => {
            record(
                6,
                "MoE structural invariants",
                None,
                guarded(|| criterion_6(t)),
            );
            record(
                7,
                "attributional-robustness surrogate",
                None,
                guarded(|| criterion_7(t)),
            );
        }
        None => {
            record(
                6,
                "MoE structural invariants",
                None,
                (verdict(false, "no trained models".into()), 0.0),
            );
            record(
                7,
                "attributional-robustness surrogate",
                None,
                (verdict(false, "no trained models".into()), 0.0),
            );
        }
    }
    record(8, "CLI determinism", None, guarded(criterion_8));

    let failed = lines.iter().filter(|(p, _)| !p).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        lines.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
