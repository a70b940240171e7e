//! Transfer laws and independent oracles for the matcher and the resize kernel.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tli_core::fixtures::{self, random_graph};
use tli_core::matching::{score_pair_with, Candidate};
use tli_core::transfer::Decision;
use tli_core::{
    resize, select_best_teacher, transfer, ExecutionPath, GraphDoc, MatchReport, Model,
    NormPolicy, ScoreWeights, Tensor, TransferConfig,
};

fn model(g: &GraphDoc, seed: u64) -> Model {
    Model::new(g.clone(), Some(fixtures::random_store(g, seed))).unwrap()
}

fn shapes_only(g: &GraphDoc) -> Model {
    Model::new(g.clone(), None).unwrap()
}

// ---------------------------------------------------------------------------
// Resize oracle: direct evaluation of the interpolation formula per output
// element, with no separable passes.

fn source_coord(j: usize, n: usize, m: usize) -> f64 {
    if m > 1 {
        j as f64 * (n - 1) as f64 / (m - 1) as f64
    } else {
        (n - 1) as f64 / 2.0
    }
}

fn direct_resize_1d(src: &[f64], m: usize) -> Vec<f64> {
    let n = src.len();
    (0..m)
        .map(|j| {
            let c = source_coord(j, n, m);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let f = c - lo as f64;
            (1.0 - f) * src[lo] + f * src[hi]
        })
        .collect()
}

fn direct_resize_2d(src: &[f64], rows: usize, cols: usize, m: usize, k: usize) -> Vec<f64> {
    let at = |r: usize, c: usize| src[r * cols + c];
    let mut out = Vec::with_capacity(m * k);
    for i in 0..m {
        let y = source_coord(i, rows, m);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(rows - 1);
        for j in 0..k {
            let x = source_coord(j, cols, k);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(cols - 1);
            out.push(
                (1.0 - fy) * (1.0 - fx) * at(y0, x0)
                    + (1.0 - fy) * fx * at(y0, x1)
                    + fy * (1.0 - fx) * at(y1, x0)
                    + fy * fx * at(y1, x1),
            );
        }
    }
    out
}

#[test]
fn resize_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        if case % 2 == 0 {
            let n = rng.gen_range(1..=16);
            let m = rng.gen_range(1..=16);
            let src: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = resize(&Tensor::new(vec![n], src.clone()).unwrap(), &[m]).unwrap();
            for (a, b) in got.data().iter().zip(direct_resize_1d(&src, m)) {
                assert!((a - b).abs() <= 1e-6, "1-D case {case}: {a} vs {b}");
            }
        } else {
            let (r, c) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
            let (m, k) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
            let src: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = resize(&Tensor::new(vec![r, c], src.clone()).unwrap(), &[m, k]).unwrap();
            for (a, b) in got.data().iter().zip(direct_resize_2d(&src, r, c, m, k)) {
                assert!((a - b).abs() <= 1e-6, "2-D case {case}: {a} vs {b}");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Matcher oracle: for each student parameter, repeatedly pick the best
// remaining teacher by linear scan.

fn better(a: &Candidate, b: &Candidate) -> bool {
    if a.score.total != b.score.total {
        return a.score.total > b.score.total;
    }
    if a.same_slot != b.same_slot {
        return a.same_slot;
    }
    a.teacher < b.teacher
}

fn brute_force(
    student: &[ExecutionPath],
    teacher: &[ExecutionPath],
    k: usize,
    min_score: f64,
) -> (BTreeMap<String, Vec<Candidate>>, f64) {
    let w = ScoreWeights::default();
    let mut per_param = BTreeMap::new();
    let (mut num, mut den) = (0.0, 0.0);
    for s in student {
        let mut pool: Vec<Candidate> = teacher
            .iter()
            .map(|t| Candidate {
                teacher: t.param_name.clone(),
                score: score_pair_with(s, t, &w),
                same_slot: s.slot == t.slot,
            })
            .filter(|c| c.score.total >= min_score)
            .collect();
        let mut picked = Vec::new();
        while picked.len() < k && !pool.is_empty() {
            let mut best = 0;
            for i in 1..pool.len() {
                if better(&pool[i], &pool[best]) {
                    best = i;
                }
            }
            picked.push(pool.swap_remove(best));
        }
        let elems = s.shape.iter().product::<usize>() as f64;
        den += elems;
        num += elems * picked.first().map_or(0.0, |c| c.score.total);
        per_param.insert(s.param_name.clone(), picked);
    }
    (per_param, num / den)
}

#[test]
fn matcher_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..50 {
        let s = shapes_only(&random_graph(&mut rng, 10));
        let t = shapes_only(&random_graph(&mut rng, 10));
        let k = rng.gen_range(1..=3);
        let min_score = [0.0, 0.3, 0.6][case % 3];
        let cfg = TransferConfig {
            min_score,
            injection: tli_core::InjectionConfig {
                k,
                ..Default::default()
            },
            ..Default::default()
        };
        let report: MatchReport = tli_core::match_models(&s, &t, &cfg).unwrap();
        let (oracle, tli) = brute_force(s.paths(), t.paths(), k, min_score);
        assert_eq!(report.per_param, oracle, "case {case}");
        assert!((report.tli_score - tli).abs() <= 1e-12, "case {case}");
    }
}

// ---------------------------------------------------------------------------
// Transfer laws.

#[test]
fn identity_transfer_reproduces_teacher() {
    for g in fixtures::toy_zoo() {
        let teacher = model(&g, 10);
        let student = model(&g, 20);
        let out = transfer(&student, &teacher, &TransferConfig::default()).unwrap();
        assert_eq!(out.report.matching.tli_score, 1.0, "{}", g.name());
        let t_store = teacher.store().unwrap();
        assert_eq!(out.store.len(), t_store.len());
        for (k, v) in t_store {
            assert!(out.store[k].bit_eq(v), "{} / {k}", g.name());
        }
    }
}

#[test]
fn output_keeps_student_names_and_shapes() {
    let zoo = fixtures::toy_zoo();
    for (i, s) in zoo.iter().enumerate() {
        for (j, t) in zoo.iter().enumerate() {
            let student = model(s, i as u64);
            let teacher = model(t, 100 + j as u64);
            let cfg = TransferConfig {
                injection: tli_core::InjectionConfig {
                    k: 2,
                    ..Default::default()
                },
                ..Default::default()
            };
            let out = transfer(&student, &teacher, &cfg).unwrap();
            let s_store = student.store().unwrap();
            assert_eq!(out.store.keys().collect::<Vec<_>>(), s_store.keys().collect::<Vec<_>>());
            for (k, v) in s_store {
                assert_eq!(out.store[k].shape(), v.shape());
                assert!(out.store[k].is_finite());
            }
            // Determinism.
            let again = transfer(&student, &teacher, &cfg).unwrap();
            assert_eq!(again.report, out.report);
            for (k, v) in &out.store {
                assert!(again.store[k].bit_eq(v));
            }
        }
    }
}

#[test]
fn norm_policies() {
    let g = fixtures::norm_net();
    let teacher = model(&g, 1);
    let student = model(&g, 2);
    let norm_params: Vec<&String> = g
        .param_index()
        .iter()
        .filter(|(_, e)| g.nodes()[e.node].kind.tag.is_norm())
        .map(|(k, _)| k)
        .collect();
    assert_eq!(norm_params.len(), 10);

    let skip = TransferConfig {
        norm_policy: NormPolicy::SkipNormParams,
        ..Default::default()
    };
    let out = transfer(&student, &teacher, &skip).unwrap();
    for name in &norm_params {
        assert!(out.store[*name].bit_eq(&student.store().unwrap()[*name]));
        assert_eq!(out.report.decisions[*name], Decision::KeptByNormPolicy);
    }
    assert!(out.store["conv1.weight"].bit_eq(&teacher.store().unwrap()["conv1.weight"]));

    let all = transfer(&student, &teacher, &TransferConfig::default()).unwrap();
    for name in &norm_params {
        assert!(all.store[*name].bit_eq(&teacher.store().unwrap()[*name]));
    }

    let stats = TransferConfig {
        norm_policy: NormPolicy::SkipRunningStats,
        ..Default::default()
    };
    let out = transfer(&student, &teacher, &stats).unwrap();
    for name in &norm_params {
        let expect = if name.contains("running") {
            &student.store().unwrap()[*name]
        } else {
            &teacher.store().unwrap()[*name]
        };
        assert!(out.store[*name].bit_eq(expect), "{name}");
    }
}

#[test]
fn full_threshold_leaves_student_alone() {
    let student = model(&fixtures::chain(), 3);
    let teacher = model(&fixtures::residual(), 4);
    let cfg = TransferConfig {
        min_score: 1.0,
        ..Default::default()
    };
    let out = transfer(&student, &teacher, &cfg).unwrap();
    let s_store = student.store().unwrap();
    for (k, v) in s_store {
        assert!(out.store[k].bit_eq(v));
    }
    let all: Vec<String> = s_store.keys().cloned().collect();
    assert_eq!(out.report.matching.unmatched, all);
    assert_eq!(out.report.matching.tli_score, 0.0);
}

#[test]
fn twins_score_one_both_ways() {
    for g in fixtures::toy_zoo() {
        let twin = fixtures::renamed(&g, "twin_", "twin");
        let a = shapes_only(&g);
        let b = shapes_only(&twin);
        let cfg = TransferConfig::default();
        assert_eq!(tli_core::match_models(&a, &b, &cfg).unwrap().tli_score, 1.0);
        assert_eq!(tli_core::match_models(&b, &a, &cfg).unwrap().tli_score, 1.0);
    }
}

#[test]
fn twin_transfer_copies_weights() {
    let g = fixtures::residual();
    let twin = fixtures::renamed(&g, "t.", "twin");
    let teacher_store = fixtures::renamed_store(&fixtures::random_store(&g, 9), "t.");
    let teacher = Model::new(twin, Some(teacher_store.clone())).unwrap();
    let student = model(&g, 10);
    let out = transfer(&student, &teacher, &TransferConfig::default()).unwrap();
    for (k, v) in &out.store {
        assert!(v.bit_eq(&teacher_store[&format!("t.{k}")]), "{k}");
    }
}

fn tli(student: &GraphDoc, teacher: &GraphDoc) -> f64 {
    tli_core::match_models(
        &shapes_only(student),
        &shapes_only(teacher),
        &TransferConfig::default(),
    )
    .unwrap()
    .tli_score
}

#[test]
fn degrading_the_teacher_lowers_the_score() {
    let g = fixtures::residual();
    let mut edits = 0;
    for node in g.nodes() {
        if let Some(h) = fixtures::without_node(&g, &node.id) {
            let s = tli(&g, &h);
            assert!(s < 1.0, "deleting {} left score {s}", node.id);
            edits += 1;
        }
        if node.kind.activation.is_some() {
            let h = fixtures::with_activation(&g, &node.id, "gelu").unwrap();
            let s = tli(&g, &h);
            assert!(s < 1.0, "substituting {} left score {s}", node.id);
            edits += 1;
        }
    }
    // 9 deletable layers, 2 activations.
    assert_eq!(edits, 11);
}

#[test]
fn best_teacher_selection() {
    let g = fixtures::residual();
    let student = shapes_only(&g);
    let cfg = TransferConfig::default();

    let twin = shapes_only(&fixtures::renamed(&g, "z_", "twin"));
    let mut mutant = fixtures::without_node(&g, "act_a").unwrap();
    mutant = fixtures::without_node(&mutant, "conv_sc").unwrap();
    mutant = fixtures::with_activation(&mutant, "stem_act", "silu").unwrap();
    let mutant = shapes_only(&mutant);

    let (idx, score) = select_best_teacher(&student, &[twin.clone(), mutant.clone()], &cfg).unwrap();
    assert_eq!((idx, score), (0, 1.0));
    let (idx, score) = select_best_teacher(&student, &[mutant.clone(), twin.clone()], &cfg).unwrap();
    assert_eq!((idx, score), (1, 1.0));

    let (idx, score) = select_best_teacher(&student, std::slice::from_ref(&mutant), &cfg).unwrap();
    assert_eq!(idx, 0);
    assert!(score < 1.0);

    let chain = shapes_only(&fixtures::chain());
    let (idx, score) = select_best_teacher(&student, &[chain, student.clone()], &cfg).unwrap();
    assert_eq!((idx, score), (1, 1.0));

    // Ties go to the lowest index.
    let (idx, _) = select_best_teacher(&student, &[twin.clone(), twin], &cfg).unwrap();
    assert_eq!(idx, 0);
}

#[test]
fn topk_mixing_blends_candidates() {
    let s = model(&fixtures::chain(), 1);
    let t = model(&fixtures::concat_branches(), 2);
    let cfg = TransferConfig {
        injection: tli_core::InjectionConfig {
            k: 3,
            temperature: 0.5,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = transfer(&s, &t, &cfg).unwrap();
    let mut saw_mix = false;
    for d in out.report.decisions.values() {
        if let Decision::Injected { sources } = d {
            let total: f64 = sources.iter().map(|m| m.weight).sum();
            assert!((total - 1.0).abs() < 1e-12);
            saw_mix |= sources.len() > 1;
        }
    }
    assert!(saw_mix);
}
