//! Cross-module properties of the train, intervene, realign and evaluate path
//! on small worlds with tiny budgets.

use cirm_core::datagen::{
    evidence_probability, exact_conditional, sample_splits, Evidence, GenerativeWorld, Preset, Splits,
};
use cirm_core::evalharness::{
    base_model, evaluate_curves, run_benchmark, BenchmarkSpec, CellData, SuiteConfig, WorldChoice,
};
use cirm_core::intervene::{run_trajectory, PolicyKind, SelectionUnits};
use cirm_core::models::{
    init_model, load_model, save_model, train_model, ArchConfig, ConceptModel, ModelDims, ModelKind, ModelTraining,
    SavedModel,
};
use cirm_core::realign::{
    load_realigner, save_realigner, train_realigner_posthoc, ConceptRealigner, Realigner, RealignerConfig,
    SavedRealigner,
};

fn world() -> GenerativeWorld {
    GenerativeWorld::preset(Preset::Small, 1)
}

fn splits(w: &GenerativeWorld) -> Splits {
    sample_splits(w, (300, 80, 40), 7).unwrap()
}

fn trained(w: &GenerativeWorld, s: &Splits, kind: ModelKind) -> ConceptModel {
    let mut training = ModelTraining::default();
    training.train.epochs = 3;
    let arch = ArchConfig::default();
    let mut m = init_model(kind, ModelDims::of_world(w), &arch, &training, 3).unwrap();
    train_model(&mut m, &training, &s.train, &s.val, None, 3).unwrap();
    m.freeze();
    m
}

fn realigner(m: &ConceptModel, s: &Splits) -> Realigner {
    let mut cfg = RealignerConfig::default();
    cfg.train.epochs = 3;
    train_realigner_posthoc(m, &s.train, &s.val, &cfg, None, 5).unwrap().0
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[test]
fn accuracy_curve_starts_at_plain_accuracy() {
    let w = world();
    let s = splits(&w);
    for kind in [ModelKind::SequentialCbm, ModelKind::Cem] {
        let m = trained(&w, &s, kind);
        let r = realigner(&m, &s);
        let hits = s
            .test
            .records
            .iter()
            .filter(|rec| {
                let c = m.predict_concepts(&rec.x).unwrap();
                argmax(&m.logits_with(&rec.x, &c).unwrap()) == rec.y
            })
            .count();
        let plain = hits as f64 / s.test.len() as f64;
        for rea in [None, Some(&r as &dyn ConceptRealigner)] {
            let (_, acc) = evaluate_curves(&m, rea, &PolicyKind::ucp(), 6, &s.test, None).unwrap();
            assert!((acc.points[0].value - plain).abs() < 1e-12, "{kind}");
            assert_eq!(acc.points.len(), 7);
        }
    }
}

#[test]
fn trajectories_hold_truth_on_the_intervened_set() {
    let w = world();
    let s = splits(&w);
    let m = trained(&w, &s, ModelKind::JointCbm);
    let r = realigner(&m, &s);
    for policy in [PolicyKind::ucp(), PolicyKind::random(3)] {
        for rec in &s.test.records {
            let traj = run_trajectory(&m, Some(&r), &policy, 6, rec, None).unwrap();
            assert_eq!(traj.steps.len(), 7);
            assert!(traj.steps[0].realigned.is_none());
            for (t, step) in traj.steps.iter().enumerate() {
                assert_eq!(step.intervened.len(), t);
                for &i in &step.intervened {
                    assert_eq!(step.fed()[i].to_bits(), rec.c[i].to_bits());
                    assert_eq!(step.values[i].to_bits(), rec.c[i].to_bits());
                }
            }
            let mut chosen: Vec<usize> = traj.steps.iter().filter_map(|st| st.selected).collect();
            chosen.sort_unstable();
            assert_eq!(chosen, (0..6).collect::<Vec<_>>());
        }
    }
}

#[test]
fn single_cell_benchmark_matches_direct_evaluation() {
    let cache = tempfile::tempdir().unwrap();
    let mut config = SuiteConfig {
        sizes: (200, 60, 30),
        ..SuiteConfig::default()
    };
    config.training.train.epochs = 2;
    config.realigner.train.epochs = 2;
    config.cache_dir = Some(cache.path().to_path_buf());
    let choice = WorldChoice::preset(Preset::Small, 2);
    let mut spec = BenchmarkSpec::table1(Preset::Small, 2, vec![4]);
    spec.kinds = vec![ModelKind::SequentialCbm];
    spec.config = config.clone();
    let report = run_benchmark(&spec).unwrap();
    assert!(report.failures.is_empty());
    let cell = &report.cells[0];

    let data = CellData::prepare(choice, 4, &config).unwrap();
    let base = base_model(&data, ModelKind::SequentialCbm, &config, None).unwrap();
    let (conc, acc) = evaluate_curves(
        &base,
        None,
        &spec.policy,
        data.horizon,
        &data.splits.test,
        data.units_arg(),
    )
    .unwrap();
    let arm = cell.arm(false).unwrap();
    assert_eq!(arm.concept, conc);
    assert_eq!(arm.accuracy, acc);
    assert_eq!(report.table().len(), 2);
}

#[test]
fn oracle_is_a_consistent_distribution() {
    let w = world();
    let k = w.num_concepts();
    let total: f64 = (0..1u32 << k)
        .map(|bits| {
            let e: Evidence = (0..k).map(|i| (i, bits >> i & 1 == 1)).collect();
            evidence_probability(&w, &e).unwrap()
        })
        .sum();
    assert!((total - 1.0).abs() < 1e-12);

    // p(c_i | S) = sum over b of p(c_j = b | S) p(c_i | S, c_j = b).
    for bits in 0..1u32 << 3 {
        let e: Evidence = (0..3).map(|i| (i, bits >> i & 1 == 1)).collect();
        for target in 3..k {
            for j in (3..k).filter(|&j| j != target) {
                let pj = exact_conditional(&w, &e, j).unwrap();
                let mut on = e.clone();
                on.insert(j, true);
                let mut off = e.clone();
                off.insert(j, false);
                let mixed = pj * exact_conditional(&w, &on, target).unwrap()
                    + (1.0 - pj) * exact_conditional(&w, &off, target).unwrap();
                assert!((mixed - exact_conditional(&w, &e, target).unwrap()).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn saved_checkpoints_reproduce_predictions() {
    let w = world();
    let s = splits(&w);
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::IndependentCbm, ModelKind::Cem, ModelKind::IntCem] {
        let m = trained(&w, &s, kind);
        let path = dir.path().join(format!("{kind}.json"));
        save_model(
            &path,
            &SavedModel::new(m.clone(), ArchConfig::default(), 3, serde_json::Value::Null),
        )
        .unwrap();
        let back = load_model(&path).unwrap().model;
        assert_eq!(back.checksum(), m.checksum());
        for rec in &s.test.records {
            let (a, b) = (
                m.predict_concepts(&rec.x).unwrap(),
                back.predict_concepts(&rec.x).unwrap(),
            );
            assert_eq!(a, b);
            assert_eq!(
                m.logits_with(&rec.x, &a).unwrap(),
                back.logits_with(&rec.x, &b).unwrap()
            );
        }
    }

    let m = trained(&w, &s, ModelKind::SequentialCbm);
    let r = realigner(&m, &s);
    let path = dir.path().join("realigner.json");
    save_realigner(&path, &SavedRealigner::new(r.clone(), 5)).unwrap();
    let back = load_realigner(&path).unwrap().realigner;
    let units = SelectionUnits::singletons(6);
    for rec in s.test.records.iter().take(10) {
        let a = run_trajectory(&m, Some(&r), &PolicyKind::ucp(), 6, rec, Some(&units)).unwrap();
        let b = run_trajectory(&m, Some(&back), &PolicyKind::ucp(), 6, rec, Some(&units)).unwrap();
        assert_eq!(a, b);
    }
}
