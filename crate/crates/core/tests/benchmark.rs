use liveedit::benchmark::{evaluate, lifelong_run, single_edit_baseline, Benchmark, Pool};
use liveedit::config::{RunConfig, Variant};
use liveedit::editor::Editor;
use liveedit::numerics::SeedStream;
use liveedit::surrogate::Surrogate;
use liveedit::training::{train_step, Shuffle, TrainBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world(cfg: &RunConfig) -> (Benchmark, Surrogate<f32>, Editor<f32>) {
    let s = &cfg.surrogate;
    let bench = Benchmark::generate(&cfg.benchmark, s.n_v, s.d_img, s.vocab, cfg.seed).unwrap();
    let seeds = SeedStream::new(cfg.seed);
    let mut surrogate = Surrogate::<f32>::new(s.clone(), &seeds.derive("surrogate")).unwrap();
    surrogate.freeze();
    let editor = Editor::<f32>::new(cfg.editor.clone(), s, &seeds.derive("editor")).unwrap();
    (bench, surrogate, editor)
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = RunConfig::tiny();
    let s = &cfg.surrogate;
    let a = Benchmark::generate(&cfg.benchmark, s.n_v, s.d_img, s.vocab, 3).unwrap();
    let b = Benchmark::generate(&cfg.benchmark, s.n_v, s.d_img, s.vocab, 3).unwrap();
    let c = Benchmark::generate(&cfg.benchmark, s.n_v, s.d_img, s.vocab, 4).unwrap();
    let json = |x: &Benchmark| serde_json::to_string(&x.stream).unwrap();
    assert_eq!(json(&a), json(&b));
    assert_ne!(json(&a), json(&c));
}

#[test]
fn noiseless_modal_neighbours_reuse_the_edit_image() {
    let mut cfg = RunConfig::tiny();
    cfg.benchmark.noise = 0.0;
    let s = &cfg.surrogate;
    let bench = Benchmark::generate(&cfg.benchmark, s.n_v, s.d_img, s.vocab, 5).unwrap();
    for r in &bench.stream {
        for g in &r.gen_modal {
            assert_eq!(g.image.feats, r.edit.image.feats);
            assert_eq!(g.prompt, r.edit.prompt);
        }
    }
}

#[test]
fn records_are_genuine_corrections() {
    let cfg = RunConfig::tiny();
    let (bench, _, _) = world(&cfg);
    let eval: Vec<usize> = bench.concepts(Pool::Eval).collect();
    for r in &bench.stream {
        assert!(eval.contains(&r.concept));
        assert_ne!(r.edit.output, r.base_answer);
        assert_eq!(r.base_answer, bench.base_answer(r.concept, r.attribute));
        for g in r.gen_text.iter().chain(&r.gen_modal) {
            assert_eq!(g.output, r.edit.output);
        }
        assert!(r.loc_text.image.empty);
        assert!(!r.loc_modal.image.empty);
    }
}

#[test]
fn empty_repository_is_an_identity() {
    let cfg = RunConfig::tiny();
    let (bench, surrogate, editor) = world(&cfg);
    let repo = editor.new_repository();
    let m = evaluate(&editor, &surrogate, &repo, &bench.stream).unwrap();
    assert_eq!((m.t_loc, m.m_loc), (1.0, 1.0));
    let none = evaluate(&editor, &surrogate, &repo, &[]).unwrap();
    assert_eq!(none.rel, None);
    assert_eq!(none.t_gen, None);
    assert_eq!((none.t_loc, none.m_loc), (1.0, 1.0));
    let x: Vec<_> = bench.stream.iter().map(|r| r.edit.to_input::<f32>()).collect();
    let edited = editor.forward(&surrogate, &repo, &x[..1]).unwrap();
    assert!(edited.bit_eq(&surrogate.forward(&x[..1]).unwrap()));
}

#[test]
fn eval_points_follow_the_append_only_repository() {
    let mut cfg = RunConfig::tiny();
    cfg.benchmark.stream_len = 8;
    let (bench, surrogate, editor) = world(&cfg);
    let (repo, points) = lifelong_run(&editor, &surrogate, &bench.stream, &[8, 0, 1, 4, 100]).unwrap();
    let sizes: Vec<(usize, usize)> = points.iter().map(|p| (p.edits, p.repo_size)).collect();
    assert_eq!(sizes, vec![(0, 0), (1, 1), (4, 4), (8, 8)]);
    assert_eq!(repo.len(), 8);
    assert_eq!(points[0].metrics.rel, None);
    assert_eq!((points[0].metrics.t_loc, points[0].metrics.m_loc), (1.0, 1.0));

    let again = evaluate(&editor, &surrogate, &repo, &bench.stream).unwrap();
    assert_eq!(again, points[3].metrics);
    assert_eq!(again, evaluate(&editor, &surrogate, &repo, &bench.stream).unwrap());
}

#[test]
fn an_overfit_expert_answers_its_edit() {
    // rank 2 can settle with one answer token wrong; rank 8 fits both
    let mut cfg = RunConfig::tiny();
    cfg.editor.r = 8;
    let (bench, surrogate, mut editor) = world(&cfg);
    let rec = &bench.stream[0];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let other = bench.stream.iter().find(|r| r.concept != rec.concept).unwrap();
    let batch = TrainBatch {
        edit: vec![rec.edit.to_input::<f32>()],
        gen: vec![rec.edit.to_input()],
        loc: vec![other.loc_modal.to_input()],
    };
    let mut train = cfg.training.clone();
    train.adam.lr = 1e-2;
    let mut state = editor.params().new_optimizer_state();
    for s in 0..300 {
        let shuffle = Shuffle::sample(1, &mut rng);
        train_step(&mut editor, &surrogate, &batch, &shuffle, &train, &mut state, s).unwrap();
    }
    let (_, points) = lifelong_run(&editor, &surrogate, std::slice::from_ref(rec), &[1]).unwrap();
    assert_eq!(points[0].metrics.rel, Some(1.0));
    assert_eq!(points[0].metrics.exact_rel, Some(1.0));
}

#[test]
fn single_edit_baseline_averages_isolated_edits() {
    let cfg = RunConfig::tiny();
    let (bench, surrogate, editor) = world(&cfg);
    let recs = &bench.stream[..3];
    let base = single_edit_baseline(&editor, &surrogate, recs).unwrap();
    let mut rel = 0.0;
    for r in recs {
        let (_, p) = lifelong_run(&editor, &surrogate, std::slice::from_ref(r), &[1]).unwrap();
        rel += p[0].metrics.rel.unwrap();
    }
    assert!((base.rel.unwrap() - rel / 3.0).abs() < 1e-12);
    let empty = single_edit_baseline(&editor, &surrogate, &[]).unwrap();
    assert_eq!((empty.rel, empty.t_loc), (None, 1.0));
}

#[test]
fn uniform_fusion_weights_sum_to_one() {
    let mut cfg = RunConfig::tiny();
    cfg.editor.variant = Variant::NoSoftRouting;
    let (bench, surrogate, editor) = world(&cfg);
    let (repo, _) = lifelong_run(&editor, &surrogate, &bench.stream, &[]).unwrap();
    let hs = surrogate.forward_to_layer(&[bench.stream[0].edit.to_input()], cfg.surrogate.l_e).unwrap();
    let rs = &editor.route(&repo, &hs).unwrap()[0];
    if !rs.is_empty() {
        let w = repo.route_weights(rs, editor.fusion()).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
