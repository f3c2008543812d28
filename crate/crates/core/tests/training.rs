use liveedit::benchmark::Benchmark;
use liveedit::config::RunConfig;
use liveedit::editor::Editor;
use liveedit::numerics::{Graph, SeedStream, Tensor};
use liveedit::surrogate::Surrogate;
use liveedit::training::{
    evaluate_losses, hard_routing_loss, infonce, sample_batch, soft_routing_losses, train_step, LossReport, Shuffle,
    Trainer,
};
use liveedit::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Fixture {
    cfg: RunConfig,
    bench: Benchmark,
    surrogate: Surrogate<f64>,
    editor: Editor<f64>,
}

fn fixture() -> Fixture {
    let cfg = RunConfig::tiny();
    let s = &cfg.surrogate;
    let bench = Benchmark::generate(&cfg.benchmark, s.n_v, s.d_img, s.vocab, cfg.seed).unwrap();
    let seeds = SeedStream::new(cfg.seed);
    let mut surrogate = Surrogate::<f64>::new(s.clone(), &seeds.derive("surrogate")).unwrap();
    surrogate.freeze();
    let editor = Editor::<f64>::new(cfg.editor.clone(), s, &seeds.derive("editor")).unwrap();
    Fixture {
        cfg,
        bench,
        surrogate,
        editor,
    }
}

#[test]
fn infonce_examples() {
    let a = vec![0.3, -0.7, 1.1];
    assert_eq!(infonce(&a, &a, std::slice::from_ref(&a), 1.0).unwrap(), 0.0);

    let zero = vec![0.0; 3];
    let cands = vec![vec![1.0, 2.0, 3.0], vec![-4.0, 0.5, 2.0]];
    assert!((infonce(&zero, &cands[0], &cands, 1.0).unwrap() - LN2).abs() < 1e-15);
    let five: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64; 3]).collect();
    assert!((infonce(&zero, &five[2], &five, 2.0).unwrap() - 5f64.ln()).abs() < 1e-12);

    let alpha = vec![0.5, -1.0, 0.25];
    let cands: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.3, 1.0 - i as f64 * 0.2, (i * i) as f64 * 0.1]).collect();
    let div = 3f64.sqrt();
    let scores: Vec<f64> = cands.iter().map(|c| c.iter().zip(&alpha).map(|(x, y)| x * y).sum::<f64>() / div).collect();
    let lse = scores.iter().map(|s| s.exp()).sum::<f64>().ln();
    assert!((infonce(&alpha, &cands[3], &cands, div).unwrap() - (lse - scores[3])).abs() < 1e-7);

    assert!(matches!(infonce(&alpha, &[9.0, 9.0, 9.0], &cands, div), Err(Error::Contract(_))));
}

fn constants(g: &mut Graph<f64>, rows: &[&[f64]]) -> liveedit::Var {
    let cols = rows[0].len();
    let data: Vec<f64> = rows.iter().flat_map(|r| r.to_vec()).collect();
    g.constant(&Tensor::new([rows.len(), cols], data).unwrap())
}

#[test]
fn absolute_soft_loss_is_two_ln_two_at_zero_scores() {
    let mut g = Graph::new();
    let bar = constants(&mut g, &[&[0.0, 0.0]]);
    let hat = constants(&mut g, &[&[1.0, 2.0]]);
    let loc = constants(&mut g, &[&[-3.0, 0.5]]);
    let (sr1, _) = soft_routing_losses(&mut g, bar, hat, loc, &[1], 1.0).unwrap();
    assert!((g.value(sr1).item() - 2.0 * LN2).abs() < 1e-15);
}

#[test]
fn relative_soft_loss_saturates() {
    let mut g = Graph::new();
    let bar = constants(&mut g, &[&[10.0, 0.0], &[0.0, 10.0]]);
    let hat = constants(&mut g, &[&[10.0, 0.0], &[0.0, 10.0]]);
    let loc = constants(&mut g, &[&[-10.0, 0.0], &[0.0, -10.0]]);
    let (_, sr2) = soft_routing_losses(&mut g, bar, hat, loc, &[1, 0], 1.0).unwrap();
    assert!(g.value(sr2).item() < 1e-30);
}

#[test]
fn hard_loss_first_term_saturates_for_a_matching_pair() {
    let mut g = Graph::new();
    let bar = constants(&mut g, &[&[20.0, 0.0]]);
    let sentinel = constants(&mut g, &[&[0.0, 20.0]]);
    // the locality query sits exactly on its sentinel, far from the expert
    let loc_bar = constants(&mut g, &[&[0.0, 20.0]]);
    let loss = hard_routing_loss(&mut g, bar, sentinel, loc_bar, sentinel, bar, 1.0).unwrap();
    assert!(g.value(loss).item() < 1e-30);
}

#[test]
fn locality_loss_vanishes_at_initialisation() {
    // the expert value map starts at zero, so every residual is zero
    let f = fixture();
    let batch = sample_batch::<f64>(&f.bench, 2, &mut rng(1)).unwrap();
    let shuffle = Shuffle::sample(2, &mut rng(2));
    let r = evaluate_losses(&f.editor, &f.surrogate, &batch, &shuffle).unwrap();
    assert!(r.loc.abs() < 1e-6, "loc {}", r.loc);
    assert!(r.all_finite());
    assert!(r.hr >= 0.0 && r.sr2 >= 0.0 && r.sr1 >= 0.0);
    let again = evaluate_losses(&f.editor, &f.surrogate, &batch, &shuffle).unwrap();
    assert_eq!(r.total.to_bits(), again.total.to_bits());
}

#[test]
fn training_leaves_the_surrogate_untouched() {
    let f = fixture();
    let before: Vec<Tensor<f64>> = f.surrogate.params().iter().map(|p| p.tensor.clone()).collect();
    let mut cfg = f.cfg.training.clone();
    cfg.max_steps = 100;
    cfg.adam.lr = 1e-3;
    let mut t = Trainer::new(f.editor.clone(), &f.surrogate, &f.bench, cfg, SeedStream::new(3)).unwrap();
    t.run(None).unwrap();
    assert_eq!(t.step_count(), 100);
    for (a, p) in before.iter().zip(f.surrogate.params().iter()) {
        assert!(a.bit_eq(&p.tensor));
    }
    assert!(t.editor.params().trainable_tensors() != f.editor.params().trainable_tensors());
}

#[test]
fn unfrozen_surrogate_is_refused() {
    let f = fixture();
    let cfg = RunConfig::tiny();
    let open = Surrogate::<f64>::new(cfg.surrogate.clone(), &SeedStream::new(1)).unwrap();
    let batch = sample_batch::<f64>(&f.bench, 2, &mut rng(1)).unwrap();
    let shuffle = Shuffle::sample(2, &mut rng(2));
    let mut editor = f.editor.clone();
    let mut state = editor.params().new_optimizer_state();
    let r = train_step(&mut editor, &open, &batch, &shuffle, &cfg.training, &mut state, 0);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn total_loss_falls_on_a_fixed_batch() {
    let f = fixture();
    let batch = sample_batch::<f64>(&f.bench, 2, &mut rng(4)).unwrap();
    let shuffle = Shuffle::sample(2, &mut rng(5));
    let mut cfg = f.cfg.training.clone();
    cfg.adam.lr = 1e-3;
    let mut editor = f.editor.clone();
    let mut state = editor.params().new_optimizer_state();
    let totals: Vec<f64> = (0..50)
        .map(|s| train_step(&mut editor, &f.surrogate, &batch, &shuffle, &cfg, &mut state, s).unwrap().total)
        .collect();
    for w in totals.windows(2) {
        assert!(w[1] < w[0], "{totals:?}");
    }
}

fn tiny_train(max_steps: usize) -> liveedit::config::TrainConfig {
    let mut cfg = RunConfig::tiny().training;
    cfg.max_steps = max_steps;
    cfg.checkpoint_every = 10;
    cfg.smoothing = 4;
    cfg.adam.lr = 1e-3;
    cfg
}

fn same_reports(a: &[LossReport], b: &[LossReport]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.step == y.step && x.total.to_bits() == y.total.to_bits() && x == y)
}

#[test]
fn resumed_training_replays_the_unbroken_run() {
    // checkpoints store f32, so the replay is exact for f32 sessions
    let f = fixture();
    let mut surrogate = f.surrogate.cast::<f32>();
    surrogate.freeze();
    let editor = f.editor.cast::<f32>();
    let seeds = SeedStream::new(8);
    let whole_dir = tempfile::tempdir().unwrap();
    let mut whole = Trainer::new(editor.clone(), &surrogate, &f.bench, tiny_train(20), seeds).unwrap();
    whole.run(Some(whole_dir.path())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(editor.clone(), &surrogate, &f.bench, tiny_train(10), seeds).unwrap();
    first.run(Some(dir.path())).unwrap();
    let ckpt = dir.path().join("checkpoint.json");
    let mut second = Trainer::resume(&ckpt, editor, &surrogate, &f.bench, tiny_train(20), seeds).unwrap();
    assert_eq!(second.step_count(), 10);
    second.run(Some(dir.path())).unwrap();

    let joined: Vec<LossReport> = first.log.iter().chain(&second.log).copied().collect();
    assert!(same_reports(&joined, &whole.log));
    assert_eq!(
        whole.editor.params().trainable_tensors(),
        second.editor.params().trainable_tensors()
    );
    let log = |d: &std::path::Path| std::fs::read_to_string(d.join("train_log.csv")).unwrap();
    assert_eq!(log(dir.path()), log(whole_dir.path()));
}

#[test]
fn checkpoint_from_another_width_is_refused() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(f.editor.clone(), &f.surrogate, &f.bench, tiny_train(10), SeedStream::new(9)).unwrap();
    t.run(Some(dir.path())).unwrap();
    let mut other = f.cfg.editor.clone();
    other.d_m = 8;
    let editor = Editor::<f64>::new(other, &f.cfg.surrogate, &SeedStream::new(1)).unwrap();
    let r = Trainer::resume(&dir.path().join("checkpoint.json"), editor, &f.surrogate, &f.bench, tiny_train(20), SeedStream::new(9));
    assert!(matches!(r, Err(Error::Fingerprint { .. })));
}

#[test]
fn shuffle_choices_are_fair_coins() {
    let b = 8;
    let mut hits = 0usize;
    let mut total = 0usize;
    for seed in 0..500 {
        let s = Shuffle::sample(b, &mut rng(seed));
        hits += s.pi1.iter().chain(&s.pi2).filter(|&&p| p).count();
        total += 2 * b;
        for (i, &n) in s.negatives.iter().enumerate() {
            assert!(n != i && n < 2 * b);
        }
    }
    let freq = hits as f64 / total as f64;
    assert!((freq - 0.5).abs() < 0.05, "{freq}");
    assert_eq!(Shuffle::sample(b, &mut rng(42)), Shuffle::sample(b, &mut rng(42)));
}

#[test]
fn batches_pair_edits_with_neighbours_and_unrelated_locality() {
    let f = fixture();
    let batch = sample_batch::<f32>(&f.bench, 3, &mut rng(10)).unwrap();
    assert_eq!(batch.len(), 3);
    batch.validate().unwrap();
    assert!(matches!(sample_batch::<f32>(&f.bench, 6, &mut rng(10)), Err(Error::Config(_))));
}

