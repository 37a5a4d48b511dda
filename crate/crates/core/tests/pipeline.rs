use hfsgm::aggregation::Aggregator;
use hfsgm::checkpoint;
use hfsgm::config::{Binarization, RunConfig, Variant};
use hfsgm::episodes::Split;
use hfsgm::evaluation::{draw_episodes, evaluate_episodes};
use hfsgm::rng::seeded;
use hfsgm::sampling::{sample_conditional, sample_unconditional};
use hfsgm::synthetic::strokes_dataset;
use hfsgm::train::Trainer;
use hfsgm::verify::tiny_config;

fn config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.model = tiny_config(Variant::Hfsgm, Aggregator::Lag);
    cfg.data.splits = [10, 3, 3];
    cfg.data.synthetic.classes = 16;
    cfg.data.synthetic.per_class = 10;
    cfg.train.epochs = 2;
    cfg.train.episodes_per_epoch = 8;
    cfg.train.batch_size = 20;
    cfg.train.val_episodes = 4;
    cfg
}

#[test]
fn train_save_load_evaluate_sample() {
    let cfg = config();
    let ds = strokes_dataset(16, 10, 8, 3);
    let mut t = Trainer::new(cfg.clone(), ds).unwrap();
    let first = t.run_epoch().unwrap();
    let second = t.run_epoch().unwrap();
    assert!(first.loss.is_finite() && second.loss.is_finite());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    t.save(&path).unwrap();
    let loaded = checkpoint::load_matching(&path, &cfg.model).unwrap().model;
    assert_eq!(loaded, t.model);

    let eps = draw_episodes(t.dataset(), t.splits(), Split::Test, 5, 4, Binarization::Static, &mut seeded(1)).unwrap();
    let a = evaluate_episodes(&t.model, &eps, 3, "test", &mut seeded(2)).unwrap();
    let b = evaluate_episodes(&loaded, &eps, 3, "test", &mut seeded(2)).unwrap();
    assert_eq!(a.csv_line().rsplit_once(',').unwrap().0, b.csv_line().rsplit_once(',').unwrap().0);
    let nll = a.nll.unwrap();
    assert!(nll <= a.nelbo + 1.0, "IW estimate {nll} far above the bound {}", a.nelbo);

    let side = cfg.model.image_size;
    let draws = sample_unconditional(&loaded, 6, &mut seeded(3)).unwrap();
    assert_eq!(draws.len(), 6);
    assert!(draws.iter().all(|d| d.mean.len() == side * side && d.binary.iter().all(|&v| v == 0.0 || v == 1.0)));
    let cond = sample_conditional(&loaded, &eps[0].observations, 4, &mut seeded(4)).unwrap();
    assert_eq!(cond.len(), 4);
    assert!(cond.iter().flat_map(|d| &d.mean).all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn checkpoint_for_another_config_is_refused() {
    let cfg = config();
    let t = Trainer::new(cfg.clone(), strokes_dataset(16, 10, 8, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    t.save(&path).unwrap();
    let mut other = cfg.model.clone();
    other.heads = 1;
    let err = checkpoint::load_matching(&path, &other).unwrap_err();
    assert!(matches!(err, hfsgm::Error::ConfigMismatch(_)), "{err}");
}
