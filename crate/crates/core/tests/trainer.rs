use emd_core::checkpoint::Checkpoint;
use emd_core::font_net::{FontNet, FontNetConfig};
use emd_core::glyph::Corpus;
use emd_core::losses::{l1_metric, pdar_metric, rmse_metric};
use emd_core::trainer::{batch_loss, model_checkpoint, restore_model, TrainConfig, Trainer};
use emd_core::{BnMode, Error};

fn corpus() -> Corpus {
    Corpus::render(8, 8, 16, 2).unwrap()
}

fn trainer(seed: u64, lr: f64, batch: usize) -> Trainer {
    let net = FontNet::new(FontNetConfig::new(16, 2, 2).unwrap(), seed).unwrap();
    let cfg = TrainConfig {
        lr,
        batch,
        seed,
        steps: 0,
        ..TrainConfig::default()
    };
    Trainer::new(net, cfg).unwrap()
}

#[test]
fn one_step_lowers_the_loss_of_its_own_triplet() {
    let corpus = corpus();
    let mut wins = 0;
    for seed in 0..20 {
        let mut t = trainer(seed, 1e-3, 1);
        let batch = t.next_batch(&corpus).unwrap();
        let before = batch_loss(&t.net, &corpus, &batch, BnMode::Train).unwrap();
        assert_eq!(t.step(&corpus).unwrap(), before);
        let after = batch_loss(&t.net, &corpus, &batch, BnMode::Train).unwrap();
        wins += usize::from(after < before);
    }
    assert!(wins >= 18, "{wins}/20");
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let corpus = corpus();
    let run = || {
        let mut t = trainer(5, 2e-4, 2);
        t.config.steps = 4;
        t.train(&corpus, |_| ()).unwrap();
        t
    };
    let (a, b) = (run(), run());
    let losses = |t: &Trainer| t.log.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.net.params, b.net.params);
    assert_eq!(a.checkpoint().unwrap().encode(), b.checkpoint().unwrap().encode());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let corpus = corpus();
    let mut t = trainer(6, 2e-4, 2);
    t.config.steps = 3;
    t.train(&corpus, |_| ()).unwrap();
    let bytes = t.checkpoint().unwrap().encode();
    let mut resumed = Trainer::resume(&Checkpoint::decode(&bytes).unwrap(), t.config.clone()).unwrap();
    assert_eq!(resumed.steps_done(), 3);
    for _ in 0..2 {
        let (a, b) = (t.step(&corpus).unwrap(), resumed.step(&corpus).unwrap());
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(t.net.params, resumed.net.params);
}

#[test]
fn checkpoint_files_are_stable_and_complete() {
    let t = trainer(1, 2e-4, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.emd");
    model_checkpoint(&t.net).unwrap().save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    loaded.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(loaded.with_prefix("param.").count(), t.net.params.len());
    let net = restore_model(&loaded).unwrap();
    assert_eq!(net.params, t.net.params);
    assert_eq!(net.buffers, t.net.buffers);
}

#[test]
fn corrupted_length_field_reports_its_position() {
    let t = trainer(1, 2e-4, 2);
    let mut bytes = model_checkpoint(&t.net).unwrap().encode();
    // first entry's name length sits right after the 10-byte header
    bytes[10] = 0xff;
    bytes[11] = 0xff;
    match Checkpoint::decode(&bytes) {
        Err(Error::Format { offset, .. }) => assert!(offset >= 10, "{offset}"),
        other => panic!("expected a format error, got {other:?}"),
    }
    let mut missing = model_checkpoint(&t.net).unwrap();
    let mut partial = Checkpoint::new();
    for (name, tensor) in missing.iter().skip(1) {
        partial.insert(name, tensor.clone()).unwrap();
    }
    missing = partial;
    assert!(restore_model(&missing).is_err());
}

#[test]
fn non_finite_loss_names_the_batch() {
    let corpus = corpus();
    let mut t = trainer(2, 2e-4, 2);
    t.net.params.get_mut("decoder.out.b").unwrap().data_mut()[0] = f64::NAN;
    let batch = t.next_batch(&corpus).unwrap();
    match t.step(&corpus) {
        Err(Error::NonFinite { step, targets, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(targets, batch.iter().map(|b| (b.style, b.content)).collect::<Vec<_>>());
        }
        other => panic!("expected a numeric failure, got {other:?}"),
    }
}

#[test]
fn metrics_of_a_target_against_itself_are_zero() {
    let img = corpus().image(1, 1).unwrap();
    assert_eq!(
        (l1_metric(&img, &img).unwrap(), rmse_metric(&img, &img).unwrap(), pdar_metric(&img, &img).unwrap()),
        (0.0, 0.0, 0.0)
    );
}
