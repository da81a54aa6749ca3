mod common;

use common::{random_studies, tiny_config, WORDS};
use itemclip::batching::{assemble_batch, Study};
use itemclip::encoders::Vocabulary;
use itemclip::imageio::Image;
use itemclip::numerics::Graph;
use itemclip::objectives::loss_total;
use itemclip::trainer::{Checkpoint, TrainConfig, Trainer};
use itemclip::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 2,
        batch_size: 4,
        warmup_steps: 2,
        lr: 1e-2,
        model: tiny_config(),
        ..Default::default()
    }
}

fn trained(seed: u64, studies: &[Study]) -> Trainer {
    let mut t = Trainer::new(tiny_train_config(seed), Vocabulary::from_words(WORDS)).unwrap();
    let mut log = Vec::new();
    t.run(studies, &mut log, None).unwrap();
    t
}

#[test]
fn identical_runs_give_identical_checkpoint_bytes() {
    let studies = random_studies(12, &[3], 5);
    let a = trained(9, &studies).checkpoint().to_bytes().unwrap();
    let b = trained(9, &studies).checkpoint().to_bytes().unwrap();
    assert_eq!(a, b);
    let c = trained(10, &studies).checkpoint().to_bytes().unwrap();
    assert_ne!(a, c);
}

#[test]
fn run_logs_one_line_per_step() {
    let studies = random_studies(12, &[], 6);
    let mut t = Trainer::new(tiny_train_config(0), Vocabulary::from_words(WORDS)).unwrap();
    let mut log = Vec::new();
    t.run(&studies, &mut log, None).unwrap();
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // 12 studies, 10% held out: 11 train, batches 4+4+3 over 2 epochs.
    assert_eq!(t.history.len(), 6);
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0].split('\t').count(), 7);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 7));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let studies = random_studies(10, &[0], 7);
    let t = trained(3, &studies);
    let ck = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.to_bytes().unwrap(), ck.to_bytes().unwrap());

    let (model, adam) = loaded.restore().unwrap();
    assert_eq!(adam.step, t.adam.step);
    assert_eq!(adam.m, t.adam.m);

    let refs: Vec<&Study> = studies.iter().collect();
    let idx = [0, 1, 2, 3];
    let images: Vec<&Image> = idx.iter().map(|&i| &studies[i].image).collect();
    let loss = |m: &itemclip::model::Model| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = assemble_batch(&refs, &idx, &m.vocab, 7, m.cfg.encoder.max_len, &mut rng).unwrap();
        let mut g = Graph::new();
        let enc = m.encode_batch(&mut g, &batch, &images).unwrap();
        loss_total(&mut g, m, &enc, &batch, &t.cfg.loss, &mut rng).unwrap().breakdown.total
    };
    assert_eq!(loss(&model).to_bits(), loss(&t.model).to_bits());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let studies = random_studies(6, &[], 8);
    let bytes = trained(1, &studies).checkpoint().to_bytes().unwrap();
    for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(Checkpoint::from_bytes(&version).unwrap_err().to_string().contains("version"));
    let mut trailing = bytes;
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).unwrap_err().to_string().contains("trailing"));
}

#[test]
fn training_reduces_loss_on_a_small_set() {
    let studies = random_studies(16, &[2, 9], 11);
    let mut cfg = tiny_train_config(4);
    cfg.epochs = 40;
    cfg.holdout_frac = 0.0;
    let mut t = Trainer::new(cfg, Vocabulary::from_words(WORDS)).unwrap();
    t.run(&studies, &mut Vec::new(), None).unwrap();
    let (first, last) = itemclip::trainer::smoothed_ends(&t.history, 10).unwrap();
    assert!(last < 0.8 * first, "loss {first} -> {last}");
}

#[test]
fn too_few_training_studies_is_an_error() {
    let studies = random_studies(1, &[], 1);
    let mut t = Trainer::new(tiny_train_config(0), Vocabulary::from_words(WORDS)).unwrap();
    assert!(matches!(t.run(&studies, &mut Vec::new(), None), Err(Error::Precondition(_))));
}
