use rainforge::checkpoint::{Checkpoint, MAGIC};
use rainforge::config::RunConfig;
use rainforge::model::ModelConfig;
use rainforge::train::Trainer;

/// A small, fast configuration.
fn small() -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(5);
    cfg.model = ModelConfig { base_channels: 4, mab_per_level: 1, ..cfg.model };
    cfg.train.iterations = 40;
    cfg.train.val_every = 20;
    cfg
}

fn bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    ckpt.write(&mut out).unwrap();
    out
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut t = Trainer::new(small()).unwrap();
    for _ in 0..3 {
        t.step().unwrap();
    }
    let ckpt = t.checkpoint();
    let raw = bytes(&ckpt);
    let back = Checkpoint::read(&mut raw.as_slice()).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(bytes(&back), raw);
    assert_eq!(back.model().unwrap().state(), t.model.state());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), raw);
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let t = Trainer::new(small()).unwrap();
    let raw = bytes(&t.checkpoint());
    assert_eq!(&raw[..4], MAGIC);

    let mut bad = raw.clone();
    bad[0] = b'X';
    assert!(Checkpoint::read(&mut bad.as_slice()).unwrap_err().to_string().contains("magic"));
    assert!(Checkpoint::read(&mut &raw[..raw.len() / 2]).is_err());

    // A checkpoint whose configuration no longer matches its tensors.
    let mut ckpt = t.checkpoint();
    ckpt.config.model.base_channels = 8;
    let err = ckpt.model().unwrap_err().to_string();
    assert!(err.contains("has shape") || err.contains("missing tensor"), "{err}");
    let mut ckpt = t.checkpoint();
    ckpt.params.pop();
    let err = ckpt.model().unwrap_err().to_string();
    assert!(err.contains("missing tensor"), "{err}");
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let mut straight = Trainer::new(small()).unwrap();
    let full: Vec<f64> = (0..12).map(|_| straight.step().unwrap().loss).collect();

    let mut first = Trainer::new(small()).unwrap();
    for _ in 0..5 {
        first.step().unwrap();
    }
    let raw = bytes(&first.checkpoint());
    drop(first);
    let mut resumed = Trainer::resume(&Checkpoint::read(&mut raw.as_slice()).unwrap()).unwrap();
    let tail: Vec<f64> = (0..7).map(|_| resumed.step().unwrap().loss).collect();

    assert_eq!(tail.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), full[5..].iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(bytes(&resumed.checkpoint()), bytes(&straight.checkpoint()));
}

#[test]
fn contrastive_weight_only_changes_the_loss_at_iteration_zero() {
    let mut with = small();
    with.model.lambda = 0.1;
    let mut without = small();
    without.model.lambda = 0.0;
    let a = Trainer::new(with).unwrap();
    let b = Trainer::new(without).unwrap();
    assert_eq!(a.model.state(), b.model.state());
    let (la, pa, cra) = a.peek_loss().unwrap();
    let (lb, pb, crb) = b.peek_loss().unwrap();
    assert_eq!(pa, pb);
    assert_eq!(crb, None);
    let cr = cra.unwrap();
    assert!(cr > 0.0);
    assert!(((la - lb) - 0.1 * cr).abs() <= 1e-4 * la.abs().max(1.0), "{la} - {lb} vs {}", 0.1 * cr);
}

#[test]
fn loss_decreases_over_200_iterations() {
    let mut cfg = RunConfig::default().with_seed(1);
    cfg.train.iterations = 200;
    let mut t = Trainer::new(cfg).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| t.step().unwrap().loss).collect();
    let first = losses[..20].iter().sum::<f64>() / 20.0;
    let last = losses[180..].iter().sum::<f64>() / 20.0;
    // The loss is a negated PSNR, so it is negative and falls as quality rises.
    assert!(last <= 0.8 * first, "first {first}, last {last}");
    assert!(last < first - 1.0, "first {first}, last {last}");
}

#[test]
fn run_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(small()).unwrap();
    let mut log = Vec::new();
    let records = t.run(Some(dir.path()), &mut log).unwrap();
    assert_eq!(records.len(), 40);
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iter,loss,lr,val_psnr,val_ssim");
    assert_eq!(lines.len(), 41);
    assert_eq!(lines[20].split(',').filter(|f| !f.is_empty()).count(), 5);
    assert_eq!(lines[1].split(',').filter(|f| !f.is_empty()).count(), 3);
    let latest = Checkpoint::load(&dir.path().join("latest.ckpt")).unwrap();
    assert_eq!(latest.state.iteration, 40);
    assert!(dir.path().join("best.ckpt").exists());
}

#[test]
fn non_finite_inputs_abort_with_the_iteration() {
    let mut t = Trainer::new(small()).unwrap();
    t.step().unwrap();
    t.model.out_conv.weight.value.data_mut()[0] = f32::NAN;
    let err = t.step().unwrap_err().to_string();
    assert!(err.contains("iteration 1"), "{err}");
}
