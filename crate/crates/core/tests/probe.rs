// temporary probe
use milguided::config::Config;
use milguided::graph::Tape;
use milguided::mil::{Bag, Dataset, Split};
use milguided::model::TinyCnn;
use milguided::pipeline::train_bag;
use milguided::synthetic::{gen_synthetic, SyntheticSpec};
use milguided::checkpoint::Checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn blob_data(n: usize, test: usize, size: usize, seed: u64) -> (Dataset, Dataset) {
    let spec = SyntheticSpec { train: n, validation: 0, test, image_size: size, seed, ..SyntheticSpec::default() };
    let splits = gen_synthetic(&spec).unwrap();
    let mk = |imgs: &[milguided::synthetic::GeneratedImage], split| Dataset::new(imgs.iter().map(|g| Bag::new(g.id.clone(), g.pixels.clone(), g.label).unwrap()).collect(), split).unwrap();
    (mk(&splits[0].1, Split::Train), mk(&splits[2].1, Split::Test))
}

fn acc(ckpt: &Checkpoint, data: &Dataset) -> f64 {
    let model = ckpt.to_model(0.0).unwrap();
    let mut right = 0;
    for b in &data.bags {
        if u8::from(model.predict(&b.image).unwrap() >= 0.5) == b.label { right += 1; }
    }
    right as f64 / data.len() as f64
}

#[test]
fn probe_timing() {
    let config = Config { ..Config::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = TinyCnn::init(config.model_spec(), &mut rng).unwrap();
    let (train, _) = blob_data(4, 0, 96, 1);
    let img = &train.bags[0].image;
    let t0 = std::time::Instant::now();
    for _ in 0..50 { let mut tape = Tape::new(); model.forward(&mut tape, img, true, &mut rng).unwrap(); }
    let fwd = t0.elapsed().as_secs_f64() / 50.0;
    let t0 = std::time::Instant::now();
    for _ in 0..50 {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, img, true, &mut rng).unwrap();
        let loss = tape.bce_loss(pass.probability, 1.0).unwrap();
        tape.backward(loss).unwrap();
        model.accumulate_grads(&tape, &pass).unwrap();
    }
    let both = t0.elapsed().as_secs_f64() / 50.0;
    println!("timing fwd={:.2}ms fwd+bwd={:.2}ms", fwd*1000.0, both*1000.0);
}

#[test]
fn probe_lr_sweep() {
    for lr in [0.2, 0.5, 1.0] {
        let config = Config { epochs: 30, learning_rate: lr, seed: 11, ..Config::default() };
        let (train, test) = blob_data(384, 96, 96, 11);
        let out = train_bag(&config, &train).unwrap();
        println!("sweep lr={lr}: train={:.3} test={:.3} losses={:?}",
            acc(&out.checkpoint, &train), acc(&out.checkpoint, &test),
            out.epoch_losses.iter().step_by(4).map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
    }
}
