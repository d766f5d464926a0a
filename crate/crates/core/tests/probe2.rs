// temporary probe: bias-sparsity experiment via direct model surgery
use milguided::config::Config;
use milguided::mil::{Bag, Dataset, Split};
use milguided::pipeline::train_bag;
use milguided::synthetic::{gen_synthetic, SyntheticSpec};
use milguided::checkpoint::Checkpoint;

fn blob_data(n: usize, test: usize, size: usize, seed: u64, contrast: f64, blobs_max: usize) -> (Dataset, Dataset) {
    let spec = SyntheticSpec { train: n, validation: 0, test, image_size: size, seed, contrast, blobs_max, ..SyntheticSpec::default() };
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
fn probe_variants() {
    // batch and lr variants on the default task
    for (bs, lr, epochs) in [(16usize, 0.5, 30usize), (64, 1.0, 40), (4, 0.1, 30)] {
        let config = Config { epochs, learning_rate: lr, batch_size: bs, seed: 11, ..Config::default() };
        let (train, test) = blob_data(256, 64, 96, 11, 0.35, 3);
        let out = train_bag(&config, &train).unwrap();
        println!("var bs={bs} lr={lr} ep={epochs}: train={:.3} test={:.3} last_loss={:.4}",
            acc(&out.checkpoint, &train), acc(&out.checkpoint, &test), out.epoch_losses.last().unwrap());
    }
}
