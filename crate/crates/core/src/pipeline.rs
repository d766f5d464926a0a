//! End-to-end orchestration of the four-step process: train the Bag Model,
//! extract saliency-guided patches, train the Instance Model, and evaluate
//! bags with the rank-weighted combination of instance probabilities plus
//! saliency-derived localization.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::localization::{iou, saliency_to_bbox, BBox};
use crate::mil::{compute_metrics, weighted_evaluation, Bag, Dataset, PredictionReport};
use crate::model::TinyCnn;
use crate::optim::SgdState;
use crate::patch::{instances_for_bag, Instance, PatchSpec};
use crate::saliency::{to_saliency, SaliencyMap};
use crate::tensor::Tensor;

/// A trained model plus its per-epoch mean training loss.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
}

fn train_loop(
    model: &mut TinyCnn,
    samples: &[(&Tensor, u8)],
    config: &Config,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut sgd = SgdState::new(config.learning_rate)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            for &idx in batch {
                let (image, label) = samples[idx];
                let mut tape = crate::graph::Tape::new();
                let pass = model.forward(&mut tape, image, true, rng)?;
                let loss = tape.bce_loss(pass.probability, label as f64)?;
                total_loss += tape.value(loss).item()?;
                tape.backward(loss)?;
                model.accumulate_grads(&tape, &pass)?;
            }
            model.scale_grads(1.0 / batch.len() as f64);
            sgd.step(model.params_mut())?;
        }
        let mean = total_loss / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::numeric(format!(
                "training diverged at epoch {epoch}: loss {mean}"
            )));
        }
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

/// Step 1: the Bag Model, trained on whole images.
pub fn train_bag(config: &Config, data: &Dataset) -> Result<TrainOutcome> {
    if data.is_empty() || !data.has_both_classes() {
        return Err(Error::validation(
            "bag training needs a dataset with both classes present",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = TinyCnn::init(config.model_spec(), &mut rng)?;
    let samples: Vec<(&Tensor, u8)> = data.bags.iter().map(|b| (&b.image, b.label)).collect();
    let epoch_losses = train_loop(&mut model, &samples, config, &mut rng)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(&model, config.epochs, config.seed, epoch_losses.clone()),
        epoch_losses,
    })
}

/// Step 2: saliency-guided patches from every bag, exactly m per bag in bag
/// order then rank order.
pub fn extract_patches(
    checkpoint: &Checkpoint,
    data: &Dataset,
    config: &Config,
) -> Result<Vec<Instance>> {
    checkpoint.check_compatible(&config.model_spec())?;
    let model = checkpoint.to_model(config.dropout_rate)?;
    let spec = config.patch_spec()?;
    let mut out = Vec::with_capacity(data.len() * spec.m);
    for bag in &data.bags {
        out.extend(bag_instances(&model, bag, &spec)?.1);
    }
    Ok(out)
}

/// Saliency map and ranked instances for one bag; the shared path between
/// patch extraction and evaluation.
fn bag_instances(model: &TinyCnn, bag: &Bag, spec: &PatchSpec) -> Result<(SaliencyMap, Vec<Instance>)> {
    let map = model
        .saliency(&bag.image)
        .map_err(|e| Error::state(format!("saliency failed on bag {}: {e}", bag.id)))?;
    let instances = instances_for_bag(bag, &map, spec)?;
    Ok((map, instances))
}

/// Step 3: the Instance Model, trained on patches. With `fine_tune` the
/// weights start bit-equal to the Bag checkpoint, otherwise fresh from the
/// seed.
pub fn train_instance(
    config: &Config,
    instances: &[Instance],
    bag_checkpoint: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    if instances.is_empty()
        || !instances.iter().any(|i| i.label == 0)
        || !instances.iter().any(|i| i.label == 1)
    {
        return Err(Error::validation(
            "instance training needs patches with both classes present",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = match (config.fine_tune, bag_checkpoint) {
        (true, Some(ckpt)) => {
            ckpt.check_compatible(&config.model_spec())?;
            ckpt.to_model(config.dropout_rate)?
        }
        (true, None) => {
            return Err(Error::config(
                "fine_tune is enabled but no bag checkpoint was supplied",
            ))
        }
        (false, _) => TinyCnn::init(config.model_spec(), &mut rng)?,
    };
    let samples: Vec<(&Tensor, u8)> = instances.iter().map(|i| (&i.pixels, i.label)).collect();
    let epoch_losses = train_loop(&mut model, &samples, config, &mut rng)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(&model, config.epochs, config.seed, epoch_losses.clone()),
        epoch_losses,
    })
}

/// One localized prediction in the box report.
#[derive(Clone, Debug)]
pub struct BoxRow {
    pub bag_id: String,
    pub bbox: BBox,
    /// Best IoU against the bag's ground-truth boxes; 0 when there are none.
    pub iou_vs_truth: f64,
}

/// Per-stage metrics of one evaluation run. Wall-clock timings are carried
/// for display but are not part of the persisted (deterministic) report
/// files.
pub struct RunReport {
    pub bag: PredictionReport,
    pub weighted: PredictionReport,
    pub instance_accuracy: f64,
    pub instance_f1: f64,
    pub boxes: Vec<BoxRow>,
    /// Fraction of bags with ground-truth boxes whose predicted box overlaps
    /// any of them.
    pub hit_rate: f64,
    /// Mean of the best IoU per bag with ground truth.
    pub mean_best_iou: f64,
    /// Bags that had ground-truth boxes.
    pub localized_bags: usize,
    pub timings: Vec<(String, f64)>,
}

impl RunReport {
    pub fn summary(&self) -> String {
        format!(
            "bag: {}\ninstance: accuracy={},f1={}\nweighted: {}\nlocalization: hit_rate={},mean_best_iou={},bags_with_truth={}\n",
            self.bag.summary(),
            self.instance_accuracy,
            self.instance_f1,
            self.weighted.summary(),
            self.hit_rate,
            self.mean_best_iou,
            self.localized_bags,
        )
    }

    pub fn boxes_csv(&self) -> String {
        let mut out = String::from("bag_id,row0,col0,row1,col1,iou_vs_truth\n");
        for row in &self.boxes {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.bag_id, row.bbox.row0, row.bbox.col0, row.bbox.row1, row.bbox.col1, row.iou_vs_truth
            ));
        }
        out
    }

    /// Writes the deterministic report files: weighted-evaluation rows,
    /// bag-model rows, predicted boxes, and the summary.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.weighted.to_csv())?;
        std::fs::write(dir.join("bag_report.csv"), self.bag.to_csv())?;
        std::fs::write(dir.join("boxes.csv"), self.boxes_csv())?;
        std::fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }
}

/// Step 4: weighted evaluation of every bag plus localization scoring.
pub fn evaluate(
    bag_checkpoint: &Checkpoint,
    instance_checkpoint: &Checkpoint,
    data: &Dataset,
    truth_boxes: &HashMap<String, Vec<BBox>>,
    config: &Config,
) -> Result<RunReport> {
    if data.is_empty() {
        return Err(Error::validation("evaluation needs a non-empty dataset"));
    }
    bag_checkpoint.check_compatible(&config.model_spec())?;
    instance_checkpoint.check_compatible(&config.model_spec())?;
    let bag_model = bag_checkpoint.to_model(config.dropout_rate)?;
    let instance_model = instance_checkpoint.to_model(config.dropout_rate)?;
    let spec = config.patch_spec()?;

    let start = std::time::Instant::now();
    let mut bag_scored = Vec::with_capacity(data.len());
    let mut weighted_scored = Vec::with_capacity(data.len());
    let mut instance_pairs = Vec::with_capacity(data.len() * spec.m);
    let mut boxes = Vec::with_capacity(data.len());
    let mut hits = 0usize;
    let mut iou_sum = 0.0;
    let mut localized = 0usize;

    for bag in &data.bags {
        let (h, w) = (bag.image.shape()[1], bag.image.shape()[2]);
        let (bag_prob, act) = bag_model.analyze(&bag.image)?;
        bag_scored.push((bag.id.clone(), bag_prob, bag.label));

        let map = to_saliency(&act, (h, w))?;
        let instances = instances_for_bag(bag, &map, &spec)?;
        let mut probs = Vec::with_capacity(instances.len());
        for inst in &instances {
            let p = instance_model.predict(&inst.pixels)?;
            instance_pairs.push((p, inst.label));
            probs.push(p);
        }
        let p_bag = weighted_evaluation(&probs)?;
        weighted_scored.push((bag.id.clone(), p_bag, bag.label));

        let localized_box = saliency_to_bbox(&map, config.bbox_threshold_fraction)?;
        let truth = truth_boxes.get(&bag.id).map(Vec::as_slice).unwrap_or(&[]);
        let best_iou = truth
            .iter()
            .map(|t| iou(&localized_box.bbox, t))
            .fold(0.0f64, f64::max);
        if !truth.is_empty() {
            localized += 1;
            iou_sum += best_iou;
            if best_iou > 0.0 {
                hits += 1;
            }
        }
        boxes.push(BoxRow {
            bag_id: bag.id.clone(),
            bbox: localized_box.bbox,
            iou_vs_truth: best_iou,
        });
    }

    let bag = PredictionReport::from_scored(bag_scored, config.decision_threshold)?;
    let weighted = PredictionReport::from_scored(weighted_scored, config.decision_threshold)?;
    let (instance_accuracy, instance_f1) =
        compute_metrics(&instance_pairs, config.decision_threshold)?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(RunReport {
        bag,
        weighted,
        instance_accuracy,
        instance_f1,
        boxes,
        hit_rate: if localized == 0 { 0.0 } else { hits as f64 / localized as f64 },
        mean_best_iou: if localized == 0 { 0.0 } else { iou_sum / localized as f64 },
        localized_bags: localized,
        timings: vec![("evaluate".to_string(), elapsed)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil::Split;
    use crate::synthetic::{gen_synthetic, SyntheticSpec};

    fn small_config() -> Config {
        Config {
            image_size: 32,
            patch_size: 12,
            suppression_window: 12,
            instances_per_bag: 3,
            conv_channels: [4, 6, 6],
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.05,
            seed: 11,
            train_count: 24,
            test_count: 8,
            ..Config::default()
        }
    }

    fn small_data(config: &Config) -> (Dataset, Dataset, HashMap<String, Vec<BBox>>) {
        let spec = SyntheticSpec {
            train: config.train_count,
            validation: 0,
            test: config.test_count,
            image_size: config.image_size,
            seed: config.seed,
            ..SyntheticSpec::default()
        };
        let mut splits = gen_synthetic(&spec).unwrap();
        let test_images = splits.pop().unwrap().1;
        splits.pop();
        let train_images = splits.pop().unwrap().1;
        let mut truth = HashMap::new();
        let to_bags = |images: &[crate::synthetic::GeneratedImage], split| {
            Dataset::new(
                images
                    .iter()
                    .map(|g| Bag::new(g.id.clone(), g.pixels.clone(), g.label).unwrap())
                    .collect(),
                split,
            )
            .unwrap()
        };
        for g in &test_images {
            if !g.boxes.is_empty() {
                truth.insert(g.id.clone(), g.boxes.clone());
            }
        }
        (
            to_bags(&train_images, Split::Train),
            to_bags(&test_images, Split::Test),
            truth,
        )
    }

    #[test]
    fn loss_decreases_over_two_epochs() {
        let config = small_config();
        let (train, _, _) = small_data(&config);
        let outcome = train_bag(&config, &train).unwrap();
        assert_eq!(outcome.epoch_losses.len(), 2);
        assert!(
            outcome.epoch_losses[1] < outcome.epoch_losses[0],
            "losses {:?}",
            outcome.epoch_losses
        );
    }

    #[test]
    fn training_is_deterministic() {
        let config = small_config();
        let (train, _, _) = small_data(&config);
        let a = train_bag(&config, &train).unwrap();
        let b = train_bag(&config, &train).unwrap();
        assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
    }

    #[test]
    fn single_class_dataset_rejected() {
        let config = small_config();
        let (train, _, _) = small_data(&config);
        let positives: Vec<Bag> = train
            .bags
            .iter()
            .filter(|b| b.label == 1)
            .cloned()
            .collect();
        let single = Dataset::new(positives, Split::Train).unwrap();
        assert!(train_bag(&config, &single).is_err());
    }

    #[test]
    fn patches_cardinality_and_shape() {
        let config = small_config();
        let (train, _, _) = small_data(&config);
        let outcome = train_bag(&config, &train).unwrap();
        let instances = extract_patches(&outcome.checkpoint, &train, &config).unwrap();
        assert_eq!(instances.len(), train.len() * config.instances_per_bag);
        for inst in &instances {
            assert_eq!(
                inst.pixels.shape(),
                &[1, config.patch_size, config.patch_size]
            );
        }
    }

    #[test]
    fn fine_tune_starts_from_bag_weights() {
        let mut config = small_config();
        let (train, _, _) = small_data(&config);
        let bag = train_bag(&config, &train).unwrap();
        let instances = extract_patches(&bag.checkpoint, &train, &config).unwrap();

        config.fine_tune = true;
        config.epochs = 1;
        // a zero-effect run still changes weights, so compare fresh inits
        let fresh_model = bag.checkpoint.to_model(0.0).unwrap();
        let ft_model = bag.checkpoint.to_model(0.0).unwrap();
        for ((_, a), (_, b)) in fresh_model.params().iter().zip(ft_model.params()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(train_instance(&config, &instances, None).is_err());
        let ft = train_instance(&config, &instances, Some(&bag.checkpoint)).unwrap();
        assert_eq!(ft.epoch_losses.len(), 1);

        config.fine_tune = false;
        let fresh = train_instance(&config, &instances, None).unwrap();
        assert_ne!(fresh.checkpoint.encode(), ft.checkpoint.encode());
    }

    #[test]
    fn evaluate_produces_consistent_report() {
        let config = small_config();
        let (train, test, truth) = small_data(&config);
        let bag = train_bag(&config, &train).unwrap();
        let instances = extract_patches(&bag.checkpoint, &train, &config).unwrap();
        let inst = train_instance(&config, &instances, None).unwrap();
        let report = evaluate(&bag.checkpoint, &inst.checkpoint, &test, &truth, &config).unwrap();

        assert_eq!(report.bag.rows.len(), test.len());
        assert_eq!(report.weighted.rows.len(), test.len());
        assert_eq!(report.boxes.len(), test.len());
        assert_eq!(report.localized_bags, truth.len());
        assert!((0.0..=1.0).contains(&report.hit_rate));
        assert!((0.0..=1.0).contains(&report.mean_best_iou));
        let summary = report.summary();
        assert!(summary.contains("weighted: accuracy="));

        // byte-identical instances between evaluate and extract_patches
        let eval_instances = extract_patches(&bag.checkpoint, &test, &config).unwrap();
        let again = extract_patches(&bag.checkpoint, &test, &config).unwrap();
        for (a, b) in eval_instances.iter().zip(&again) {
            assert_eq!(a.pixels.data(), b.pixels.data());
            assert_eq!(a.center, b.center);
        }
    }

    #[test]
    fn constant_instance_probability_matches_single_patch_decision() {
        // Eq-style constant case: if all m probabilities are equal, the
        // weighted evaluation equals that constant.
        let probs = [0.73; 5];
        assert!((weighted_evaluation(&probs).unwrap() - 0.73).abs() < 1e-12);
    }
}
