// compare pipeline vs minimal-loop params right after the first step
use ctgrade::classifier::{augment_two_views, build_model, ClassifierConfig};
use ctgrade::dataset::{synthesize_dataset, SynthConfig};
use ctgrade::losses::{class_weights_from_counts, weighted_ce_grad, NUM_CLASSES};
use ctgrade::nn::optim::Adam;
use ctgrade::rng;
use ctgrade::training::{train_classifier, ClfDataset, MaskSource, TrainConfig, TrainMode};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize_dataset(&SynthConfig {
        shape: (8, 16, 16),
        train_counts: [3, 3, 3, 3],
        val_counts: [1, 1, 1, 1],
        noise: 0.04,
        seed: 11,
        ..SynthConfig::new(dir.path())
    })
    .unwrap();
    let train =
        ClfDataset::load(&ds, "train", TrainMode::Plain, &MaskSource::Groundtruth, None).unwrap();
    let val =
        ClfDataset::load(&ds, "val", TrainMode::Plain, &MaskSource::Groundtruth, None).unwrap();
    let clf_cfg = ClassifierConfig {
        in_channels: 1,
        widths: vec![8, 16, 32, 64],
        d_p: 16,
        norm_groups: 4,
        seed: 2,
        crop_scale: (1.0, 1.0),
        contrast_jitter: 0.0,
        ..Default::default()
    };
    let mut cfg = TrainConfig::clf_default();
    cfg.epochs = 1;
    cfg.batch_size = 12; // one step per epoch
    cfg.use_contrastive = false;
    cfg.use_mixup = false;
    cfg.adaptive_weights = false;
    cfg.weight_decay = 0.0;
    cfg.seed = 12;
    cfg.workers = 1;
    let out = train_classifier(&cfg, &clf_cfg, TrainMode::Plain, &train, &val, None, None).unwrap();

    // minimal loop, one step
    let model = build_model(&clf_cfg).unwrap();
    let mut params = model.params.clone();
    let weights = class_weights_from_counts(train.class_counts).unwrap();
    let mut adam = Adam::new(params.len());
    let mut erng = rng::stream(cfg.seed, "clf-epoch", 0);
    use rand::seq::SliceRandom;
    use rand::Rng as _;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut erng);
    let batch: Vec<usize> = order[..12].to_vec();
    let step_seed: u64 = erng.gen();
    let mut srng = rng::stream(step_seed, "clf-views", 0);
    let mut views: Vec<(Vec<f32>, usize)> = Vec::new();
    for &bi in &batch {
        let item = &train.items[bi];
        let mut arng = rng::stream(srng.gen::<u64>(), "augment", 0);
        let (a, b) = augment_two_views(&item.x, 1, train.dims, &clf_cfg, &mut arng);
        views.push((a, item.label));
        views.push((b, item.label));
    }
    let traces: Vec<_> =
        views.iter().map(|(x, _)| model.forward(&params, x, train.dims).unwrap()).collect();
    let logits: Vec<[f64; NUM_CLASSES]> = traces
        .iter()
        .map(|t| {
            let mut l = [0.0f64; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                l[c] = t.logits[c] as f64;
            }
            l
        })
        .collect();
    let labels: Vec<usize> = views.iter().map(|(_, y)| *y).collect();
    let (loss, dlogits) = weighted_ce_grad(&logits, &labels, &weights).unwrap();
    println!("pipeline step0 loss {} vs minimal {}", out.loss_trace[0], loss);
    let mut grads = vec![0.0f32; params.len()];
    let zero_proj = vec![0.0f32; clf_cfg.d_p];
    for (tr, dl) in traces.iter().zip(&dlogits) {
        let mut dlf = [0.0f32; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            dlf[c] = dl[c] as f32;
        }
        model.backward(&params, tr, &zero_proj, &dlf, &mut grads);
    }
    adam.step(&mut params, &grads, cfg.base_lr as f32, cfg.weight_decay);
    let diff = params
        .iter()
        .zip(&out.model.params)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("max param diff after one step: {diff}");
}
