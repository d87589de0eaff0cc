use censorseq_core::image::*;
use censorseq_core::nn::tensor::ParamVisitor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[test]
fn probe_logits() {
    // build two synthetic image classes directly: payload band in middle,
    // class 1 has a longer band (like the corpus)
    let mk = |len: usize, seed: u64| -> GrayImage {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        use rand::Rng;
        let mut pixels = vec![0u8; CELLS];
        let front = (CELLS - len) / 2;
        for i in 0..len {
            pixels[front + i] = rng.gen_range(20..160);
        }
        GrayImage { pixels }
    };
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut model = DenseBlockModel::new(CnnConfig::desk_default(), &mut rng);

    for (name, img) in [
        ("censored_a", mk(288, 1)),
        ("censored_b", mk(288, 2)),
        ("uncensored_a", mk(200, 3)),
        ("uncensored_b", mk(196, 4)),
    ] {
        let logit = model.logit(&img).unwrap();
        println!("init logit {name}: {logit:+.6}");
    }

    // measure gradient magnitude for one example
    model.zero_grads();
    let imgs = [(mk(288, 10), true), (mk(200, 11), false)];
    let mut gnorm = 0.0;
    let _ = {
        // use train path via train_image_classifier with 1 epoch tiny
        let cfg = ImgTrainConfig {
            seed: 1, max_epochs: 60, batch_size: 2, sample_fraction: 1.0,
            lr: censorseq_core::nn::schedule::LrSchedule::new(0.05, 0.005, 60),
            patience: 100, min_delta: 1e-9,
        };
        let train: Vec<(GrayImage, bool)> = (0..40).map(|i| {
            let len = if i % 2 == 0 { 288 } else { 196 + (i % 7) };
            (mk(len, 100 + i as u64), i % 2 == 0)
        }).collect();
        let out = train_image_classifier(&mut model, &train, &train[..10].to_vec(), &cfg).unwrap();
        for r in out.history.iter().step_by(10) {
            println!("epoch {}: val loss {:.5} acc {:.3}", r.epoch, r.val_loss, r.val_accuracy);
        }
        out
    };
    model.for_each_param(&mut |name, p| {
        let n: f64 = p.grad.data().iter().map(|g| g * g).sum();
        gnorm += n;
        if name.starts_with("head") || name.starts_with("stem.b") {
            println!("grad norm {name}: {:.3e}", n.sqrt());
        }
    });
    println!("total grad norm: {:.3e}", gnorm.sqrt());
    let _ = imgs;
}

#[test]
fn desk_path_gradcheck() {
    use censorseq_core::nn::tensor::{Param, ParamVisitor};
    struct P { model: DenseBlockModel, img: GrayImage }
    impl ParamVisitor for P {
        fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            self.model.for_each_param(f);
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let cfg = CnnConfig {
        input_hw: 16, stem_channels: 3, stem_kernel: 3, stem_stride: 1, stem_pool: 2,
        num_blocks: 2, layers_per_block: 2, growth: 2, transition_pool: 2,
    };
    let model = DenseBlockModel::new(cfg, &mut rng);
    use rand::Rng;
    let img = GrayImage { pixels: (0..256).map(|_| rng.gen()).collect() };
    let mut probe = P { model, img };
    let report = censorseq_core::nn::gradcheck::finite_difference_check(
        &mut probe,
        |p| { let img = p.img.clone(); p.model.train_example(&img, 1.0).unwrap() },
        1e-5,
        1e-4,
    );
    println!("desk-path gradcheck: max rel err {} at {:?}", report.max_rel_err, report.worst);
    assert!(report.pass);
}
