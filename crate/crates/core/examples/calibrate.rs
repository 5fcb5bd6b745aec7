// Scratch calibration for the desk-scale forgetting analog.

use vitkd_core::data::synth_two_domain;
use vitkd_core::losses::{DistillConfig, Strategy};
use vitkd_core::teachers::{TeacherHandle, TeacherKind};
use vitkd_core::trainer::{adapt, evaluate, train_supervised, TrainConfig};
use vitkd_core::vit::{TinyViT, ViTConfig};
use vitkd_core::SplitSpec;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let src_epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(30);
    let adapt_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);

    let mut rows: Vec<(u64, [f64; 8])> = Vec::new();
    for seed in [1u64, 2, 3] {
        let t0 = std::time::Instant::now();
        let (src, tgt) = synth_two_domain(10, 8, 32, seed).unwrap();
        let split = SplitSpec { n_train: 6, n_test: 2, repeats: 1, seed };
        let (src_train, src_test) = src.split_per_subject(&split).unwrap().pop().unwrap();
        let (tgt_train, tgt_test) = tgt.split_per_subject(&split).unwrap().pop().unwrap();

        let cfg = ViTConfig {
            image_size: 32,
            patch_size: 8,
            hidden_size: 32,
            intermediate_size: 64,
            num_layers: 2,
            num_heads: 4,
            num_classes: 10,
            seed,
        };
        let train_cfg = TrainConfig {
            epochs: src_epochs,
            learning_rate: lr,
            batch_size: 32,
            random_crop: false,
            horizontal_flip: false,
            seed,
        };
        let mut model = TinyViT::<f32>::init(&cfg).unwrap();
        train_supervised(&mut model, &src_train, &train_cfg).unwrap();
        let src_before = evaluate(&model, &src_test).unwrap();
        let tgt_before = evaluate(&model, &tgt_test).unwrap();

        let teacher = TeacherHandle::prior_copy(&model);
        let adapt_cfg = TrainConfig {
            epochs: adapt_epochs,
            learning_rate: lr,
            batch_size: 32,
            random_crop: false,
            horizontal_flip: false,
            seed,
        };
        let mut accs = [0.0f64; 8];
        accs[0] = src_before;
        accs[1] = tgt_before;
        for (i, strategy) in [Strategy::None, Strategy::Method1, Strategy::Method2]
            .into_iter()
            .enumerate()
        {
            let distill = DistillConfig {
                temperature: 2.0,
                total_epochs: adapt_epochs,
                strategy,
                teacher_kind: TeacherKind::PriorCopy,
                class_weights: None,
            };
            let mut student = model.clone();
            let teacher_opt = strategy.uses_teacher().then_some(&teacher);
            adapt(&mut student, teacher_opt, &tgt_train, &distill, &adapt_cfg).unwrap();
            accs[2 + i * 2] = evaluate(&student, &src_test).unwrap();
            accs[3 + i * 2] = evaluate(&student, &tgt_test).unwrap();
        }
        println!(
            "seed {seed}: src_before {:.3} tgt_before {:.3} | none(src {:.3} tgt {:.3}) m1(src {:.3} tgt {:.3}) m2(src {:.3} tgt {:.3})  [{:.1}s]",
            accs[0], accs[1], accs[2], accs[3], accs[4], accs[5], accs[6], accs[7],
            t0.elapsed().as_secs_f64()
        );
        rows.push((seed, accs));
    }
    let mean = |i: usize| rows.iter().map(|(_, a)| a[i]).sum::<f64>() / rows.len() as f64;
    println!("\nmeans over seeds:");
    println!("  (a) src_before          {:.3}  (need >= 0.95)", mean(0));
    println!("  (b) tgt_before          {:.3}  (need <= 0.30)", mean(1));
    println!(
        "  (c) none: src {:.3} (need <= {:.3}) tgt {:.3} (need >= 0.85)",
        mean(2),
        mean(0) - 0.15,
        mean(3)
    );
    println!(
        "  (d) m1:   src {:.3} (need >= {:.3}) tgt {:.3} (need >= 0.80)",
        mean(4),
        mean(2) + 0.10,
        mean(5)
    );
    println!(
        "  (d) m2:   src {:.3} (need >= {:.3}) tgt {:.3} (need >= 0.80)",
        mean(6),
        mean(2) + 0.10,
        mean(7)
    );
}
