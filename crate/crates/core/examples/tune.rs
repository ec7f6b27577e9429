// Scratch tuning harness (dev only): trains toy models and probes inversion
// quality. Run with: cargo run -p dive-core --release --example tune -- <stage>

use std::path::{Path, PathBuf};
use std::time::Instant;

use dive_core::checkpoint::{load_class_cond, load_layout_cond, load_prior, save_checkpoint, AnyModel, RunInfo};
use dive_core::data::{gen_classification_corpus, gen_detection_corpus, Dataset, ShapesCorpusSpec, MANIFEST_FILE};
use dive_core::eval::{accuracy, classify_dataset, detection_report, invert_dataset, ClassifyMode};
use dive_core::invert::{CondModel, InversionConfig, InversionModels};
use dive_core::models::{ClassCondModel, LayoutCondModel, ModelConfig, PriorMode, PriorModel};
use dive_core::train::{train_class_cond, train_layout_cond, train_prior, TrainConfig};

fn root() -> PathBuf {
    PathBuf::from("/tmp/dive-tune")
}

fn ensure_data() -> (Dataset, Dataset, Dataset, Dataset) {
    let r = root();
    let cls_train = r.join("cls-train");
    let cls_test = r.join("cls-test");
    let det_train = r.join("det-train");
    let det_test = r.join("det-test");
    if !cls_train.join(MANIFEST_FILE).exists() {
        gen_classification_corpus(11, 2000, 32, 4, &cls_train).unwrap();
        gen_classification_corpus(12, 200, 32, 4, &cls_test).unwrap();
        gen_detection_corpus(&ShapesCorpusSpec::detection_default(21, 5000), &det_train).unwrap();
        gen_detection_corpus(&ShapesCorpusSpec::detection_default(22, 500), &det_test).unwrap();
        println!("data generated");
    }
    (
        Dataset::load(&cls_train.join(MANIFEST_FILE)).unwrap(),
        Dataset::load(&cls_test.join(MANIFEST_FILE)).unwrap(),
        Dataset::load(&det_train.join(MANIFEST_FILE)).unwrap(),
        Dataset::load(&det_test.join(MANIFEST_FILE)).unwrap(),
    )
}

fn train_class(train: &Dataset, iters: usize, lr: f64, path: &Path) {
    let mut model = ClassCondModel::new(ModelConfig::default(), 1000);
    let pairs = train.classification_pairs().unwrap();
    let t0 = Instant::now();
    let tc = TrainConfig { iterations: iters, batch: 6, lr, weight_decay: 1e-4, cond_noise: 0.5, seed: 7 };
    let report = train_class_cond(&mut model, &pairs, &tc).unwrap();
    println!(
        "class train {iters} iters lr {lr}: {:.1}s, loss first100 {:.4} last500 {:.4}",
        t0.elapsed().as_secs_f64(),
        report.losses[..100.min(report.losses.len())].iter().sum::<f64>() / 100f64.min(report.losses.len() as f64),
        report.running_average(500)
    );
    save_checkpoint(&AnyModel::Class(model), RunInfo { seed: 7, iterations: iters }, path).unwrap();
}

fn main() {
    let stage = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let (cls_train, cls_test, det_train, det_test) = ensure_data();
    let r = root();

    if stage == "train-class" || stage == "all" {
        train_class(&cls_train, 4000, 1e-4, &r.join("class.ckpt"));
    }

    if stage == "enum" || stage == "all" {
        let (model, _) = load_class_cond(&r.join("class.ckpt")).unwrap();
        let icfg = InversionConfig { use_prior: false, seed: 500, ..Default::default() };
        let idx: Vec<usize> = (0..cls_test.len()).collect();
        let t0 = Instant::now();
        let preds = classify_dataset(&cls_test, &idx, &model, &icfg, ClassifyMode::Enumerate).unwrap();
        let labels: Vec<usize> = idx.iter().map(|&i| cls_test.class_label(i).unwrap()).collect();
        let predicted: Vec<usize> = preds.iter().map(|(_, c)| *c).collect();
        println!(
            "enumeration acc: {:.3} ({:.1}s for {} images)",
            accuracy(&predicted, &labels).unwrap(),
            t0.elapsed().as_secs_f64(),
            idx.len()
        );
    }

    if stage == "dive-cls" || stage == "all" {
        let (model, _) = load_class_cond(&r.join("class.ckpt")).unwrap();
        let k: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(200);
        let lr: f64 = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(0.01);
        let freq: usize = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(0);
        let wd: f64 = std::env::args().nth(5).map(|s| s.parse().unwrap()).unwrap_or(0.0);
        let batch: usize = std::env::args().nth(6).map(|s| s.parse().unwrap()).unwrap_or(2);
        let icfg = InversionConfig {
            max_steps: k,
            lr,
            weight_decay: wd,
            batch,
            monitor_frequency: freq,
            use_prior: false,
            seed: 500,
            early_stop_patience: 0,
            ..Default::default()
        };
        let n_imgs: usize = std::env::args().nth(7).map(|s| s.parse().unwrap()).unwrap_or(40);
        let idx: Vec<usize> = (0..n_imgs).collect();
        let t0 = Instant::now();
        let dive = classify_dataset(&cls_test, &idx, &model, &icfg, ClassifyMode::Optimize).unwrap();
        let enum_preds = classify_dataset(&cls_test, &idx, &model, &icfg, ClassifyMode::Enumerate).unwrap();
        let labels: Vec<usize> = idx.iter().map(|&i| cls_test.class_label(i).unwrap()).collect();
        let dive_p: Vec<usize> = dive.iter().map(|(_, c)| *c).collect();
        let enum_p: Vec<usize> = enum_preds.iter().map(|(_, c)| *c).collect();
        let agree = dive_p.iter().zip(&enum_p).filter(|(a, b)| a == b).count() as f64 / idx.len() as f64;
        println!(
            "DIVE cls K={k} lr={lr} freq={freq} wd={wd} b={batch}: acc {:.3}, enum acc {:.3}, agreement {:.3} ({:.1}s / {} imgs)",
            accuracy(&dive_p, &labels).unwrap(),
            accuracy(&enum_p, &labels).unwrap(),
            agree,
            t0.elapsed().as_secs_f64(),
            idx.len()
        );
        let mut no_st = icfg.clone();
        no_st.straight_through = false;
        let ablate = classify_dataset(&cls_test, &idx, &model, &no_st, ClassifyMode::Optimize).unwrap();
        let ab_p: Vec<usize> = ablate.iter().map(|(_, c)| *c).collect();
        println!("  no-straight-through acc: {:.3}", accuracy(&ab_p, &labels).unwrap());
    }


    if stage == "debug-cls" {
        let (model, _) = load_class_cond(&r.join("class.ckpt")).unwrap();
        let k: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(200);
        let lr: f64 = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(0.01);
        let batch: usize = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(2);
        use dive_core::invert::{invert, InversionContext, monitor_eval, MonitorState, dive_step, init_conditioning};
        use dive_core::labels::nn_project;
        use dive_core::train::AdamW;
        use rand::SeedableRng;
        let icfg = InversionConfig {
            max_steps: k, lr, batch, use_prior: false, seed: 500,
            early_stop_patience: 0, ..Default::default()
        };
        let models = InversionModels { cond: CondModel::Class(&model), prior: None };
        let ctx = InversionContext::new(&models, &icfg).unwrap();
        let x = cls_test.model_input(0).unwrap();
        let truth = cls_test.class_label(0).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(icfg.seed);
        let monitor = MonitorState::create(&ctx.set, &ctx.img_shape, &[1, model.cfg.d], &mut rng);
        // per-class enumeration scores for reference
        let scores: Vec<f64> = (0..4).map(|c| {
            let v = dive_core::labels::class_embedding(&ctx.vocabs, c).unwrap();
            monitor_eval(&v, &x, &models, &monitor, &icfg, &ctx).unwrap()
        }).collect();
        println!("truth {truth}, enum scores {scores:?}");
        let mut v = init_conditioning(&ctx.layout, &ctx.vocabs);
        let mut opt = AdamW::new(icfg.lr, icfg.weight_decay);
        let init_norm = v.v.row(0).dot(&v.v.row(0)).sqrt();
        for step in 0..k {
            let loss = dive_step(&mut v, &mut opt, &x, &models, &icfg, &ctx, &mut rng).unwrap();
            if step % 20 == 0 || step == k-1 {
                let (_, idx) = nn_project(&v.v, &ctx.layout, &ctx.vocabs, icfg.metric).unwrap();
                let val = monitor_eval(&v.v, &x, &models, &monitor, &icfg, &ctx).unwrap();
                let vnorm = v.v.row(0).dot(&v.v.row(0)).sqrt();
                // cosine similarity of v to each vocab entry
                let sims: Vec<f64> = (0..5).map(|e| {
                    let ent = ctx.vocabs.class.entry(e).unwrap();
                    let en = ent.dot(&ent).sqrt();
                    v.v.row(0).dot(&ent) / (vnorm * en)
                }).collect();
                println!("step {step:4} loss {loss:.4} proj_idx {} monitor {val:.5} |v| {vnorm:.2} (init {init_norm:.2}) sims {:?}",
                    idx[0], sims.iter().map(|s| (s*100.0).round()/100.0).collect::<Vec<_>>());
            }
        }
    }


    if stage == "visit-cls" {
        let (model, _) = load_class_cond(&r.join("class.ckpt")).unwrap();
        let k: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(200);
        let lr: f64 = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(0.05);
        use dive_core::invert::invert;
        use dive_core::labels::nn_project;
        for img in 0..12 {
            let icfg = InversionConfig {
                max_steps: k, lr, batch: 2, monitor_frequency: 5, use_prior: false,
                seed: dive_core::eval::derive_seed(500, img as u64),
                early_stop_patience: 0, ..Default::default()
            };
            let models = InversionModels { cond: CondModel::Class(&model), prior: None };
            let x = cls_test.model_input(img).unwrap();
            let truth = cls_test.class_label(img).unwrap();
            let out = invert(&x, &models, &icfg).unwrap();
            let vocabs = model.vocabs().unwrap();
            let layout = dive_core::labels::SequenceLayout::classification();
            let visited: Vec<usize> = out.trace.candidates.iter().map(|c| {
                nn_project(c, &layout, &vocabs, icfg.metric).unwrap().1[0]
            }).collect();
            println!("img {img:2} truth {truth} pred {:?} visited(proj idx) {:?} values {:?}",
                out.prediction, visited,
                out.trace.values.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
        }
    }

    if stage == "train-layout" || stage == "all" {
        let mut model = LayoutCondModel::new(ModelConfig::default(), 2000);
        let pairs = det_train.detection_pairs().unwrap();
        let t0 = Instant::now();
        let tc = TrainConfig { iterations: 4000, batch: 6, lr: 1e-4, weight_decay: 1e-4, cond_noise: 0.5, seed: 8 };
        let report = train_layout_cond(&mut model, &pairs, &tc).unwrap();
        println!(
            "layout train: {:.1}s, loss first100 {:.4} last500 {:.4}",
            t0.elapsed().as_secs_f64(),
            report.losses[..100].iter().sum::<f64>() / 100.0,
            report.running_average(500)
        );
        save_checkpoint(&AnyModel::Layout(model), RunInfo { seed: 8, iterations: 4000 }, &r.join("layout.ckpt")).unwrap();
    }

    if stage == "train-prior" || stage == "all" {
        let (layout, _) = load_layout_cond(&r.join("layout.ckpt")).unwrap();
        let vocabs = layout.vocabs().unwrap();
        let mut prior = PriorModel::new(ModelConfig::default(), PriorMode::Joint, &vocabs, 3000);
        let labels: Vec<_> = (0..det_train.len()).map(|i| det_train.detection_label(i).unwrap()).collect();
        let t0 = Instant::now();
        let tc = TrainConfig { iterations: 3000, batch: 8, lr: 3e-4, weight_decay: 1e-4, cond_noise: 0.0, seed: 9 };
        let report = train_prior(&mut prior, &labels, &vocabs, &tc).unwrap();
        println!(
            "prior train: {:.1}s, loss last500 {:.4}",
            t0.elapsed().as_secs_f64(),
            report.running_average(500)
        );
        save_checkpoint(&AnyModel::Prior(prior), RunInfo { seed: 9, iterations: 3000 }, &r.join("prior.ckpt")).unwrap();
    }

    if stage == "dive-det" || stage == "all" {
        let (layout, _) = load_layout_cond(&r.join("layout.ckpt")).unwrap();
        let (prior, _) = load_prior(&r.join("prior.ckpt")).unwrap();
        let k: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(500);
        let lr: f64 = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(0.01);
        let n: usize = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(20);
        let icfg = InversionConfig {
            max_steps: k,
            lr,
            use_prior: true,
            seed: 600,
            early_stop_patience: 0,
            ..Default::default()
        };
        let models = InversionModels { cond: CondModel::Layout(&layout), prior: Some(&prior) };
        let idx: Vec<usize> = (0..n).collect();
        let t0 = Instant::now();
        let results = invert_dataset(&det_test, &idx, &models, &icfg).unwrap();
        let rep = detection_report(&det_test, &results, 4, 32).unwrap();
        let mean_objs: f64 = results
            .iter()
            .map(|r| match &r.prediction {
                dive_core::invert::Prediction::Detection(l) => l.objects.len() as f64,
                _ => 0.0,
            })
            .sum::<f64>()
            / results.len() as f64;
        let mean_gt: f64 = idx
            .iter()
            .map(|&i| det_test.detection_label(i).unwrap().objects.len() as f64)
            .sum::<f64>()
            / idx.len() as f64;
        println!(
            "DIVE det K={k} lr={lr} n={n}: AP {:.3} AP50 {:.3} AP75 {:.3}, pred objs {:.2} (gt {:.2}), {:.1}s",
            rep.ap, rep.ap50, rep.ap75, mean_objs, mean_gt,
            t0.elapsed().as_secs_f64()
        );
    }
}
