// Dev scratchpad for tuning benchmark configs. Not part of the library.

use labpolish::config::ExperimentConfig;
use labpolish::experiment::train_polish_experiment;
use labpolish::geom::iou;
use labpolish::net::OptimState;
use labpolish::polish::{train_box_step, train_category_step, BoxPolisher, CategoryPolisher};
use labpolish::rng::{stream, tags, SimRng};
use labpolish::sample::{sample_category_set, sample_regression_set};
use labpolish::scene::{make_split, map_for_scene, oracle_for_scene, proposals_for_scene};
use std::time::Instant;

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T {
    std::env::args()
        .nth(n)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "full".into());
    match mode.as_str() {
        "box" => box_probe(false),
        "lin" => box_probe(true),
        "cat" => cat_probe(),
        "t6" => giou_vs_l1_probe(),
        "ssod" => ssod_probe(),
        "anch" => anchor_probe(),
        "det" => detect_probe(),
        _ => full_probe(),
    }
}

fn ssod_probe() {
    use labpolish::ssod::{run_ssod, SsodVariant};
    let iterations: usize = arg(2, 700);
    let n_a: usize = arg(3, 200);
    let n_u: usize = arg(4, 800);
    let lr: f64 = arg(5, 0.01);
    let lambda_u: f64 = arg(6, 2.0);

    let variants: [(&str, SsodVariant); 4] = [
        ("baseline ", SsodVariant { category_polish: false, box_polish: false, disentangle: true }),
        ("box-only ", SsodVariant { category_polish: false, box_polish: true, disentangle: true }),
        ("cat-only ", SsodVariant { category_polish: true, box_polish: false, disentangle: true }),
        ("full     ", SsodVariant::default()),
    ];
    let mut cfg = ExperimentConfig::default();
    cfg.ssod.iterations = iterations;
    cfg.optim.learning_rate = lr;
    cfg.ssod.lambda_u = lambda_u;
    cfg.ssod.eval_interval = (iterations / 5).max(1);

    if lambda_u == 0.0 {
        // Supervised-only learning curve.
        let split = make_split(n_a, n_u, &cfg.scene, &cfg.oracle, 1);
        let out = run_ssod(&split, &cfg, &variants[0].1, 1).unwrap();
        for r in &out.history {
            if let Some(ap) = r.eval_ap50 {
                println!("  iter {:>5}: eval ap50={ap:.4} l_s={:.4}", r.iteration, r.l_s);
            }
        }
        println!("final: {:?}", out.final_ap.map(|a| (a.ap50, a.ap50_95)));
        return;
    }
    for (name, variant) in variants {
        let mut aps = Vec::new();
        for seed in [1u64, 2, 3] {
            let split = make_split(n_a, n_u, &cfg.scene, &cfg.oracle, seed);
            let t0 = Instant::now();
            let out = run_ssod(&split, &cfg, &variant, seed).unwrap();
            let ap = out.final_ap.as_ref().unwrap();
            println!(
                "  {name} seed {seed}: ap50={:.4} ap={:.4} [{:.0}s]",
                ap.ap50,
                ap.ap50_95,
                t0.elapsed().as_secs_f64()
            );
            aps.push(ap.ap50);
        }
        println!("{name}: mean ap50 {:.4}", aps.iter().sum::<f64>() / 3.0);
    }
}

fn detect_probe() {
    use labpolish::scene::anchor_proposals;
    use labpolish::ssod::{detect, run_ssod, SsodVariant};
    let iterations: usize = arg(2, 2000);
    let mut cfg = ExperimentConfig::default();
    cfg.ssod.iterations = iterations;
    cfg.ssod.lambda_u = 0.0;
    let split = make_split(100, 300, &cfg.scene, &cfg.oracle, 1);
    let out = run_ssod(&split, &cfg, &SsodVariant::baseline(), 1).unwrap();

    for scene in &split.unannotated[..3] {
        println!("scene {}:", scene.scene_id);
        for o in &scene.objects {
            let c = o.bbox.corners();
            println!(
                "  gt cat={} box=({:.1},{:.1},{:.1},{:.1})",
                o.category, c[0], c[1], c[2], c[3]
            );
        }
        let map = map_for_scene(scene, &cfg.features, 1);
        let proposals = anchor_proposals(scene.width, scene.height, &cfg.proposals);
        let dets = detect(&out.teacher, &map, &proposals, 0.05, cfg.ssod.nms_thresh);
        let mut sorted = dets.clone();
        sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        println!("  {} detections (thresh 0.05):", sorted.len());
        for d in sorted.iter().take(8) {
            let best = scene
                .objects
                .iter()
                .map(|o| iou(d.bbox, o.bbox))
                .fold(0.0, f64::max);
            let c = d.bbox.corners();
            println!(
                "    conf={:.3} cat={} iou_gt={:.3} box=({:.1},{:.1},{:.1},{:.1})",
                d.confidence, d.category, best, c[0], c[1], c[2], c[3]
            );
        }
        // What do the raw anchor scores look like near objects?
        let mut best_anchor_scores: Vec<(f64, f64)> = Vec::new();
        for o in &scene.objects {
            let (mut best_q, mut best_score) = (0.0, 0.0);
            for &a in &proposals {
                let q = iou(a, o.bbox);
                if q > best_q {
                    best_q = q;
                    let feats = out.teacher.features(&map, a);
                    let probs = labpolish::net::softmax(&out.teacher.cls.infer(&feats));
                    best_score = probs[..cfg.scene.num_classes]
                        .iter()
                        .copied()
                        .fold(0.0, f64::max);
                }
            }
            best_anchor_scores.push((best_q, best_score));
        }
        println!("  best anchor per object (iou, fg score): {best_anchor_scores:?}");
    }
}

fn anchor_probe() {
    use labpolish::scene::{anchor_proposals, generate_scene, ProposalConfig, SceneGenConfig};
    let gen = SceneGenConfig::default();
    let grids: Vec<(&str, ProposalConfig)> = vec![
        (
            "current(8; 10/16/24; .5/1/2)",
            ProposalConfig::default(),
        ),
        (
            "s8 5sc 3r",
            ProposalConfig {
                stride: 8.0,
                scales: vec![9.0, 12.0, 16.0, 21.0, 27.0],
                aspect_ratios: vec![0.5, 1.0, 2.0],
                ..Default::default()
            },
        ),
        (
            "s6 4sc 3r",
            ProposalConfig {
                stride: 6.0,
                scales: vec![10.0, 14.0, 19.0, 26.0],
                aspect_ratios: vec![0.45, 1.0, 2.2],
                ..Default::default()
            },
        ),
        (
            "s4 4sc 3r",
            ProposalConfig {
                stride: 4.0,
                scales: vec![10.0, 14.0, 19.0, 26.0],
                aspect_ratios: vec![0.5, 1.0, 2.0],
                ..Default::default()
            },
        ),
    ];
    for (name, pc) in grids {
        let anchors = anchor_proposals(gen.width, gen.height, &pc);
        let mut covered = [0usize; 3]; // at 0.5, 0.45, 0.4
        let mut total = 0usize;
        let mut best_sum = 0.0;
        for id in 0..2000u64 {
            let scene = generate_scene(&gen, id, &mut SimRng::with_stream(99, id));
            for o in &scene.objects {
                total += 1;
                let best = anchors.iter().map(|a| iou(*a, o.bbox)).fold(0.0, f64::max);
                best_sum += best;
                for (k, thr) in [0.5, 0.45, 0.4].iter().enumerate() {
                    if best >= *thr {
                        covered[k] += 1;
                    }
                }
            }
        }
        println!(
            "{name}: n={} mean_best={:.3} cov@.5={:.3} @.45={:.3} @.4={:.3}",
            anchors.len(),
            best_sum / total as f64,
            covered[0] as f64 / total as f64,
            covered[1] as f64 / total as f64,
            covered[2] as f64 / total as f64
        );
    }
}

fn giou_vs_l1_probe() {
    use labpolish::polish::BoxLossKind;
    let steps: usize = arg(2, 4000);
    let n_a: usize = arg(3, 100);
    let n_u: usize = arg(4, 300);
    let lr: f64 = arg(5, 0.005);

    for kind in [BoxLossKind::Giou, BoxLossKind::L1] {
        let mut means = Vec::new();
        for seed in [1u64, 2, 3] {
            let mut cfg = ExperimentConfig::default();
            cfg.train_polish.steps = steps;
            cfg.optim.learning_rate = lr;
            cfg.polisher.box_loss = kind;
            let split = make_split(n_a, n_u, &cfg.scene, &cfg.oracle, seed);
            let t0 = Instant::now();
            let out = train_polish_experiment(&split, &cfg, false, true, seed).unwrap();
            println!(
                "  {kind:?} seed {seed}: {:.4} -> {:.4} [{:.0}s]",
                out.before.mean_iou,
                out.after.mean_iou,
                t0.elapsed().as_secs_f64()
            );
            means.push(out.after.mean_iou);
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        println!("{kind:?}: mean polished IoU {mean:.4}");
    }
}

fn box_probe(linear: bool) {
    let steps: usize = arg(2, 3000);
    let lr: f64 = arg(3, 0.01);
    let momentum: f64 = arg(4, 0.9);
    let n_scenes: usize = arg(5, 100);
    let gamma: f64 = arg(6, 0.06);

    let mut cfg = ExperimentConfig::default();
    cfg.optim.learning_rate = lr;
    cfg.optim.momentum = momentum;
    cfg.polisher.gamma = gamma;
    println!("gamma={gamma}");
    let split = make_split(n_scenes, 0, &cfg.scene, &cfg.oracle, 42);

    let mut polisher = BoxPolisher::new(
        cfg.polisher.roi_resolution,
        cfg.features.channels,
        cfg.polisher.box_hidden,
        cfg.polisher.context(),
        &mut SimRng::with_stream(42, stream(tags::BOX_POLISHER_INIT, 0)),
    );
    if linear {
        use labpolish::net::DenseNet;
        let input = 7 * 16 * cfg.features.channels;
        let mut net = DenseNet::init(
            &[input, 4],
            &mut SimRng::with_stream(42, stream(tags::BOX_POLISHER_INIT, 1)),
        );
        net.scale_output_layer(0.0);
        polisher.net = net;
        println!("linear probe: net [{} -> 4]", input);
    }
    let mut opt = OptimState::new(&polisher.net, lr, momentum, cfg.optim.weight_decay);
    let mut rng = SimRng::with_stream(42, stream(tags::TRAIN_POLISH_PICK, 0));

    let eval = |polisher: &BoxPolisher| -> (f64, f64) {
        let mut rng = SimRng::with_stream(777, 0);
        let (mut before, mut after, mut n) = (0.0, 0.0, 0usize);
        for scene in &split.annotated[..20.min(split.annotated.len())] {
            let map = map_for_scene(scene, &cfg.features, 42);
            for obj in &scene.objects {
                for s in sample_regression_set(obj, &cfg.polish_learn, &mut rng).unwrap() {
                    before += iou(s.input, s.target);
                    after += iou(polisher.polish(&map, s.input), s.target);
                    n += 1;
                }
            }
        }
        (before / n as f64, after / n as f64)
    };

    let t0 = Instant::now();
    let mut losses = Vec::new();
    for step in 0..steps {
        let scene = &split.annotated[rng.index(split.annotated.len())];
        let map = map_for_scene(scene, &cfg.features, 42);
        let object = &scene.objects[rng.index(scene.objects.len())];
        let set = sample_regression_set(object, &cfg.polish_learn, &mut rng).unwrap();
        let batch: Vec<_> = set.iter().map(|s| (s, &map)).collect();
        let l = train_box_step(&mut polisher, &batch, &mut opt, cfg.polisher.box_loss).unwrap();
        losses.push(l);
        if (step + 1) % (steps / 6).max(1) == 0 {
            let recent: f64 =
                losses[losses.len().saturating_sub(100)..].iter().sum::<f64>() / 100.0f64.min(losses.len() as f64);
            let (b, a) = eval(&polisher);
            println!(
                "step {:>5}: l_pr={recent:.4} eval {b:.4} -> {a:.4} ({:+.4}) [{:.0}s]",
                step + 1,
                a - b,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}

fn cat_probe() {
    let steps: usize = arg(2, 3000);
    let lr: f64 = arg(3, 0.01);
    let theta_cls_c: f64 = arg(4, 0.1);
    let n_prop_neg: i64 = arg(5, -1);
    let theta_cls_m: f64 = arg(6, 0.4);
    let n_cls_m: usize = arg(7, 16);
    let tau_neg: f64 = arg(8, 0.25);
    let p_c: usize = arg(9, 4);
    let hidden: usize = arg(10, 128);

    let mut cfg = ExperimentConfig::default();
    cfg.optim.learning_rate = lr;
    cfg.polish_learn.theta_cls_c = theta_cls_c;
    cfg.polish_learn.theta_cls_m = theta_cls_m;
    cfg.polish_learn.n_cls_m = n_cls_m;
    cfg.polish_learn.tau_neg = tau_neg;
    cfg.polisher.roi_resolution = p_c;
    cfg.polisher.category_hidden = hidden;
    if n_prop_neg >= 0 {
        cfg.polish_learn.n_prop_neg = Some(n_prop_neg as usize);
    }
    let split = make_split(100, 200, &cfg.scene, &cfg.oracle, 42);

    let mut polisher = CategoryPolisher::new(
        cfg.polisher.roi_resolution,
        cfg.features.channels,
        cfg.polisher.category_hidden,
        cfg.scene.num_classes,
        &mut SimRng::with_stream(42, stream(tags::CAT_POLISHER_INIT, 0)),
    );
    let mut opt = OptimState::new(&polisher.net, lr, cfg.optim.momentum, cfg.optim.weight_decay);
    let mut rng = SimRng::with_stream(42, stream(tags::TRAIN_POLISH_PICK, 0));

    let eval = |polisher: &CategoryPolisher| -> (f64, f64, f64) {
        let (mut bg, mut fg_right, mut fg_total, mut total) = (0usize, 0usize, 0usize, 0usize);
        for scene in &split.unannotated {
            let map = map_for_scene(scene, &cfg.features, 42);
            for det in oracle_for_scene(scene, cfg.scene.num_classes, &split.oracle_config, 42) {
                if det.confidence <= cfg.ssod.eta {
                    continue;
                }
                total += 1;
                let gt = scene
                    .objects
                    .iter()
                    .max_by(|a, b| iou(det.bbox, a.bbox).total_cmp(&iou(det.bbox, b.bbox)))
                    .unwrap();
                match polisher.polish(&map, det.bbox).category {
                    None => bg += 1,
                    Some(c) => {
                        fg_total += 1;
                        if c == gt.category {
                            fg_right += 1;
                        }
                    }
                }
            }
        }
        (
            bg as f64 / total as f64,
            fg_right as f64 / fg_total.max(1) as f64,
            fg_right as f64 / total as f64,
        )
    };

    let t0 = Instant::now();
    for step in 0..steps {
        let scene = &split.annotated[rng.index(split.annotated.len())];
        let map = map_for_scene(scene, &cfg.features, 42);
        let proposals = proposals_for_scene(scene, &cfg.proposals, 42);
        let object = &scene.objects[rng.index(scene.objects.len())];
        let mut set = sample_category_set(object, &proposals, &cfg.polish_learn, &mut rng);
        labpolish::sample::retain_clean_negatives(&mut set, &scene.objects, &cfg.polish_learn);
        if set.is_empty() {
            continue;
        }
        // Late lr decay.
        opt.learning_rate = if step >= steps * 8 / 10 { lr * 0.1 } else { lr };
        let batch: Vec<_> = set.iter().map(|s| (s, &map)).collect();
        train_category_step(&mut polisher, &batch, &mut opt).unwrap();
        if (step + 1) % (steps / 6).max(1) == 0 {
            let (bg, fg_acc, acc) = eval(&polisher);
            println!(
                "step {:>5}: bg={bg:.3} fg_acc={fg_acc:.3} acc={acc:.3} [{:.0}s]",
                step + 1,
                t0.elapsed().as_secs_f64()
            );
        }
    }

    // Foreground-error anatomy: how much does the second-best object
    // overlap the errored candidates?
    let mut err_second: Vec<f64> = Vec::new();
    let mut ok_second: Vec<f64> = Vec::new();
    for scene in &split.unannotated {
        let map = map_for_scene(scene, &cfg.features, 42);
        for det in oracle_for_scene(scene, cfg.scene.num_classes, &split.oracle_config, 42) {
            if det.confidence <= cfg.ssod.eta {
                continue;
            }
            let mut ious: Vec<(f64, usize)> = scene
                .objects
                .iter()
                .map(|o| (iou(det.bbox, o.bbox), o.category))
                .collect();
            ious.sort_by(|a, b| b.0.total_cmp(&a.0));
            let second = ious.get(1).map(|x| x.0).unwrap_or(0.0);
            if let Some(c) = polisher.polish(&map, det.bbox).category {
                if c == ious[0].1 {
                    ok_second.push(second);
                } else {
                    err_second.push(second);
                }
            }
        }
    }
    err_second.sort_by(f64::total_cmp);
    println!(
        "  fg errors: n={} second-object IoU median={:.3}",
        err_second.len(),
        err_second.get(err_second.len() / 2).copied().unwrap_or(0.0)
    );
    println!(
        "  fg ok:     n={} (second-object IoU > 0.15 in {:.2} of errors vs {:.2} of oks)",
        ok_second.len(),
        err_second.iter().filter(|&&s| s > 0.15).count() as f64 / err_second.len().max(1) as f64,
        ok_second.iter().filter(|&&s| s > 0.15).count() as f64 / ok_second.len().max(1) as f64
    );

    // Background rate binned by candidate IoU.
    let mut bins = [(0usize, 0usize); 6]; // (bg, total) for iou 0.4..1.0 step 0.1
    for scene in &split.unannotated {
        let map = map_for_scene(scene, &cfg.features, 42);
        for det in oracle_for_scene(scene, cfg.scene.num_classes, &split.oracle_config, 42) {
            if det.confidence <= cfg.ssod.eta {
                continue;
            }
            let q = scene
                .objects
                .iter()
                .map(|o| iou(det.bbox, o.bbox))
                .fold(0.0, f64::max);
            let b = (((q - 0.4) / 0.1) as usize).min(5);
            bins[b].1 += 1;
            if polisher.polish(&map, det.bbox).category.is_none() {
                bins[b].0 += 1;
            }
        }
    }
    for (k, (bg, total)) in bins.iter().enumerate() {
        println!(
            "  iou [{:.1},{:.1}): bg {}/{}",
            0.4 + 0.1 * k as f64,
            0.5 + 0.1 * k as f64,
            bg,
            total
        );
    }

    // Control: background rate on the training distribution itself
    // (fresh positives on annotated scenes).
    let mut rng2 = SimRng::with_stream(5150, 0);
    let (mut bg_train, mut n_train) = (0usize, 0usize);
    for scene in &split.annotated[..40.min(split.annotated.len())] {
        let map = map_for_scene(scene, &cfg.features, 42);
        for obj in &scene.objects {
            let set = sample_category_set(obj, &[], &cfg.polish_learn, &mut rng2);
            for s in set.iter().filter(|s| s.target.is_some()) {
                n_train += 1;
                if polisher.polish(&map, s.bbox).category.is_none() {
                    bg_train += 1;
                }
            }
        }
    }
    println!(
        "  train-dist positives: bg {}/{} = {:.3}",
        bg_train,
        n_train,
        bg_train as f64 / n_train as f64
    );
}

fn full_probe() {
    let steps: usize = arg(2, 2500);
    let n_a: usize = arg(3, 200);
    let n_u: usize = arg(4, 800);
    let lr: f64 = arg(5, 0.01);

    let mut cfg = ExperimentConfig::default();
    cfg.train_polish.steps = steps;
    cfg.optim.learning_rate = lr;
    let split = make_split(n_a, n_u, &cfg.scene, &cfg.oracle, 42);

    let t0 = Instant::now();
    let out = train_polish_experiment(&split, &cfg, true, true, 42).unwrap();
    println!(
        "steps={steps} n_a={n_a} n_u={n_u} lr={lr} elapsed={:.1}s",
        t0.elapsed().as_secs_f64()
    );
    println!(
        "before: mean_iou={:.4} acc={:.4} total={}",
        out.before.mean_iou, out.before.category_accuracy, out.before.total
    );
    println!(
        "after:  mean_iou={:.4} acc={:.4}  (iou {:+.4}, acc {:+.4})",
        out.after.mean_iou,
        out.after.category_accuracy,
        out.after.mean_iou - out.before.mean_iou,
        out.after.category_accuracy - out.before.category_accuracy
    );
}
