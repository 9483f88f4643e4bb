use std::path::{Path, PathBuf};

use slca_core::data::{generate_phantom, read_image, read_labels, split, write_svol, normalize};
use slca_core::io::write_atomic;
use slca_core::metrics::{evaluate, metrics_csv, region_masks, MetricsReport};
use slca_core::train::{Checkpoint, History, Sample, Trainer};
use slca_core::{LabelVolume, Network32};

use crate::args::{EvaluateArgs, PhantomArgs, SegmentArgs, TrainArgs};
use crate::cases::{self, Cleanup, IMAGE_SUFFIX, LABEL_SUFFIX};
use crate::config::RunConfig;
use crate::failure::{io_failure, CmdResult, Failure};
use crate::overlay;
use crate::report::metrics_table;

fn spacing_f64(s: &[f32]) -> Vec<f64> {
    s.iter().map(|&v| v as f64).collect()
}

pub fn phantom(args: &PhantomArgs) -> CmdResult {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.phantom.seed = seed;
    }
    cfg.validate()?;
    if args.count == 0 {
        return Err(Failure::Config("--count must be at least 1".into()));
    }
    let mut cleanup = Cleanup::new();
    cleanup.create_dir(&args.out_dir)?;
    for i in 0..args.count {
        let case = format!("case_{i:04}");
        let spec = slca_core::data::PhantomSpec {
            seed: cfg.phantom.seed.wrapping_add(i as u64),
            ..cfg.phantom.clone()
        };
        let (image, labels) = generate_phantom(&spec)?;
        let m = region_masks(labels.labels())?;
        let nested = (0..labels.len()).all(|v| (!m.et[v] || m.tc[v]) && (!m.tc[v] || m.wt[v]));
        if !nested {
            return Err(Failure::Verification(format!("{case}: regions are not nested")));
        }
        let img_path = args.out_dir.join(cases::image_name(&case));
        let lbl_path = args.out_dir.join(cases::label_name(&case));
        write_svol(&img_path, &image.into())?;
        cleanup.file(img_path.clone());
        write_svol(&lbl_path, &labels.into())?;
        cleanup.file(lbl_path.clone());
        let count = |mask: &[bool]| mask.iter().filter(|&&b| b).count();
        println!(
            "{case}\t{}\t{}\tseed={}\tWT={}\tTC={}\tET={}",
            img_path.display(),
            lbl_path.display(),
            spec.seed,
            count(&m.wt),
            count(&m.tc),
            count(&m.et)
        );
    }
    cleanup.disarm();
    Ok(())
}

fn load_samples(dir: &Path, ids: &[String]) -> CmdResult<Vec<Sample<f32>>> {
    ids.iter()
        .map(|id| {
            let image = read_image(&dir.join(cases::image_name(id)))?;
            let labels = read_labels(&dir.join(cases::label_name(id)))?;
            Sample::new(id.clone(), &image, labels).map_err(|e| Failure::Config(format!("{id}: {e}")))
        })
        .collect()
}

fn history_path(args: &TrainArgs) -> PathBuf {
    args.history.clone().unwrap_or_else(|| {
        let mut name = args.out.file_name().unwrap_or_default().to_os_string();
        name.push(".history.csv");
        args.out.with_file_name(name)
    })
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.train.checkpoint_path = Some(args.out.clone());
    cfg.validate()?;

    let images = cases::list(&args.data_dir, IMAGE_SUFFIX)?;
    let labels = cases::list(&args.data_dir, LABEL_SUFFIX)?;
    let ids: Vec<String> = images.keys().filter(|id| labels.contains_key(*id)).cloned().collect();
    if ids.is_empty() {
        return Err(Failure::Io(format!(
            "{}: no cases with both {IMAGE_SUFFIX} and {LABEL_SUFFIX} files",
            args.data_dir.display()
        )));
    }
    let parts = split(&ids, cfg.split.ratios, cfg.split.seed)?;
    println!(
        "cases: {} train, {} validation, {} test",
        parts.train.len(),
        parts.val.len(),
        parts.test.len()
    );
    let train_set = load_samples(&args.data_dir, &parts.train)?;
    let val_set = load_samples(&args.data_dir, &parts.val)?;

    let net = Network32::build(&cfg.network)?;
    for s in train_set.iter().chain(&val_set) {
        net.check_input_shape(s.image.shape())
            .map_err(|e| Failure::Config(format!("{}: {e}", s.id)))?;
    }

    let history_file = history_path(args);
    let mut cleanup = Cleanup::new();
    if !args.out.exists() {
        cleanup.file(args.out.clone());
    }
    let mut trainer = Trainer::new(net, cfg.train.clone())?;
    let mut history = History::default();
    trainer.run(&train_set, &val_set, &mut history)?;
    write_atomic(&history_file, history.to_csv().as_bytes()).map_err(|e| io_failure(&history_file, e))?;
    cleanup.file(history_file.clone());

    let (label, eval_set) = if val_set.is_empty() {
        ("training", &train_set)
    } else {
        ("validation", &val_set)
    };
    let mut reports = Vec::with_capacity(eval_set.len());
    for s in eval_set {
        let pred = trainer.network().segment_tensor(&s.image)?;
        let pred = LabelVolume::new(s.labels.shape().to_vec(), pred, s.labels.spacing().to_vec())?;
        reports.push(evaluate(&pred, &s.labels, &spacing_f64(s.labels.spacing()))?);
    }
    cleanup.disarm();
    println!("checkpoint: {}", args.out.display());
    println!("history: {}", history_file.display());
    println!("final {label} metrics over {} case(s):", reports.len());
    print!("{}", metrics_table(&reports.iter().collect::<Vec<_>>()));
    Ok(())
}

pub fn segment(args: &SegmentArgs) -> CmdResult {
    let net: Network32 = Checkpoint::load(&args.checkpoint)?.network()?;
    let image = read_image(&args.input)?;
    net.check_input_shape(image.image().shape())?;
    let labels = net.segment(&normalize(&image))?;
    let mut cleanup = Cleanup::new();
    if let Some(dir) = &args.overlay_dir {
        let images = overlay::render(&image, &labels)?;
        let written = overlay::write_all(dir, &images, &mut cleanup)?;
        println!("overlays: {} slices in {}", written.len(), dir.display());
    }
    write_svol(&args.out, &labels.into())?;
    cleanup.disarm();
    println!("labels: {}", args.out.display());
    Ok(())
}

pub fn evaluate_dirs(args: &EvaluateArgs) -> CmdResult {
    let preds = cases::list(&args.pred, LABEL_SUFFIX)?;
    let gts = cases::list(&args.gt, LABEL_SUFFIX)?;
    let missing_pred: Vec<&String> = gts.keys().filter(|id| !preds.contains_key(*id)).collect();
    let missing_gt: Vec<&String> = preds.keys().filter(|id| !gts.contains_key(*id)).collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        let mut msg = String::from("unmatched cases:");
        for id in &missing_pred {
            msg.push_str(&format!(" {id} (no prediction)"));
        }
        for id in &missing_gt {
            msg.push_str(&format!(" {id} (no ground truth)"));
        }
        return Err(Failure::Config(msg));
    }
    if gts.is_empty() {
        return Err(Failure::Config(format!("{}: no {LABEL_SUFFIX} files", args.gt.display())));
    }
    let mut rows: Vec<(String, MetricsReport)> = Vec::with_capacity(gts.len());
    for (id, gt_path) in &gts {
        let gt = read_labels(gt_path)?;
        let pred = read_labels(&preds[id])?;
        let report = evaluate(&pred, &gt, &spacing_f64(gt.spacing())).map_err(|e| Failure::Config(format!("{id}: {e}")))?;
        rows.push((id.clone(), report));
    }
    write_atomic(&args.out, metrics_csv(&rows).as_bytes()).map_err(|e| io_failure(&args.out, e))?;
    println!("{} case(s) evaluated; report: {}", rows.len(), args.out.display());
    print!("{}", metrics_table(&rows.iter().map(|(_, r)| r).collect::<Vec<_>>()));
    Ok(())
}
