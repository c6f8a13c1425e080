use std::fs;
use std::path::{Path, PathBuf};

use tdbgan::data::{generate_synthetic, load_png, resize, save_png, Dataset, LabelMode, Manifest, Split};
use tdbgan::eval::{
    compare_ablation_curves, edited_verification, neutral_transfers, run_edits, single_attribute_flips,
    transfer_accuracy, write_pairs_csv, AttributeClassifier,
};
use tdbgan::identity::{train_classifier, Extractor, ExtractorKind, Task};
use tdbgan::train::{LossLog, Model, Trainer};
use tdbgan::Error;
use tdbgan_autograd::Tensor;

use crate::config::Loaded;
use crate::{CliError, Common};

type Result<T> = std::result::Result<T, CliError>;

fn load_config(common: &Common) -> Result<Loaded> {
    let mut l = Loaded::from_path(common.config.as_deref())?;
    if let Some(out) = &common.output {
        // flags are relative to the working directory, not the config
        l.config.output_dir = std::path::absolute(out)?;
    }
    if let Some(seed) = common.seed {
        l.config.seed = seed;
    }
    Ok(l)
}

fn load_dataset(l: &Loaded, manifest: Option<PathBuf>) -> Result<Dataset> {
    let path = match manifest {
        Some(p) => p,
        None => l.manifest_path(),
    };
    let m = Manifest::read_csv(&path, l.config.label_mode)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(Dataset::load(m, base)?)
}

fn non_empty(d: Dataset, what: &str) -> Result<Dataset> {
    if d.is_empty() {
        return Err(Error::EmptySpec(format!("{what} split has no images")).into());
    }
    Ok(d)
}

fn uses_dae(t: &Trainer) -> bool {
    t.plan.iter().any(|c| c.use_dae)
}

pub fn synth(common: &Common, n_images: Option<usize>) -> Result<()> {
    let mut l = load_config(common)?;
    if let Some(n) = n_images {
        l.config.n_images = n;
    }
    let dir = match &common.output {
        Some(_) => l.output_dir(),
        None => l.data_dir(),
    };
    let ds = generate_synthetic(&l.config.synthetic_spec())?;
    ds.write(&dir)?;
    println!(
        "wrote {} images ({} identities, attributes {}) to {}",
        ds.data.len(),
        l.config.n_identities,
        l.config.attributes.join(","),
        dir.display()
    );
    Ok(())
}

pub fn train(
    common: &Common,
    stages: Option<Vec<String>>,
    no_dae: bool,
    no_identity_loss: bool,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut l = load_config(common)?;
    if let Some(s) = stages {
        l.config.stages = s;
    }
    if no_dae {
        l.config.use_dae = false;
    }
    if no_identity_loss {
        l.config.use_identity_loss = false;
        l.config.lambda_ip = 0.0;
    }
    let c = &l.config;
    let plan = match resume {
        Some(_) => None,
        None => Some(c.plan()?),
    };
    let data = load_dataset(&l, None)?;
    let train = non_empty(data.split(Split::Train), "train")?;
    let out = l.output_dir();
    fs::create_dir_all(&out)?;
    let mut trainer = match (resume, plan) {
        (Some(p), _) => Trainer::load(&p)?,
        (None, plan) => {
            let plan = plan.unwrap_or_default();
            if let Some((_, h, w)) = train.image_shape() {
                if (h, w) != (c.image_size, c.image_size) {
                    return Err(CliError::Usage(format!(
                        "images are {h}x{w} but image_size is {}",
                        c.image_size
                    )));
                }
            }
            let mut model = Model::new(c.model(train.manifest.vocabulary().to_vec()))?;
            if plan.iter().any(|p| p.effective_lambda_ip() > 0.0) {
                model.extractor = Some(build_extractor(&l, &train)?);
            }
            Trainer::new(model, plan)?
        }
    };
    let terms = [
        "L_DAE", "L_R", "L_D", "L_cls_r", "L_G", "G_adv", "L_cls_f", "L_rec", "L_ip",
    ];
    trainer.run(&train, |t, span| {
        let means: Vec<String> = terms
            .iter()
            .filter_map(|term| {
                t.log
                    .epoch_means(term)
                    .into_iter()
                    .find(|&(s, e, _)| s == span.stage && e == span.epoch)
                    .map(|(_, _, v)| format!("{term}={v:.5}"))
            })
            .collect();
        println!("{} epoch {}: {}", span.stage.as_str(), span.epoch, means.join(" "));
    })?;
    let ckpt = out.join("checkpoint.tdb");
    trainer.save(&ckpt)?;
    trainer.log.write_csv(&out.join("losses.csv"))?;
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn identity_count(data: &Dataset) -> usize {
    data.manifest.records().iter().map(|r| r.identity as usize + 1).max().unwrap_or(0)
}

fn build_extractor(l: &Loaded, train: &Dataset) -> Result<Extractor> {
    let cfg = l.config.extractor(l);
    Ok(match cfg.kind {
        ExtractorKind::TrainedClassifierBackbone => Extractor::train(cfg, train, identity_count(train))?,
        ExtractorKind::SeededRandomConvnet => Extractor::seeded_random(cfg.network, cfg.recipe.seed)?,
        ExtractorKind::ExternalWeights => {
            let path = cfg
                .weight_source
                .clone()
                .ok_or_else(|| CliError::Usage("extractor_weights is required for external_weights".into()))?;
            Extractor::load_external(cfg, identity_count(train), &path)?
        }
    })
}

/// Parses `name=0|1` items separated by commas; a bare name means `=1`.
///
/// Unnamed attributes are 0. A one-hot expression must select exactly one class.
pub fn parse_label_expression(expr: &str, vocabulary: &[String], mode: LabelMode) -> Result<Vec<u8>> {
    let mut out = vec![0u8; vocabulary.len()];
    let mut seen = vec![false; vocabulary.len()];
    for item in expr.split(',').map(str::trim) {
        let (name, value) = match item.split_once('=') {
            Some((n, v)) => (n.trim(), v.trim()),
            None => (item, "1"),
        };
        if name.is_empty() {
            return Err(CliError::Usage(format!("malformed label expression `{expr}`")));
        }
        let bit = match value {
            "0" => 0,
            "1" => 1,
            _ => {
                return Err(CliError::Usage(format!(
                    "malformed label expression `{expr}`: value of `{name}` must be 0 or 1"
                )))
            }
        };
        let k = vocabulary.iter().position(|v| v == name).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown attribute `{name}`; vocabulary: {}",
                vocabulary.join(", ")
            ))
        })?;
        if seen[k] {
            return Err(CliError::Usage(format!("attribute `{name}` given twice in `{expr}`")));
        }
        seen[k] = true;
        out[k] = bit;
    }
    if mode == LabelMode::OneHot && out.iter().map(|&b| b as usize).sum::<usize>() != 1 {
        return Err(CliError::Usage(format!("`{expr}` must select exactly one class")));
    }
    Ok(out)
}

/// Places `[3, h, w]` tiles on a row-major sheet with `cols` columns.
pub fn tile_sheet(tiles: &[Tensor<f32>], cols: usize) -> Result<Tensor<f32>> {
    let (h, w) = match tiles.first().map(|t| t.shape()) {
        Some([3, h, w]) => (*h, *w),
        _ => return Err(CliError::Usage("sheet needs [3, h, w] tiles".into())),
    };
    let rows = tiles.len().div_ceil(cols);
    let (sh, sw) = (rows * h, cols * w);
    let mut sheet = Tensor::zeros(&[3, sh, sw]);
    for (i, t) in tiles.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for ch in 0..3 {
            for y in 0..h {
                let src = &t.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                let at = (ch * sh + r * h + y) * sw + c * w;
                sheet.data_mut()[at..at + w].copy_from_slice(src);
            }
        }
    }
    Ok(sheet)
}

fn sample(t: &Tensor<f32>, i: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let per: usize = s[1..].iter().product();
    Ok(Tensor::new(&s[1..], t.data()[i * per..(i + 1) * per].to_vec())?)
}

pub fn edit(checkpoint: &Path, images: &[PathBuf], targets: &[String], output: &Path, grid: bool) -> Result<()> {
    let trainer = Trainer::load(checkpoint)?;
    let model = &trainer.model;
    let mc = &model.config;
    let vocabulary: Vec<String> = if mc.vocabulary.is_empty() {
        (0..mc.label_dim).map(|k| k.to_string()).collect()
    } else {
        mc.vocabulary.clone()
    };
    let labels: Vec<Vec<u8>> = targets
        .iter()
        .map(|t| parse_label_expression(t, &vocabulary, mc.label_mode))
        .collect::<Result<_>>()?;
    fs::create_dir_all(output)?;
    let size = mc.image_size;
    let use_dae = uses_dae(&trainer);
    let mut sheet = Vec::new();
    for path in images {
        let mut img = load_png(path)?;
        if img.shape()[1..] != [size, size] {
            img = resize(&img, size, size)?;
        }
        let n = labels.len();
        let mut batch = Vec::with_capacity(n * img.len());
        for _ in 0..n {
            batch.extend_from_slice(img.data());
        }
        let x = Tensor::new(&[n, 3, size, size], batch)?;
        let c = Tensor::from_fn(&[n, mc.label_dim], |i| labels[i / mc.label_dim][i % mc.label_dim] as f32);
        let (edited, textures) = model.transfer(&x, &c, use_dae)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for (j, target) in targets.iter().enumerate() {
            let p = output.join(format!("{stem}_t{j}.png"));
            save_png(&sample(&edited, j)?, &p)?;
            println!("{} -> {} [{}]", path.display(), p.display(), target);
        }
        if grid {
            let texture = if use_dae {
                let one = Tensor::new(&[1, 3, size, size], img.data().to_vec())?;
                sample(&model.dae.run(&one)?.texture, 0)?
            } else {
                img.clone()
            };
            sheet.push(img);
            sheet.push(texture);
            for j in 0..n {
                sheet.push(sample(&textures, j)?);
                sheet.push(sample(&edited, j)?);
            }
        }
    }
    if grid {
        let p = output.join("grid.png");
        save_png(&tile_sheet(&sheet, 2 + 2 * labels.len())?, &p)?;
        println!("sheet {}", p.display());
    }
    Ok(())
}

pub fn eval_verify(
    common: &Common,
    checkpoint: &Path,
    manifest: Option<PathBuf>,
    n_client: Option<usize>,
    n_impostor: Option<usize>,
) -> Result<()> {
    let l = load_config(common)?;
    let c = &l.config;
    let trainer = Trainer::load(checkpoint)?;
    let data = load_dataset(&l, manifest)?;
    let train = non_empty(data.split(Split::Train), "train")?;
    let test = non_empty(data.split(Split::Test), "test")?;
    let mut cfg = c.extractor(&l);
    cfg.recipe = c.evaluation_recipe(1);
    let extractor = Extractor::train(cfg, &train, identity_count(&data))?;
    let v = edited_verification(
        &trainer.model,
        uses_dae(&trainer),
        &extractor,
        &test,
        n_client.unwrap_or(c.n_client),
        n_impostor.unwrap_or(c.n_impostor),
        c.seed,
    )?;
    let out = l.output_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("verify_summary.txt"), v.report.summary())?;
    v.report.roc.write_csv(&out.join("roc.csv"))?;
    write_pairs_csv(&out.join("pairs.csv"), &v.pairs, &test.manifest, &v.generated)?;
    print!("{}", v.report.summary());
    Ok(())
}

pub fn eval_cls(common: &Common, checkpoint: &Path, manifest: Option<PathBuf>) -> Result<()> {
    let l = load_config(common)?;
    let c = &l.config;
    let trainer = Trainer::load(checkpoint)?;
    let data = load_dataset(&l, manifest)?;
    let train = non_empty(data.split(Split::Train), "train")?;
    let test = non_empty(data.split(Split::Test), "test")?;
    let mode = data.manifest.label_mode();
    let vocabulary = data.manifest.vocabulary().to_vec();
    let tasks = match mode {
        LabelMode::MultiBinary => single_attribute_flips(&test),
        LabelMode::OneHot => {
            let source = match &c.source_class {
                Some(name) => vocabulary
                    .iter()
                    .position(|v| v == name)
                    .ok_or_else(|| CliError::Usage(format!("unknown source class `{name}`")))?,
                None => vocabulary.iter().position(|v| v == "neutral").unwrap_or(0),
            };
            neutral_transfers(&test, source)
        }
    };
    if tasks.is_empty() {
        return Err(Error::EmptySpec("no test images of the source class".into()).into());
    }
    let net = train_classifier(
        "judge",
        &train,
        c.classifier_network(),
        Task::Labels(mode),
        &c.evaluation_recipe(2),
    )?;
    let judge = AttributeClassifier { net, mode };
    let (edited, _) = run_edits(&trainer.model, uses_dae(&trainer), &test, &tasks)?;
    let report = transfer_accuracy(&judge, &edited, &tasks, &vocabulary)?;
    let out = l.output_dir();
    fs::create_dir_all(&out)?;
    report.write_confusion_csv(&out.join("confusion.csv"))?;
    let summary = format!("accuracy={:.6}\nedits={}\n", report.accuracy, report.edits);
    fs::write(out.join("cls_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn compare_curves(a: &Path, b: &Path, term: &str, output: Option<PathBuf>) -> Result<()> {
    let cmp = compare_ablation_curves(&LossLog::read_csv(a)?, &LossLog::read_csv(b)?, term)?;
    if let Some(out) = output {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        cmp.write_csv(&out)?;
    }
    println!(
        "{term}: final_a={:.6} final_b={:.6} gap={:.6} favors={:?}",
        cmp.final_a, cmp.final_b, cmp.gap, cmp.favors
    );
    Ok(())
}
