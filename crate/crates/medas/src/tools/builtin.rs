//! Built-in tool library.

use std::collections::BTreeMap;

use medas_core::classifier::{
    self, Criterion, HyperParams, ModelVariant, OcclusionScorer, PixelClassifier,
};
use medas_core::dataset::{self, DatasetItem, DatasetManifest};
use medas_core::graph::{Category, ParamSpec, PortSpec, ToolSpec};
use medas_core::image::{self, AugmentOp, Image, ResampleMode, ThresholdStrategy};
use medas_core::metrics;
use medas_core::scheduler::ResourceRequest;
use medas_core::stain::{self, LabStats, StainMatrix};
use medas_core::synthetic::{self, SyntheticKind};
use medas_core::table::{Cell, Table};
use medas_core::tensor::{DType, Tensor, TensorData};
use medas_core::{ArtifactRef, SemanticType as S, Value};
use serde_json::json;

use super::{load_role, store_as, Kernel, Output, Outputs, ToolContext, ToolError, DEFAULT_TOOL_VERSION};
use crate::csvio::loss_table;

fn spec(
    id: &str,
    category: Category,
    description: &str,
    params: Vec<ParamSpec>,
    inputs: Vec<PortSpec>,
    outputs: Vec<PortSpec>,
) -> ToolSpec {
    ToolSpec {
        tool_id: id.into(),
        version: DEFAULT_TOOL_VERSION.into(),
        category,
        description: description.into(),
        params,
        inputs,
        outputs,
        resource_hint: ResourceRequest::new(1, 0, 256),
        executable: None,
    }
}

fn text(name: &str, default: &str) -> ParamSpec {
    ParamSpec::new(name, S::Text, json!(default))
}

fn choice(name: &str, default: &str, choices: &[&str]) -> ParamSpec {
    text(name, default).with_choices(choices)
}

fn float(name: &str, default: f64) -> ParamSpec {
    ParamSpec::new(name, S::Float, json!(default))
}

fn int(name: &str, default: i64) -> ParamSpec {
    ParamSpec::new(name, S::Int, json!(default))
}

fn boolean(name: &str, default: bool) -> ParamSpec {
    ParamSpec::new(name, S::Bool, json!(default))
}

fn ds_in() -> PortSpec {
    PortSpec::input("dataset", S::Dataset)
}

fn ds_out() -> PortSpec {
    PortSpec::output("dataset", S::Dataset)
}

fn role<'a>(item: &'a DatasetItem, name: &str) -> Result<&'a ArtifactRef, ToolError> {
    item.roles.get(name).ok_or_else(|| ToolError::BadInput {
        port: "dataset".into(),
        reason: format!("item {} has no role {name}", item.item_id),
    })
}

/// Rebuilds a manifest item by item; `f` returns the new role map.
fn map_items(
    ctx: &ToolContext,
    ds: &DatasetManifest,
    mut f: impl FnMut(usize, &DatasetItem) -> Result<BTreeMap<String, ArtifactRef>, ToolError>,
) -> Result<DatasetManifest, ToolError> {
    let mut items = Vec::with_capacity(ds.items.len());
    for (i, item) in ds.items.iter().enumerate() {
        ctx.check_cancelled()?;
        items.push(DatasetItem {
            item_id: item.item_id.clone(),
            roles: f(i, item)?,
        });
    }
    Ok(DatasetManifest { items })
}

fn one(port: &str, out: Output) -> Outputs {
    BTreeMap::from([(port.to_string(), out)])
}

fn err(e: impl std::fmt::Display) -> ToolError {
    ToolError::Failed(e.to_string())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn parse_triple(name: &str, s: &str) -> Result<[f64; 3], ToolError> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| {
        ToolError::BadParam {
            name: name.into(),
            reason: e.to_string(),
        }
    })?;
    v.try_into().map_err(|_| ToolError::BadParam {
        name: name.into(),
        reason: "expected three comma-separated numbers".into(),
    })
}

// ---- input ----

fn synthetic_dataset(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let kind = match ctx.text("kind")? {
        "blobs2d_he" => SyntheticKind::Blobs2dHe,
        _ => SyntheticKind::Blobs2d,
    };
    let n = ctx.usize("n_items")?;
    let seed = ctx.i64("seed")? as u64;
    let mut items = Vec::with_capacity(n);
    for (i, it) in synthetic::generate(kind, n, seed).into_iter().enumerate() {
        ctx.check_cancelled()?;
        let image = match kind {
            SyntheticKind::Blobs2d => store_as(ctx.store, &it.image, DType::F32)?,
            SyntheticKind::Blobs2dHe => store_as(ctx.store, &it.image, DType::U8)?,
        };
        let roles = BTreeMap::from([
            ("image".to_string(), image),
            ("label".to_string(), ctx.store.put_tensor(&it.mask.to_mask_tensor()?)?),
            ("instances".to_string(), ctx.store.put_tensor(&it.instances.to_label_tensor()?)?),
        ]);
        items.push(DatasetItem {
            item_id: format!("item-{i:04}"),
            roles,
        });
    }
    Ok(one("dataset", Output::Dataset(DatasetManifest { items })))
}

fn load_dataset(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let r = ctx.store.lookup(ctx.text("hash")?)?;
    let ds = ctx.store.get_dataset(&r)?;
    ds.validate()?;
    Ok(one("dataset", Output::Ref(r)))
}

fn load_image(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let r = ctx.store.lookup(ctx.text("hash")?)?;
    ctx.store.get_image(&r)?;
    Ok(one("image", Output::Ref(r)))
}

// ---- pre-processing ----

fn map_role(
    ctx: &ToolContext,
    f: impl Fn(&Image) -> Result<Image, ToolError>,
    dtype: Option<DType>,
) -> Result<Outputs, ToolError> {
    let ds = ctx.dataset("dataset")?;
    let role_name = ctx.text("role")?.to_string();
    let out = map_items(ctx, &ds, |_, item| {
        let (img, stored) = load_role(ctx.store, role(item, &role_name)?)?;
        let mut roles = item.roles.clone();
        roles.insert(role_name.clone(), store_as(ctx.store, &f(&img)?, dtype.unwrap_or(stored))?);
        Ok(roles)
    })?;
    Ok(one("dataset", Output::Dataset(out)))
}

fn window_level(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let (w, l) = (ctx.f64("width")?, ctx.f64("level")?);
    map_role(ctx, |img| Ok(image::window_level_rescale(img, w, l)?), Some(DType::F32))
}

fn zscore(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    map_role(ctx, |img| Ok(image::zscore_normalize(img)), Some(DType::F32))
}

fn resample(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let factor = ctx.f64("factor")?;
    let mode = match ctx.text("mode")? {
        "nearest" => ResampleMode::Nearest,
        _ => ResampleMode::Linear,
    };
    let role_name = ctx.text("role")?.to_string();
    let ds = ctx.dataset("dataset")?;
    let out = map_items(ctx, &ds, |_, item| {
        let mut roles = BTreeMap::new();
        for (name, r) in &item.roles {
            let (img, dtype) = load_role(ctx.store, r)?;
            let m = if *name == role_name { mode } else { ResampleMode::Nearest };
            let mut factors = vec![factor, factor];
            factors.extend(std::iter::repeat_n(1.0, img.shape.len().saturating_sub(2)));
            roles.insert(name.clone(), store_as(ctx.store, &image::resample(&img, &factors, m)?, dtype)?);
        }
        Ok(roles)
    })?;
    Ok(one("dataset", Output::Dataset(out)))
}

fn foreground_mask(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let ds = ctx.dataset("dataset")?;
    let (src, dst) = (ctx.text("role")?, ctx.text("out_role")?);
    let out = map_items(ctx, &ds, |_, item| {
        let (img, _) = load_role(ctx.store, role(item, src)?)?;
        let fm = image::foreground_mask(&img)?;
        if fm.degenerate {
            ctx.logger
                .warn(Some(&ctx.node_id), format!("DegenerateImage: {} is single-valued", item.item_id));
        }
        let mut roles = item.roles.clone();
        roles.insert(dst.into(), ctx.store.put_tensor(&fm.mask.to_mask_tensor()?)?);
        Ok(roles)
    })?;
    Ok(one("dataset", Output::Dataset(out)))
}

fn rgb_pixels(img: &Image) -> Vec<[f64; 3]> {
    img.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn stain_normalize(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let ds = ctx.dataset("dataset")?;
    let role_name = ctx.text("role")?;
    let explicit = ctx.text("target_stats")?;
    let target = if explicit.trim().is_empty() {
        let idx = ctx.usize("reference_index")?;
        let item = ds.items.get(idx).ok_or_else(|| ToolError::BadParam {
            name: "reference_index".into(),
            reason: format!("dataset has {} items", ds.items.len()),
        })?;
        let (img, _) = load_role(ctx.store, role(item, role_name)?)?;
        let lab: Vec<[f64; 3]> = rgb_pixels(&img).into_iter().map(stain::rgb_to_lab).collect();
        LabStats::of(&lab)
    } else {
        let v: Vec<f64> = explicit
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| ToolError::BadParam {
                name: "target_stats".into(),
                reason: e.to_string(),
            })?;
        let arr: [f64; 6] = v.try_into().map_err(|_| ToolError::BadParam {
            name: "target_stats".into(),
            reason: "expected six numbers mL,ma,mb,sL,sa,sb".into(),
        })?;
        LabStats::from_flat(arr)
    };
    ctx.logger.emit(
        Some(&ctx.node_id),
        crate::logging::Level::Debug,
        "reinhard target",
        BTreeMap::from([("target_stats".to_string(), json!(target.to_flat()))]),
    );
    map_role(ctx, |img| Ok(stain::stain_normalize_reinhard(img, &target)?), Some(DType::U8))
}

fn stain_deconvolve(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let ds = ctx.dataset("dataset")?;
    let matrix = StainMatrix::new(
        parse_triple("hematoxylin", ctx.text("hematoxylin")?)?,
        parse_triple("eosin", ctx.text("eosin")?)?,
    );
    let (src, h_role, e_role) = (ctx.text("role")?, ctx.text("h_role")?, ctx.text("e_role")?);
    let out = map_items(ctx, &ds, |_, item| {
        let (img, _) = load_role(ctx.store, role(item, src)?)?;
        let (h, e) = stain::stain_deconvolve(&img, &matrix)?;
        let mut roles = item.roles.clone();
        roles.insert(h_role.into(), store_as(ctx.store, &h, DType::F32)?);
        roles.insert(e_role.into(), store_as(ctx.store, &e, DType::F32)?);
        Ok(roles)
    })?;
    Ok(one("dataset", Output::Dataset(out)))
}

// ---- augmentation ----

fn augment(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let ds = ctx.dataset("dataset")?;
    let op = match ctx.text("op")? {
        "mirror" => AugmentOp::Mirror { axis: ctx.usize("axis")? },
        "rot90" => AugmentOp::Rot90 { k: ctx.usize("k")? as u32 },
        "crop" => AugmentOp::Crop {
            origin: [ctx.usize("origin_y")?, ctx.usize("origin_x")?],
            size: [ctx.usize("height")?, ctx.usize("width")?],
        },
        "random_crop" => AugmentOp::RandomCrop {
            size: [ctx.usize("height")?, ctx.usize("width")?],
        },
        _ => AugmentOp::GaussianNoise {
            sigma: ctx.f64("sigma")?,
        },
    };
    let noise_role = ctx.text("role")?;
    let augmented = map_items(ctx, &ds, |i, item| {
        let seed = ctx.sub_seed(i as u64);
        let mut roles = BTreeMap::new();
        for (name, r) in &item.roles {
            let (img, dtype) = load_role(ctx.store, r)?;
            let out = match op {
                AugmentOp::GaussianNoise { .. } if name != noise_role => img,
                _ => image::augment(&img, op, seed, None)?,
            };
            roles.insert(name.clone(), store_as(ctx.store, &out, dtype)?);
        }
        Ok(roles)
    })?;
    let items = if ctx.bool("append")? {
        let mut items = ds.items.clone();
        items.extend(augmented.items.into_iter().map(|mut it| {
            it.item_id.push_str("+aug");
            it
        }));
        items
    } else {
        augmented.items
    };
    Ok(one("dataset", Output::Dataset(DatasetManifest { items })))
}

// ---- dataset management ----

fn split(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let ds = ctx.dataset("dataset")?;
    let (train, test) = dataset::split(&ds, ctx.f64("ratio")?, ctx.i64("seed")? as u64)?;
    Ok(BTreeMap::from([
        ("train".to_string(), Output::Dataset(train)),
        ("test".to_string(), Output::Dataset(test)),
    ]))
}

fn pick(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let ds = ctx.dataset("dataset")?;
    let idx = ctx.usize("index")?;
    let item = ds.items.get(idx).ok_or_else(|| ToolError::BadParam {
        name: "index".into(),
        reason: format!("dataset has {} items", ds.items.len()),
    })?;
    Ok(one("image", Output::Ref(role(item, ctx.text("role")?)?.clone())))
}

// ---- model ----

fn hyper_params(ctx: &ToolContext) -> Result<HyperParams, ToolError> {
    let epochs = u32::try_from(ctx.i64("epochs")?).map_err(err)?;
    let criterion = match ctx.text("criterion")? {
        "dice" => Criterion::Dice,
        _ => Criterion::Bce,
    };
    let model_variant = match ctx.text("model_variant")? {
        "quadratic-features" => ModelVariant::QuadraticFeatures,
        _ => ModelVariant::Linear,
    };
    Ok(HyperParams {
        epochs,
        learning_rate: ctx.f64("learning_rate")?,
        criterion,
        model_variant,
    })
}

fn train(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let ds = ctx.dataset("train")?;
    let hp = hyper_params(ctx)?;
    let (img_role, label_role) = (ctx.text("image_role")?, ctx.text("label_role")?);
    let mut samples = Vec::with_capacity(ds.items.len());
    for item in &ds.items {
        let (img, _) = load_role(ctx.store, role(item, img_role)?)?;
        let (label, _) = load_role(ctx.store, role(item, label_role)?)?;
        samples.push((img, label));
    }
    ctx.check_cancelled()?;
    let (model, losses) = classifier::train(&samples, &hp, ctx.seed)?;
    for (epoch, loss) in losses.iter().enumerate() {
        ctx.logger.emit(
            Some(&ctx.node_id),
            crate::logging::Level::Info,
            "epoch",
            BTreeMap::from([("epoch".to_string(), json!(epoch + 1)), ("loss".to_string(), json!(loss))]),
        );
    }
    Ok(BTreeMap::from([
        ("model".to_string(), Output::Json(serde_json::to_value(&model).map_err(err)?)),
        ("loss".to_string(), Output::Table(loss_table(&losses))),
    ]))
}

fn predict(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let model = ctx.model("model")?;
    let ds = ctx.dataset("dataset")?;
    let (src, dst) = (ctx.text("image_role")?, ctx.text("out_role")?);
    let out = map_items(ctx, &ds, |_, item| {
        let (img, _) = load_role(ctx.store, role(item, src)?)?;
        let prob = classifier::predict(&model, &img)?;
        let mut roles = item.roles.clone();
        roles.insert(dst.into(), store_as(ctx.store, &prob, DType::F32)?);
        Ok(roles)
    })?;
    Ok(one("dataset", Output::Dataset(out)))
}

// ---- post-processing ----

fn binary_normalize(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let ds = ctx.dataset("dataset")?;
    let strategy = match ctx.text("strategy")? {
        "fixed" => ThresholdStrategy::Fixed(ctx.f64("threshold")?),
        _ => ThresholdStrategy::Otsu,
    };
    let min_area = ctx.usize("min_area")?;
    let (src, dst, inst) = (ctx.text("in_role")?, ctx.text("out_role")?, ctx.text("instances_role")?);
    let out = map_items(ctx, &ds, |_, item| {
        let (prob, _) = load_role(ctx.store, role(item, src)?)?;
        let mask = image::binary_normalize(&prob, strategy, min_area)?;
        let labels = image::label_map(&mask)?;
        let mut roles = item.roles.clone();
        roles.insert(dst.into(), ctx.store.put_tensor(&mask.to_mask_tensor()?)?);
        roles.insert(inst.into(), ctx.store.put_tensor(&labels.to_label_tensor()?)?);
        Ok(roles)
    })?;
    Ok(one("dataset", Output::Dataset(out)))
}

// ---- metrics ----

fn pairs(ctx: &ToolContext) -> Result<Vec<(String, Image, Image)>, ToolError> {
    let ds = ctx.dataset("dataset")?;
    let (p, g) = (ctx.text("pred_role")?, ctx.text("gt_role")?);
    ds.items
        .iter()
        .map(|item| {
            let (pred, _) = load_role(ctx.store, role(item, p)?)?;
            let (gt, _) = load_role(ctx.store, role(item, g)?)?;
            Ok((item.item_id.clone(), pred, gt))
        })
        .collect()
}

fn scored(ctx: &ToolContext, column: &str, f: fn(&Image, &Image) -> Result<f64, ToolError>) -> Result<Outputs, ToolError> {
    let mut table = Table::new(["item_id", column]);
    let mut scores = Vec::new();
    for (id, pred, gt) in pairs(ctx)? {
        let s = f(&pred, &gt)?;
        scores.push(s);
        table.push(vec![Cell::Text(id), Cell::Float(s)]);
    }
    let m = mean(&scores);
    ctx.logger.emit(
        Some(&ctx.node_id),
        crate::logging::Level::Info,
        "metric",
        BTreeMap::from([(column.to_string(), json!(m))]),
    );
    Ok(BTreeMap::from([
        ("score".to_string(), Output::Scalar(Value::Float(m))),
        ("table".to_string(), Output::Table(table)),
    ]))
}

fn binarize(img: &Image) -> Image {
    img.map(|v| f64::from(u8::from(v != 0.0)))
}

fn dice_of(p: &Image, g: &Image) -> Result<f64, ToolError> {
    Ok(metrics::dice_score(&binarize(p), &binarize(g))?)
}

fn aji_of(p: &Image, g: &Image) -> Result<f64, ToolError> {
    Ok(metrics::aji_score(p, g)?)
}

fn accuracy_of(p: &Image, g: &Image) -> Result<f64, ToolError> {
    if p.shape != g.shape {
        return Err(metrics::MetricError::ShapeMismatch.into());
    }
    let hits = p.data.iter().zip(&g.data).filter(|(a, b)| (**a != 0.0) == (**b != 0.0)).count();
    Ok(hits as f64 / p.len().max(1) as f64)
}

fn dice(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    scored(ctx, "dice", dice_of)
}

fn aji(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    scored(ctx, "aji", aji_of)
}

fn accuracy(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    scored(ctx, "accuracy", accuracy_of)
}

fn result_analysis(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let mut table = Table::new(["item_id", "dice", "accuracy", "pred_area", "gt_area"]);
    let mut dices = Vec::new();
    for (id, pred, gt) in pairs(ctx)? {
        let d = dice_of(&pred, &gt)?;
        dices.push(d);
        let area = |m: &Image| m.data.iter().filter(|v| **v != 0.0).count() as i64;
        table.push(vec![
            Cell::Text(id),
            Cell::Float(d),
            Cell::Float(accuracy_of(&pred, &gt)?),
            Cell::Int(area(&pred)),
            Cell::Int(area(&gt)),
        ]);
    }
    Ok(BTreeMap::from([
        ("table".to_string(), Output::Table(table)),
        ("mean_dice".to_string(), Output::Scalar(Value::Float(mean(&dices)))),
    ]))
}

// ---- visualization ----

fn overlay(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let ds = ctx.dataset("dataset")?;
    let idx = ctx.usize("index")?;
    let item = ds.items.get(idx).ok_or_else(|| ToolError::BadParam {
        name: "index".into(),
        reason: format!("dataset has {} items", ds.items.len()),
    })?;
    let (img, _) = load_role(ctx.store, role(item, ctx.text("image_role")?)?)?;
    let (mask, _) = load_role(ctx.store, role(item, ctx.text("mask_role")?)?)?;
    let png = crate::pngio::overlay(&img, &mask).map_err(ToolError::Failed)?;
    Ok(one("overlay", Output::Png(png)))
}

fn loss_curve(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let t = ctx.table("loss")?;
    let losses = t.column_f64("loss").ok_or_else(|| ToolError::BadInput {
        port: "loss".into(),
        reason: "table has no numeric loss column".into(),
    })?;
    let chart = crate::pngio::line_chart(&losses, ctx.usize("width")?.max(2), ctx.usize("height")?.max(2));
    Ok(one("plot", Output::Png(chart)))
}

fn occlusion(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let model: PixelClassifier = ctx.model("model")?;
    let img = ctx.image("image")?;
    let scorer = match ctx.text("scorer")? {
        "dice_vs" => OcclusionScorer::DiceVs(binarize(&ctx.image("gt")?)),
        _ => OcclusionScorer::MeanProb,
    };
    let heat = classifier::occlusion_sensitivity(&model, &img, ctx.usize("block")?, ctx.usize("stride")?, &scorer)?;
    Ok(BTreeMap::from([
        ("png".to_string(), Output::Png(crate::pngio::to_display(&heat))),
        ("heatmap".to_string(), Output::Image(heat)),
    ]))
}

// ---- diagnostics ----

fn scalar_blob(ctx: &ToolContext, v: f64) -> Result<Outputs, ToolError> {
    let blob = ctx.store.put_tensor(&Tensor::new(vec![1], TensorData::F64(vec![v]))?)?;
    Ok(BTreeMap::from([
        ("value".to_string(), Output::Scalar(Value::Float(v))),
        ("blob".to_string(), Output::Ref(blob)),
    ]))
}

fn constant(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    scalar_blob(ctx, ctx.f64("value")?)
}

fn add(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    scalar_blob(ctx, ctx.f64("x")? + ctx.f64("delta")?)
}

fn join(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    scalar_blob(ctx, ctx.f64("a")? + ctx.f64("b")?)
}

fn fail(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    Err(ToolError::Failed(ctx.text("message")?.to_string()))
}

fn sleep(ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let until = std::time::Instant::now() + std::time::Duration::from_millis(ctx.usize("millis")? as u64);
    while std::time::Instant::now() < until {
        ctx.check_cancelled()?;
        std::thread::sleep(std::time::Duration::from_millis(5));
    }
    scalar_blob(ctx, ctx.f64("x").unwrap_or(0.0))
}

fn scalar_outputs() -> Vec<PortSpec> {
    vec![PortSpec::output("value", S::Float), PortSpec::output("blob", S::Tensor)]
}

/// Every built-in tool contract with its kernel.
pub fn builtin_specs() -> Vec<(ToolSpec, Kernel)> {
    use Category::*;
    let role = || text("role", "image");
    let item_count = int("n_items", 16).with_range(2.0, 10_000.0);
    vec![
        (
            spec(
                "medas.input.synthetic_dataset",
                Input,
                "Seeded Gaussian-blob images with masks and instance labels",
                vec![
                    choice("kind", "blobs2d", &["blobs2d", "blobs2d_he"]),
                    item_count,
                    int("seed", 7).with_range(0.0, 9_007_199_254_740_992.0),
                ],
                vec![],
                vec![ds_out()],
            ),
            synthetic_dataset as Kernel,
        ),
        (
            spec(
                "medas.input.load_dataset",
                Input,
                "Dataset manifest already in the artifact store",
                vec![],
                vec![PortSpec::input("hash", S::Text)],
                vec![ds_out()],
            ),
            load_dataset,
        ),
        (
            spec(
                "medas.input.load_image",
                Input,
                "Image artifact already in the artifact store",
                vec![],
                vec![PortSpec::input("hash", S::Text)],
                vec![PortSpec::output("image", S::Image)],
            ),
            load_image,
        ),
        (
            spec(
                "medas.preprocess.window_level",
                PreProcess,
                "Clamp to a window and rescale to [0, 1]",
                vec![float("width", 400.0).with_range(1e-9, 1e12), float("level", 0.0), role()],
                vec![ds_in()],
                vec![ds_out()],
            ),
            window_level,
        ),
        (
            spec(
                "medas.preprocess.zscore",
                PreProcess,
                "Zero mean, unit variance per image",
                vec![role()],
                vec![ds_in()],
                vec![ds_out()],
            ),
            zscore,
        ),
        (
            spec(
                "medas.preprocess.resample",
                PreProcess,
                "Rescale spatial axes; non-image roles use nearest neighbour",
                vec![
                    float("factor", 1.0).with_range(1e-3, 100.0),
                    choice("mode", "linear", &["linear", "nearest"]),
                    role(),
                ],
                vec![ds_in()],
                vec![ds_out()],
            ),
            resample,
        ),
        (
            spec(
                "medas.preprocess.foreground_mask",
                PreProcess,
                "Otsu threshold, largest component, holes filled",
                vec![role(), text("out_role", "mask")],
                vec![ds_in()],
                vec![ds_out()],
            ),
            foreground_mask,
        ),
        (
            spec(
                "medas.preprocess.stain_normalize",
                PreProcess,
                "Reinhard LAB statistics transfer for RGB images",
                vec![
                    role(),
                    int("reference_index", 0).with_range(0.0, 1e9),
                    text("target_stats", "").describe("mL,ma,mb,sL,sa,sb; empty uses the reference item"),
                ],
                vec![ds_in()],
                vec![ds_out()],
            ),
            stain_normalize,
        ),
        (
            spec(
                "medas.preprocess.stain_deconvolve",
                PreProcess,
                "Optical-density unmixing into hematoxylin and eosin maps",
                vec![
                    role(),
                    text("hematoxylin", "0.650,0.704,0.286"),
                    text("eosin", "0.072,0.990,0.105"),
                    text("h_role", "image"),
                    text("e_role", "eosin"),
                ],
                vec![ds_in()],
                vec![ds_out()],
            ),
            stain_deconvolve,
        ),
        (
            spec(
                "medas.augment.augment",
                Augment,
                "Mirror, rotate, crop or add Gaussian noise",
                vec![
                    choice("op", "mirror", &["mirror", "rot90", "crop", "random_crop", "gaussian_noise"]),
                    int("axis", 1).with_range(0.0, 3.0),
                    int("k", 1).with_range(0.0, 3.0),
                    int("origin_y", 0).with_range(0.0, 1e9),
                    int("origin_x", 0).with_range(0.0, 1e9),
                    int("height", 64).with_range(1.0, 1e9),
                    int("width", 64).with_range(1.0, 1e9),
                    float("sigma", 0.0).with_range(0.0, 1e9),
                    boolean("append", true),
                    role(),
                ],
                vec![ds_in()],
                vec![ds_out()],
            ),
            augment,
        ),
        (
            spec(
                "medas.dataset.split",
                DatasetMgmt,
                "Seeded train/test split",
                vec![
                    float("ratio", 0.8).with_range(1e-6, 1.0 - 1e-6),
                    int("seed", 42).with_range(0.0, 9_007_199_254_740_992.0),
                ],
                vec![ds_in()],
                vec![PortSpec::output("train", S::Dataset), PortSpec::output("test", S::Dataset)],
            ),
            split,
        ),
        (
            spec(
                "medas.dataset.pick",
                DatasetMgmt,
                "One role of one item as an image",
                vec![int("index", 0).with_range(0.0, 1e9), role()],
                vec![ds_in()],
                vec![PortSpec::output("image", S::Image)],
            ),
            pick,
        ),
        (
            spec(
                "medas.model.train_pixel_classifier",
                Model,
                "Logistic pixel classifier trained by mini-batch gradient descent",
                vec![
                    int("epochs", 50).with_range(1.0, 100_000.0),
                    float("learning_rate", 0.1).with_range(1e-12, 100.0),
                    choice("criterion", "bce", &["bce", "dice"]),
                    choice("model_variant", "linear", &["linear", "quadratic-features"]),
                    text("image_role", "image"),
                    text("label_role", "label"),
                ],
                vec![PortSpec::input("train", S::Dataset)],
                vec![PortSpec::output("model", S::ModelBlob), PortSpec::output("loss", S::Table)],
            ),
            train,
        ),
        (
            spec(
                "medas.model.predict_pixel_classifier",
                Model,
                "Per-pixel foreground probability",
                vec![text("image_role", "image"), text("out_role", "prob")],
                vec![PortSpec::input("model", S::ModelBlob), ds_in()],
                vec![ds_out()],
            ),
            predict,
        ),
        (
            spec(
                "medas.postprocess.binary_normalize",
                PostProcess,
                "Threshold probabilities and drop small components",
                vec![
                    choice("strategy", "otsu", &["otsu", "fixed"]),
                    float("threshold", 0.5).with_range(0.0, 1.0),
                    int("min_area", image::DEFAULT_MIN_AREA as i64).with_range(0.0, 1e9),
                    text("in_role", "prob"),
                    text("out_role", "pred"),
                    text("instances_role", "pred_instances"),
                ],
                vec![ds_in()],
                vec![ds_out()],
            ),
            binary_normalize,
        ),
        (
            spec(
                "medas.metric.dice",
                Metric,
                "Mean Dice score over items",
                vec![text("pred_role", "pred"), text("gt_role", "label")],
                vec![ds_in()],
                vec![PortSpec::output("score", S::Float), PortSpec::output("table", S::Table)],
            ),
            dice,
        ),
        (
            spec(
                "medas.metric.aji",
                Metric,
                "Mean Aggregated Jaccard Index over items",
                vec![text("pred_role", "pred_instances"), text("gt_role", "instances")],
                vec![ds_in()],
                vec![PortSpec::output("score", S::Float), PortSpec::output("table", S::Table)],
            ),
            aji,
        ),
        (
            spec(
                "medas.metric.accuracy",
                Metric,
                "Mean pixel accuracy over items",
                vec![text("pred_role", "pred"), text("gt_role", "label")],
                vec![ds_in()],
                vec![PortSpec::output("score", S::Float), PortSpec::output("table", S::Table)],
            ),
            accuracy,
        ),
        (
            spec(
                "medas.metric.result_analysis",
                Metric,
                "Per-item Dice, accuracy and areas",
                vec![text("pred_role", "pred"), text("gt_role", "label")],
                vec![ds_in()],
                vec![PortSpec::output("table", S::Table), PortSpec::output("mean_dice", S::Float)],
            ),
            result_analysis,
        ),
        (
            spec(
                "medas.visualize.overlay",
                Visualize,
                "Mask blended in red over the image, as PNG",
                vec![int("index", 0).with_range(0.0, 1e9), text("image_role", "image"), text("mask_role", "pred")],
                vec![ds_in()],
                vec![PortSpec::output("overlay", S::Image)],
            ),
            overlay,
        ),
        (
            spec(
                "medas.visualize.loss_curve",
                Visualize,
                "Loss curve rendered as PNG",
                vec![int("width", 256).with_range(2.0, 4096.0), int("height", 128).with_range(2.0, 4096.0)],
                vec![PortSpec::input("loss", S::Table)],
                vec![PortSpec::output("plot", S::Image)],
            ),
            loss_curve,
        ),
        (
            spec(
                "medas.visualize.occlusion_sensitivity",
                Visualize,
                "Score drop when a block is replaced by the image mean",
                vec![
                    int("block", 16).with_range(1.0, 1e6),
                    int("stride", 16).with_range(1.0, 1e6),
                    choice("scorer", "mean_prob", &["mean_prob", "dice_vs"]),
                ],
                vec![
                    PortSpec::input("model", S::ModelBlob),
                    PortSpec::input("image", S::Image),
                    PortSpec::optional_input("gt", S::Image),
                ],
                vec![PortSpec::output("heatmap", S::Image), PortSpec::output("png", S::Image)],
            ),
            occlusion,
        ),
        (
            spec("medas.debug.constant", Input, "Emit a number", vec![float("value", 0.0)], vec![], scalar_outputs()),
            constant,
        ),
        (
            spec(
                "medas.debug.add",
                PreProcess,
                "x + delta",
                vec![float("delta", 1.0)],
                vec![PortSpec::input("x", S::Float)],
                scalar_outputs(),
            ),
            add,
        ),
        (
            spec(
                "medas.debug.join",
                PreProcess,
                "a + b",
                vec![],
                vec![PortSpec::input("a", S::Float), PortSpec::input("b", S::Float)],
                scalar_outputs(),
            ),
            join,
        ),
        (
            spec(
                "medas.debug.fail",
                PreProcess,
                "Always fails",
                vec![text("message", "deliberate failure")],
                vec![PortSpec::optional_input("x", S::Float)],
                scalar_outputs(),
            ),
            fail,
        ),
        (
            spec(
                "medas.debug.sleep",
                PreProcess,
                "Wait, then pass x through",
                vec![int("millis", 100).with_range(0.0, 86_400_000.0)],
                vec![PortSpec::optional_input("x", S::Float)],
                scalar_outputs(),
            ),
            sleep,
        ),
    ]
}
