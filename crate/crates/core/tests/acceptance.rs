//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 4 5`.

mod common;

use std::collections::HashMap;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use leafscope::dataset::{split_dataset, split_from_tsv, split_to_tsv, Manifest, ManifestEntry, SplitTag};
use leafscope::exec;
use leafscope::metrics::{derive_metrics, format_report, report_to_tsv, ConfusionMatrix, Metrics};
use leafscope::model::{
    build_cnn, build_leaf_cnn, evaluate, weights_from_bytes, weights_to_bytes, EpochRecord, History, ModelGraph,
};
use leafscope::preprocess::{green_mask, leaf_mask, morph_refine, BinaryMask, HsvImage, MorphOp, PreprocessConfig, RgbImage};
use leafscope::xai::{
    explain, faster_scorecam, gradcam, layercam, scorecam_detailed, ActivationModel, CamMethod, CamRequest, Heatmap,
};
use leafscope::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Runner {
    only: Vec<usize>,
    failures: usize,
}

impl Runner {
    fn wants(&self, n: usize) -> bool {
        self.only.is_empty() || self.only.contains(&n)
    }

    fn run(&mut self, n: usize, name: &str, limit_secs: Option<f64>, f: impl FnOnce() -> Check) {
        if !self.wants(n) {
            return;
        }
        let start = Instant::now();
        let result = match panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        let result = match (result, limit_secs) {
            (Ok(d), Some(lim)) if secs >= lim => Err(format!("{d}; took {secs:.1} s, limit {lim} s")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail} ({secs:.1} s)"),
            Err(detail) => {
                self.failures += 1;
                println!("criterion {n} FAIL  {name}: {detail} ({secs:.1} s)");
            }
        }
    }
}

fn gradient_suite() -> Check {
    let instances = common::grad::all_instances();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut skipped = 0;
    for (name, f) in &instances {
        let r = f();
        ensure(r.checked > 0, || format!("{name}: no coordinate checked"))?;
        checked += r.checked;
        skipped += r.skipped;
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, name.clone());
        }
    }
    ensure(instances.len() >= 20, || format!("only {} instances", instances.len()))?;
    ensure(worst.0 <= common::grad::TOLERANCE, || {
        format!("max relative error {:.3e} in {}", worst.0, worst.1)
    })?;
    Ok(format!(
        "{} instances, {checked} coordinates ({skipped} kinks skipped), max rel err {:.2e} ({})",
        instances.len(),
        worst.0,
        worst.1
    ))
}

fn preprocessing_suite() -> Check {
    let hsv = HsvImage::new(4, 1, vec![[25, 40, 40], [90, 255, 255], [24, 40, 40], [91, 255, 255]]).unwrap();
    let cfg = PreprocessConfig::default();
    let m = green_mask(&hsv, cfg.lower, cfg.upper);
    ensure(m.data() == [1, 1, 0, 0], || format!("bound pixels gave {:?}", m.data()))?;

    let (w, h, cx, cy, r) = (200usize, 160usize, 97.3f64, 81.6f64, 52.0f64);
    let inside = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        dx * dx + dy * dy <= r * r
    };
    let mut img = RgbImage::filled(w, h, [255, 255, 255]);
    for y in 0..h {
        for x in 0..w {
            if inside(x, y) {
                img.put_pixel(x, y, [46, 139, 52]);
            }
        }
    }
    let iou = leaf_mask(&img, &cfg).unwrap().iou(&BinaryMask::from_fn(w, h, inside));
    ensure(iou >= 0.99, || format!("disk IoU {iou:.4}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dots: Vec<(usize, usize)> = (0..60).map(|_| (rng.gen_range(0..w), rng.gen_range(0..h))).collect();
    let speckle = BinaryMask::from_fn(w, h, |x, y| dots.contains(&(x, y)));
    let opened = morph_refine(&speckle, MorphOp::Open, 5, 1).unwrap();
    ensure(opened.count() == 0, || format!("{} pixels survived opening", opened.count()))?;
    let with_blob = BinaryMask::from_fn(w, h, |x, y| dots.contains(&(x, y)) || (20..60).contains(&x) && (20..60).contains(&y));
    let opened = morph_refine(&with_blob, MorphOp::Open, 5, 1).unwrap();
    let blob = BinaryMask::from_fn(w, h, |x, y| (20..60).contains(&x) && (20..60).contains(&y));
    ensure(opened == blob || opened.iou(&blob) == 1.0, || "opening altered the blob or kept a speck".into())?;
    Ok(format!("inclusive bounds hold, disk IoU {iou:.4}, 60 specks removed"))
}

fn manifest_with_sizes(sizes: &[usize]) -> Manifest {
    let class_names: Vec<String> = (0..sizes.len()).map(|c| format!("class_{c}")).collect();
    let entries = sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| {
            let name = class_names[c].clone();
            (0..n).map(move |i| ManifestEntry {
                path: format!("{name}/img_{i:04}.png"),
                class_id: c,
                class_name: name.clone(),
            })
        })
        .collect();
    Manifest { entries, class_names }
}

fn split_suite() -> Check {
    let sizes = [3usize, 10, 100, 105, 1000];
    let manifest = manifest_with_sizes(&sizes);
    let a = split_dataset(&manifest, 42).unwrap();
    let b = split_dataset(&manifest, 42).unwrap();
    let c = split_dataset(&manifest, 43).unwrap();
    ensure(a.tags == b.tags, || "same seed gave different assignments".into())?;
    let groups = manifest.by_class();
    for (class, &n) in sizes.iter().enumerate() {
        let count = |tag| groups[class].iter().filter(|&&i| a.tags[i] == tag).count();
        let got = (count(SplitTag::Train), count(SplitTag::Val), count(SplitTag::Test));
        let want = (n * 8 / 10, n / 10, n - n * 8 / 10 - n / 10);
        ensure(got == want, || format!("n={n}: got {got:?}, want {want:?}"))?;
        if n >= 10 {
            let differs = groups[class].iter().any(|&i| a.tags[i] != c.tags[i]);
            ensure(differs, || format!("n={n}: seeds 42 and 43 agree"))?;
        }
    }
    Ok("exact counts for n in {3, 10, 100, 105, 1000}, seed-stable, seed-sensitive".into())
}

/// Channels 0..4 are the input restricted to one quadrant each, channel 4 is
/// flat. Class 0 reads only quadrant `hot`; class 1 reads the whole image weakly.
struct QuadrantModel {
    hot: usize,
}

const Q: usize = 8;

fn quadrant(x: usize, y: usize) -> usize {
    (y >= Q / 2) as usize * 2 + (x >= Q / 2) as usize
}

impl ActivationModel for QuadrantModel {
    fn input_shape(&self) -> [usize; 3] {
        [1, Q, Q]
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn activations(&self, input: &Tensor, _layer: &str) -> leafscope::Result<(Tensor, Tensor)> {
        let mut a = Tensor::zeros(vec![5, Q, Q]);
        for y in 0..Q {
            for x in 0..Q {
                let v = input.at(&[0, y, x]);
                a.data_mut()[(quadrant(x, y) * Q + y) * Q + x] = v;
                a.data_mut()[(4 * Q + y) * Q + x] = 1.0;
            }
        }
        let logits = self.logits(&input.clone().reshape(vec![1, 1, Q, Q])?)?;
        Ok((a, logits.reshape(vec![2])?))
    }

    fn logits(&self, batch: &Tensor) -> leafscope::Result<Tensor> {
        let n = batch.shape()[0];
        let mut out = Vec::with_capacity(2 * n);
        for b in 0..n {
            let img = batch.outer_slice(b);
            let (mut hot, mut all) = (0.0f32, 0.0f32);
            for y in 0..Q {
                for x in 0..Q {
                    let v = img[y * Q + x];
                    all += v;
                    if quadrant(x, y) == self.hot {
                        hot += v;
                    }
                }
            }
            out.extend([0.25 * hot, 0.02 * all]);
        }
        Tensor::new(vec![n, 2], out)
    }
}

/// ScoreCAM weights computed directly from the definition, in f64.
fn brute_force_scorecam(model: &QuadrantModel, input: &Tensor, class: usize) -> (Vec<usize>, Vec<f64>) {
    let (acts, _) = model.activations(input, "quads").unwrap();
    let blank = model.logits(&Tensor::zeros(vec![1, 1, Q, Q])).unwrap().data()[class] as f64;
    let mut channels = Vec::new();
    let mut cic = Vec::new();
    for k in 0..5 {
        let plane: Vec<f64> = (0..Q * Q).map(|i| acts.data()[k * Q * Q + i] as f64).collect();
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            continue;
        }
        let masked: Vec<f32> = (0..Q * Q)
            .map(|i| (input.data()[i] as f64 * (plane[i] - lo) / (hi - lo)) as f32)
            .collect();
        let score = model.logits(&Tensor::new(vec![1, 1, Q, Q], masked).unwrap()).unwrap().data()[class] as f64;
        channels.push(k);
        cic.push(score - blank);
    }
    let top = cic.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = cic.iter().map(|c| (c - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    (channels, exps.iter().map(|e| e / total).collect())
}

fn scorecam_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for hot in 0..4 {
        let model = QuadrantModel { hot };
        let input = Tensor::from_fn(vec![1, Q, Q], |_| rng.gen_range(0.3f32..1.0));
        let (_, trace) = scorecam_detailed(&model, &input, &CamRequest::new(CamMethod::ScoreCam).layer("quads").class(0))
            .map_err(|e| e.to_string())?;
        let (channels, weights) = brute_force_scorecam(&model, &input, 0);
        ensure(trace.channels == channels, || format!("channels {:?} vs {:?}", trace.channels, channels))?;
        for (a, b) in trace.weights.iter().zip(&weights) {
            worst = worst.max((*a as f64 - b).abs());
        }
        let best = |w: &[f64]| (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
        let lib: Vec<f64> = trace.weights.iter().map(|&v| v as f64).collect();
        ensure(channels[best(&weights)] == hot, || format!("oracle favours channel {}", channels[best(&weights)]))?;
        ensure(trace.channels[best(&lib)] == hot, || format!("hot quadrant {hot} lost to {}", trace.channels[best(&lib)]))?;
    }
    ensure(worst < 1e-5, || format!("weights differ from brute force by {worst:.2e}"))?;
    Ok(format!("hot channel wins for all 4 quadrants, flat channel skipped, max weight diff {worst:.1e}"))
}

fn format_suite() -> Check {
    let dir = tempfile::tempdir().unwrap();
    // LSW1 round trip on the tiny CNN after a few updates and on the full CNN.
    let mut tiny = build_cnn(&common::grad::tiny_arch(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = Tensor::from_fn(vec![4, 3, 8, 8], |_| rng.gen_range(0.0f32..1.0));
    for _ in 0..3 {
        tiny.train_step(&batch, &[0, 1, 2, 1], &Default::default(), &mut rng).unwrap();
    }
    let full = build_leaf_cnn(21, 5).unwrap();
    let big = Tensor::from_fn(vec![2, 3, 128, 128], |_| rng.gen_range(0.0f32..1.0));
    for (g, input) in [(&tiny, &batch), (&full, &big)] {
        let path = dir.path().join("m.lsw");
        leafscope::model::save_weights(g, &path).unwrap();
        let back = leafscope::model::load_weights(&path).unwrap();
        let (a, b) = (g.predict_logits(input).unwrap(), back.predict_logits(input).unwrap());
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || "reloaded model gives different logits".into())?;
    }
    let bytes = weights_to_bytes(&tiny).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0x20;
    ensure(matches!(weights_from_bytes(&bad_magic), Err(Error::Format(_))), || "bad magic accepted".into())?;
    let mut bad_blob = bytes.clone();
    let mid = bytes.len() - 40;
    bad_blob[mid] ^= 0x01;
    let crc = weights_from_bytes(&bad_blob);
    ensure(matches!(&crc, Err(Error::Format(m)) if m.contains("checksum")), || format!("flipped blob byte gave {crc:?}"))?;

    // Split manifest through the csv crate.
    let manifest = manifest_with_sizes(&[3, 5, 12]);
    let split = split_dataset(&manifest, 1).unwrap();
    let text = split_to_tsv(&manifest, &split).unwrap();
    let mut rdr = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(text.as_bytes());
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    ensure(headers == ["path", "class_id", "class_name", "split"], || format!("split header {headers:?}"))?;
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    ensure(rows.len() == manifest.len(), || "split row count".into())?;
    for (i, row) in rows.iter().enumerate() {
        let e = &manifest.entries[i];
        let want = [e.path.clone(), e.class_id.to_string(), e.class_name.clone(), split.tags[i].to_string()];
        ensure(row.iter().eq(want.iter().map(String::as_str)), || format!("split row {i}: {row:?}"))?;
    }
    let (m2, s2) = split_from_tsv(&text).unwrap();
    ensure(m2 == manifest && s2.tags == split.tags, || "split TSV did not round-trip".into())?;

    // History, including NaN validation columns.
    let history = History {
        records: (1..=4)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 1.0 / e as f64 + 1e-9,
                train_acc: 0.1 * e as f64,
                val_loss: if e == 4 { f64::NAN } else { 0.7 / 3.0 * e as f64 },
                val_acc: if e == 4 { f64::NAN } else { 1.0 - 1.0 / (e + 2) as f64 },
            })
            .collect(),
    };
    let text = history.to_tsv();
    let mut rdr = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(text.as_bytes());
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    ensure(headers == ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"], || format!("history header {headers:?}"))?;
    let same = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
    for (row, r) in rdr.records().map(|r| r.unwrap()).zip(&history.records) {
        let f: Vec<f64> = row.iter().map(|s| s.parse::<f64>().unwrap()).collect();
        let want = [r.epoch as f64, r.train_loss, r.train_acc, r.val_loss, r.val_acc];
        ensure(f.iter().zip(want).all(|(&a, b)| same(a, b)), || format!("history row {row:?}"))?;
    }
    let back = History::from_tsv(&text).unwrap();
    let eq = back.records.len() == 4
        && back.records.iter().zip(&history.records).all(|(a, b)| {
            a.epoch == b.epoch
                && same(a.train_loss, b.train_loss)
                && same(a.train_acc, b.train_acc)
                && same(a.val_loss, b.val_loss)
                && same(a.val_acc, b.val_acc)
        });
    ensure(eq, || "history TSV did not round-trip".into())?;

    // Report.
    let m = Metrics {
        accuracy: 0.921753,
        macro_precision: 0.9213,
        macro_recall: 0.9199,
        macro_f1: 0.9204,
        per_class: Vec::new(),
    };
    let text = report_to_tsv(&[("CNN", 60, 0.0001, &m)]);
    let mut rdr = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(text.as_bytes());
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    ensure(
        headers == ["model", "epochs", "lr", "accuracy", "macro_precision", "macro_recall", "macro_f1"],
        || format!("report header {headers:?}"),
    )?;
    let row = rdr.records().next().unwrap().unwrap();
    ensure(row.iter().eq(["CNN", "60", "0.0001", "0.92175", "0.92", "0.92", "0.92"]), || format!("report row {row:?}"))?;
    Ok("LSW1 bit-identical reload (tiny and full CNN), magic and CRC damage rejected, split/history/report TSVs parse".into())
}

fn metrics_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(2..25);
        let len = rng.gen_range(1..=10_000);
        let stream: Vec<(usize, usize)> = (0..len)
            .map(|_| {
                let t = rng.gen_range(0..k);
                let p = if rng.gen_bool(0.7) { t } else { rng.gen_range(0..k) };
                (t, p)
            })
            .collect();
        let mut cm = ConfusionMatrix::new(k);
        for &(t, p) in &stream {
            cm.accumulate(t, p).unwrap();
        }
        let got = derive_metrics(&cm).unwrap();

        let mut tp: HashMap<usize, f64> = HashMap::new();
        let mut fp: HashMap<usize, f64> = HashMap::new();
        let mut fn_: HashMap<usize, f64> = HashMap::new();
        let mut correct = 0.0;
        for &(t, p) in &stream {
            if t == p {
                *tp.entry(t).or_default() += 1.0;
                correct += 1.0;
            } else {
                *fp.entry(p).or_default() += 1.0;
                *fn_.entry(t).or_default() += 1.0;
            }
        }
        let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
        for c in 0..k {
            let t = tp.get(&c).copied().unwrap_or(0.0);
            let p = ratio(t, t + fp.get(&c).copied().unwrap_or(0.0));
            let r = ratio(t, t + fn_.get(&c).copied().unwrap_or(0.0));
            sp += p;
            sr += r;
            sf += ratio(2.0 * p * r, p + r);
        }
        let want = [correct / len as f64, sp / k as f64, sr / k as f64, sf / k as f64];
        let have = [got.accuracy, got.macro_precision, got.macro_recall, got.macro_f1];
        for (a, b) in have.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-12, || format!("metrics differ from the stream oracle by {worst:.2e}"))?;
    let vgg = Metrics {
        accuracy: 0.98904,
        macro_precision: 0.99,
        macro_recall: 0.99,
        macro_f1: 0.99,
        per_class: Vec::new(),
    };
    let row = format_report("VGG19", 30, 0.0001, &vgg);
    let want = "VGG19  30  0.0001  0.98904  0.99  0.99  0.99";
    ensure(row == want, || format!("row '{row}' != '{want}'"))?;
    Ok(format!("100 streams agree (max diff {worst:.1e}), row '{row}'"))
}

fn training(run: &common::SyntheticRun) -> Check {
    let train_acc = evaluate(&run.model, &run.train).unwrap().metrics.accuracy;
    let val_acc = evaluate(&run.model, &run.val).unwrap().metrics.accuracy;
    let last = run.outcome.history.records.last().unwrap();
    let detail = format!(
        "{} epochs on {} train / {} val images: train acc {train_acc:.3} (running, with dropout {:.3}), val acc {val_acc:.3}, {:.0} s",
        run.outcome.history.len(),
        run.train.len(),
        run.val.len(),
        last.train_acc,
        run.train_secs
    );
    ensure(train_acc >= 0.95 && val_acc >= 0.90, || detail.clone())?;
    ensure(run.train_secs < 900.0, || detail.clone())?;
    Ok(detail)
}

fn heat_mass(h: &Heatmap, region: &BinaryMask) -> (f64, f64) {
    let (mut inside, mut outside) = (0.0, 0.0);
    for y in 0..h.height() {
        for x in 0..h.width() {
            let v = h.at(x, y) as f64;
            if region.get(x, y) {
                inside += v;
            } else {
                outside += v;
            }
        }
    }
    (inside, outside)
}

fn scaled_logits(g: &ModelGraph<f32>, c: f32) -> ModelGraph<f32> {
    let mut s = g.clone();
    for name in ["logits.kernel", "logits.bias"] {
        let t = s.weights_mut().get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v *= c);
    }
    s
}

fn cam_suite(run: &common::SyntheticRun) -> Check {
    let model = &run.model;
    let input = run.test.images.outer_tensor(0);
    for method in CamMethod::ALL {
        let h = explain(model, &input, &CamRequest::new(method)).map_err(|e| e.to_string())?;
        ensure(h.values.shape() == [128, 128], || format!("{} gave {:?}", method.name(), h.values.shape()))?;
        ensure(h.values.data().iter().all(|v| (0.0..=1.0).contains(v)), || format!("{} left [0, 1]", method.name()))?;
    }

    let channels = model.output_shape("conv3").unwrap()[0];
    let full = scorecam_detailed(model, &input, &CamRequest::new(CamMethod::ScoreCam)).unwrap().0;
    let fast = faster_scorecam(model, &input, &CamRequest::new(CamMethod::FasterScoreCam).top_k(channels)).unwrap();
    let bits = |h: &Heatmap| h.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&full) == bits(&fast), || "faster_scorecam(top_k = C) differs from scorecam".into())?;

    let mut scale_diff = 0.0f32;
    for c in [0.5f32, 3.0] {
        let scaled = scaled_logits(model, c);
        for i in 0..run.test.len().min(5) {
            let x = run.test.images.outer_tensor(i);
            for m in [CamMethod::GradCam, CamMethod::LayerCam] {
                let req = CamRequest::new(m);
                let (a, b) = if m == CamMethod::GradCam {
                    (gradcam(model, &x, &req).unwrap(), gradcam(&scaled, &x, &req).unwrap())
                } else {
                    (layercam(model, &x, &req).unwrap(), layercam(&scaled, &x, &req).unwrap())
                };
                ensure(a.target_class == b.target_class, || "scaling changed the predicted class".into())?;
                for (p, q) in a.values.data().iter().zip(b.values.data()) {
                    scale_diff = scale_diff.max((p - q).abs());
                }
            }
        }
    }
    ensure(scale_diff < 1e-4, || format!("logit scaling moved the heatmap by {scale_diff:.2e}"))?;

    let mut localized = 0;
    for (i, region) in run.test_regions.iter().enumerate() {
        let x = run.test.images.outer_tensor(i);
        let h = gradcam(model, &x, &CamRequest::new(CamMethod::GradCam).class(run.test.labels[i])).unwrap();
        let (inside, outside) = heat_mass(&h, region);
        localized += (inside > outside) as usize;
    }
    let frac = localized as f64 / run.test.len() as f64;
    ensure(frac >= 0.8, || format!("gradcam mass inside the region for only {localized}/{} test images", run.test.len()))?;
    Ok(format!(
        "five methods 128x128 in [0,1], fast(top_k={channels}) bit-identical, scaling diff {scale_diff:.1e}, localized {localized}/{}",
        run.test.len()
    ))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut runner = Runner { only, failures: 0 };
    exec::set_workers(1);

    runner.run(1, "gradient suite", Some(60.0), gradient_suite);
    runner.run(2, "preprocessing suite", Some(10.0), preprocessing_suite);
    runner.run(3, "split suite", None, split_suite);
    runner.run(6, "ScoreCAM oracle", None, scorecam_oracle);
    runner.run(7, "format suite", None, format_suite);
    runner.run(8, "metrics oracle", None, metrics_oracle);

    if runner.wants(4) || runner.wants(5) {
        let dir = tempfile::tempdir().unwrap();
        let run = panic::catch_unwind(AssertUnwindSafe(|| common::train_synthetic(dir.path(), 10, |_| {})));
        match run {
            Ok(run) => {
                runner.run(4, "end-to-end training", None, || training(&run));
                runner.run(5, "CAM suite", None, || cam_suite(&run));
            }
            Err(_) => {
                for (n, name) in [(4, "end-to-end training"), (5, "CAM suite")] {
                    runner.run(n, name, None, || Err("synthetic training panicked".into()));
                }
            }
        }
    }

    if runner.failures > 0 {
        println!("{} acceptance criteria failed", runner.failures);
        std::process::exit(1);
    }
}
