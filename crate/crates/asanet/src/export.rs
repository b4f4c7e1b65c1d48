//! Result files: metrics, CMC table and plot, ranked lists, feature dumps
//! and attention-mask images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use asanet_core::eval::{EvalConfig, FeatureSet, Metric, RankingResult, Setup};
use asanet_core::model::AsaNet;
use asanet_core::nn::Mode;
use asanet_core::synth::Dataset;
use asanet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};

pub const TOP_K: usize = 20;
const CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub setup: Setup,
    pub metric: Metric,
    pub same_camera_rule: bool,
    pub queries: usize,
    pub dropped: usize,
    pub map: f64,
    /// `(rank, value)` at ranks 1, 5, 10 and 20.
    pub cmc: Vec<(usize, f64)>,
}

impl Metrics {
    pub fn of(r: &RankingResult, cfg: &EvalConfig) -> Self {
        Self {
            setup: r.setup,
            metric: cfg.metric,
            same_camera_rule: cfg.same_camera_rule,
            queries: r.queries.len(),
            dropped: r.dropped,
            map: r.map,
            cmc: CMC_RANKS.iter().map(|&k| (k, r.rank(k))).collect(),
        }
    }
}

/// Write `metrics.json`, `cmc.csv`, `ranked_lists.csv` and `cmc.svg`.
pub fn export_results(r: &RankingResult, cfg: &EvalConfig, query: &FeatureSet, gallery: &FeatureSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let path = dir.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(&Metrics::of(r, cfg))?).at(&path)?;

    let path = dir.join("cmc.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["rank", "value"])?;
    for (i, v) in r.cmc.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()])?;
    }
    w.flush().at(&path)?;

    write_ranked_lists(r, query, gallery, &dir.join("ranked_lists.csv"))?;

    let path = dir.join("cmc.svg");
    fs::write(&path, cmc_svg(&r.cmc)).at(&path)?;
    Ok(())
}

fn id_text(id: Option<usize>) -> String {
    id.map_or_else(|| "-".to_string(), |i| i.to_string())
}

/// One row per evaluated query: its tracklet and identity, then the top
/// gallery tracklets and whether each is a correct match.
fn write_ranked_lists(r: &RankingResult, query: &FeatureSet, gallery: &FeatureSet, path: &Path) -> Result<()> {
    // the mixing gallery holds the queries after the original gallery rows
    let gallery_row = |j: usize| -> (usize, Option<usize>) {
        if j < gallery.len() {
            (gallery.tracklets[j], gallery.ids[j])
        } else {
            (query.tracklets[j - gallery.len()], query.ids[j - gallery.len()])
        }
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["query_tracklet".to_string(), "query_id".to_string()];
    header.extend((1..=TOP_K).map(|k| format!("rank{k}")));
    header.extend((1..=TOP_K).map(|k| format!("match{k}")));
    w.write_record(&header)?;
    for q in &r.queries {
        let mut row = vec![query.tracklets[q.query].to_string(), id_text(query.ids[q.query])];
        let top = q.ranked.len().min(TOP_K);
        for k in 0..TOP_K {
            row.push(if k < top { gallery_row(q.ranked[k]).0.to_string() } else { String::new() });
        }
        for k in 0..TOP_K {
            row.push(if k < top { (q.correct[k] as u8).to_string() } else { String::new() });
        }
        w.write_record(&row)?;
    }
    w.flush().at(path)?;
    Ok(())
}

/// Self-contained SVG line plot of a CMC curve on a fixed [0, 1] axis.
pub fn cmc_svg(cmc: &[f64]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    let n = cmc.len().max(2);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v.clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {top} V{bottom} H{right}" fill="none" stroke="black"/>"#,
        top = y(1.0),
        bottom = y(0.0),
        right = W - PAD
    );
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{v:.1}</text>"#,
            PAD - 4.0,
            y(v) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">rank</text>"#,
        W / 2.0,
        H - 10.0
    );
    let points: Vec<String> = if cmc.len() == 1 {
        vec![format!("{},{}", x(0), y(cmc[0])), format!("{},{}", x(1), y(cmc[0]))]
    } else {
        cmc.iter().enumerate().map(|(i, &v)| format!("{},{}", x(i), y(v))).collect()
    };
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        points.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub rows: usize,
    pub dim: usize,
    /// Always `"f64le"`: row-major little-endian doubles.
    pub dtype: String,
    /// `"query"` or `"gallery"` per row.
    pub roles: Vec<String>,
    pub ids: Vec<Option<usize>>,
    pub cameras: Vec<usize>,
    pub tracklets: Vec<usize>,
}

/// Dump query then gallery descriptors to `features.bin` + `features.json`.
pub fn export_features(query: &FeatureSet, gallery: &FeatureSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let all = query.concat(gallery)?;
    let mut bytes = Vec::with_capacity(all.features.len() * 8);
    for v in all.features.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join("features.bin");
    fs::write(&path, bytes).at(&path)?;
    let manifest = FeatureManifest {
        rows: all.len(),
        dim: all.dim(),
        dtype: "f64le".into(),
        roles: (0..all.len())
            .map(|i| if i < query.len() { "query" } else { "gallery" }.to_string())
            .collect(),
        ids: all.ids,
        cameras: all.cameras,
        tracklets: all.tracklets,
    };
    let path = dir.join("features.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    Ok(())
}

/// Read back a feature dump as `(manifest, [rows×dim] tensor)`.
pub fn load_features(dir: &Path) -> Result<(FeatureManifest, Tensor)> {
    let path = dir.join("features.json");
    let manifest: FeatureManifest = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
    let path = dir.join("features.bin");
    let bytes = fs::read(&path).at(&path)?;
    if bytes.len() != manifest.rows * manifest.dim * 8 {
        return Err(crate::Error::Format(format!(
            "{}: {} bytes for {}×{} doubles",
            path.display(),
            bytes.len(),
            manifest.rows,
            manifest.dim
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let t = Tensor::new(&[manifest.rows, manifest.dim], data)?;
    Ok((manifest, t))
}

/// Binary 8-bit PGM of a mask in [0, 1], scaled linearly to 0–255.
pub fn pgm(mask: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Run every frame of each tracklet through the model and write its
/// enhancement masks: `masks/<tracklet>/<frame>.pgm` for the ID-relevant
/// module and `<frame>_ir.pgm` for the ID-irrelevant one. Returns the number
/// of images written; zero when the model has no enhancement modules.
pub fn export_masks(model: &mut AsaNet, ds: &Dataset, tracklets: &[usize], dir: &Path) -> Result<usize> {
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let result = (|| {
        let mut written = 0;
        let (h, w) = (ds.config.frame_height, ds.config.frame_width);
        for &t in tracklets {
            let len = ds.tracklets[t].length;
            let mut frames = Vec::with_capacity(len * ds.frame_len());
            for f in 0..len {
                frames.extend(ds.frame(t, f).iter().map(|&v| v as f64));
            }
            let frames = Tensor::new(&[1, len, 3, h, w], frames)?;
            let mut tape = asanet_core::Tape::new();
            let out = model.forward(&mut tape, &frames)?;
            let sub = dir.join("masks").join(t.to_string());
            for (mask, suffix) in [(out.mask_re, ""), (out.mask_ir, "_ir")] {
                let Some(mask) = mask else { continue };
                let m = tape.value(mask);
                let (mh, mw) = (m.shape()[1], m.shape()[2]);
                fs::create_dir_all(&sub).at(&sub)?;
                for f in 0..len {
                    let plane = &m.data()[f * mh * mw..(f + 1) * mh * mw];
                    let path = sub.join(format!("{f}{suffix}.pgm"));
                    fs::write(&path, pgm(plane, mh, mw)).at(&path)?;
                    written += 1;
                }
            }
        }
        Ok(written)
    })();
    model.set_mode(previous);
    result
}
