//! Desk-scale evaluation: de-identification, recovery quality, diversity,
//! key sensitivity and ablation comparison, with JSON, CSV and SVG output.
//!
//! Identity similarity is always the cosine between identity-encoder
//! embeddings. The diversity angle score is labelled "KFFA-proxy": the mean
//! pairwise angle between embeddings of one source anonymized under
//! different keys.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::keygen::Secret;
use crate::numerics::{cosine, mse, psnr_from_mse, ssim, Rng};
use crate::pipeline::PipelineModel;
use crate::synthdata::{Split, SyntheticDataset};

fn image(row: ArrayView1<'_, f32>, h: usize, w: usize) -> Array2<f32> {
    row.to_owned().into_shape_with_order((h, w)).expect("pixel count")
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn row_cosines(a: &Array2<f32>, b: &Array2<f32>) -> Result<Vec<f64>> {
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| cosine(x.as_slice().expect("contiguous"), y.as_slice().expect("contiguous")))
        .collect()
}

/// Mean squared perceptual-proxy feature difference per row.
pub fn perceptual_distances(model: &PipelineModel<f32>, a: &Array2<f32>, b: &Array2<f32>) -> Result<Vec<f64>> {
    let fa = model.proxies.perceptual.forward(a)?;
    let fb = model.proxies.perceptual.forward(b)?;
    Ok(fa
        .rows()
        .into_iter()
        .zip(fb.rows())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>() / x.len() as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeidRow {
    pub sample: usize,
    pub cosine: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeidReport {
    pub rows: Vec<DeidRow>,
    pub mean_cosine: f64,
    pub mean_l1: f64,
    /// Same metric with the flow replaced by the identity map.
    pub bypass_mean_cosine: f64,
}

/// Identity similarity and L1 distance between anonymized and original embeddings.
pub fn eval_deid(model: &PipelineModel<f32>, data: &SyntheticDataset, samples: &[usize], secret: &Secret) -> Result<DeidReport> {
    let x = data.batch::<f32>(samples);
    let z = model.e_id(&x)?;
    let za = model.e_id(&model.anonymize(&x, secret)?)?;
    let zb = model.e_id(&model.anonymize_bypass(&x)?)?;
    let cos = row_cosines(&za, &z)?;
    let rows: Vec<DeidRow> = samples
        .iter()
        .enumerate()
        .map(|(r, &s)| DeidRow {
            sample: s,
            cosine: cos[r],
            l1: za.row(r).iter().zip(z.row(r)).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / z.ncols() as f64,
        })
        .collect();
    Ok(DeidReport {
        mean_cosine: mean(rows.iter().map(|r| r.cosine)),
        mean_l1: mean(rows.iter().map(|r| r.l1)),
        bypass_mean_cosine: mean(row_cosines(&zb, &z)?),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub sample: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub id_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub rows: Vec<RecoveryRow>,
    pub mean_mse: f64,
    /// PSNR of `mean_mse`.
    pub psnr: f64,
    pub mean_ssim: f64,
    pub mean_perceptual: f64,
    pub mean_id_cosine: f64,
}

/// Image-quality and identity metrics of `generated` against `originals`.
pub fn quality_report(
    model: &PipelineModel<f32>,
    samples: &[usize],
    generated: &Array2<f32>,
    originals: &Array2<f32>,
) -> Result<RecoveryReport> {
    let d = model.dims();
    let perc = perceptual_distances(model, generated, originals)?;
    let cos = row_cosines(&model.e_id(generated)?, &model.e_id(originals)?)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (r, &s) in samples.iter().enumerate() {
        let a = image(generated.row(r), d.height, d.width);
        let b = image(originals.row(r), d.height, d.width);
        let m = mse(a.view(), b.view())?;
        rows.push(RecoveryRow {
            sample: s,
            mse: m,
            psnr: psnr_from_mse(m),
            ssim: ssim(a.view(), b.view())?,
            perceptual: perc[r],
            id_cosine: cos[r],
        });
    }
    let mean_mse = mean(rows.iter().map(|r| r.mse));
    Ok(RecoveryReport {
        psnr: psnr_from_mse(mean_mse),
        mean_mse,
        mean_ssim: mean(rows.iter().map(|r| r.ssim)),
        mean_perceptual: mean(rows.iter().map(|r| r.perceptual)),
        mean_id_cosine: mean(rows.iter().map(|r| r.id_cosine)),
        rows,
    })
}

/// Recovery under the matching key, under a wrong key, and the
/// reconstruction upper bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySuite {
    pub matching: RecoveryReport,
    pub wrong_key: RecoveryReport,
    pub reconstruction: RecoveryReport,
}

pub fn eval_recovery(
    model: &PipelineModel<f32>,
    data: &SyntheticDataset,
    samples: &[usize],
    secret: &Secret,
    wrong: &Secret,
) -> Result<RecoverySuite> {
    let x = data.batch::<f32>(samples);
    let xa = model.anonymize(&x, secret)?;
    Ok(RecoverySuite {
        matching: quality_report(model, samples, &model.deanonymize(&xa, secret)?, &x)?,
        wrong_key: quality_report(model, samples, &model.deanonymize(&xa, wrong)?, &x)?,
        reconstruction: quality_report(model, samples, &model.reconstruct(&x)?, &x)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub sample: usize,
    pub mean_pair_cosine: f64,
    pub mean_pair_angle_deg: f64,
    pub mean_cosine_to_original: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub keys: usize,
    pub pairs_per_source: usize,
    pub rows: Vec<DiversityRow>,
    pub mean_pair_cosine: f64,
    /// KFFA-proxy: mean pairwise angle in degrees.
    pub kffa_proxy_deg: f64,
    pub mean_cosine_to_original: f64,
}

/// Anonymizes every sample under each secret and measures the spread of
/// the resulting identities.
pub fn eval_diversity(
    model: &PipelineModel<f32>,
    data: &SyntheticDataset,
    samples: &[usize],
    secrets: &[Secret],
) -> Result<DiversityReport> {
    let k = secrets.len();
    if k < 2 {
        return contract_err("diversity needs at least two secrets");
    }
    let x = data.batch::<f32>(samples);
    let z = model.e_id(&x)?;
    let embeddings: Vec<Array2<f32>> =
        secrets.iter().map(|s| model.e_id(&model.anonymize(&x, s)?)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(samples.len());
    for (r, &s) in samples.iter().enumerate() {
        let (mut cos, mut ang) = (Vec::new(), Vec::new());
        for a in 0..k {
            for b in a + 1..k {
                let c = cosine(
                    embeddings[a].row(r).as_slice().expect("contiguous"),
                    embeddings[b].row(r).as_slice().expect("contiguous"),
                )?;
                cos.push(c);
                ang.push(c.acos().to_degrees());
            }
        }
        let to_orig = embeddings
            .iter()
            .map(|e| cosine(e.row(r).as_slice().expect("contiguous"), z.row(r).as_slice().expect("contiguous")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(DiversityRow {
            sample: s,
            mean_pair_cosine: mean(cos),
            mean_pair_angle_deg: mean(ang),
            mean_cosine_to_original: mean(to_orig),
        });
    }
    Ok(DiversityReport {
        keys: k,
        pairs_per_source: k * (k - 1) / 2,
        mean_pair_cosine: mean(rows.iter().map(|r| r.mean_pair_cosine)),
        kffa_proxy_deg: mean(rows.iter().map(|r| r.mean_pair_angle_deg)),
        mean_cosine_to_original: mean(rows.iter().map(|r| r.mean_cosine_to_original)),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub sample: usize,
    pub bit: usize,
    pub correct_cosine: f64,
    pub flipped_cosine: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
    pub mean_gap: f64,
    pub min_gap: f64,
    pub median_gap: f64,
    pub max_gap: f64,
    pub mean_correct_cosine: f64,
    pub mean_flipped_cosine: f64,
}

/// Identity cosine of recovery under `secret` minus that under `other`,
/// per sample, for images anonymized with `secret`.
pub fn recovery_gaps(model: &PipelineModel<f32>, x: &Array2<f32>, secret: &Secret, other: &Secret) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = model.e_id(x)?;
    let xa = model.anonymize(x, secret)?;
    let good = row_cosines(&model.e_id(&model.deanonymize(&xa, secret)?)?, &z)?;
    let bad = row_cosines(&model.e_id(&model.deanonymize(&xa, other)?)?, &z)?;
    Ok((good, bad))
}

/// Flips `bitflips` distinct random bits of `secret`, one at a time.
pub fn eval_key_sensitivity(
    model: &PipelineModel<f32>,
    data: &SyntheticDataset,
    samples: &[usize],
    secret: &Secret,
    bitflips: usize,
    rng: &mut Rng,
) -> Result<SensitivityReport> {
    if bitflips == 0 {
        return contract_err("at least one bit flip is required");
    }
    let nbits = 8 * secret.as_bytes().len();
    let mut bits: Vec<usize> = (0..nbits).collect();
    rng.shuffle(&mut bits);
    let x = data.batch::<f32>(samples);
    let mut rows = Vec::new();
    for &bit in bits.iter().cycle().take(bitflips) {
        let (good, bad) = recovery_gaps(model, &x, secret, &secret.flip_bit(bit))?;
        for (r, &s) in samples.iter().enumerate() {
            rows.push(SensitivityRow {
                sample: s,
                bit,
                correct_cosine: good[r],
                flipped_cosine: bad[r],
                gap: good[r] - bad[r],
            });
        }
    }
    let mut gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    gaps.sort_by(|a, b| a.total_cmp(b));
    let n = gaps.len();
    let median = if n % 2 == 1 { gaps[n / 2] } else { 0.5 * (gaps[n / 2 - 1] + gaps[n / 2]) };
    Ok(SensitivityReport {
        mean_gap: mean(gaps.iter().copied()),
        min_gap: gaps[0],
        median_gap: median,
        max_gap: gaps[n - 1],
        mean_correct_cosine: mean(rows.iter().map(|r| r.correct_cosine)),
        mean_flipped_cosine: mean(rows.iter().map(|r| r.flipped_cosine)),
        rows,
    })
}

/// Mean perceptual-proxy distance between generated images (anonymized and
/// recovered) and the real images they were generated from.
pub fn generation_quality(model: &PipelineModel<f32>, data: &SyntheticDataset, samples: &[usize], secret: &Secret) -> Result<f64> {
    let x = data.batch::<f32>(samples);
    let xa = model.anonymize(&x, secret)?;
    let xr = model.deanonymize(&xa, secret)?;
    let a = perceptual_distances(model, &xa, &x)?;
    let r = perceptual_distances(model, &xr, &x)?;
    Ok(mean(a.into_iter().chain(r)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub anon_cosine: f64,
    pub recovery_cosine: f64,
    pub wrong_key_cosine: f64,
    pub recovery_ssim: f64,
    pub kffa_proxy_deg: f64,
    /// Lower is better.
    pub quality_proxy: f64,
}

/// Evaluation secrets: one primary secret and `extra` further ones, derived
/// from `rng`. Never written anywhere.
pub fn eval_secrets(rng: &mut Rng, extra: usize) -> Vec<Secret> {
    (0..=extra).map(|_| Secret::random(rng, 16)).collect()
}

/// Runs the suite on each labelled model with identical secrets and samples.
pub fn eval_ablation(
    models: &[(String, &PipelineModel<f32>)],
    data: &SyntheticDataset,
    keys: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let samples = data.samples(Split::Test);
    let secrets = eval_secrets(&mut Rng::new(seed).derive("eval-secrets"), keys.max(2) - 1);
    let s = &secrets[0];
    let mut out = Vec::new();
    for (label, m) in models {
        let deid = eval_deid(m, data, &samples, s)?;
        let rec = eval_recovery(m, data, &samples, s, &s.flip_bit(0))?;
        let div = eval_diversity(m, data, &samples, &secrets)?;
        out.push(AblationRow {
            label: label.clone(),
            anon_cosine: deid.mean_cosine,
            recovery_cosine: rec.matching.mean_id_cosine,
            wrong_key_cosine: rec.wrong_key.mean_id_cosine,
            recovery_ssim: rec.matching.mean_ssim,
            kffa_proxy_deg: div.kffa_proxy_deg,
            quality_proxy: generation_quality(m, data, &samples, s)?,
        });
    }
    Ok(out)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 360.0;
const MARGIN: f64 = 48.0;

/// Vertical bar chart, bars scaled to the largest absolute value.
pub fn svg_bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let mut s = String::new();
    let _ = write!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}">"#);
    let _ = write!(s, r#"<text x="{}" y="24" font-size="16" text-anchor="middle">{}</text>"#, SVG_W / 2.0, xml_escape(title));
    let top = bars.iter().map(|b| b.1.abs()).fold(0.0, f64::max).max(1e-12);
    let base = SVG_H - MARGIN;
    let _ = write!(s, r#"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, SVG_W - MARGIN);
    let slot = (SVG_W - 2.0 * MARGIN) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let hgt = (v.abs() / top) * (SVG_H - 2.5 * MARGIN);
        let x = MARGIN + i as f64 * slot + 0.15 * slot;
        let _ = write!(
            s,
            r##"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{hgt:.1}" fill="#4a78a8"/>"##,
            base - hgt,
            0.7 * slot
        );
        let cx = x + 0.35 * slot;
        let _ = write!(s, r#"<text x="{cx:.1}" y="{:.1}" font-size="11" text-anchor="middle">{v:.3}</text>"#, base - hgt - 4.0);
        let _ = write!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            base + 16.0,
            xml_escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Line chart of one series over its index.
pub fn svg_line_chart(title: &str, values: &[f64]) -> String {
    let mut s = String::new();
    let _ = write!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}">"#);
    let _ = write!(s, r#"<text x="{}" y="24" font-size="16" text-anchor="middle">{}</text>"#, SVG_W / 2.0, xml_escape(title));
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len().max(2) - 1;
    let pts: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = MARGIN + (SVG_W - 2.0 * MARGIN) * i as f64 / n as f64;
            let y = SVG_H - MARGIN - (SVG_H - 2.5 * MARGIN) * (v - lo) / span;
            format!("{x:.1},{y:.1}")
        })
        .collect();
    let _ = write!(s, r##"<polyline fill="none" stroke="#a84a4a" stroke-width="1.5" points="{}"/>"##, pts.join(" "));
    if values.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let _ = write!(s, r#"<text x="4" y="{:.1}" font-size="11">{hi:.3}</text>"#, 2.5 * MARGIN / 2.0 + 4.0);
    let _ = write!(s, r#"<text x="4" y="{:.1}" font-size="11">{lo:.3}</text>"#, SVG_H - MARGIN);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::flow::FlowConfig;
    use crate::synthdata::{gen_dataset, DataDims};

    fn setup() -> (PipelineModel<f32>, SyntheticDataset) {
        let dims = DataDims { d_id: 4, d_attr: 4, height: 8, width: 8 };
        let c = ModelConfig {
            d_z: 8,
            d_k: 4,
            m: 2,
            d_w: 4,
            e_id_hidden: [16, 16],
            e_attr_hidden: 16,
            mapping_hidden: 8,
            generator_hidden: 16,
            seed: 5,
            ..ModelConfig::default()
        };
        let f = FlowConfig { n_blocks: 2, ..FlowConfig::default() };
        (PipelineModel::new(&c, &f, dims).unwrap(), gen_dataset(20, 2, dims, 3).unwrap())
    }

    #[test]
    fn deid_means_recompute_from_rows() {
        let (m, d) = setup();
        let samples = d.samples(Split::Test);
        let r = eval_deid(&m, &d, &samples, &Secret::new("s").unwrap()).unwrap();
        assert_eq!(r.rows.len(), samples.len());
        let c: f64 = r.rows.iter().map(|x| x.cosine).sum::<f64>() / r.rows.len() as f64;
        assert_eq!(c, r.mean_cosine);
    }

    #[test]
    fn bypass_baseline_matches_reconstruction() {
        let (m, d) = setup();
        let samples = d.samples(Split::Test);
        let s = Secret::new("s").unwrap();
        let deid = eval_deid(&m, &d, &samples, &s).unwrap();
        let rec = eval_recovery(&m, &d, &samples, &s, &s.flip_bit(1)).unwrap();
        assert!((deid.bypass_mean_cosine - rec.reconstruction.mean_id_cosine).abs() < 1e-9);
    }

    #[test]
    fn psnr_follows_mse() {
        let (m, d) = setup();
        let samples = d.samples(Split::Test);
        let s = Secret::new("s").unwrap();
        let rec = eval_recovery(&m, &d, &samples, &s, &s.flip_bit(1)).unwrap();
        for r in rec.matching.rows.iter().chain(&rec.wrong_key.rows) {
            assert!((r.psnr - 10.0 * (1.0 / r.mse).log10()).abs() < 1e-9);
        }
        assert!((rec.matching.psnr - 10.0 * (1.0 / rec.matching.mean_mse).log10()).abs() < 1e-9);
    }

    #[test]
    fn identical_keys_have_zero_spread() {
        let (m, d) = setup();
        let samples = d.samples(Split::Test);
        let s = Secret::new("same").unwrap();
        let r = eval_diversity(&m, &d, &samples, &[s.clone(), s.clone(), s]).unwrap();
        assert_eq!(r.pairs_per_source, 3);
        assert!((r.mean_pair_cosine - 1.0).abs() < 1e-6);
        assert!(r.kffa_proxy_deg < 0.1);
        assert!(eval_diversity(&m, &d, &samples, &[Secret::new("x").unwrap()]).is_err());
    }

    #[test]
    fn angle_score_in_range() {
        let (m, d) = setup();
        let samples = d.samples(Split::Test);
        let secrets = eval_secrets(&mut Rng::new(1), 3);
        let r = eval_diversity(&m, &d, &samples, &secrets).unwrap();
        assert!((0.0..=180.0).contains(&r.kffa_proxy_deg));
        assert_eq!(r.pairs_per_source, 6);
    }

    #[test]
    fn same_key_gap_is_zero() {
        let (m, d) = setup();
        let x = d.batch::<f32>(&d.samples(Split::Test));
        let s = Secret::new("s").unwrap();
        let (good, bad) = recovery_gaps(&m, &x, &s, &s).unwrap();
        assert_eq!(good, bad);
    }

    #[test]
    fn sensitivity_summary() {
        let (m, d) = setup();
        let samples = d.samples(Split::Test);
        let r = eval_key_sensitivity(&m, &d, &samples, &Secret::new("key").unwrap(), 3, &mut Rng::new(2)).unwrap();
        assert_eq!(r.rows.len(), 3 * samples.len());
        assert!(r.min_gap <= r.median_gap && r.median_gap <= r.max_gap);
    }

    #[test]
    fn writers() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![DeidRow { sample: 1, cosine: 0.5, l1: 0.1 }];
        write_csv(&dir.path().join("a.csv"), &rows).unwrap();
        let text = fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(text, "sample,cosine,l1\n1,0.5,0.1\n");
        write_json(&dir.path().join("a.json"), &rows).unwrap();
        let back: Vec<DeidRow> = serde_json::from_str(&fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
        assert_eq!(back, rows);
        let svg = svg_bar_chart("a<b", &[("x".into(), 1.0), ("y".into(), -0.5)]);
        assert!(svg.starts_with("<svg") && svg.contains("a&lt;b") && svg.matches("<rect").count() == 2);
        assert!(svg_line_chart("t", &[1.0, 2.0, 0.5]).contains("<polyline"));
    }
}
