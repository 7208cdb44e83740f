//! Recording and exporting what the attention modules do, alongside the
//! per-level feature maps they act on.

use std::fs;
use std::io::Write;
use std::path::Path;

use cafpn_tensor::archive::{self, DType};
use cafpn_tensor::Tensor;
use serde::Serialize;

use crate::error::{io_err, Error, Result};
use crate::model::Model;
use crate::nn::Session;

/// Every traced quantity of one eval-mode forward pass, in recording order.
#[derive(Clone, Debug)]
pub struct Trace {
    pub records: Vec<(String, Tensor)>,
    pub logits: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Flow {
    /// The bottom-up (lateral) input of a merge.
    Spa,
    /// The top-down (upsampled) input of a merge.
    Sem,
}

impl Flow {
    pub fn key(self) -> &'static str {
        match self {
            Flow::Spa => "spa",
            Flow::Sem => "sem",
        }
    }
}

impl Trace {
    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.records.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    /// CA activations (N×C) of the merge producing `level`.
    pub fn ca(&self, level: usize, flow: Flow) -> Option<&Tensor> {
        self.get(&format!("ca/level{level}/{}", flow.key()))
    }

    /// SRR map (N×1×H×W) of the merge producing `level`.
    pub fn srr(&self, level: usize, flow: Flow) -> Option<&Tensor> {
        self.get(&format!("srr/level{level}/{}", flow.key()))
    }

    /// Levels carrying CA activations, ascending.
    pub fn ca_levels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .records
            .iter()
            .filter_map(|(k, _)| k.strip_prefix("ca/level")?.strip_suffix("/spa")?.parse().ok())
            .collect();
        v.sort_unstable();
        v
    }

    pub fn srr_levels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .records
            .iter()
            .filter_map(|(k, _)| k.strip_prefix("srr/level")?.strip_suffix("/spa")?.parse().ok())
            .collect();
        v.sort_unstable();
        v
    }
}

/// Eval-mode forward that records backbone levels, pyramid internals and
/// pyramid outputs. The logits are those of an untraced pass.
pub fn trace_forward(model: &Model, x: &Tensor) -> Result<Trace> {
    let mut s = Session::eval(&model.store).with_trace();
    let xv = s.input(x.clone());
    let parts = model.forward_parts(&mut s, xv)?;
    for (i, &v) in parts.levels.iter().enumerate() {
        s.record(|| format!("backbone/level{}", i + 1), v);
    }
    for (i, &v) in parts.pyramid.outputs.iter().enumerate() {
        s.record(|| format!("output/level{}", i + 1), v);
    }
    Ok(Trace {
        records: s.traced(),
        logits: s.g.value(parts.logits).clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowStats {
    pub level: usize,
    pub flow: Flow,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Statistics of every CA activation across all traces, per level and flow.
pub fn activation_summary(traces: &[Trace]) -> Result<Vec<FlowStats>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Data("activation summary over an empty trace set".into()))?;
    let levels = first.ca_levels();
    if levels.is_empty() {
        return Err(Error::Data("traces carry no CA activations".into()));
    }
    let mut out = Vec::new();
    for &level in &levels {
        for flow in [Flow::Spa, Flow::Sem] {
            let tensors = traces
                .iter()
                .map(|t| {
                    t.ca(level, flow).ok_or_else(|| {
                        Error::Data(format!("a trace lacks ca/level{level}/{}", flow.key()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let values = || tensors.iter().flat_map(|t| t.data().iter().copied());
            let count = values().count();
            let mean = values().sum::<f64>() / count as f64;
            let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
            out.push(FlowStats {
                level,
                flow,
                count,
                mean,
                std: var.sqrt(),
                min: values().fold(f64::INFINITY, f64::min),
                max: values().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    Ok(out)
}

/// One activation curve point: `image` is `None` for the batch average.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub level: usize,
    pub flow: Flow,
    pub image: Option<usize>,
    pub channel: usize,
    pub value: f64,
}

/// Per-image and batch-averaged CA activation curves. Images are numbered
/// consecutively across traces.
pub fn activation_curves(traces: &[Trace]) -> Vec<CurvePoint> {
    let mut out = Vec::new();
    let Some(first) = traces.first() else {
        return out;
    };
    for level in first.ca_levels() {
        for flow in [Flow::Spa, Flow::Sem] {
            let rows: Vec<&[f64]> = traces
                .iter()
                .filter_map(|t| t.ca(level, flow))
                .flat_map(|t| (0..t.shape()[0]).map(move |n| t.row(n)))
                .collect();
            let c = rows.first().map_or(0, |r| r.len());
            for (n, row) in rows.iter().enumerate() {
                for (ch, &value) in row.iter().enumerate() {
                    out.push(CurvePoint { level, flow, image: Some(n), channel: ch, value });
                }
            }
            for ch in 0..c {
                let value = rows.iter().map(|r| r[ch]).sum::<f64>() / rows.len() as f64;
                out.push(CurvePoint { level, flow, image: None, channel: ch, value });
            }
        }
    }
    out
}

/// 8-bit level of a value in [0, 1]: `round(v·255)`, with out-of-range
/// values clamped.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The SRR map of image `n` as an H×W matrix, values untouched.
pub fn heatmap(trace: &Trace, level: usize, flow: Flow, n: usize) -> Result<Tensor> {
    let m = trace.srr(level, flow).ok_or_else(|| {
        Error::Data(format!("trace has no SRR map for level {level} ({})", flow.key()))
    })?;
    let [_, _, h, w] = m.dims4()?;
    Ok(Tensor::from_vec(&[h, w], m.row(n).to_vec())?)
}

/// Binary greyscale PGM (P5) of an H×W matrix in [0, 1]. No per-image
/// rescaling, so a map resting at 0.5 renders mid-grey.
pub fn write_pgm(path: impl AsRef<Path>, m: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let [h, w] = m.dims2()?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(m.data().iter().map(|&v| quantize(v)));
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes `dir/trace/`: one named archive per trace (`batch{i}.tnsr`),
/// `summary.csv`, `curves.csv` and PGM heatmaps of every SRR map.
/// Returns the number of files written.
pub fn export_traces(dir: impl AsRef<Path>, traces: &[Trace]) -> Result<usize> {
    let root = dir.as_ref().join("trace");
    let maps = root.join("heatmaps");
    fs::create_dir_all(&maps).map_err(io_err(&maps))?;
    let mut written = 0;
    let mut image0 = 0;
    for (b, t) in traces.iter().enumerate() {
        let mut records: Vec<(String, Tensor)> = t.records.clone();
        records.push(("logits".into(), t.logits.clone()));
        archive::save_named(
            root.join(format!("batch{b}.tnsr")),
            records.iter().map(|(k, v)| (k.as_str(), v)),
            DType::F64,
        )?;
        written += 1;
        let n = t.logits.shape()[0];
        for level in t.srr_levels() {
            for flow in [Flow::Spa, Flow::Sem] {
                for i in 0..n {
                    let name = format!("level{level}_{}_img{:03}.pgm", flow.key(), image0 + i);
                    write_pgm(maps.join(name), &heatmap(t, level, flow, i)?)?;
                    written += 1;
                }
            }
        }
        image0 += n;
    }
    if traces.first().is_some_and(|t| !t.ca_levels().is_empty()) {
        write_rows(&root.join("summary.csv"), &activation_summary(traces)?)?;
        write_rows(&root.join("curves.csv"), &activation_curves(traces))?;
        written += 2;
    }
    Ok(written)
}
