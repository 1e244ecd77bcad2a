//! On-disk formats for matrices, datasets and weights.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attn_memcap_core::model::{AttentionConfig, AttentionWeights, Dataset, Example, HeadWeights, Task};
use attn_memcap_core::numerics::Matrix;
use serde::{Deserialize, Serialize};

/// Plain decimal CSV, one row per line, no header.
pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("{} line {}", path.display(), i + 1))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("{} line {}: not a number", path.display(), i + 1))?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{} is empty", path.display());
    }
    Matrix::from_rows(&rows).with_context(|| format!("{}: ragged rows", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(rename = "T")]
    pub t: usize,
    pub n: usize,
    pub d: usize,
    pub d_out: usize,
    /// `cls:<k>` or `reg`.
    pub task: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(path, value)
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let dims = data.dims();
    let manifest = DatasetManifest {
        t: dims.t,
        n: dims.n,
        d: dims.d,
        d_out: dims.d_out,
        task: data.task().map_or_else(|| "reg".to_string(), |t| t.to_string()),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    for (t, ex) in data.examples().iter().enumerate() {
        write_matrix_csv(&dir.join(format!("context_{t}.csv")), &ex.context)?;
    }
    write_matrix_csv(&dir.join("queries.csv"), &data.query_matrix())?;
    write_matrix_csv(&dir.join("labels.csv"), &data.label_matrix())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let task = Task::parse(&m.task)?;
    let queries = read_matrix_csv(&dir.join("queries.csv"))?;
    let labels = read_matrix_csv(&dir.join("labels.csv"))?;
    if queries.shape() != (m.t, m.d) || labels.shape() != (m.t, m.d_out) {
        bail!(
            "{}: queries {:?} / labels {:?} disagree with manifest (T={}, d={}, d_out={})",
            dir.display(),
            queries.shape(),
            labels.shape(),
            m.t,
            m.d,
            m.d_out
        );
    }
    let mut examples = Vec::with_capacity(m.t);
    for t in 0..m.t {
        let context = read_matrix_csv(&dir.join(format!("context_{t}.csv")))?;
        if context.shape() != (m.n, m.d) {
            bail!("context_{t}.csv is {:?}, expected ({}, {})", context.shape(), m.n, m.d);
        }
        examples.push(Example {
            context,
            query: queries.row(t).to_vec(),
            label: labels.row(t).to_vec(),
        });
    }
    Ok(Dataset::new(examples, Some(task))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    #[serde(rename = "H")]
    pub heads: usize,
    pub d: usize,
    pub d_h: usize,
    pub d_v: usize,
    pub d_out: usize,
    pub skip_connection: bool,
    pub seed: u64,
    /// Which command produced the weights.
    pub source: String,
}

impl WeightsManifest {
    pub fn new(cfg: &AttentionConfig, seed: u64, source: &str) -> Self {
        Self {
            heads: cfg.heads,
            d: cfg.d,
            d_h: cfg.d_h,
            d_v: cfg.d_v,
            d_out: cfg.d_out,
            skip_connection: cfg.skip_connection,
            seed,
            source: source.to_string(),
        }
    }

    pub fn config(&self) -> Result<AttentionConfig> {
        Ok(AttentionConfig::new(self.heads, self.d, self.d_h, self.d_v, self.d_out)?.with_skip(self.skip_connection))
    }
}

pub fn save_weights(dir: &Path, w: &AttentionWeights, manifest: &WeightsManifest) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("manifest.json"), manifest)?;
    for (h, hw) in w.heads.iter().enumerate() {
        write_matrix_csv(&dir.join(format!("wk_{h}.csv")), &hw.key)?;
        write_matrix_csv(&dir.join(format!("wq_{h}.csv")), &hw.query)?;
        write_matrix_csv(&dir.join(format!("wv_{h}.csv")), &hw.value)?;
    }
    write_matrix_csv(&dir.join("wo.csv"), &w.output)?;
    write_matrix_csv(&dir.join("wd.csv"), &w.readout)?;
    Ok(())
}

pub fn load_weights(dir: &Path) -> Result<(AttentionWeights, AttentionConfig, WeightsManifest)> {
    let manifest: WeightsManifest = read_json(&dir.join("manifest.json"))?;
    let cfg = manifest.config()?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        heads.push(HeadWeights {
            key: read_matrix_csv(&dir.join(format!("wk_{h}.csv")))?,
            query: read_matrix_csv(&dir.join(format!("wq_{h}.csv")))?,
            value: read_matrix_csv(&dir.join(format!("wv_{h}.csv")))?,
        });
    }
    let w = AttentionWeights {
        heads,
        output: read_matrix_csv(&dir.join("wo.csv"))?,
        readout: read_matrix_csv(&dir.join("wd.csv"))?,
    };
    w.validate(&cfg).with_context(|| format!("weights in {}", dir.display()))?;
    Ok((w, cfg, manifest))
}

/// Where the run manifest of an output goes: inside a directory output,
/// next to a file output.
pub fn manifest_path_for(out: &Path, out_is_dir: bool) -> PathBuf {
    if out_is_dir {
        out.join("run_manifest.json")
    } else {
        let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}
