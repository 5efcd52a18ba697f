use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ScenarioConfig, SpectrumFrame};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// JSON written next to a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub config: ScenarioConfig,
    pub threshold_dbm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// `data.csv` → `data.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes the frame as CSV (`slot, ch0, …, ch{F−1}`, one row per slot, six
/// decimals) plus its JSON sidecar. `config_hash`, when given, is recorded
/// in a leading `# config_hash=…` line and in the sidecar.
pub fn write_dataset(path: &Path, frame: &SpectrumFrame, config_hash: Option<&str>) -> Result<()> {
    let (f, t) = (frame.channels(), frame.slots());
    let mut out = String::with_capacity(t * f * 12);
    if let Some(h) = config_hash {
        out.push_str(&format!("# config_hash={h}\n"));
    }
    out.push_str("slot");
    for c in 0..f {
        out.push_str(&format!(",ch{c}"));
    }
    out.push('\n');
    let p = frame.power.data();
    for s in 0..t {
        out.push_str(&s.to_string());
        for c in 0..f {
            out.push_str(&format!(",{:.6}", p[c * t + s]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    let sidecar = DatasetSidecar {
        config: frame.config.clone(),
        threshold_dbm: frame.config.threshold_dbm,
        config_hash: config_hash.map(str::to_string),
    };
    let mut js = fs::File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(&mut js, &sidecar)?;
    js.write_all(b"\n")?;
    Ok(())
}

/// Reads a dataset CSV and its sidecar, checking that the number of power
/// columns equals the configured channel count.
pub fn read_dataset(path: &Path) -> Result<(SpectrumFrame, DatasetSidecar)> {
    let side = sidecar_path(path);
    let sidecar: DatasetSidecar = serde_json::from_reader(fs::File::open(&side).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", side.display())))
    })?)?;
    let file = fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut reader = BufReader::new(file);
    let mut text = String::new();
    let mut line = String::new();
    while reader.read_line(&mut line)? > 0 {
        if !line.starts_with('#') {
            text.push_str(&line);
        }
        line.clear();
    }
    let mut csv = csv::Reader::from_reader(text.as_bytes());
    let header = csv.headers()?.clone();
    let f = sidecar.config.channels;
    if header.len() != f + 1 {
        return Err(Error::format(format!(
            "{}: expected {} power columns, found {}",
            path.display(),
            f,
            header.len().saturating_sub(1)
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in csv.records().enumerate() {
        let rec = rec?;
        let slot: usize = rec[0]
            .parse()
            .map_err(|_| Error::format(format!("row {}: bad slot index {:?}", i + 1, &rec[0])))?;
        if slot != i {
            return Err(Error::format(format!("row {}: slot {slot} out of order", i + 1)));
        }
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| Error::format(format!("row {}: bad value {v:?}", i + 1))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    let t = rows.len();
    let mut config = sidecar.config.clone();
    config.slots = t;
    let mut power = vec![0.0; f * t];
    for (s, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            power[c * t + s] = v;
        }
    }
    let frame = SpectrumFrame::from_power(config, Tensor::new(vec![f, t], power)?)?;
    Ok((frame, sidecar))
}
