//! On-disk window store and label tables.
//!
//! One CSV file per epoch: the header `epoch_id,label,label_kind`, one row
//! with those values, then one row per window (values in seconds,
//! unnormalised). Every row of a file has the same width, normally 1200.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::hr::{EpochAnnotation, Grade, HrWindow, LabelKind};

const HEADER: &str = "epoch_id,label,label_kind";

pub fn write_epoch<W: Write>(ws: &[HrWindow], mut w: W) -> Result<()> {
    let first = ws
        .first()
        .ok_or_else(|| Error::Data("refusing to write an epoch with no windows".into()))?;
    if ws.iter().any(|x| x.epoch_id != first.epoch_id) {
        return Err(Error::Data("windows of one file must share an epoch".into()));
    }
    writeln!(w, "{HEADER}")?;
    writeln!(w, "{},{},{}", first.epoch_id, first.label, first.label_kind.as_str())?;
    for win in ws {
        let row: Vec<String> = win.values.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_epoch<R: BufRead>(r: R) -> Result<Vec<HrWindow>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != HEADER {
        return Err(Error::parse(1, format!("expected header `{HEADER}`")));
    }
    let meta = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::parse(2, "missing epoch row"))?;
    let fields: Vec<&str> = meta.trim().split(',').collect();
    if fields.len() != 3 {
        return Err(Error::parse(2, "expected `epoch_id,label,label_kind`"));
    }
    let epoch_id = fields[0].to_string();
    let label: u8 = match fields[1] {
        "0" => 0,
        "1" => 1,
        other => return Err(Error::parse(2, format!("label must be 0 or 1, got {other:?}"))),
    };
    let label_kind = LabelKind::parse(fields[2])
        .ok_or_else(|| Error::parse(2, format!("unknown label kind {:?}", fields[2])))?;

    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 3;
        let values = line
            .trim()
            .split(',')
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(lineno, format!("non-numeric value {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let width = out.first().map_or(values.len(), |w: &HrWindow| w.values.len());
        if values.len() != width {
            return Err(Error::parse(
                lineno,
                format!("expected {width} values, found {}", values.len()),
            ));
        }
        out.push(HrWindow {
            values,
            epoch_id: epoch_id.clone(),
            label,
            label_kind,
            normalized: false,
        });
    }
    Ok(out)
}

pub fn write_epoch_file(dir: &Path, ws: &[HrWindow]) -> Result<PathBuf> {
    let id = &ws
        .first()
        .ok_or_else(|| Error::Data("refusing to write an epoch with no windows".into()))?
        .epoch_id;
    let path = dir.join(format!("{id}.csv"));
    let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
    write_epoch(ws, &mut f)?;
    f.flush()?;
    Ok(path)
}

/// Read every `*.csv` epoch file in `dir`, in file-name order.
pub fn read_store(dir: &Path) -> Result<Vec<Vec<HrWindow>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| read_epoch(BufReader::new(fs::File::open(p)?)))
        .collect()
}

/// One row of a label table: `subject,epoch_hour,grade`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub subject: String,
    pub annotation: EpochAnnotation,
}

pub fn read_labels<R: BufRead>(r: R) -> Result<Vec<LabelRow>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "subject,epoch_hour,grade" {
                return Err(Error::parse(1, "expected header `subject,epoch_hour,grade`"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 3 {
            return Err(Error::parse(i + 1, "expected 3 fields"));
        }
        let hour = f[1]
            .parse::<i64>()
            .map_err(|_| Error::parse(i + 1, format!("bad hour {:?}", f[1])))?;
        let grade =
            Grade::parse(f[2]).ok_or_else(|| Error::parse(i + 1, format!("unknown grade {:?}", f[2])))?;
        out.push(LabelRow {
            subject: f[0].to_string(),
            annotation: EpochAnnotation::strong(hour, grade),
        });
    }
    Ok(out)
}

pub fn epoch_id(subject: &str, hour: i64) -> String {
    format!("{subject}_h{hour}")
}
