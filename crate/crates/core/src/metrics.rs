//! Self-describing line-delimited metrics records and the cross-run
//! comparison tables built from them.

use crate::diag::{ProbeReport, SpectrumReport};
use crate::error::{Error, Result};
use crate::eval::{FewshotResult, TransferResult};
use crate::trainer::EpochRecord;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub run_id: String,
    pub generation: u32,
    pub epoch: u32,
    #[serde(flatten)]
    pub report: ProbeReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub run_id: String,
    pub generation: u32,
    pub epoch: u32,
    #[serde(flatten)]
    pub report: SpectrumReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub run_id: String,
    pub generation: u32,
    pub epoch: u32,
    #[serde(flatten)]
    pub result: TransferResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotRecord {
    pub run_id: String,
    pub generation: u32,
    pub epoch: u32,
    #[serde(flatten)]
    pub result: FewshotResult,
}

/// One metrics event. Every variant carries (run id, generation, epoch) and
/// round-trips losslessly through its JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Epoch(EpochRecord),
    Probe(ProbeRecord),
    Spectrum(SpectrumRecord),
    Transfer(TransferRecord),
    Fewshot(FewshotRecord),
}

impl Record {
    pub fn run_id(&self) -> &str {
        match self {
            Record::Epoch(r) => &r.run_id,
            Record::Probe(r) => &r.run_id,
            Record::Spectrum(r) => &r.run_id,
            Record::Transfer(r) => &r.run_id,
            Record::Fewshot(r) => &r.run_id,
        }
    }

    pub fn to_line(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Io(format!("serializing record: {e}")))
    }

    pub fn from_line(line: &str) -> Result<Record> {
        serde_json::from_str(line).map_err(|e| Error::Parse(format!("metrics record: {e}")))
    }
}

pub fn write_record(w: &mut impl Write, record: &Record) -> Result<()> {
    let line = record.to_line()?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_records(r: impl BufRead) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Record::from_line(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn read_records_from(path: &std::path::Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_records(std::io::BufReader::new(file))
}

/// Per-generation final test accuracy, one column per run.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareTable {
    pub columns: Vec<String>,
    pub generations: Vec<u32>,
    /// `cells[row][col]`: accuracy of `columns[col]` at generation
    /// `generations[row]`, when that run reached it.
    pub cells: Vec<Vec<Option<f64>>>,
}

/// Fold epoch records from several runs into a generation-by-run accuracy
/// table; the last epoch of each generation supplies the accuracy.
pub fn compare(runs: &[Vec<Record>]) -> CompareTable {
    let mut columns = Vec::new();
    let mut per_run: Vec<std::collections::BTreeMap<u32, (u32, f64)>> = Vec::new();
    for records in runs {
        let mut by_gen: std::collections::BTreeMap<u32, (u32, f64)> = Default::default();
        let mut run_id = String::new();
        for record in records {
            if let Record::Epoch(e) = record {
                run_id = e.run_id.clone();
                let entry = by_gen.entry(e.generation).or_insert((e.epoch_in_gen, e.test_acc));
                if e.epoch_in_gen >= entry.0 {
                    *entry = (e.epoch_in_gen, e.test_acc);
                }
            }
        }
        columns.push(run_id);
        per_run.push(by_gen);
    }
    let mut generations: Vec<u32> = per_run
        .iter()
        .flat_map(|m| m.keys().copied())
        .collect::<std::collections::BTreeSet<u32>>()
        .into_iter()
        .collect();
    generations.sort_unstable();
    let cells = generations
        .iter()
        .map(|g| per_run.iter().map(|m| m.get(g).map(|&(_, acc)| acc)).collect())
        .collect();
    CompareTable {
        columns,
        generations,
        cells,
    }
}

/// Render the comparison as a fixed-width text table, one row per
/// generation and one column per run.
pub fn render_table(table: &CompareTable) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:>10}", "generation"));
    for c in &table.columns {
        out.push_str(&format!(" {c:>14}"));
    }
    out.push('\n');
    for (row, gen) in table.generations.iter().enumerate() {
        out.push_str(&format!("{:>10}", gen + 1));
        for cell in &table.cells[row] {
            match cell {
                Some(acc) => out.push_str(&format!(" {:>14.4}", acc)),
                None => out.push_str(&format!(" {:>14}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

/// CSV of probe mean depths: one row per (generation, run) with a probe
/// record, for depth-evolution plots.
pub fn depth_csv(runs: &[Vec<Record>]) -> String {
    let mut out = String::from("generation,run,mean_depth,layer_accuracies\n");
    for records in runs {
        for record in records {
            if let Record::Probe(p) = record {
                let accs: Vec<String> = p.report.layer_accuracy.iter().map(|a| format!("{a}")).collect();
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    p.generation + 1,
                    p.run_id,
                    p.report.mean_depth,
                    accs.join(";")
                ));
            }
        }
    }
    out
}
