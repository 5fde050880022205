//! CSV cycle data and versioned JSON artifacts.
//!
//! Cycle data uses one row per sample:
//! `battery_id,cycle_number,time_step,voltage,capacity`, where `capacity`
//! (Ah, measured for the whole cycle) may be left empty or omitted. Rows are
//! grouped by battery and cycle; cycle numbers start at 1 and are
//! consecutive.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cycle::{CycleError, DischargeCycle, SohSeries, VoltageWindow};

pub const FORMAT_VERSION: u32 = 1;
pub const CSV_HEADER: [&str; 5] = ["battery_id", "cycle_number", "time_step", "voltage", "capacity"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("missing or invalid header; expected {}", CSV_HEADER.join(","))]
    MissingHeader,
    #[error("line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("battery {battery_id}: expected cycle {expected}, found cycle {got} (line {line})")]
    NonContiguousCycles {
        battery_id: String,
        expected: u32,
        got: u32,
        line: u64,
    },
    #[error("battery {battery_id}: rows for this battery are not contiguous (line {line})")]
    InterleavedBattery { battery_id: String, line: u64 },
    #[error("battery {battery_id}: capacity given for some cycles but not cycle {cycle}")]
    PartialCapacity { battery_id: String, cycle: u32 },
    #[error("battery {battery_id}: {source}")]
    Cycle {
        battery_id: String,
        #[source]
        source: CycleError,
    },
    #[error("{path}: invalid JSON: {message}")]
    Json { path: String, message: String },
    #[error("{path}: expected a '{expected}' artifact, found '{got}'")]
    WrongKind {
        path: String,
        expected: String,
        got: String,
    },
    #[error("{path}: format version {got} is not supported (expected {FORMAT_VERSION})")]
    FormatVersion { path: String, got: u32 },
}

impl IoError {
    /// True for failures of the file system rather than of the content.
    pub fn is_file_error(&self) -> bool {
        matches!(self, IoError::File { .. })
    }

    fn file(path: &Path, err: impl std::fmt::Display) -> Self {
        IoError::File {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

/// One battery's validated cycles, with SOH when capacities were present.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryData {
    pub battery_id: String,
    pub cycles: Vec<DischargeCycle>,
    pub soh: Option<SohSeries>,
}

#[derive(Debug, Deserialize)]
struct Row {
    battery_id: String,
    cycle_number: u32,
    time_step: u32,
    voltage: f64,
    #[serde(default)]
    capacity: Option<f64>,
}

struct Pending {
    battery_id: String,
    cycle_number: u32,
    samples: Vec<(u32, f64)>,
    capacity: Option<f64>,
}

struct Building {
    cycles: Vec<DischargeCycle>,
    capacities: Vec<Option<f64>>,
}

pub fn ingest(path: &Path, nominal_capacity: f64, window: &VoltageWindow) -> Result<Vec<BatteryData>, IoError> {
    let file = File::open(path).map_err(|e| IoError::file(path, e))?;
    ingest_reader(BufReader::new(file), nominal_capacity, window)
}

/// Parses cycle rows; batteries come back sorted by id.
pub fn ingest_reader<R: Read>(
    reader: R,
    nominal_capacity: f64,
    window: &VoltageWindow,
) -> Result<Vec<BatteryData>, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|_| IoError::MissingHeader)?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < 4 || names[..4] != CSV_HEADER[..4] || (names.len() >= 5 && names[4] != CSV_HEADER[4]) {
        return Err(IoError::MissingHeader);
    }

    let mut done: BTreeMap<String, Building> = BTreeMap::new();
    let mut current: Option<Pending> = None;
    let mut last_battery: Option<String> = None;

    let finish = |p: Pending, done: &mut BTreeMap<String, Building>| -> Result<(), IoError> {
        let cycle = crate::cycle::validate_cycle(p.cycle_number, &p.samples, window).map_err(|source| {
            IoError::Cycle {
                battery_id: p.battery_id.clone(),
                source,
            }
        })?;
        let b = done.entry(p.battery_id).or_insert_with(|| Building {
            cycles: Vec::new(),
            capacities: Vec::new(),
        });
        b.cycles.push(cycle);
        b.capacities.push(p.capacity);
        Ok(())
    };

    for (i, result) in rdr.deserialize::<Row>().enumerate() {
        let line = i as u64 + 2;
        let row = result.map_err(|e| IoError::MalformedRow {
            line,
            reason: match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            },
        })?;
        if !row.voltage.is_finite() {
            return Err(IoError::MalformedRow {
                line,
                reason: "voltage is not finite".into(),
            });
        }
        if let Some(c) = row.capacity {
            if !(c.is_finite() && c >= 0.0) {
                return Err(IoError::MalformedRow {
                    line,
                    reason: "capacity must be finite and >= 0".into(),
                });
            }
        }
        let same_cycle = current
            .as_ref()
            .is_some_and(|p| p.battery_id == row.battery_id && p.cycle_number == row.cycle_number);
        if !same_cycle {
            if let Some(p) = current.take() {
                finish(p, &mut done)?;
            }
            let seen = done.get(&row.battery_id).map_or(0, |b| b.cycles.len() as u32);
            if seen > 0 && last_battery.as_deref() != Some(row.battery_id.as_str()) {
                return Err(IoError::InterleavedBattery {
                    battery_id: row.battery_id,
                    line,
                });
            }
            if row.cycle_number != seen + 1 {
                return Err(IoError::NonContiguousCycles {
                    battery_id: row.battery_id,
                    expected: seen + 1,
                    got: row.cycle_number,
                    line,
                });
            }
            current = Some(Pending {
                battery_id: row.battery_id.clone(),
                cycle_number: row.cycle_number,
                samples: Vec::new(),
                capacity: None,
            });
        }
        let p = current.as_mut().expect("pending cycle exists");
        p.samples.push((row.time_step, row.voltage));
        if row.capacity.is_some() {
            p.capacity = row.capacity;
        }
        last_battery = Some(row.battery_id);
    }
    if let Some(p) = current.take() {
        finish(p, &mut done)?;
    }

    done.into_iter()
        .map(|(battery_id, b)| {
            let soh = if b.capacities.iter().all(Option::is_none) {
                None
            } else {
                let caps = b
                    .capacities
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        c.ok_or_else(|| IoError::PartialCapacity {
                            battery_id: battery_id.clone(),
                            cycle: i as u32 + 1,
                        })
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                Some(SohSeries::from_capacities(&caps, nominal_capacity).map_err(|source| IoError::Cycle {
                    battery_id: battery_id.clone(),
                    source,
                })?)
            };
            Ok(BatteryData {
                battery_id,
                cycles: b.cycles,
                soh,
            })
        })
        .collect()
}

/// Writes cycles in the ingest format. Capacity is `SOH × nominal` when an
/// SOH series is given.
pub fn write_csv<W: Write>(writer: W, batteries: &[BatteryData], nominal_capacity: f64) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| IoError::File {
        path: "<csv output>".into(),
        message: e.to_string(),
    };
    w.write_record(CSV_HEADER).map_err(err)?;
    for b in batteries {
        for (i, cycle) in b.cycles.iter().enumerate() {
            let capacity = b
                .soh
                .as_ref()
                .and_then(|s| s.values().get(i))
                .map(|q| (q * nominal_capacity).to_string())
                .unwrap_or_default();
            let n = cycle.cycle_number().to_string();
            for s in cycle.samples() {
                w.write_record([
                    b.battery_id.as_str(),
                    &n,
                    &s.time_step.to_string(),
                    &s.voltage.to_string(),
                    &capacity,
                ])
                .map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| IoError::File {
        path: "<csv output>".into(),
        message: e.to_string(),
    })
}

pub fn write_csv_file(path: &Path, batteries: &[BatteryData], nominal_capacity: f64) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::file(path, e))?;
    write_csv(BufWriter::new(file), batteries, nominal_capacity).map_err(|e| match e {
        IoError::File { message, .. } => IoError::file(path, message),
        other => other,
    })
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let mut file = File::open(path).map_err(|e| IoError::file(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| IoError::file(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// What produced an artifact: resolved settings, input digests and the tool
/// version. Carries no timestamps, so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    /// Input file name → SHA-256.
    pub input_hashes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            input_hashes: BTreeMap::new(),
        }
    }

    pub fn hash_input(&mut self, path: &Path) -> Result<(), IoError> {
        let digest = sha256_file(path)?;
        self.input_hashes.insert(path.display().to_string(), digest);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub format_version: u32,
    pub kind: String,
    pub manifest: RunManifest,
    pub body: T,
}

impl<T> Artifact<T> {
    pub fn new(kind: &str, manifest: RunManifest, body: T) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            manifest,
            body,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| IoError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| IoError::file(path, e))
}

/// Reads an artifact, checking its kind and format version.
pub fn read_artifact<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Artifact<T>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    let json_err = |e: serde_json::Error| IoError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    #[derive(Deserialize)]
    struct Head {
        format_version: u32,
        kind: String,
    }
    let head: Head = serde_json::from_str(&text).map_err(json_err)?;
    if head.format_version != FORMAT_VERSION {
        return Err(IoError::FormatVersion {
            path: path.display().to_string(),
            got: head.format_version,
        });
    }
    if head.kind != kind {
        return Err(IoError::WrongKind {
            path: path.display().to_string(),
            expected: kind.to_string(),
            got: head.kind,
        });
    }
    serde_json::from_str(&text).map_err(json_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = "battery_id,cycle_number,time_step,voltage,capacity
A,1,1,3.3,1.1
A,1,2,2.9,1.1
A,1,3,2.1,1.1
A,2,1,3.3,1.09
A,2,2,2.8,1.09
A,2,3,2.0,1.09
B,1,1,3.2,
B,1,2,2.5,
";

    fn parse(text: &str) -> Result<Vec<BatteryData>, IoError> {
        ingest_reader(text.as_bytes(), 1.1, &VoltageWindow::default())
    }

    #[test]
    fn two_battery_fixture() {
        let b = parse(TWO).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].battery_id, "A");
        assert_eq!(b[0].cycles.len(), 2);
        assert_eq!(b[0].cycles[1].voltages(), vec![3.3, 2.8, 2.0]);
        let soh = b[0].soh.as_ref().unwrap();
        assert!((soh.values()[1] - 1.09 / 1.1).abs() < 1e-15);
        assert_eq!(b[1].cycles.len(), 1);
        assert!(b[1].soh.is_none());
    }

    #[test]
    fn capacity_column_may_be_absent() {
        let b = parse("battery_id,cycle_number,time_step,voltage\nA,1,1,3.3\nA,1,2,2.9\n").unwrap();
        assert!(b[0].soh.is_none());
        assert_eq!(b[0].cycles[0].len(), 2);
    }

    #[test]
    fn malformed_voltage_reports_line() {
        let text = TWO.replace("A,2,2,2.8,1.09", "A,2,2,abc,1.09");
        match parse(&text) {
            Err(IoError::MalformedRow { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_is_required() {
        assert!(matches!(parse("A,1,0,3.3,1.1\n"), Err(IoError::MissingHeader)));
        assert!(matches!(parse(""), Err(IoError::MissingHeader)));
        assert!(matches!(
            parse("battery,cycle,t,v\nA,1,0,3.3\n"),
            Err(IoError::MissingHeader)
        ));
    }

    #[test]
    fn cycles_must_be_contiguous() {
        let gap = TWO.replace("A,2,", "A,3,");
        assert!(matches!(
            parse(&gap),
            Err(IoError::NonContiguousCycles { expected: 2, got: 3, .. })
        ));
        let late = "battery_id,cycle_number,time_step,voltage\nA,2,1,3.3\nA,2,2,2.9\n";
        assert!(matches!(parse(late), Err(IoError::NonContiguousCycles { expected: 1, .. })));
        let interleaved = "battery_id,cycle_number,time_step,voltage
A,1,1,3.3
A,1,2,2.9
B,1,1,3.3
B,1,2,2.9
A,2,1,3.3
A,2,2,2.9
";
        assert!(matches!(parse(interleaved), Err(IoError::InterleavedBattery { .. })));
    }

    #[test]
    fn cycle_validation_is_applied() {
        let text = TWO.replace("A,1,2,2.9", "A,1,1,2.9");
        assert!(matches!(parse(&text), Err(IoError::Cycle { .. })));
        let text = TWO.replace(",1.09", ",");
        assert!(matches!(parse(&text), Err(IoError::PartialCapacity { .. })));
    }

    #[test]
    fn emit_then_ingest_is_lossless() {
        let spec = crate::synth::SynthSpec {
            max_cycles: 30,
            ..crate::synth::SynthSpec::stationary(4, 30)
        };
        let gen = crate::synth::generate_battery(&spec).unwrap();
        let data = vec![BatteryData {
            battery_id: "S".into(),
            cycles: gen.cycles.clone(),
            soh: Some(gen.soh.clone()),
        }];
        let mut buf = Vec::new();
        write_csv(&mut buf, &data, 1.1).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back[0].cycles, gen.cycles);
        for (a, b) in back[0].soh.as_ref().unwrap().values().iter().zip(gen.soh.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn artifacts_check_kind_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let art = Artifact::new("thing", RunManifest::new("test", &42), vec![1.5, 2.25]);
        write_json(&path, &art).unwrap();
        let back: Artifact<Vec<f64>> = read_artifact(&path, "thing").unwrap();
        assert_eq!(back, art);
        assert!(matches!(
            read_artifact::<Vec<f64>>(&path, "other"),
            Err(IoError::WrongKind { .. })
        ));
        let text = std::fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            read_artifact::<Vec<f64>>(&path, "thing"),
            Err(IoError::FormatVersion { got: 9, .. })
        ));
        let missing = read_artifact::<Vec<f64>>(&dir.path().join("none.json"), "thing").unwrap_err();
        assert!(missing.is_file_error());
    }

    #[test]
    fn file_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        std::fs::write(&path, "abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
