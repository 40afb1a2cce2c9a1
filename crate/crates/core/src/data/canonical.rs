use std::io::Read;
use std::path::Path;

use super::{assemble, parse_response, Dataset, IdMap, IdMaps, IngestReport, Interaction, InteractionLog, KcMapping, RawRow};
use crate::error::{Error, Result};

pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const STUDENT_IDS_FILE: &str = "students.idmap.csv";
pub const QUESTION_IDS_FILE: &str = "questions.idmap.csv";
pub const KC_IDS_FILE: &str = "kcs.idmap.csv";
pub const INGEST_REPORT_FILE: &str = "ingest_report.json";

const HEADER: [&str; 5] = ["student_id", "order", "question_id", "kc_ids", "response"];

fn column(headers: &csv::ByteRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| String::from_utf8_lossy(h).trim().eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Ingest { row: 1, message: format!("missing column {name:?}") })
}

fn field(record: &csv::ByteRecord, idx: usize, line: usize) -> Result<String> {
    record
        .get(idx)
        .map(|b| String::from_utf8_lossy(b).trim().to_string())
        .ok_or_else(|| Error::Ingest { row: line, message: format!("row has no field {idx}") })
}

struct CanonicalRows {
    rows: Vec<RawRow>,
    report: IngestReport,
}

fn read_rows(input: impl Read) -> Result<CanonicalRows> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(input);
    let headers = reader
        .byte_headers()
        .map_err(|e| Error::Ingest { row: 1, message: e.to_string() })?
        .clone();
    let cols: Vec<usize> = HEADER.iter().map(|h| column(&headers, h)).collect::<Result<_>>()?;
    let mut report = IngestReport::default();
    let mut rows = Vec::new();
    let mut record = csv::ByteRecord::new();
    loop {
        let line = reader.position().line() as usize;
        match reader.read_byte_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(Error::Ingest { row: line.max(2), message: e.to_string() }),
        }
        let line = record.position().map(|p| p.line() as usize).unwrap_or(line);
        report.rows_read += 1;
        let student = field(&record, cols[0], line)?;
        let order_text = field(&record, cols[1], line)?;
        let order = order_text
            .parse::<u64>()
            .map_err(|_| Error::Ingest { row: line, message: format!("order {order_text:?} is not a non-negative integer") })?;
        let question = field(&record, cols[2], line)?;
        let kcs: Vec<String> = field(&record, cols[3], line)?
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let response = parse_response(&field(&record, cols[4], line)?, line)?;
        if student.is_empty() || question.is_empty() {
            return Err(Error::Ingest { row: line, message: "empty student or question id".into() });
        }
        if kcs.is_empty() {
            report.rows_dropped_missing_kc += 1;
            continue;
        }
        let mut dedup = kcs.clone();
        dedup.sort();
        dedup.dedup();
        if dedup.len() != kcs.len() {
            return Err(Error::Ingest { row: line, message: "kc_ids lists a KC twice".into() });
        }
        rows.push(RawRow { line, student, order, question, kcs, response });
    }
    Ok(CanonicalRows { rows, report })
}

pub(crate) fn parse_canonical(input: impl Read) -> Result<(Dataset, IngestReport)> {
    let CanonicalRows { rows, report } = read_rows(input)?;
    assemble(rows, report)
}

pub fn write_id_map(path: &Path, map: &IdMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["raw_id", "dense_id"]).map_err(|e| csv_io(path, e))?;
    for (dense, raw) in map.raw_ids().iter().enumerate() {
        w.write_record([raw.as_str(), dense.to_string().as_str()]).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_id_map(path: &Path) -> Result<IdMap> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut pairs = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Ingest { row: i + 2, message: e.to_string() })?;
        let raw = rec.get(0).unwrap_or_default().to_string();
        let dense: usize = rec
            .get(1)
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| Error::Ingest { row: i + 2, message: format!("bad dense id in {}", path.display()) })?;
        pairs.push((dense, raw));
    }
    pairs.sort();
    if pairs.iter().enumerate().any(|(i, (d, _))| *d != i) {
        return Err(Error::Validation(format!("{}: dense ids are not 0..n", path.display())));
    }
    IdMap::from_dense_order(pairs.into_iter().map(|(_, r)| r).collect())
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serialization(format!("{}: {other:?}", path.display())),
    }
}

/// Write a dataset as canonical interactions plus id maps and the ingest report.
pub fn write_prepared(dir: &Path, dataset: &Dataset, report: &IngestReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(INTERACTIONS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
    w.write_record(HEADER).map_err(|e| csv_io(&path, e))?;
    let ids = &dataset.ids;
    let name = |map: &IdMap, dense: usize| map.raw(dense).map(str::to_string).unwrap_or_else(|| dense.to_string());
    for log in &dataset.logs {
        let student = name(&ids.students, log.student);
        for it in &log.interactions {
            let kcs = dataset
                .mapping
                .kcs(it.question)
                .ok_or_else(|| Error::Validation(format!("question {} unmapped", it.question)))?
                .iter()
                .map(|&c| name(&ids.kcs, c))
                .collect::<Vec<_>>()
                .join(";");
            let order = it.order.to_string();
            let q = name(&ids.questions, it.question);
            let r = if it.response { "1" } else { "0" };
            w.write_record([student.as_str(), order.as_str(), q.as_str(), kcs.as_str(), r])
                .map_err(|e| csv_io(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_id_map(&dir.join(STUDENT_IDS_FILE), &ids.students)?;
    write_id_map(&dir.join(QUESTION_IDS_FILE), &ids.questions)?;
    write_id_map(&dir.join(KC_IDS_FILE), &ids.kcs)?;
    let report_path = dir.join(INGEST_REPORT_FILE);
    std::fs::write(&report_path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&report_path, e))
}

/// Load a directory written by [`write_prepared`], honouring its persisted id maps.
pub fn load_prepared(dir: &Path) -> Result<(Dataset, IngestReport)> {
    let path = dir.join(INTERACTIONS_FILE);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let CanonicalRows { rows, report: mut fresh } = read_rows(file)?;
    let ids = IdMaps {
        students: read_id_map(&dir.join(STUDENT_IDS_FILE))?,
        questions: read_id_map(&dir.join(QUESTION_IDS_FILE))?,
        kcs: read_id_map(&dir.join(KC_IDS_FILE))?,
    };
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no rows", path.display())));
    }
    let (s_lut, q_lut, k_lut) = (ids.students.lookup(), ids.questions.lookup(), ids.kcs.lookup());
    let unknown = |what: &str, raw: &str, line: usize| Error::Ingest { row: line, message: format!("{what} {raw:?} missing from id map") };
    let mut entries: Vec<Option<Vec<usize>>> = vec![None; ids.questions.len()];
    let mut logs: Vec<InteractionLog> = Vec::new();
    for row in rows {
        let s = *s_lut.get(row.student.as_str()).ok_or_else(|| unknown("student", &row.student, row.line))?;
        let q = *q_lut.get(row.question.as_str()).ok_or_else(|| unknown("question", &row.question, row.line))?;
        let mut kcs = row
            .kcs
            .iter()
            .map(|k| k_lut.get(k.as_str()).copied().ok_or_else(|| unknown("kc", k, row.line)))
            .collect::<Result<Vec<_>>>()?;
        kcs.sort_unstable();
        match &entries[q] {
            Some(existing) if *existing != kcs => {
                return Err(Error::Ingest { row: row.line, message: format!("question {:?} KC set changed", row.question) })
            }
            Some(_) => {}
            None => entries[q] = Some(kcs),
        }
        let it = Interaction { order: row.order, question: q, response: row.response };
        match logs.last_mut() {
            Some(log) if log.student == s => log.interactions.push(it),
            _ => logs.push(InteractionLog { student: s, interactions: vec![it] }),
        }
    }
    logs.sort_by_key(|l| l.student);
    if logs.windows(2).any(|w| w[0].student == w[1].student) {
        return Err(Error::Validation("a student's rows are not contiguous".into()));
    }
    for log in &mut logs {
        log.interactions.sort_by_key(|i| i.order);
    }
    // questions that never appear keep a placeholder KC set so dense ids stay aligned
    let entries = entries.into_iter().map(|e| e.unwrap_or_else(|| vec![0])).collect();
    let mapping = KcMapping::new(entries, ids.kcs.len())?;
    fresh.interactions = logs.iter().map(InteractionLog::len).sum();
    let report_path = dir.join(INGEST_REPORT_FILE);
    let report = match std::fs::read_to_string(&report_path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => fresh,
    };
    let dataset = Dataset { logs, mapping, ids };
    dataset.validate()?;
    Ok((dataset, report))
}
