use std::collections::BTreeMap;
use std::io::Read;

use super::{assemble, parse_response, Dataset, IngestReport, RawRow};
use crate::error::{Error, Result};

/// Parse the ASSISTments 2009-2010 skill-builder export.
///
/// Only `user_id`, `order_id`, `problem_id`, `skill_id` and `correct` are
/// kept. Multi-skill problems appear as several rows sharing an `order_id`;
/// those rows are merged into one interaction whose KC set is the union of
/// their skills. Rows without a skill tag are dropped and counted.
pub(crate) fn parse_assistments(input: impl Read) -> Result<(Dataset, IngestReport)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let headers = reader
        .byte_headers()
        .map_err(|e| Error::Ingest { row: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| String::from_utf8_lossy(h).trim().trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| Error::Ingest { row: 1, message: format!("missing column {name:?}") })
    };
    let (c_user, c_order, c_problem, c_skill, c_correct) =
        (col("user_id")?, col("order_id")?, col("problem_id")?, col("skill_id")?, col("correct")?);

    let mut report = IngestReport::default();
    // (student, order) -> merged row
    let mut merged: BTreeMap<(String, u64), RawRow> = BTreeMap::new();
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
        let get = |i: usize| record.get(i).map(|b| String::from_utf8_lossy(b).trim().to_string()).unwrap_or_default();
        let skill = get(c_skill);
        let skills: Vec<String> = skill
            .split(['_', ';'])
            .map(str::trim)
            .filter(|s| !s.is_empty() && !s.eq_ignore_ascii_case("na"))
            .map(str::to_string)
            .collect();
        if skills.is_empty() {
            report.rows_dropped_missing_kc += 1;
            continue;
        }
        let student = get(c_user);
        let order_text = get(c_order);
        let order = order_text
            .parse::<u64>()
            .map_err(|_| Error::Ingest { row: line, message: format!("order_id {order_text:?} is not an integer") })?;
        let question = get(c_problem);
        if student.is_empty() || question.is_empty() {
            return Err(Error::Ingest { row: line, message: "empty user_id or problem_id".into() });
        }
        let response = parse_response(&get(c_correct), line)?;
        match merged.get_mut(&(student.clone(), order)) {
            Some(existing) => {
                if existing.question != question {
                    return Err(Error::Ingest {
                        row: line,
                        message: format!("order_id {order} maps to problems {:?} and {question:?}", existing.question),
                    });
                }
                if existing.response != response {
                    report.response_conflicts += 1;
                }
                report.rows_merged_multi_kc += 1;
                for s in skills {
                    if !existing.kcs.contains(&s) {
                        existing.kcs.push(s);
                    }
                }
            }
            None => {
                let mut kcs = skills;
                kcs.sort();
                kcs.dedup();
                merged.insert((student.clone(), order), RawRow { line, student, order, question, kcs, response });
            }
        }
    }

    // a problem's KC set is the union over every row that tagged it
    let mut union: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in merged.values() {
        let set = union.entry(row.question.clone()).or_default();
        set.extend(row.kcs.iter().cloned());
    }
    for set in union.values_mut() {
        set.sort();
        set.dedup();
    }
    let rows = merged
        .into_values()
        .map(|mut row| {
            row.kcs = union[&row.question].clone();
            row
        })
        .collect();
    assemble(rows, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "order_id,assignment_id,user_id,assistment_id,problem_id,original,correct,attempt_count,skill_id,skill_name\n";

    #[test]
    fn merges_multi_skill_rows_and_drops_untagged() {
        let text = format!(
            "{HEADER}\
             10,1,u1,5,p1,1,1,1,7,Addition\n\
             10,1,u1,5,p1,1,1,1,9,Subtraction\n\
             11,1,u1,5,p2,1,0,1,,\n\
             12,1,u2,5,p1,1,0,1,7,Addition\n"
        );
        let (ds, report) = parse_assistments(text.as_bytes()).unwrap();
        assert_eq!(report.rows_read, 4);
        assert_eq!(report.rows_dropped_missing_kc, 1);
        assert_eq!(report.rows_merged_multi_kc, 1);
        assert_eq!(ds.logs.len(), 2);
        assert_eq!(ds.mapping.kcs(0).unwrap().len(), 2);
        // u2 saw p1 under skill 7 only, but the question-level union applies
        assert_eq!(ds.logs[1].interactions[0].question, 0);
    }

    #[test]
    fn missing_column_is_reported() {
        let text = "user_id,order_id,problem_id,correct\n1,1,1,1\n";
        assert!(matches!(parse_assistments(text.as_bytes()), Err(Error::Ingest { row: 1, .. })));
    }
}
