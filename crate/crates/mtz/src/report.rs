//! Reading line-delimited `key=value` records (zip reports, training logs).

use std::collections::BTreeMap;

/// One record: the first token names it when it has no `=`, e.g. `summary`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record {
    pub tag: Option<String>,
    pub fields: BTreeMap<String, String>,
}

impl Record {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn number(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }
}

pub fn parse_records(text: &str) -> Vec<Record> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut rec = Record::default();
            for (k, tok) in line.split_whitespace().enumerate() {
                match tok.split_once('=') {
                    Some((key, value)) => {
                        rec.fields.insert(key.to_string(), value.to_string());
                    }
                    None if k == 0 => rec.tag = Some(tok.to_string()),
                    None => {}
                }
            }
            rec
        })
        .collect()
}
