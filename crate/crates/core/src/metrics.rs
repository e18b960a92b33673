//! Per-epoch metric records and their CSV form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,train_loss,train_top1,val_loss,val_top1,val_top5,disc_loss,cf_penalty";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    /// Mean discriminator hinge loss over the epoch's discriminator steps.
    pub disc_loss: f64,
    /// Mean weighted generator penalty over the epoch's penalized steps.
    pub cf_penalty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    TrainLoss,
    TrainTop1,
    ValLoss,
    ValTop1,
    ValTop5,
    DiscLoss,
    CfPenalty,
}

impl Field {
    pub const ALL: [Field; 7] = [
        Field::TrainLoss,
        Field::TrainTop1,
        Field::ValLoss,
        Field::ValTop1,
        Field::ValTop5,
        Field::DiscLoss,
        Field::CfPenalty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::TrainLoss => "train_loss",
            Field::TrainTop1 => "train_top1",
            Field::ValLoss => "val_loss",
            Field::ValTop1 => "val_top1",
            Field::ValTop5 => "val_top5",
            Field::DiscLoss => "disc_loss",
            Field::CfPenalty => "cf_penalty",
        }
    }
}

impl FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Field::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metrics field {s:?}")))
    }
}

impl MetricsRecord {
    pub fn get(&self, field: Field) -> f64 {
        match field {
            Field::TrainLoss => self.train_loss,
            Field::TrainTop1 => self.train_top1,
            Field::ValLoss => self.val_loss,
            Field::ValTop1 => self.val_top1,
            Field::ValTop5 => self.val_top5,
            Field::DiscLoss => self.disc_loss,
            Field::CfPenalty => self.cf_penalty,
        }
    }
}

/// Mean of `field` over the last `min(k, len)` records.
pub fn avg_last_k(records: &[MetricsRecord], k: usize, field: Field) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("avg_last_k over no records".into()));
    }
    if k == 0 {
        return Err(Error::Contract("avg_last_k needs k >= 1".into()));
    }
    let tail = &records[records.len() - k.min(records.len())..];
    Ok(tail.iter().map(|r| r.get(field)).sum::<f64>() / tail.len() as f64)
}

pub fn min_of(records: &[MetricsRecord], field: Field) -> f64 {
    records.iter().map(|r| r.get(field)).fold(f64::INFINITY, f64::min)
}

pub fn max_of(records: &[MetricsRecord], field: Field) -> f64 {
    records.iter().map(|r| r.get(field)).fold(f64::NEG_INFINITY, f64::max)
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = write!(s, "{}", r.epoch);
        for f in Field::ALL {
            let _ = write!(s, ",{:.6}", r.get(f));
        }
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Vec<MetricsRecord>> {
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(err(format!("expected header `{CSV_HEADER}`"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                return Err(err(format!("line {}: expected 8 columns", i + 2)));
            }
            let num = |j: usize| -> Result<f64> {
                cols[j]
                    .trim()
                    .parse()
                    .map_err(|e| err(format!("line {}: {e}", i + 2)))
            };
            Ok(MetricsRecord {
                epoch: cols[0]
                    .trim()
                    .parse()
                    .map_err(|e| err(format!("line {}: {e}", i + 2)))?,
                train_loss: num(1)?,
                train_top1: num(2)?,
                val_loss: num(3)?,
                val_top1: num(4)?,
                val_top5: num(5)?,
                disc_loss: num(6)?,
                cf_penalty: num(7)?,
            })
        })
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, val_loss: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            train_loss: 0.0,
            train_top1: 0.0,
            val_loss,
            val_top1: 0.0,
            val_top5: 0.0,
            disc_loss: 0.0,
            cf_penalty: 0.0,
        }
    }

    #[test]
    fn avg_last_k_cases() {
        let rs = [rec(0, 1.0), rec(1, 2.0), rec(2, 3.0)];
        assert_eq!(avg_last_k(&rs, 2, Field::ValLoss).unwrap(), 2.5);
        assert_eq!(avg_last_k(&rs, 10, Field::ValLoss).unwrap(), 2.0);
        let flat = [rec(0, 0.7), rec(1, 0.7), rec(2, 0.7)];
        assert!((avg_last_k(&flat, 3, Field::ValLoss).unwrap() - 0.7).abs() < 1e-15);
        assert!(avg_last_k(&[], 3, Field::ValLoss).is_err());
    }

    #[test]
    fn csv_format_is_fixed_point() {
        let mut r = rec(3, 1.0 / 3.0);
        r.val_top5 = 1.0;
        let s = to_csv(&[r]);
        assert_eq!(
            s,
            format!("{CSV_HEADER}\n3,0.000000,0.000000,0.333333,0.000000,1.000000,0.000000,0.000000\n")
        );
        let back = parse_csv(&s, Path::new("x.csv")).unwrap();
        assert_eq!(back[0].epoch, 3);
        assert_eq!(back[0].val_loss, 0.333333);
        assert!(parse_csv("epoch\n", Path::new("x.csv")).is_err());
    }

    #[test]
    fn field_names_parse() {
        for f in Field::ALL {
            assert_eq!(f.name().parse::<Field>().unwrap(), f);
        }
        assert!("epoch".parse::<Field>().is_err());
    }
}
