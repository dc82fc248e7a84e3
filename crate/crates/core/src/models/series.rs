use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numgrid::fmt_f64;

/// Observed state path: one row per date, one column per state variable.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub names: Vec<String>,
    pub dates: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TimeSeries {
    /// Reads a headed CSV. A leading column named `date` is kept as labels;
    /// otherwise rows are labelled by position. Errors carry file line numbers.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let dated = header.first().is_some_and(|h| h.eq_ignore_ascii_case("date"));
        let names: Vec<String> = header.iter().skip(usize::from(dated)).cloned().collect();
        if names.is_empty() {
            return Err(Error::Data {
                row: 1,
                msg: "no state columns".into(),
            });
        }
        let mut dates = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Data { row: line, msg: e.to_string() })?;
            if rec.len() != header.len() {
                return Err(Error::Data {
                    row: line,
                    msg: format!("expected {} fields, found {}", header.len(), rec.len()),
                });
            }
            dates.push(if dated { rec[0].to_string() } else { (i + 1).to_string() });
            let row = rec
                .iter()
                .skip(usize::from(dated))
                .map(|s| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Data {
                            row: line,
                            msg: format!("'{s}' is not a finite number"),
                        })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(TimeSeries { names, dates, rows })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        wtr.write_record(&header)?;
        for (d, r) in self.dates.iter().zip(&self.rows) {
            let mut rec = vec![d.clone()];
            rec.extend(r.iter().map(|v| fmt_f64(*v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
