//! Calibration tables: per-state mean and stddev rows keyed by P/E cycles,
//! retention age (seconds) and read-disturb count.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::voltage::State;

const BUILTIN: &str = include_str!("../data/calibration.csv");

pub const DAY: f64 = 86_400.0;
pub const WEEK: f64 = 7.0 * DAY;
pub const MONTH: f64 = 30.0 * DAY;
pub const YEAR: f64 = 365.0 * DAY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Pe,
    Retention,
    Disturb,
}

impl Mechanism {
    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "pe" => Some(Mechanism::Pe),
            "retention" => Some(Mechanism::Retention),
            "disturb" => Some(Mechanism::Disturb),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Pe => "pe",
            Mechanism::Retention => "retention",
            Mechanism::Disturb => "disturb",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    pub keys: Vec<f64>,
    pub means: Vec<[f64; 8]>,
    pub stddevs: Vec<[f64; 8]>,
}

impl CalibrationTable {
    fn validate(&self, name: &str) -> Result<()> {
        if self.keys.len() < 2 {
            return Err(Error::Calibration(format!("{name}: need at least two rows")));
        }
        if self.keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Calibration(format!("{name}: row keys must strictly increase")));
        }
        if self.stddevs.iter().flatten().any(|s| !(*s > 0.0)) {
            return Err(Error::Calibration(format!("{name}: stddevs must be positive")));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.keys.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTables {
    pub pe: CalibrationTable,
    pub retention: CalibrationTable,
    pub disturb: CalibrationTable,
}

#[derive(Deserialize)]
struct Record {
    mechanism: String,
    row_key: f64,
    state: String,
    mean: f64,
    stddev: f64,
}

impl CalibrationTables {
    /// The shipped TLC characterization tables.
    pub fn builtin() -> Self {
        Self::from_reader(BUILTIN.as_bytes()).expect("embedded calibration parses")
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(f)
    }

    pub fn from_reader<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        // (mechanism, key) -> (means, stddevs, filled mask)
        let mut rows: Vec<(Mechanism, f64, [f64; 8], [f64; 8], u8)> = Vec::new();
        for rec in rdr.deserialize() {
            let rec: Record = rec?;
            let mech = Mechanism::parse(&rec.mechanism)
                .ok_or_else(|| Error::Calibration(format!("unknown mechanism {:?}", rec.mechanism)))?;
            let st = State::parse(&rec.state)
                .ok_or_else(|| Error::Calibration(format!("unknown state {:?}", rec.state)))?;
            let idx = match rows.iter().position(|r| r.0 == mech && r.1 == rec.row_key) {
                Some(i) => i,
                None => {
                    rows.push((mech, rec.row_key, [0.0; 8], [0.0; 8], 0));
                    rows.len() - 1
                }
            };
            let row = &mut rows[idx];
            if row.4 & (1 << st.index()) != 0 {
                return Err(Error::Calibration(format!(
                    "duplicate entry {} {} {}",
                    mech.name(),
                    rec.row_key,
                    st.name()
                )));
            }
            row.2[st.index()] = rec.mean;
            row.3[st.index()] = rec.stddev;
            row.4 |= 1 << st.index();
        }
        let build = |mech: Mechanism| -> Result<CalibrationTable> {
            let mut sel: Vec<_> = rows.iter().filter(|r| r.0 == mech).collect();
            if sel.iter().any(|r| r.4 != 0xff) {
                return Err(Error::Calibration(format!("{}: every row needs all eight states", mech.name())));
            }
            sel.sort_by(|a, b| a.1.total_cmp(&b.1));
            let t = CalibrationTable {
                keys: sel.iter().map(|r| r.1).collect(),
                means: sel.iter().map(|r| r.2).collect(),
                stddevs: sel.iter().map(|r| r.3).collect(),
            };
            t.validate(mech.name())?;
            Ok(t)
        };
        Ok(CalibrationTables {
            pe: build(Mechanism::Pe)?,
            retention: build(Mechanism::Retention)?,
            disturb: build(Mechanism::Disturb)?,
        })
    }

    pub fn table(&self, m: Mechanism) -> &CalibrationTable {
        match m {
            Mechanism::Pe => &self.pe,
            Mechanism::Retention => &self.retention,
            Mechanism::Disturb => &self.disturb,
        }
    }

    /// Serialize back to the CSV layout accepted by [`from_reader`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mechanism,row_key,state,mean,stddev\n");
        for m in [Mechanism::Pe, Mechanism::Retention, Mechanism::Disturb] {
            let t = self.table(m);
            for (i, k) in t.keys.iter().enumerate() {
                for s in State::ALL {
                    out.push_str(&format!(
                        "{},{},{},{},{}\n",
                        m.name(),
                        k,
                        s.name(),
                        t.means[i][s.index()],
                        t.stddevs[i][s.index()]
                    ));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_shape() {
        let t = CalibrationTables::builtin();
        assert_eq!(t.pe.keys, vec![0.0, 200.0, 400.0, 1000.0, 2000.0, 3000.0]);
        assert_eq!(t.retention.keys, vec![DAY, WEEK, MONTH, 3.0 * MONTH, YEAR]);
        assert_eq!(t.disturb.keys, vec![1.0, 1e3, 1e4, 5e4, 1e5]);
        assert_eq!(t.pe.means[5][0], -84.1);
        assert_eq!(t.pe.stddevs[5][0], 49.4);
        assert_eq!(t.retention.means[4][7], 440.8);
        assert_eq!(t.disturb.means[4][0], -20.4);
    }

    #[test]
    fn csv_round_trip() {
        let t = CalibrationTables::builtin();
        let back = CalibrationTables::from_reader(t.to_csv().as_bytes()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn rejects_bad_tables() {
        let mut csv = CalibrationTables::builtin().to_csv();
        csv.push_str("pe,0,ER,-1,1\n");
        assert!(CalibrationTables::from_reader(csv.as_bytes()).is_err());

        let csv = CalibrationTables::builtin().to_csv().replace("pe,0,P3,191.6,8.9", "pe,0,P3,191.6,0");
        assert!(CalibrationTables::from_reader(csv.as_bytes()).is_err());

        let csv: String = CalibrationTables::builtin()
            .to_csv()
            .lines()
            .filter(|l| !l.starts_with("disturb,1000,P2"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(CalibrationTables::from_reader(csv.as_bytes()).is_err());
    }
}
