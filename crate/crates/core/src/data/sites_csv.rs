//! Sites table in CSV, and the flat row form shared with the JSON service.

use serde::{Deserialize, Serialize};

use super::records::{Label, SiteRecord, SoilLayer, SoilType, N_LAYERS};
use crate::error::{Error, Result};

pub const SITE_COLUMNS: [&str; 27] = [
    "site_id", "label", "spt_1", "spt_2", "spt_3", "spt_4", "spt_5", "spt_6", "spt_7", "spt_8", "spt_9", "spt_10",
    "soil_1", "soil_2", "soil_3", "soil_4", "soil_5", "soil_6", "soil_7", "soil_8", "soil_9", "soil_10", "vs30",
    "dist_epi", "wt_depth", "dist_water", "motion_id",
];

/// Flat site object, field-for-field with the CSV columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteRow {
    pub site_id: String,
    #[serde(default)]
    pub label: Option<u8>,
    pub spt_1: f64,
    pub spt_2: f64,
    pub spt_3: f64,
    pub spt_4: f64,
    pub spt_5: f64,
    pub spt_6: f64,
    pub spt_7: f64,
    pub spt_8: f64,
    pub spt_9: f64,
    pub spt_10: f64,
    pub soil_1: u8,
    pub soil_2: u8,
    pub soil_3: u8,
    pub soil_4: u8,
    pub soil_5: u8,
    pub soil_6: u8,
    pub soil_7: u8,
    pub soil_8: u8,
    pub soil_9: u8,
    pub soil_10: u8,
    pub vs30: f64,
    pub dist_epi: f64,
    pub wt_depth: f64,
    pub dist_water: f64,
    #[serde(default)]
    pub motion_id: String,
}

impl SiteRow {
    pub fn spt(&self) -> [f64; N_LAYERS] {
        [
            self.spt_1, self.spt_2, self.spt_3, self.spt_4, self.spt_5, self.spt_6, self.spt_7, self.spt_8, self.spt_9,
            self.spt_10,
        ]
    }

    pub fn soil(&self) -> [u8; N_LAYERS] {
        [
            self.soil_1, self.soil_2, self.soil_3, self.soil_4, self.soil_5, self.soil_6, self.soil_7, self.soil_8,
            self.soil_9, self.soil_10,
        ]
    }

    /// Validates and converts; a missing label becomes `NotLiquefied`.
    pub fn to_record(&self) -> Result<SiteRecord> {
        let spt = self.spt();
        let soil = self.soil();
        let mut layers = [SoilLayer { spt_n: 0.0, soil_type: SoilType::Sand }; N_LAYERS];
        for i in 0..N_LAYERS {
            let soil_type = SoilType::try_from(soil[i])
                .map_err(|_| Error::InvalidInput(format!("soil_type out of domain: soil_{} = {}", i + 1, soil[i])))?;
            layers[i] = SoilLayer { spt_n: spt[i], soil_type };
        }
        let label = match self.label {
            Some(l) => Label::try_from(l)?,
            None => Label::NotLiquefied,
        };
        let rec = SiteRecord {
            site_id: self.site_id.clone(),
            layers,
            vs30: self.vs30,
            dist_epi: self.dist_epi,
            wt_depth: self.wt_depth,
            dist_water: self.dist_water,
            motion_id: self.motion_id.clone(),
            label,
            null_twin: false,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn from_record(r: &SiteRecord) -> Self {
        let s = r.spt();
        let t = r.layers.map(|l| l.soil_type.token());
        Self {
            site_id: r.site_id.clone(),
            label: Some(r.label.into()),
            spt_1: s[0],
            spt_2: s[1],
            spt_3: s[2],
            spt_4: s[3],
            spt_5: s[4],
            spt_6: s[5],
            spt_7: s[6],
            spt_8: s[7],
            spt_9: s[8],
            spt_10: s[9],
            soil_1: t[0],
            soil_2: t[1],
            soil_3: t[2],
            soil_4: t[3],
            soil_5: t[4],
            soil_6: t[5],
            soil_7: t[6],
            soil_8: t[7],
            soil_9: t[8],
            soil_10: t[9],
            vs30: r.vs30,
            dist_epi: r.dist_epi,
            wt_depth: r.wt_depth,
            dist_water: r.dist_water,
            motion_id: r.motion_id.clone(),
        }
    }
}

fn check_header(header: &csv::StringRecord) -> Result<()> {
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    for col in SITE_COLUMNS {
        if !got.contains(&col) {
            return Err(Error::Schema { column: col.to_string() });
        }
    }
    for (i, g) in got.iter().enumerate() {
        if SITE_COLUMNS.get(i) != Some(g) {
            return Err(Error::Schema { column: g.to_string() });
        }
    }
    Ok(())
}

/// Parses a sites table. Rows are numbered from 1 after the header.
pub fn parse_sites_csv(text: &str) -> Result<Vec<SiteRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
    check_header(rdr.headers()?)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row { row, message: e.to_string() })?;
        if rec.len() != SITE_COLUMNS.len() {
            return Err(Error::Row {
                row,
                message: format!("expected {} fields, found {}", SITE_COLUMNS.len(), rec.len()),
            });
        }
        let num = |c: usize| -> Result<f64> {
            let cell = &rec[c];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Row { row, message: format!("{}: not a finite number: {cell:?}", SITE_COLUMNS[c]) })
        };
        let token = |c: usize| -> Result<u8> {
            let v = num(c)?;
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err(Error::Row { row, message: format!("{}: not an integer token: {v}", SITE_COLUMNS[c]) });
            }
            Ok(v as u8)
        };
        let spt: Vec<f64> = (2..12).map(num).collect::<Result<_>>()?;
        let soil: Vec<u8> = (12..22).map(token).collect::<Result<_>>()?;
        let site = SiteRow {
            site_id: rec[0].to_string(),
            label: Some(token(1)?),
            spt_1: spt[0],
            spt_2: spt[1],
            spt_3: spt[2],
            spt_4: spt[3],
            spt_5: spt[4],
            spt_6: spt[5],
            spt_7: spt[6],
            spt_8: spt[7],
            spt_9: spt[8],
            spt_10: spt[9],
            soil_1: soil[0],
            soil_2: soil[1],
            soil_3: soil[2],
            soil_4: soil[3],
            soil_5: soil[4],
            soil_6: soil[5],
            soil_7: soil[6],
            soil_8: soil[7],
            soil_9: soil[8],
            soil_10: soil[9],
            vs30: num(22)?,
            dist_epi: num(23)?,
            wt_depth: num(24)?,
            dist_water: num(25)?,
            motion_id: rec[26].to_string(),
        };
        if site.site_id.is_empty() {
            return Err(Error::Row { row, message: "site_id is empty".into() });
        }
        if site.motion_id.is_empty() {
            return Err(Error::Row { row, message: "motion_id is empty".into() });
        }
        let record = site.to_record().map_err(|e| Error::Row { row, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

pub fn sites_to_csv(sites: &[SiteRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in sites {
        w.serialize(SiteRow::from_record(s))?;
    }
    if sites.is_empty() {
        w.write_record(SITE_COLUMNS)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(e.to_string()))
}
