//! Marketplace data model and line-oriented I/O: user profiles, product
//! records, event logs, and the haversine distance underlying the geo filter.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !self.lat.is_finite() {
            return Err(Error::OutOfRange {
                field: "lat",
                value: self.lat,
                range: "[-90, 90]",
            });
        }
        if !(-180.0..=180.0).contains(&self.lon) || !self.lon.is_finite() {
            return Err(Error::OutOfRange {
                field: "lon",
                value: self.lon,
                range: "[-180, 180]",
            });
        }
        Ok(())
    }
}

/// Great-circle distance in km on a sphere of radius 6371 km.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let (lat1, lon1) = (a.lat.to_radians(), a.lon.to_radians());
    let (lat2, lon2) = (b.lat.to_radians(), b.lon.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u64,
    pub keywords: Vec<String>,
    pub demographics: Vec<f32>,
    pub location: GeoPoint,
    pub radius_km: f64,
}

impl UserProfile {
    pub fn validate(&self) -> Result<()> {
        self.location.validate()?;
        if !(self.radius_km > 0.0) || !self.radius_km.is_finite() {
            return Err(Error::OutOfRange {
                field: "radius_km",
                value: self.radius_km,
                range: "(0, inf)",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub product_id: u64,
    pub title: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features: Option<Vec<f32>>,
    pub location: GeoPoint,
    pub created_at: i64,
}

impl ProductRecord {
    pub fn validate(&self) -> Result<()> {
        self.location.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Impression,
    Message,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    #[serde(rename = "type")]
    pub kind: EventKind,
    pub user_id: u64,
    pub product_id: u64,
    pub timestamp: i64,
}

/// Validated, immutable view over users and products with id lookup.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    users: Vec<UserProfile>,
    products: Vec<ProductRecord>,
    user_idx: HashMap<u64, usize>,
    product_idx: HashMap<u64, usize>,
}

impl Catalog {
    pub fn new(users: Vec<UserProfile>, products: Vec<ProductRecord>) -> Result<Self> {
        let mut user_idx = HashMap::with_capacity(users.len());
        for (i, u) in users.iter().enumerate() {
            u.validate()?;
            if user_idx.insert(u.user_id, i).is_some() {
                return Err(Error::DuplicateId { kind: "user", id: u.user_id });
            }
        }
        let mut product_idx = HashMap::with_capacity(products.len());
        for (i, p) in products.iter().enumerate() {
            p.validate()?;
            if product_idx.insert(p.product_id, i).is_some() {
                return Err(Error::DuplicateId { kind: "product", id: p.product_id });
            }
        }
        Ok(Catalog { users, products, user_idx, product_idx })
    }

    pub fn users(&self) -> &[UserProfile] {
        &self.users
    }

    pub fn products(&self) -> &[ProductRecord] {
        &self.products
    }

    pub fn user(&self, id: u64) -> Option<&UserProfile> {
        self.user_idx.get(&id).map(|&i| &self.users[i])
    }

    pub fn product(&self, id: u64) -> Option<&ProductRecord> {
        self.product_idx.get(&id).map(|&i| &self.products[i])
    }

    pub fn require_user(&self, id: u64) -> Result<&UserProfile> {
        self.user(id).ok_or(Error::UnknownId { kind: "user", id })
    }

    pub fn require_product(&self, id: u64) -> Result<&ProductRecord> {
        self.product(id).ok_or(Error::UnknownId { kind: "product", id })
    }
}

/// One JSON record per line, UTF-8, field names exactly as in the type
/// definitions. `write_jsonl` + `read_jsonl` round-trip byte-exactly.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

pub fn load_catalog(users_path: &Path, products_path: &Path) -> Result<Catalog> {
    let users: Vec<UserProfile> = read_jsonl(users_path)?;
    let products: Vec<ProductRecord> = read_jsonl(products_path)?;
    Catalog::new(users, products)
}

pub fn load_events(path: &Path) -> Result<Vec<EventRecord>> {
    read_jsonl(path)
}

/// Human-readable rendering of a metrics table; the machine-readable form is
/// the line-oriented report next to it.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{:<w$}", cell, w = widths[i]));
        }
        line.trim_end().to_string()
    };
    let header_cells: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
    out.push_str(&fmt_row(&header_cells, &widths));
    out.push('\n');
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    out
}

pub(crate) fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    Ok(crate::text::hex(&Sha256::digest(&bytes)))
}
