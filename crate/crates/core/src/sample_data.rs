//! Deterministic sports revenue/viewership database used by examples and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::db::{Database, DbError};

pub const COUNTRIES: [&str; 4] = ["CANADA", "MEXICO", "UNITED KINGDOM", "UNITED STATES"];

pub const SPORTS: [&str; 10] = [
    "Baseball",
    "Basketball",
    "Cricket",
    "Football",
    "Golf",
    "Hockey",
    "Motorsport",
    "Rugby",
    "Soccer",
    "Tennis",
];

pub const DEFAULT_SEED: u64 = 20_230_401;

const DDL: &str = "
CREATE TABLE SPORTS_VIEWERSHIP (
    COUNTRY TEXT NOT NULL,
    SPORT_CATEGORY TEXT NOT NULL,
    VIEW_MONTH DATE NOT NULL,
    VIEWER_HOURS INTEGER NOT NULL
);
CREATE TABLE SPORTS_FINANCIALS (
    COUNTRY TEXT NOT NULL,
    SPORT_CATEGORY TEXT NOT NULL,
    FIN_MONTH DATE NOT NULL,
    REVENUE INTEGER NOT NULL,
    COST INTEGER NOT NULL,
    FOREIGN KEY (COUNTRY) REFERENCES SPORTS_VIEWERSHIP (COUNTRY)
);
";

/// Months covered: January 2021 through June 2023.
pub fn months() -> Vec<String> {
    (2021..=2023)
        .flat_map(|y| (1..=12).map(move |m| (y, m)))
        .filter(|&(y, m)| y < 2023 || m <= 6)
        .map(|(y, m)| format!("{y:04}-{m:02}-01"))
        .collect()
}

/// Create and fill both tables. Same seed, same bytes.
pub fn seed(db: &Database, seed: u64) -> Result<(), DbError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // The country link is informational; COUNTRY is not unique on either side.
    let mut sql = String::from("PRAGMA foreign_keys = OFF;\nBEGIN;\n");
    sql.push_str(DDL);
    let months = months();
    for country in COUNTRIES {
        for (si, sport) in SPORTS.iter().enumerate() {
            // per-sport scale keeps rankings stable but non-trivial
            let base = 40_000 + 9_000 * si as i64 + rng.gen_range(0..20_000);
            let growth: f64 = rng.gen_range(-0.02..0.04);
            for (mi, month) in months.iter().enumerate() {
                let trend = 1.0 + growth * mi as f64;
                let revenue = (base as f64 * trend) as i64 + rng.gen_range(0..5_000);
                let cost = (revenue as f64 * rng.gen_range(0.55..0.9)) as i64;
                let hours = (revenue as f64 / rng.gen_range(2.0..6.0)) as i64;
                sql.push_str(&format!(
                    "INSERT INTO SPORTS_FINANCIALS VALUES ('{country}', '{sport}', '{month}', {revenue}, {cost});\n"
                ));
                sql.push_str(&format!(
                    "INSERT INTO SPORTS_VIEWERSHIP VALUES ('{country}', '{sport}', '{month}', {hours});\n"
                ));
            }
        }
    }
    sql.push_str("COMMIT;\n");
    db.execute_batch(&sql)
}

/// An in-memory database seeded with [`DEFAULT_SEED`].
pub fn sports_database() -> Result<Database, DbError> {
    let db = Database::in_memory()?;
    seed(&db, DEFAULT_SEED)?;
    Ok(db)
}
