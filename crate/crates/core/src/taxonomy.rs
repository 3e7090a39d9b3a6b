//! The six-way challenge taxonomy and its stable integer codec.
//!
//! The codec is part of the on-disk contract (gold datasets, model heads,
//! confusion matrices) and must never be reordered:
//!
//! | index | category    |
//! |-------|-------------|
//! | 0     | Tooling     |
//! | 1     | Conceptual  |
//! | 2     | Errors      |
//! | 3     | Theoretical |
//! | 4     | API Usage   |
//! | 5     | Learning    |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Raw `taxonomy.json` shipped with the crate.
pub const TAXONOMY_JSON: &str = include_str!("../assets/taxonomy.json");

pub const NUM_CATEGORIES: usize = 6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("category index {0} out of range 0..{NUM_CATEGORIES}")]
    IndexOutOfRange(usize),
    #[error("unknown category name {0:?}")]
    UnknownName(String),
    #[error("frequency report over an empty label set")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChallengeCategory {
    Tooling,
    Conceptual,
    Errors,
    Theoretical,
    ApiUsage,
    Learning,
}

impl ChallengeCategory {
    /// All categories in codec order.
    pub const ALL: [ChallengeCategory; NUM_CATEGORIES] = [
        ChallengeCategory::Tooling,
        ChallengeCategory::Conceptual,
        ChallengeCategory::Errors,
        ChallengeCategory::Theoretical,
        ChallengeCategory::ApiUsage,
        ChallengeCategory::Learning,
    ];

    pub fn index(self) -> usize {
        match self {
            ChallengeCategory::Tooling => 0,
            ChallengeCategory::Conceptual => 1,
            ChallengeCategory::Errors => 2,
            ChallengeCategory::Theoretical => 3,
            ChallengeCategory::ApiUsage => 4,
            ChallengeCategory::Learning => 5,
        }
    }

    pub fn from_index(index: usize) -> Result<Self, TaxonomyError> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or(TaxonomyError::IndexOutOfRange(index))
    }

    /// Human-readable name, as used in prompts and reports.
    pub fn name(self) -> &'static str {
        match self {
            ChallengeCategory::Tooling => "Tooling",
            ChallengeCategory::Conceptual => "Conceptual",
            ChallengeCategory::Errors => "Errors",
            ChallengeCategory::Theoretical => "Theoretical",
            ChallengeCategory::ApiUsage => "API Usage",
            ChallengeCategory::Learning => "Learning",
        }
    }

    /// Lowercase, hyphenated form used for tags and file names (`api-usage`).
    pub fn slug(self) -> String {
        self.name().to_lowercase().replace(' ', "-")
    }

    pub fn info(self) -> &'static CategoryInfo {
        &taxonomy()[self.index()]
    }

    pub fn definition(self) -> &'static str {
        &self.info().definition
    }

    pub fn indicator_cues(self) -> &'static [String] {
        &self.info().cues
    }
}

impl fmt::Display for ChallengeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChallengeCategory {
    type Err = TaxonomyError;

    /// Accepts the display name, the slug, or the name without spaces, in any case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '-' && *c != '_')
            .flat_map(char::to_lowercase)
            .collect();
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().replace(' ', "").to_lowercase() == key)
            .ok_or_else(|| TaxonomyError::UnknownName(s.to_string()))
    }
}

impl Serialize for ChallengeCategory {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ChallengeCategory {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn encode(category: ChallengeCategory) -> usize {
    category.index()
}

pub fn decode(index: usize) -> Result<ChallengeCategory, TaxonomyError> {
    ChallengeCategory::from_index(index)
}

/// One entry of `taxonomy.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryInfo {
    pub name: String,
    pub index: usize,
    pub definition: String,
    pub cues: Vec<String>,
}

/// The parsed, validated taxonomy in codec order.
pub fn taxonomy() -> &'static [CategoryInfo] {
    static PARSED: OnceLock<Vec<CategoryInfo>> = OnceLock::new();
    PARSED.get_or_init(|| {
        let mut infos: Vec<CategoryInfo> =
            serde_json::from_str(TAXONOMY_JSON).expect("bundled taxonomy.json is valid");
        infos.sort_by_key(|i| i.index);
        assert_eq!(infos.len(), NUM_CATEGORIES);
        for (i, info) in infos.iter().enumerate() {
            let cat: ChallengeCategory = info.name.parse().expect("bundled taxonomy name");
            assert_eq!(cat.index(), i, "taxonomy.json disagrees with the codec");
        }
        infos
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryHistogram {
    pub counts: BTreeMap<ChallengeCategory, usize>,
    pub total: usize,
}

impl CategoryHistogram {
    pub fn from_labels<I>(labels: I) -> Self
    where
        I: IntoIterator<Item = ChallengeCategory>,
    {
        let mut counts: BTreeMap<ChallengeCategory, usize> =
            ChallengeCategory::ALL.iter().map(|c| (*c, 0)).collect();
        let mut total = 0;
        for label in labels {
            *counts.entry(label).or_default() += 1;
            total += 1;
        }
        CategoryHistogram { counts, total }
    }

    pub fn count(&self, category: ChallengeCategory) -> usize {
        self.counts.get(&category).copied().unwrap_or(0)
    }

    pub fn max_count(&self) -> usize {
        self.counts.values().copied().max().unwrap_or(0)
    }
}

/// How a share is rounded to two decimals of a percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    HalfUp,
    /// Drop everything past the second decimal.
    Truncate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub category: ChallengeCategory,
    pub count: usize,
    /// Share in hundredths of a percent (2880 = 28.80%).
    pub basis_points: u64,
}

impl FrequencyRow {
    pub fn percent(&self) -> f64 {
        self.basis_points as f64 / 100.0
    }

    pub fn percent_string(&self) -> String {
        format!("{}.{:02}", self.basis_points / 100, self.basis_points % 100)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub histogram: CategoryHistogram,
    pub rounding: Rounding,
    pub rows: Vec<FrequencyRow>,
}

impl FrequencyReport {
    pub fn row(&self, category: ChallengeCategory) -> &FrequencyRow {
        &self.rows[category.index()]
    }

    pub fn percent_sum(&self) -> f64 {
        self.rows.iter().map(|r| r.basis_points).sum::<u64>() as f64 / 100.0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,index,count,percent\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.category,
                row.category.index(),
                row.count,
                row.percent_string()
            ));
        }
        out.push_str(&format!("Total,,{},\n", self.histogram.total));
        out
    }
}

pub fn frequency_report(labels: &[ChallengeCategory]) -> Result<FrequencyReport, TaxonomyError> {
    frequency_report_with(labels, Rounding::HalfUp)
}

pub fn frequency_report_with(
    labels: &[ChallengeCategory],
    rounding: Rounding,
) -> Result<FrequencyReport, TaxonomyError> {
    if labels.is_empty() {
        return Err(TaxonomyError::EmptyInput);
    }
    Ok(report_from_histogram(
        CategoryHistogram::from_labels(labels.iter().copied()),
        rounding,
    ))
}

pub fn report_from_histogram(histogram: CategoryHistogram, rounding: Rounding) -> FrequencyReport {
    let total = histogram.total.max(1) as u64;
    let rows = ChallengeCategory::ALL
        .iter()
        .map(|&category| {
            let count = histogram.count(category);
            let scaled = count as u64 * 10_000;
            let basis_points = match rounding {
                Rounding::HalfUp => (2 * scaled + total) / (2 * total),
                Rounding::Truncate => scaled / total,
            };
            FrequencyRow {
                category,
                count,
                basis_points,
            }
        })
        .collect();
    FrequencyReport {
        histogram,
        rounding,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ChallengeCategory::*;

    fn study_labels() -> Vec<ChallengeCategory> {
        [
            (Tooling, 596),
            (Theoretical, 415),
            (Learning, 166),
            (Conceptual, 610),
            (Errors, 815),
            (ApiUsage, 227),
        ]
        .iter()
        .flat_map(|&(c, n)| std::iter::repeat_n(c, n))
        .collect()
    }

    #[test]
    fn codec_is_fixed() {
        assert_eq!(encode(Tooling), 0);
        assert_eq!(encode(Conceptual), 1);
        assert_eq!(encode(Errors), 2);
        assert_eq!(encode(Theoretical), 3);
        assert_eq!(encode(ApiUsage), 4);
        assert_eq!(encode(Learning), 5);
        for c in ChallengeCategory::ALL {
            assert_eq!(decode(encode(c)).unwrap(), c);
        }
        assert_eq!(decode(6), Err(TaxonomyError::IndexOutOfRange(6)));
    }

    #[test]
    fn names_parse_leniently() {
        assert_eq!("API Usage".parse::<ChallengeCategory>().unwrap(), ApiUsage);
        assert_eq!("apiusage".parse::<ChallengeCategory>().unwrap(), ApiUsage);
        assert_eq!("api-usage".parse::<ChallengeCategory>().unwrap(), ApiUsage);
        assert_eq!(" errors ".parse::<ChallengeCategory>().unwrap(), Errors);
        assert!("error".parse::<ChallengeCategory>().is_err());
        assert_eq!(ApiUsage.slug(), "api-usage");
    }

    #[test]
    fn bundled_taxonomy_matches_codec() {
        let tax = taxonomy();
        assert_eq!(tax.len(), 6);
        assert_eq!(tax[3].name, "Theoretical");
        assert!(Conceptual.definition().starts_with("Understanding the basic concepts"));
        assert!(Conceptual.indicator_cues().iter().any(|c| c == "why"));
    }

    #[test]
    fn study_frequencies_truncated() {
        let report = frequency_report_with(&study_labels(), Rounding::Truncate).unwrap();
        assert_eq!(report.histogram.total, 2829);
        assert_eq!(report.row(Errors).count, 815);
        assert_eq!(report.row(Errors).percent_string(), "28.80");
        assert_eq!(report.row(Learning).count, 166);
        assert_eq!(report.row(Learning).percent_string(), "5.86");
        assert_eq!(report.row(Conceptual).percent_string(), "21.56");
        assert_eq!(report.row(Tooling).percent_string(), "21.06");
        assert_eq!(report.row(Theoretical).percent_string(), "14.66");
        assert_eq!(report.row(ApiUsage).percent_string(), "8.02");
    }

    #[test]
    fn study_frequencies_half_up() {
        let report = frequency_report(&study_labels()).unwrap();
        // 815 / 2829 = 0.288087...
        assert_eq!(report.row(Errors).percent_string(), "28.81");
        assert_eq!(report.row(Learning).percent_string(), "5.87");
        assert!((report.percent_sum() - 100.0).abs() <= 0.02 + 1e-9);
    }

    #[test]
    fn single_label_is_full_share() {
        let report = frequency_report(&[Errors]).unwrap();
        assert_eq!(report.row(Errors).percent_string(), "100.00");
        assert_eq!(report.row(Tooling).percent_string(), "0.00");
    }

    #[test]
    fn empty_input_rejected() {
        assert_eq!(frequency_report(&[]), Err(TaxonomyError::EmptyInput));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn labels() -> impl Strategy<Value = Vec<ChallengeCategory>> {
            prop::collection::vec((0usize..6).prop_map(|i| decode(i).unwrap()), 1..400)
        }

        proptest! {
            #[test]
            fn half_up_percentages_sum_to_hundred(labels in labels()) {
                let report = frequency_report(&labels).unwrap();
                prop_assert!((report.percent_sum() - 100.0).abs() <= 0.03 + 1e-9);
                prop_assert_eq!(report.histogram.total, labels.len());
                let sum: usize = report.histogram.counts.values().sum();
                prop_assert_eq!(sum, labels.len());
            }

            #[test]
            fn permutation_invariant(mut labels in labels(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let before = frequency_report(&labels).unwrap();
                labels.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                prop_assert_eq!(before, frequency_report(&labels).unwrap());
            }
        }
    }
}
