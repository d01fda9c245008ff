//! MMWR epidemic week arithmetic and the season-week indexing scheme.
//!
//! MMWR weeks run Sunday through Saturday; week 1 of a year is the week
//! containing January 4. Seasons start on epidemic week 31 (season week 1)
//! and are labeled by their starting year, e.g. "2023/24".

use crate::error::{FlusionError, Result};
use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

/// An MMWR epidemic week.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Epiweek {
    pub year: i32,
    pub week: u8,
}

/// Saturday ending MMWR week 1 of `year`.
fn week1_saturday(year: i32) -> NaiveDate {
    let jan4 = NaiveDate::from_ymd_opt(year, 1, 4).expect("valid date");
    let days_to_sat = 6 - jan4.weekday().num_days_from_sunday() as i64;
    jan4 + Duration::days(days_to_sat)
}

/// Number of MMWR weeks (52 or 53) in `year`.
pub fn weeks_in_year(year: i32) -> u8 {
    ((week1_saturday(year + 1) - week1_saturday(year)).num_days() / 7) as u8
}

impl Epiweek {
    pub fn new(year: i32, week: u8) -> Result<Epiweek> {
        if week < 1 || week > weeks_in_year(year) {
            return Err(FlusionError::Calendar(format!(
                "week {week} out of range for MMWR year {year} ({} weeks)",
                weeks_in_year(year)
            )));
        }
        Ok(Epiweek { year, week })
    }

    /// Parse the compact `YYYYWW` integer form used in data files.
    pub fn from_yyyyww(v: u32) -> Result<Epiweek> {
        Epiweek::new((v / 100) as i32, (v % 100) as u8)
    }

    pub fn to_yyyyww(self) -> u32 {
        self.year as u32 * 100 + self.week as u32
    }

    /// Saturday on which this week ends.
    pub fn end_date(self) -> NaiveDate {
        week1_saturday(self.year) + Duration::days(7 * (self.week as i64 - 1))
    }

    /// The MMWR week containing `date`.
    pub fn from_date(date: NaiveDate) -> Epiweek {
        let mut year = date.year();
        if date >= week1_saturday(year + 1) - Duration::days(6) {
            year += 1;
        } else if date < week1_saturday(year) - Duration::days(6) {
            year -= 1;
        }
        let week = ((date - (week1_saturday(year) - Duration::days(6))).num_days() / 7) as u8 + 1;
        Epiweek { year, week }
    }

    pub fn add_weeks(self, n: i64) -> Epiweek {
        Epiweek::from_date(self.end_date() + Duration::days(7 * n))
    }

    pub fn succ(self) -> Epiweek {
        self.add_weeks(1)
    }

    /// Signed number of weeks from `other` to `self`.
    pub fn weeks_since(self, other: Epiweek) -> i64 {
        (self.end_date() - other.end_date()).num_days() / 7
    }

    /// First calendar year of the enclosing influenza season.
    pub fn season_start_year(self) -> i32 {
        if self.week >= 31 {
            self.year
        } else {
            self.year - 1
        }
    }
}

impl std::fmt::Display for Epiweek {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-W{:02}", self.year, self.week)
    }
}

/// Position of a week within an influenza season.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeasonWeek {
    /// Label of the form "2023/24".
    pub season: String,
    pub week: u32,
}

impl SeasonWeek {
    /// In-season means season weeks 10 through 40 inclusive.
    pub fn in_season(&self) -> bool {
        (10..=40).contains(&self.week)
    }
}

/// Season label for the season starting in `start_year`, e.g. "2023/24".
pub fn season_label(start_year: i32) -> String {
    format!("{}/{:02}", start_year, (start_year + 1) % 100)
}

/// Map an epiweek into its season, counting epidemic week 31 as season week 1.
pub fn season_week(ew: Epiweek) -> SeasonWeek {
    let start_year = ew.season_start_year();
    let anchor = Epiweek {
        year: start_year,
        week: 31,
    };
    SeasonWeek {
        season: season_label(start_year),
        week: (ew.weeks_since(anchor) + 1) as u32,
    }
}

/// The MMWR week containing December 25 of the enclosing season.
pub fn christmas_week(ew: Epiweek) -> Epiweek {
    let dec25 = NaiveDate::from_ymd_opt(ew.season_start_year(), 12, 25).expect("valid date");
    Epiweek::from_date(dec25)
}

/// Signed weeks from the season's Christmas week to `ew`; 0 on Christmas week.
pub fn christmas_offset(ew: Epiweek) -> i64 {
    ew.weeks_since(christmas_week(ew))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn week1_contains_jan4() {
        for year in 2000..2030 {
            let sat = week1_saturday(year);
            let jan4 = NaiveDate::from_ymd_opt(year, 1, 4).unwrap();
            assert!(sat >= jan4 && sat - Duration::days(6) <= jan4);
        }
    }

    #[test]
    fn known_week_counts() {
        // 2014 and 2025 are 53-week MMWR years.
        assert_eq!(weeks_in_year(2014), 53);
        assert_eq!(weeks_in_year(2025), 53);
        assert_eq!(weeks_in_year(2023), 52);
        assert_eq!(weeks_in_year(2024), 52);
    }

    #[test]
    fn rejects_invalid_weeks() {
        assert!(Epiweek::new(2023, 0).is_err());
        assert!(Epiweek::new(2023, 53).is_err());
        assert!(Epiweek::new(2025, 53).is_ok());
    }

    #[test]
    fn from_date_round_trips() {
        let mut d = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
        let end = NaiveDate::from_ymd_opt(2026, 1, 1).unwrap();
        while d < end {
            let ew = Epiweek::from_date(d);
            let sat = ew.end_date();
            assert!(d <= sat && d > sat - Duration::days(7), "{d} -> {ew}");
            d += Duration::days(13);
        }
    }

    #[test]
    fn season_week_anchors_at_week31() {
        let sw = season_week(Epiweek::new(2023, 31).unwrap());
        assert_eq!(sw.season, "2023/24");
        assert_eq!(sw.week, 1);

        let sw = season_week(Epiweek::new(2023, 32).unwrap());
        assert_eq!(sw.season, "2023/24");
        assert_eq!(sw.week, 2);

        // 22 weeks remain in 2023 after W31; W5 of 2024 is season week 27.
        let sw = season_week(Epiweek::new(2024, 5).unwrap());
        assert_eq!(sw.season, "2023/24");
        assert_eq!(sw.week, 27);
    }

    #[test]
    fn season_week_is_consecutive_within_season() {
        let mut ew = Epiweek::new(2014, 31).unwrap();
        let mut prev = season_week(ew).week;
        assert_eq!(prev, 1);
        for _ in 0..50 {
            ew = ew.succ();
            let sw = season_week(ew);
            assert_eq!(sw.season, "2014/15");
            assert_eq!(sw.week, prev + 1);
            prev = sw.week;
        }
    }

    #[test]
    fn in_season_flag_bounds() {
        assert!(!SeasonWeek {
            season: String::new(),
            week: 9
        }
        .in_season());
        assert!(SeasonWeek {
            season: String::new(),
            week: 10
        }
        .in_season());
        assert!(SeasonWeek {
            season: String::new(),
            week: 40
        }
        .in_season());
        assert!(!SeasonWeek {
            season: String::new(),
            week: 41
        }
        .in_season());
    }

    #[test]
    fn christmas_offsets() {
        let xmas = christmas_week(Epiweek::new(2023, 40).unwrap());
        assert_eq!(christmas_offset(xmas), 0);
        assert_eq!(christmas_offset(xmas.succ()), 1);
        assert_eq!(christmas_offset(xmas.add_weeks(3)), 3);
        assert_eq!(christmas_offset(xmas.add_weeks(-2)), -2);
        // January weeks belong to the season that started the prior August,
        // so their offset is measured from the previous December.
        let jan = Epiweek::new(2024, 2).unwrap();
        assert!(christmas_offset(jan) > 0 && christmas_offset(jan) < 6);
    }

    #[test]
    fn yyyyww_round_trip() {
        let ew = Epiweek::from_yyyyww(202335).unwrap();
        assert_eq!(ew, Epiweek::new(2023, 35).unwrap());
        assert_eq!(ew.to_yyyyww(), 202335);
    }
}
