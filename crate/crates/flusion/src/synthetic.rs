//! Seeded synthetic surveillance fixtures: a small multi-season,
//! multi-location, three-signal dataset with a burden table and location
//! registry, used by the end-to-end backtest tests and available through
//! the CLI for demos. Seasonal curves peak near Christmas with a holiday
//! reporting spike, autocorrelated noise, and a handful of large NHSN
//! revisions so the revision filter has something to drop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::arx::spike_covariate;
use crate::core::{
    christmas_offset, season_label, Epiweek, LocationInfo, SeriesKey, SignalKind, SpatialScale,
};
use crate::error::Result;
use crate::ingest::{BurdenRecord, Dataset};
use crate::stats;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// First season starts in this calendar year (epiweek 31).
    pub start_year: i32,
    pub num_seasons: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            start_year: 2014,
            num_seasons: 5,
        }
    }
}

#[derive(Debug)]
pub struct SyntheticFixture {
    pub locations: Vec<LocationInfo>,
    pub nhsn: Dataset,
    pub flusurv: Dataset,
    pub iliplus: Dataset,
    pub burden: Vec<BurdenRecord>,
}

const STATES: [(&str, f64); 5] = [
    ("CA", 39_500_000.0),
    ("TX", 29_100_000.0),
    ("FL", 21_500_000.0),
    ("NY", 20_200_000.0),
    ("PA", 13_000_000.0),
];
const US_POPULATION: f64 = 123_300_000.0; // sum of the five states

/// All epiweeks of one surveillance season: week 31 through week 30 of the
/// following year.
fn season_weeks(start_year: i32) -> Vec<Epiweek> {
    let mut out = Vec::new();
    let mut ew = Epiweek::new(start_year, 31).expect("week 31 valid");
    let end = Epiweek::new(start_year + 1, 31).expect("week 31 valid");
    while ew < end {
        out.push(ew);
        ew = ew.succ();
    }
    out
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticFixture {
    let mut locations: Vec<LocationInfo> = STATES
        .iter()
        .map(|(code, pop)| LocationInfo {
            code: code.to_string(),
            scale: SpatialScale::State,
            population: *pop,
        })
        .collect();
    locations.push(LocationInfo {
        code: "US".to_string(),
        scale: SpatialScale::National,
        population: US_POPULATION,
    });

    // per-season burden scale-up factors and table rows
    let mut burden = Vec::new();
    let alphas: Vec<f64> = (0..spec.num_seasons)
        .map(|s| 1.8 + 0.5 * (s % 5) as f64)
        .collect();
    for (s, &alpha) in alphas.iter().enumerate() {
        let year = spec.start_year + s as i32;
        let cum_rate = 30.0 + 7.0 * s as f64;
        let us_population = 320_000_000.0;
        burden.push(BurdenRecord {
            season: season_label(year),
            cum_rate,
            us_population,
            burden_count: alpha * cum_rate * (us_population / 100_000.0),
        });
    }

    let mut nhsn = Dataset::new();
    let mut flusurv = Dataset::new();
    let mut iliplus = Dataset::new();

    // per-location weekly hospitalization rates per 100k population
    let mut state_counts: BTreeMap<Epiweek, f64> = BTreeMap::new();
    for (li, (code, pop)) in STATES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stats::derive_seed(spec.seed, li as u64));
        let pop_100k = pop / 100_000.0;
        for s in 0..spec.num_seasons {
            let year = spec.start_year + s as i32;
            let alpha = alphas[s];
            // season- and location-specific peak height and timing wobble
            let amplitude = 3.0 + 4.0 * rng.gen::<f64>();
            let peak_shift = rng.gen_range(-2.0..2.0);
            let width = 3.5 + rng.gen::<f64>();
            let mut ar_noise = 0.0;
            for ew in season_weeks(year) {
                let delta = christmas_offset(ew) as f64 - peak_shift;
                let bump = amplitude * (-delta * delta / (2.0 * width * width)).exp();
                ar_noise = 0.6 * ar_noise + 0.12 * rng.sample::<f64, _>(StandardNormal);
                let spike = 0.25 * spike_covariate(ew) as f64;
                let rate = (0.4 + bump + spike + ar_noise).max(0.0);

                let count = (rate * pop_100k).round();
                nhsn.insert(SeriesKey::new(SignalKind::Nhsn, *code), ew, count)
                    .expect("unique weeks");
                *state_counts.entry(ew).or_insert(0.0) += count;

                // FluSurv reports an attenuated rate; the burden scale-up
                // recovers the underlying rate scale.
                let fs_noise = 0.05 * rng.sample::<f64, _>(StandardNormal);
                flusurv
                    .insert(
                        SeriesKey::new(SignalKind::Flusurv, *code),
                        ew,
                        ((rate + fs_noise) / alpha).max(0.0),
                    )
                    .expect("unique weeks");

                // ILI+ is on a small percentage-type scale, tracking the rate
                let ili_noise = 0.03 * rng.sample::<f64, _>(StandardNormal);
                iliplus
                    .insert(
                        SeriesKey::new(SignalKind::IliPlus, *code),
                        ew,
                        (0.3 * rate + ili_noise).max(0.0),
                    )
                    .expect("unique weeks");
            }
        }
    }

    // national series: exact aggregates of the states
    let mut us_rng = ChaCha8Rng::seed_from_u64(stats::derive_seed(spec.seed, 99));
    for (&ew, &count) in &state_counts {
        nhsn.insert(SeriesKey::new(SignalKind::Nhsn, "US"), ew, count)
            .expect("unique weeks");
        let us_rate = count / (US_POPULATION / 100_000.0);
        let season_idx =
            (ew.season_start_year() - spec.start_year).clamp(0, spec.num_seasons as i32 - 1);
        let alpha = alphas[season_idx as usize];
        let fs_noise: f64 = 0.02 * us_rng.sample::<f64, _>(StandardNormal);
        flusurv
            .insert(
                SeriesKey::new(SignalKind::Flusurv, "US"),
                ew,
                ((us_rate + fs_noise) / alpha).max(0.0),
            )
            .expect("unique weeks");
        iliplus
            .insert(
                SeriesKey::new(SignalKind::IliPlus, "US"),
                ew,
                (0.3 * us_rate).max(0.0),
            )
            .expect("unique weeks");
    }

    // revision log: most weeks unrevised; a few large TX revisions per
    // season (initial inflated by 15 admissions) exercise the filter
    let mut rev_rng = ChaCha8Rng::seed_from_u64(stats::derive_seed(spec.seed, 1234));
    let nhsn_keys: Vec<(String, Epiweek, f64)> = nhsn
        .series()
        .flat_map(|(k, s)| {
            s.iter()
                .map(|(ew, v)| (k.location.clone(), *ew, *v))
                .collect::<Vec<_>>()
        })
        .collect();
    for (loc, ew, value) in nhsn_keys {
        let initial = if loc == "TX" && ew.week % 20 == 5 {
            value + 15.0
        } else {
            (value + rev_rng.gen_range(-2.0..2.0)).max(0.0).round()
        };
        nhsn.revision_log.insert((loc, ew), (initial, value));
    }

    SyntheticFixture {
        locations,
        nhsn,
        flusurv,
        iliplus,
        burden,
    }
}

/// Write one dataset as a surveillance CSV. NHSN datasets with a revision
/// log also get the `initial_value` column.
pub fn write_surveillance_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let with_initial = !ds.revision_log.is_empty();
    if with_initial {
        writeln!(out, "source,location,epiweek,value,initial_value")?;
    } else {
        writeln!(out, "source,location,epiweek,value")?;
    }
    for (key, series) in ds.series() {
        for (ew, value) in series {
            if with_initial {
                let initial = ds
                    .revision_log
                    .get(&(key.location.clone(), *ew))
                    .map(|(initial, _)| initial.to_string())
                    .unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    key.source,
                    key.location,
                    ew.to_yyyyww(),
                    value,
                    initial
                )?;
            } else {
                writeln!(
                    out,
                    "{},{},{},{}",
                    key.source,
                    key.location,
                    ew.to_yyyyww(),
                    value
                )?;
            }
        }
    }
    Ok(())
}

pub fn write_registry_csv(locations: &[LocationInfo], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "location_code,scale,population")?;
    for l in locations {
        let scale = match l.scale {
            SpatialScale::State => "state",
            SpatialScale::Region => "region",
            SpatialScale::National => "national",
        };
        writeln!(out, "{},{},{}", l.code, scale, l.population)?;
    }
    Ok(())
}

pub fn write_burden_csv(records: &[BurdenRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "season,cum_rate,us_population,burden_count")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{}",
            r.season, r.cum_rate, r.us_population, r.burden_count
        )?;
    }
    Ok(())
}

/// Write the whole fixture into `dir` as locations.csv, burden.csv,
/// nhsn.csv, flusurv.csv, and iliplus.csv.
pub fn write_fixture(fixture: &SyntheticFixture, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_registry_csv(&fixture.locations, &dir.join("locations.csv"))?;
    write_burden_csv(&fixture.burden, &dir.join("burden.csv"))?;
    write_surveillance_csv(&fixture.nhsn, &dir.join("nhsn.csv"))?;
    write_surveillance_csv(&fixture.flusurv, &dir.join("flusurv.csv"))?;
    write_surveillance_csv(&fixture.iliplus, &dir.join("iliplus.csv"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{burden_scale_factor, load_surveillance};

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.nhsn.len(), b.nhsn.len());
        for ((ka, sa), (kb, sb)) in a.nhsn.series().zip(b.nhsn.series()) {
            assert_eq!(ka, kb);
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn covers_all_locations_seasons_signals() {
        let fx = generate(&SyntheticSpec::default());
        assert_eq!(fx.locations.len(), 6);
        assert_eq!(fx.nhsn.seasons().len(), 5);
        for ds in [&fx.nhsn, &fx.flusurv, &fx.iliplus] {
            assert_eq!(ds.keys().count(), 6);
        }
        assert_eq!(fx.burden.len(), 5);
    }

    #[test]
    fn values_nonnegative_and_us_is_state_sum() {
        let fx = generate(&SyntheticSpec::default());
        for (_, series) in fx.nhsn.series() {
            assert!(series.values().all(|v| *v >= 0.0));
        }
        let us = fx
            .nhsn
            .get_series(&SeriesKey::new(SignalKind::Nhsn, "US"))
            .unwrap();
        for (&ew, &total) in us {
            let sum: f64 = STATES
                .iter()
                .map(|(code, _)| {
                    fx.nhsn
                        .value(&SeriesKey::new(SignalKind::Nhsn, *code), ew)
                        .unwrap()
                })
                .sum();
            assert_eq!(total, sum);
        }
    }

    #[test]
    fn seasonal_peak_lands_near_christmas() {
        let fx = generate(&SyntheticSpec::default());
        let ca = fx
            .nhsn
            .get_series(&SeriesKey::new(SignalKind::Nhsn, "CA"))
            .unwrap();
        // per season, argmax week within 6 weeks of Christmas
        for s in 0..5 {
            let year = 2014 + s;
            let weeks = season_weeks(year);
            let peak = weeks
                .iter()
                .max_by(|a, b| ca[a].total_cmp(&ca[b]))
                .unwrap();
            assert!(
                christmas_offset(*peak).abs() <= 6,
                "season {year} peak at {peak}"
            );
        }
    }

    #[test]
    fn large_revisions_present_but_sparse() {
        let fx = generate(&SyntheticSpec::default());
        let big = fx
            .nhsn
            .revision_log
            .iter()
            .filter(|(_, (i, f))| (f - i).abs() >= 10.0)
            .count();
        assert!(big > 0, "no large revisions");
        assert!(
            (big as f64) < 0.1 * fx.nhsn.revision_log.len() as f64,
            "too many large revisions: {big}"
        );
    }

    #[test]
    fn csv_round_trip_preserves_values_and_revisions() {
        let fx = generate(&SyntheticSpec::default());
        let dir = tempfile::tempdir().unwrap();
        write_fixture(&fx, dir.path()).unwrap();
        let loaded = load_surveillance(&dir.path().join("nhsn.csv"), SignalKind::Nhsn).unwrap();
        assert_eq!(loaded.len(), fx.nhsn.len());
        assert_eq!(loaded.revision_log.len(), fx.nhsn.revision_log.len());
        let key = SeriesKey::new(SignalKind::Nhsn, "TX");
        assert_eq!(loaded.get_series(&key), fx.nhsn.get_series(&key));
    }

    #[test]
    fn burden_rows_invert_to_chosen_alphas() {
        let fx = generate(&SyntheticSpec::default());
        for (s, rec) in fx.burden.iter().enumerate() {
            let expected = 1.8 + 0.5 * (s % 5) as f64;
            let alpha = burden_scale_factor(rec).unwrap();
            assert!((alpha - expected).abs() < 1e-9, "{alpha} vs {expected}");
        }
    }
}
