use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;

use chrono::{Duration, NaiveDate};
use ghicast_core::dataset::{self, ColumnMap, Covariate, DateWindow, GapPolicy, TimeSeriesFrame};
use ghicast_core::Error;
use proptest::prelude::*;

/// Serves `body` with `status` to a single request, returning the request line.
fn serve_once(status: u16, body: String) -> (String, thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut request_line = String::new();
        reader.read_line(&mut request_line).unwrap();
        loop {
            let mut l = String::new();
            reader.read_line(&mut l).unwrap();
            if l == "\r\n" || l.is_empty() {
                break;
            }
        }
        let reason = if status == 200 { "OK" } else { "Not Found" };
        let resp = format!(
            "HTTP/1.1 {status} {reason}\r\nContent-Type: text/csv\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream.write_all(resp.as_bytes()).unwrap();
        stream.flush().unwrap();
        let _ = stream.read(&mut [0u8; 1]);
        request_line
    });
    (format!("http://{addr}/export"), handle)
}

fn window() -> DateWindow {
    DateWindow { start: NaiveDate::from_ymd_opt(2020, 7, 1).unwrap(), end: NaiveDate::from_ymd_opt(2020, 7, 2).unwrap() }
}

#[test]
fn fetch_serves_48_rows_and_matches_load_csv() {
    let frame = dataset::synthetic(2, 1);
    let body = frame.to_csv_string();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two_days.csv");
    std::fs::write(&path, &body).unwrap();

    let (url, h) = serve_once(200, body);
    let fetched = dataset::fetch_remote(&url, window(), &ColumnMap::default()).unwrap();
    let request = h.join().unwrap();
    assert!(request.contains("start=2020-07-01") && request.contains("end=2020-07-02"), "{request}");
    assert_eq!(fetched.len(), 48);

    let local = dataset::load_csv(&path, &ColumnMap::default()).unwrap();
    assert_eq!(fetched.timestamps, local.timestamps);
    assert_eq!(fetched.ghi, local.ghi);
    assert_eq!(fetched.covariates, local.covariates);
}

#[test]
fn fetch_404_is_terminal_with_status() {
    let (url, h) = serve_once(404, "missing".into());
    let err = dataset::fetch_remote(&url, window(), &ColumnMap::default()).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, Error::HttpStatus { status: 404 }), "{err:?}");
}

#[test]
fn fetch_connection_refused_is_transport() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = dataset::fetch_remote(&format!("http://{addr}/x"), window(), &ColumnMap::default()).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err:?}");
}

#[test]
fn all_covariates_give_n_by_8() {
    let f = dataset::synthetic(3, 2);
    let d = dataset::design_matrix(&f, &Covariate::ALL, false).unwrap();
    assert_eq!(d.x.shape(), (72, 8));
    assert!(dataset::design_matrix_by_name(&f, &["Temp", "Cloud"], false).is_err());
}

#[test]
fn split_of_8522_rows() {
    let f = dataset::synthetic(356, 3).slice(0..8522);
    let s = dataset::split(&f, 0.8).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (6818, 1704));
    assert!(dataset::split(&f, 1.0).is_err());
}

#[test]
fn five_hour_gap_rows_dropped_and_spacing_revalidated() {
    let mut f = dataset::synthetic(3, 4);
    for i in 30..35 {
        f.covariates[Covariate::Temp.index()][i] = f64::NAN;
    }
    let (c, report) = dataset::clean(&f, &GapPolicy::default()).unwrap();
    assert_eq!(report.rows_dropped, 5);
    assert_eq!(c.len(), 67);
    // Independent pass: every step is one hour except the single jump over the gap.
    let steps: Vec<i64> = c.timestamps.windows(2).map(|w| (w[1] - w[0]).num_hours()).collect();
    assert_eq!(steps.iter().filter(|&&s| s != 1).count(), 1);
    assert!(steps.contains(&6));
    assert!(c.timestamps.windows(2).all(|w| w[1] - w[0] >= Duration::hours(1)));
}

fn frame_strategy() -> impl Strategy<Value = TimeSeriesFrame> {
    (1usize..5, 0u64..1000, proptest::collection::vec((0usize..96, 0usize..9), 0..12)).prop_map(|(days, seed, holes)| {
        let mut f = dataset::synthetic(days, seed);
        let n = f.len();
        for (i, c) in holes {
            let i = i % n;
            if c == 8 {
                f.ghi[i] = f64::NAN;
            } else {
                f.covariates[c][i] = f64::NAN;
            }
        }
        f
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn csv_round_trip_is_exact(days in 1usize..4, seed in 0u64..1000) {
        let f = dataset::synthetic(days, seed);
        let back = dataset::load_reader(f.to_csv_string().as_bytes(), &ColumnMap::default(), "mem").unwrap();
        prop_assert_eq!(&back.timestamps, &f.timestamps);
        prop_assert_eq!(&back.ghi, &f.ghi);
        prop_assert_eq!(&back.covariates, &f.covariates);
    }

    #[test]
    fn clean_is_idempotent_and_valid(f in frame_strategy()) {
        let Ok((once, _)) = dataset::clean(&f, &GapPolicy::default()) else { return Ok(()); };
        let (twice, _) = dataset::clean(&once, &GapPolicy::default()).unwrap();
        prop_assert_eq!(&once.timestamps, &twice.timestamps);
        prop_assert_eq!(&once.ghi, &twice.ghi);
        prop_assert_eq!(&once.covariates, &twice.covariates);
        prop_assert!(once.ghi.iter().all(|g| *g >= 0.0 && g.is_finite()));
        prop_assert!(once.covariates.iter().flatten().all(|v| v.is_finite()));
        let rh = once.column(Covariate::RH);
        prop_assert!(rh.iter().all(|v| (0.0..=100.0).contains(v)));
        let wd = once.column(Covariate::WD);
        prop_assert!(wd.iter().all(|v| (0.0..360.0).contains(v)));
        prop_assert!(once.timestamps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn split_concatenates_to_frame(days in 1usize..5, seed in 0u64..1000, ratio in 0.05f64..0.95) {
        let f = dataset::synthetic(days, seed);
        let s = dataset::split(&f, ratio).unwrap();
        prop_assert_eq!(s.train.len(), (ratio * f.len() as f64).round() as usize);
        let joined = s.train.concat(&s.test);
        prop_assert_eq!(&joined.timestamps, &f.timestamps);
        prop_assert_eq!(&joined.ghi, &f.ghi);
        if let (Some(a), Some(b)) = (s.train.timestamps.last(), s.test.timestamps.first()) {
            prop_assert!(a < b);
        }
    }

    #[test]
    fn standardized_columns_have_unit_moments(days in 2usize..5, seed in 0u64..1000) {
        let f = dataset::synthetic(days, seed);
        let feats = [Covariate::Temp, Covariate::RH, Covariate::BP, Covariate::WD];
        let d = dataset::design_matrix(&f, &feats, true).unwrap();
        let n = d.x.nrows() as f64;
        for j in 0..feats.len() {
            let c = d.x.column(j);
            let m = c.sum() / n;
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((sd - 1.0).abs() < 1e-10);
        }
    }
}
