use otdepth_core::audit::{self, Scope};
use otdepth_core::io::{decode_dten, encode_dten, read_dten, write_dten};
use otdepth_core::Tensor;

#[test]
fn full_audit_is_the_union_of_its_suites_and_passes() {
    let all = audit::run(Scope::All, 42).unwrap();
    let mut joined = Vec::new();
    for scope in Scope::SUITES {
        joined.extend(audit::run(scope, 42).unwrap().rows);
    }
    assert_eq!(all.rows, joined);
    assert!(all.passed(), "{:?}", all.failures().first());
}

#[test]
fn audit_csv_has_one_line_per_check() {
    let report = audit::run(Scope::Dgr, 3).unwrap();
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(audit::CSV_HEADER));
    assert_eq!(lines.count(), report.rows.len());
}

#[test]
fn dten_files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::from_fn(&[2, 3, 4], |i| {
        (i[0] * 12 + i[1] * 4 + i[2]) as f64 / 7.0 - 1.0
    });
    let path = dir.path().join("t.dten");
    write_dten(&path, &t).unwrap();
    let back = read_dten(&path).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(back.data(), t.data());
    assert_eq!(decode_dten(&encode_dten(&t)).unwrap(), t);
}

#[test]
fn truncated_dten_is_rejected() {
    let bytes = encode_dten(&Tensor::ones(&[3, 3]));
    for cut in [0, 4, bytes.len() - 1] {
        assert!(decode_dten(&bytes[..cut]).is_err());
    }
}
