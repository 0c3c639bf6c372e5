use poisid::geocode::{decode_cell, encode_plus_code};

#[test]
fn published_vectors_at_every_precision() {
    let text = include_str!("data/olc_encoding.csv");
    let mut checked = 0;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let (lat, lon): (f64, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        let precision: usize = f[2].parse().unwrap();
        let code = encode_plus_code(lat, lon, precision).unwrap();
        assert_eq!(code.code, f[3], "{line}");
        let cell = decode_cell(&code.code).unwrap();
        if (-90.0..90.0).contains(&lat) && (-180.0..180.0).contains(&lon) {
            // Reference encoders round to the finest grid first, so points on an
            // edge may land one grid unit over.
            let eps = 1.0 / 8.0e6;
            assert!(lat >= cell.lat_lo - eps && lat < cell.lat_hi + eps, "{line}");
            assert!(lon >= cell.lon_lo - eps && lon < cell.lon_hi + eps, "{line}");
        }
        checked += 1;
    }
    assert!(checked > 500);
}
