use std::path::Path;

use tvseg::experiment::TrendConfig;
use tvseg::storage::parse_config;

#[test]
fn desk_trend_file_matches_desk_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_trend.toml");
    let parsed = parse_config(&path).unwrap();
    assert_eq!(parsed, TrendConfig::desk().run);
}
