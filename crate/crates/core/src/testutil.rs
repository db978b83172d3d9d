//! Helpers shared by unit tests across modules.

use crate::data::LongitudinalRecord;

pub(crate) fn record(
    id: &str,
    cluster: &str,
    w: Vec<f64>,
    c: Vec<u8>,
    l: Vec<u8>,
    a: Vec<u8>,
    y: u32,
) -> LongitudinalRecord {
    LongitudinalRecord {
        subject_id: id.to_string(),
        cluster_id: cluster.to_string(),
        w,
        c: c.into_iter().map(|v| v != 0).collect(),
        l: l.into_iter().map(|v| v != 0).collect(),
        a: a.into_iter().map(|v| v != 0).collect(),
        y,
    }
}
