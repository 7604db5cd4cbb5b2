use std::collections::BTreeMap;

use crate::data::SampleRecord;
use crate::error::Result;
use crate::model::{BankKind, Network, RouteRecord};

/// Top-1 expert counts keyed by `(layer, bank, center)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingHistogram {
    pub experts: usize,
    pub counts: BTreeMap<(usize, BankKind, u32), Vec<u64>>,
}

impl RoutingHistogram {
    pub fn new(experts: usize) -> Self {
        Self {
            experts,
            counts: BTreeMap::new(),
        }
    }

    /// Adds one sample's route logs.
    pub fn record(&mut self, center: u32, routes: &[RouteRecord]) {
        for r in routes {
            let row = self
                .counts
                .entry((r.block, r.bank, center))
                .or_insert_with(|| vec![0; self.experts]);
            row[r.top1()] += 1;
        }
    }

    /// Distinct experts that are top-1 anywhere.
    pub fn distinct_top1(&self) -> usize {
        (0..self.experts)
            .filter(|&e| self.counts.values().any(|c| c[e] > 0))
            .count()
    }

    /// Rows `(layer, bank, center, expert, count)`.
    pub fn rows(&self) -> Vec<(usize, BankKind, u32, usize, u64)> {
        self.counts
            .iter()
            .flat_map(|(&(l, b, c), v)| v.iter().enumerate().map(move |(e, &n)| (l, b, c, e, n)))
            .collect()
    }
}

/// One whole-volume forward per record.
pub fn routing_histogram(net: &Network, records: &[SampleRecord]) -> Result<RoutingHistogram> {
    let mut h = RoutingHistogram::new(net.config().experts);
    for r in records {
        let (_, routes) = net.infer(&r.low)?;
        h.record(r.center_id, &routes);
    }
    Ok(h)
}
