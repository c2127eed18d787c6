use serde::{Deserialize, Serialize};

use crate::stochastic::Party;

/// Spreads, loss rates and the collateral rule of the netting set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentRates {
    pub risk_free: f64,
    pub collateral_borrow: f64,
    pub collateral_lend: f64,
    pub im_lend: f64,
    pub im_borrow: f64,
    pub funding_borrow: f64,
    pub funding_lend: f64,
    pub lgd_bank: f64,
    pub lgd_cpty: f64,
    /// Variation margin as a fraction of the clean value.
    pub collateral_fraction: f64,
}

pub fn collateral(clean_value: f64, fraction: f64) -> f64 {
    fraction * clean_value
}

fn pos(x: f64) -> f64 {
    x.max(0.0)
}

fn neg(x: f64) -> f64 {
    (-x).max(0.0)
}

impl AdjustmentRates {
    pub fn collateral_rate(&self, c: f64) -> f64 {
        if c >= 0.0 {
            self.collateral_borrow
        } else {
            self.collateral_lend
        }
    }

    pub fn colva_driver(&self, c: f64) -> f64 {
        (self.risk_free - self.collateral_rate(c)) * c
    }

    /// `im_tc` is the margin posted by the bank (non-positive), `im_fc` the
    /// margin received (non-negative).
    pub fn mva_driver(&self, im_tc: f64, im_fc: f64) -> f64 {
        (self.risk_free - self.im_lend) * im_tc - self.im_borrow * im_fc
    }

    pub fn fva_driver(&self, clean: f64, tva: f64, c: f64, im_tc: f64) -> f64 {
        let x = clean - tva - c - im_tc;
        (self.risk_free - self.funding_borrow) * pos(x) - (self.risk_free - self.funding_lend) * neg(x)
    }

    /// Driver of the full adjusted value.
    pub fn value_driver(&self, v: f64, c: f64, im_tc: f64, im_fc: f64) -> f64 {
        let r = self.risk_free;
        let x = v - c - im_tc;
        (r - self.collateral_rate(c)) * c + (self.im_lend - r) * im_tc - self.im_borrow * im_fc
            + (r - self.funding_borrow) * pos(x)
            - (r - self.funding_lend) * neg(x)
    }

    /// Settlement at the first default: clean value less the loss on the
    /// uncollateralized exposure (counterparty default) plus the gain on the
    /// bank's own default.
    pub fn close_out(&self, q: f64, c: f64, im_fc: f64, im_tc: f64, defaulter: Option<Party>) -> f64 {
        match defaulter {
            Some(Party::Counterparty) => q - self.lgd_cpty * pos(q - c - im_fc),
            Some(Party::Bank) => q + self.lgd_bank * neg(q - c - im_tc),
            None => q,
        }
    }

    pub fn cva_target(&self, q: f64, c: f64, im_fc: f64, defaulter: Option<Party>) -> f64 {
        match defaulter {
            Some(Party::Counterparty) => self.lgd_cpty * pos(q - c - im_fc),
            _ => 0.0,
        }
    }

    pub fn dva_target(&self, q: f64, c: f64, im_tc: f64, defaulter: Option<Party>) -> f64 {
        match defaulter {
            Some(Party::Bank) => self.lgd_bank * neg(q - c - im_tc),
            _ => 0.0,
        }
    }
}

/// Total adjustment from its components.
pub fn total_adjustment(cva: f64, dva: f64, fva: f64, colva: f64, mva: f64) -> f64 {
    cva - dva + fva + colva + mva
}
