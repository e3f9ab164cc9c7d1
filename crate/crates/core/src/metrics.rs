//! Bit error rates and closed-form complexity figures for the recurrent
//! and Volterra equalizers.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rnn::CellKind;

/// Exact bit error ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ber {
    pub errors: u64,
    pub total: u64,
}

impl Ber {
    pub fn new(errors: u64, total: u64) -> Result<Self> {
        if total == 0 || errors > total {
            return Err(Error::Domain(format!("{errors} errors in {total} bits")));
        }
        Ok(Self { errors, total })
    }

    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.errors, self.total)
    }

    pub fn value(&self) -> f64 {
        self.errors as f64 / self.total as f64
    }

    /// Pools counts, e.g. across seeds.
    pub fn merge(&self, other: &Ber) -> Ber {
        Ber {
            errors: self.errors + other.errors,
            total: self.total + other.total,
        }
    }
}

pub fn compute_ber(decided: &[u8], reference: &[u8]) -> Result<Ber> {
    if decided.len() != reference.len() || decided.is_empty() {
        return Err(Error::Dimension(format!(
            "{} decided bits against {} reference bits",
            decided.len(),
            reference.len()
        )));
    }
    let errors = decided.iter().zip(reference).filter(|(a, b)| a != b).count() as u64;
    Ber::new(errors, decided.len() as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ManyToOne,
    ManyToMany,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accounting {
    /// The multiplication formula exactly as printed.
    AsPrinted,
    /// As printed plus `6·H·L`, which reproduces every published table entry.
    TableReconciled,
}

fn check_positive(values: &[(&str, u64)]) -> Result<()> {
    match values.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(Error::Domain(format!("{name} must be at least 1"))),
        None => Ok(()),
    }
}

fn mul(values: &[u64]) -> Result<u64> {
    values
        .iter()
        .try_fold(1u64, |acc, v| acc.checked_mul(*v))
        .ok_or_else(|| Error::Overflow("product exceeds 64 bits".into()))
}

fn add(values: &[u64]) -> Result<u64> {
    values
        .iter()
        .try_fold(0u64, |acc, v| acc.checked_add(*v))
        .ok_or_else(|| Error::Overflow("sum exceeds 64 bits".into()))
}

/// `2B[H(H+F)+H] + (2H+1)b`.
pub fn rnn_param_count(gates: u64, hidden: u64, features: u64, bits: u64) -> Result<u64> {
    check_positive(&[("B", gates), ("H", hidden), ("F", features), ("b", bits)])?;
    let cell = add(&[mul(&[hidden, hidden + features])?, hidden])?;
    add(&[mul(&[2, gates, cell])?, mul(&[2 * hidden + 1, bits])?])
}

/// Name and shape of every weight tensor of a bidirectional model.
pub fn weight_tensors(gates: usize, hidden: usize, features: usize, bits: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for dir in ["fwd", "bwd"] {
        for g in 0..gates {
            out.push((format!("{dir}.gate{g}.w_in"), vec![hidden, features]));
            out.push((format!("{dir}.gate{g}.w_rec"), vec![hidden, hidden]));
            out.push((format!("{dir}.gate{g}.bias"), vec![hidden]));
        }
    }
    out.push(("dense.w".into(), vec![bits, 2 * hidden]));
    out.push(("dense.b".into(), vec![bits]));
    out
}

/// Counts parameters tensor by tensor.
pub fn enumerate_params(gates: usize, hidden: usize, features: usize, bits: usize) -> u64 {
    weight_tensors(gates, hidden, features, bits)
        .iter()
        .map(|(_, dims)| dims.iter().product::<usize>() as u64)
        .sum()
}

/// Inputs of the recurrent multiplication count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnCost {
    pub gates: u64,
    pub hidden: u64,
    pub features: u64,
    pub window: u64,
    pub bits: u64,
    pub span: u64,
}

/// Real multiplications per window:
/// `2B(FH+H²)L + 2Hb` (many-to-one) or `… + 2HbL` (many-to-many), plus `6HL`
/// under table-reconciled accounting.
pub fn rnn_mult_count(c: &RnnCost, mode: Mode, accounting: Accounting) -> Result<u64> {
    check_positive(&[
        ("B", c.gates),
        ("H", c.hidden),
        ("F", c.features),
        ("L", c.window),
        ("b", c.bits),
        ("S", c.span),
    ])?;
    if c.span > c.window {
        return Err(Error::Domain(format!("S = {} exceeds L = {}", c.span, c.window)));
    }
    let recurrent = mul(&[2, c.gates, add(&[mul(&[c.features, c.hidden])?, mul(&[c.hidden, c.hidden])?])?, c.window])?;
    let head = match mode {
        Mode::ManyToOne => mul(&[2, c.hidden, c.bits])?,
        Mode::ManyToMany => mul(&[2, c.hidden, c.bits, c.window])?,
    };
    let extra = match accounting {
        Accounting::AsPrinted => 0,
        Accounting::TableReconciled => mul(&[6, c.hidden, c.window])?,
    };
    add(&[recurrent, head, extra])
}

/// Multiplications per output symbol as an exact rational (`total / S`).
pub fn rnn_mults_per_symbol(c: &RnnCost, mode: Mode, accounting: Accounting) -> Result<Ratio<u64>> {
    let span = if mode == Mode::ManyToOne { 1 } else { c.span };
    Ok(Ratio::new(rnn_mult_count(c, mode, accounting)?, span))
}

/// `lane_factor · Σ_k (L_k-1+k)! / ((k-1)!(L_k-1)!)`, evaluated as
/// `k·C(L_k-1+k, k)` with checked arithmetic.
pub fn volterra_mult_count(lengths: &[u64], lane_factor: u64) -> Result<u64> {
    if lengths.is_empty() || lengths.iter().any(|l| *l == 0 || l % 2 == 0) {
        return Err(Error::Domain("Volterra lengths must be positive and odd".into()));
    }
    let mut total: u64 = 0;
    for (i, &l) in lengths.iter().enumerate() {
        let k = i as u128 + 1;
        let mut binom: u128 = 1;
        for j in 0..k {
            binom = binom
                .checked_mul(l as u128 + j)
                .ok_or_else(|| Error::Overflow("Volterra term count exceeds 128 bits".into()))?
                / (j + 1);
        }
        let term = u64::try_from(binom * k).map_err(|_| Error::Overflow("Volterra count exceeds 64 bits".into()))?;
        total = add(&[total, term])?;
    }
    mul(&[total, lane_factor])
}

/// One row of the reconstructed complexity tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub table: String,
    pub equalizer: String,
    pub memory: String,
    pub hidden: Option<u64>,
    pub output_symbols: u64,
    pub params: Option<u64>,
    pub total_mults: u64,
    /// Exact per-symbol count as `numerator/denominator`.
    pub per_symbol_exact: String,
    pub per_symbol: u64,
}

fn round_ratio(r: Ratio<u64>) -> u64 {
    (r + Ratio::new(1, 2)).floor().to_integer()
}

fn cell_label(kind: CellKind) -> &'static str {
    match kind {
        CellKind::Lstm => "bi-LSTM",
        CellKind::Gru => "bi-GRU",
        CellKind::Vanilla => "bi-Vanilla-RNN",
    }
}

/// Report for one recurrent equalizer; many-to-one when `S = 1`.
pub fn rnn_report(table: &str, kind: CellKind, cost: &RnnCost, accounting: Accounting) -> Result<ComplexityReport> {
    let mode = if cost.span == 1 { Mode::ManyToOne } else { Mode::ManyToMany };
    let total = rnn_mult_count(cost, mode, accounting)?;
    let per = rnn_mults_per_symbol(cost, mode, accounting)?;
    Ok(ComplexityReport {
        table: table.into(),
        equalizer: cell_label(kind).into(),
        memory: cost.window.to_string(),
        hidden: Some(cost.hidden),
        output_symbols: cost.span,
        params: Some(rnn_param_count(cost.gates, cost.hidden, cost.features, cost.bits)?),
        total_mults: total,
        per_symbol_exact: format!("{}/{}", per.numer(), per.denom()),
        per_symbol: round_ratio(per),
    })
}

pub fn volterra_report(table: &str, lengths: &[u64], lane_factor: u64) -> Result<ComplexityReport> {
    let total = volterra_mult_count(lengths, lane_factor)?;
    Ok(ComplexityReport {
        table: table.into(),
        equalizer: "Volterra".into(),
        memory: lengths.iter().map(u64::to_string).collect::<Vec<_>>().join("/"),
        hidden: None,
        output_symbols: 1,
        params: None,
        total_mults: total,
        per_symbol_exact: format!("{total}/1"),
        per_symbol: total,
    })
}

/// Every row of the IIA (many-to-one) and IIB (many-to-many) complexity tables.
pub fn emit_table_ii() -> Result<Vec<ComplexityReport>> {
    let mut rows = Vec::new();
    let cost = |kind: CellKind, span| RnnCost {
        gates: kind.gates() as u64,
        hidden: 16,
        features: 4,
        window: 151,
        bits: 4,
        span,
    };
    for kind in CellKind::ALL {
        rows.push(rnn_report("IIA", kind, &cost(kind, 1), Accounting::TableReconciled)?);
    }
    rows.push(volterra_report("IIA", &[151, 51, 11], 4)?);
    for kind in CellKind::ALL {
        for span in [80, 120] {
            rows.push(rnn_report("IIB", kind, &cost(kind, span), Accounting::TableReconciled)?);
        }
    }
    rows.push(volterra_report("IIB", &[151, 51, 11], 4)?);
    Ok(rows)
}
