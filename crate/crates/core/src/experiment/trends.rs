//! Directional checks on sweep and OOD results.

use serde::{Deserialize, Serialize};

use crate::objectives::EvalReport;
use crate::ood::OodReport;

/// DICE_seg at ε=0.03 may be at most this fraction of clean for a vulnerable model.
pub const VULNERABLE_RATIO: f64 = 0.5;
/// DICE_seg ceiling at ε=0.2 for a vulnerable model.
pub const VULNERABLE_FLOOR: f64 = 0.05;
/// Fraction of clean DICE a robust model keeps.
pub const RETENTION_RATIO: f64 = 0.8;
/// Allowed clean-DICE gain of adversarial over standard training.
pub const CLEAN_SLACK: f64 = 0.01;
pub const OOD_DICE_LEVEL: f64 = 0.9;
pub const OOD_SUCCESS_RATE: f64 = 0.8;
pub const DETECTOR_AUROC_CEILING: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(check: &str, passed: bool, detail: String) -> Self {
        Self {
            check: check.into(),
            passed,
            detail,
        }
    }

    fn missing(check: &str, what: &str) -> Self {
        Self::new(check, false, format!("missing {what}"))
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.check, self.detail)
    }
}

fn seg(r: &EvalReport, eps: f64) -> Option<f64> {
    r.row(eps)?.dice_seg
}

fn reg(r: &EvalReport, eps: f64) -> Option<f64> {
    r.row(eps)?.dice_reg
}

pub fn std_vulnerable(std: &EvalReport) -> Verdict {
    const C: &str = "std_vulnerable";
    let (Some(c), Some(a), Some(b)) = (seg(std, 0.0), seg(std, 0.03), seg(std, 0.2)) else {
        return Verdict::missing(C, "DICE_seg at 0, 0.03 or 0.2");
    };
    Verdict::new(
        C,
        a <= VULNERABLE_RATIO * c && b <= VULNERABLE_FLOOR,
        format!("clean {c:.4}, eps 0.03 {a:.4} (limit {:.4}), eps 0.2 {b:.4} (limit {VULNERABLE_FLOOR})", VULNERABLE_RATIO * c),
    )
}

pub fn adversarial_training_helps(adv_rs: &EvalReport, std: &EvalReport) -> Verdict {
    const C: &str = "adv_rs_robust";
    let (Some(c), Some(a)) = (seg(adv_rs, 0.0), seg(adv_rs, 0.03)) else {
        return Verdict::missing(C, "adv_rs DICE_seg at 0 or 0.03");
    };
    let mut detail = format!("clean {c:.4}, eps 0.03 {a:.4} (need {:.4})", RETENTION_RATIO * c);
    let mut ok = a >= RETENTION_RATIO * c;
    for eps in [0.03, 0.05, 0.07] {
        match (seg(adv_rs, eps), seg(std, eps)) {
            (Some(x), Some(y)) => {
                ok &= x > y;
                detail.push_str(&format!("; eps {eps}: {x:.4} vs std {y:.4}"));
            }
            _ => return Verdict::missing(C, &format!("DICE_seg at {eps}")),
        }
    }
    Verdict::new(C, ok, detail)
}

pub fn random_noise_not_robust(rand: &EvalReport, std: &EvalReport, adv_rs: &EvalReport) -> Verdict {
    const C: &str = "rand_not_robust";
    let (Some(r5), Some(s5), Some(a5), Some(rc), Some(r3)) =
        (seg(rand, 0.05), seg(std, 0.05), seg(adv_rs, 0.05), seg(rand, 0.0), seg(rand, 0.03))
    else {
        return Verdict::missing(C, "DICE_seg at 0, 0.03 or 0.05");
    };
    let (d_std, d_adv) = ((r5 - s5).abs(), (a5 - r5).abs());
    Verdict::new(
        C,
        d_std < d_adv && r3 < RETENTION_RATIO * rc,
        format!("|rand-std| {d_std:.4} vs |adv_rs-rand| {d_adv:.4} at 0.05; rand retention {r3:.4} vs {:.4}", RETENTION_RATIO * rc),
    )
}

pub fn clean_side_effect(adv_rs: &EvalReport, std: &EvalReport) -> Verdict {
    const C: &str = "clean_side_effect";
    let (Some(a), Some(s)) = (seg(adv_rs, 0.0), seg(std, 0.0)) else {
        return Verdict::missing(C, "clean DICE_seg");
    };
    Verdict::new(C, a <= s + CLEAN_SLACK, format!("adv_rs {a:.4}, std {s:.4}"))
}

pub fn asymmetric_transfer(adv_s: &EvalReport, adv_r: &EvalReport, std: &EvalReport) -> Verdict {
    const C: &str = "asymmetric_transfer";
    let (Some(sc), Some(s5), Some(gs), Some(gr), Some(g0)) =
        (reg(adv_s, 0.0), reg(adv_s, 0.05), seg(adv_s, 0.05), seg(adv_r, 0.05), seg(std, 0.05))
    else {
        return Verdict::missing(C, "DICE values at 0 or 0.05");
    };
    let (up_s, up_r) = (gs - g0, gr - g0);
    Verdict::new(
        C,
        s5 >= RETENTION_RATIO * sc && up_r < up_s,
        format!("adv_s DICE_reg {s5:.4} vs clean {sc:.4}; seg gain adv_r {up_r:.4} vs adv_s {up_s:.4}"),
    )
}

pub fn ood_attack_succeeds(report: &OodReport) -> Verdict {
    let rate = report.success_rate(OOD_DICE_LEVEL);
    Verdict::new(
        &format!("ood_attack_{}", report.objective),
        rate >= OOD_SUCCESS_RATE,
        format!("{:.1}% of samples reach Dice {OOD_DICE_LEVEL}", 100.0 * rate),
    )
}

pub fn detector_fooled(name: &str, report: &OodReport) -> Verdict {
    let check = format!("detector_fooled_{name}");
    match report.auroc {
        Some(a) => Verdict::new(&check, a <= DETECTOR_AUROC_CEILING, format!("AUROC {a:.4}")),
        None => Verdict::missing(&check, "AUROC"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::EvalRow;

    fn report(seg: &[(f64, f64)], reg: &[(f64, f64)]) -> EvalReport {
        let mut rows: Vec<EvalRow> = Vec::new();
        for &(eps, d) in seg {
            rows.push(EvalRow {
                eps,
                error_reg: None,
                dice_reg: reg.iter().find(|r| r.0 == eps).map(|r| r.1),
                dice_seg: Some(d),
            });
        }
        EvalReport { k_test: 1, i_max: 4, rows }
    }

    #[test]
    fn checks_follow_thresholds() {
        let std = report(&[(0.0, 0.95), (0.03, 0.3), (0.05, 0.1), (0.07, 0.0), (0.2, 0.0)], &[]);
        let adv = report(&[(0.0, 0.93), (0.03, 0.85), (0.05, 0.8), (0.07, 0.7), (0.2, 0.1)], &[]);
        assert!(std_vulnerable(&std).passed);
        assert!(!std_vulnerable(&adv).passed);
        assert!(adversarial_training_helps(&adv, &std).passed);
        assert!(!adversarial_training_helps(&std, &adv).passed);
        assert!(clean_side_effect(&adv, &std).passed);
        assert!(random_noise_not_robust(&std, &std, &adv).passed);
        assert!(!random_noise_not_robust(&adv, &std, &adv).passed);
    }

    #[test]
    fn missing_levels_fail() {
        let partial = report(&[(0.0, 0.9)], &[]);
        let v = std_vulnerable(&partial);
        assert!(!v.passed && v.detail.contains("missing"));
        assert!(v.line().starts_with("FAIL std_vulnerable"));
    }

    #[test]
    fn transfer_uses_both_heads() {
        let std = report(&[(0.0, 0.95), (0.05, 0.1)], &[]);
        let adv_s = report(&[(0.0, 0.9), (0.05, 0.7)], &[(0.0, 0.9), (0.05, 0.8)]);
        let adv_r = report(&[(0.0, 0.9), (0.05, 0.3)], &[(0.0, 0.9), (0.05, 0.8)]);
        assert!(asymmetric_transfer(&adv_s, &adv_r, &std).passed);
        assert!(!asymmetric_transfer(&adv_r, &adv_s, &std).passed);
    }
}
