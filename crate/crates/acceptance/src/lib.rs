//! Straightforward reference implementations that the acceptance checks
//! compare the library against. Written for clarity, not speed, and without
//! calling the code they check.

pub mod reference {
    use chrono::{Datelike, NaiveDate};

    /// F1 of one class over (predicted, label) pairs; 0 when undefined.
    pub fn class_f1(pairs: &[(bool, bool)], positive: bool) -> f64 {
        let tp = pairs.iter().filter(|&&(p, l)| p == positive && l == positive).count() as f64;
        let predicted = pairs.iter().filter(|&&(p, _)| p == positive).count() as f64;
        let actual = pairs.iter().filter(|&&(_, l)| l == positive).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }

    /// Mean of the MET and NOT MET F1s.
    pub fn overall_f1(pairs: &[(bool, bool)]) -> f64 {
        (class_f1(pairs, true) + class_f1(pairs, false)) / 2.0
    }

    /// (macro, micro) over per-criterion pair lists.
    pub fn macro_micro(per_criterion: &[Vec<(bool, bool)>]) -> (f64, f64) {
        let macro_f1 = per_criterion.iter().map(|p| overall_f1(p)).sum::<f64>() / per_criterion.len() as f64;
        let pooled: Vec<(bool, bool)> = per_criterion.iter().flatten().copied().collect();
        (macro_f1, overall_f1(&pooled))
    }

    fn days_in_month(year: i32, month: u32) -> u32 {
        let leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
        [31, if leap { 29 } else { 28 }, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31][month as usize - 1]
    }

    /// Calendar month subtraction with the day clamped to the target month.
    pub fn months_back(d: NaiveDate, months: u32) -> NaiveDate {
        let total = d.year() * 12 + d.month0() as i32 - months as i32;
        let (y, m) = (total.div_euclid(12), total.rem_euclid(12) as u32 + 1);
        NaiveDate::from_ymd_opt(y, m, d.day().min(days_in_month(y, m))).expect("valid clamped date")
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Rule {
        Any,
        All,
        /// Latest note strictly after `reference - months` and not after
        /// `reference`; same-day notes are OR-ed.
        Latest { months: u32 },
    }

    pub fn decide(items: &[(NaiveDate, bool)], rule: Rule, reference: NaiveDate) -> bool {
        match rule {
            Rule::Any => items.iter().any(|x| x.1),
            Rule::All => !items.is_empty() && items.iter().all(|x| x.1),
            Rule::Latest { months } => {
                let lo = months_back(reference, months);
                let mut best: Option<(NaiveDate, bool)> = None;
                for &(d, met) in items {
                    if d <= lo || d > reference {
                        continue;
                    }
                    best = match best {
                        None => Some((d, met)),
                        Some((bd, _)) if d > bd => Some((d, met)),
                        Some((bd, bm)) if d == bd => Some((bd, bm || met)),
                        keep => keep,
                    };
                }
                best.is_some_and(|b| b.1)
            }
        }
    }

    /// Indices of the k best-scoring items under (score desc, date desc,
    /// id asc, chunk asc), by sorting everything.
    pub fn top_k_by_full_sort(scored: &[(f64, NaiveDate, String, usize)], k: usize) -> Vec<(String, usize)> {
        let mut all: Vec<_> = scored.to_vec();
        all.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite scores")
                .then(b.1.cmp(&a.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        all.truncate(k);
        all.sort_by(|a, b| (a.1, &a.2, a.3).cmp(&(b.1, &b.2, b.3)));
        all.into_iter().map(|(_, _, n, i)| (n, i)).collect()
    }

    pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na * nb)).clamp(-1.0, 1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::reference::*;
    use chrono::NaiveDate;

    #[test]
    fn worked_examples() {
        // tp 3, fp 1, fn 1, tn 5
        let mut pairs = vec![(true, true); 3];
        pairs.push((true, false));
        pairs.push((false, true));
        pairs.extend(vec![(false, false); 5]);
        assert!((overall_f1(&pairs) - 0.791_666_666).abs() < 1e-6);

        let d = |s| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
        assert_eq!(months_back(d("2024-03-31"), 1), d("2024-02-29"));
        assert_eq!(months_back(d("2024-01-15"), 24), d("2022-01-15"));
        let r = d("2024-06-01");
        assert!(!decide(&[(d("2023-06-01"), true)], Rule::Latest { months: 12 }, r));
        assert!(decide(&[(d("2023-06-02"), true)], Rule::Latest { months: 12 }, r));
        assert!(!decide(&[], Rule::All, r));
    }
}
