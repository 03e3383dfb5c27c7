//! Decathlon-style scoring, parameter overhead and mask analysis.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mask::{density, Scalar};
use crate::net::{Backbone, DomainParams};

/// Score awarded to a domain with zero error.
pub const PERFECT_DOMAIN_SCORE: f32 = 1000.0;

/// Per-domain baseline errors `E_max` and weights `α = 1000 / E_max²`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSpec {
    pub e_max: Vec<f32>,
    pub alpha: Vec<f32>,
}

impl ScoreSpec {
    pub fn new(e_max: Vec<f32>) -> Result<Self> {
        if let Some(e) = e_max.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(Error::Config(format!("baseline error must lie in (0, 1], got {e}")));
        }
        let alpha = e_max.iter().map(|e| PERFECT_DOMAIN_SCORE / (e * e)).collect();
        Ok(ScoreSpec { e_max, alpha })
    }

    /// `E_max = min(1, 2·e)` from finetuning errors. Errors below `min_error`
    /// are raised to it first so a perfect baseline still yields a usable spec.
    pub fn calibrate(finetune_errors: &[f32], min_error: f32) -> Result<Self> {
        Self::new(finetune_errors.iter().map(|e| (2.0 * e.max(min_error)).min(1.0)).collect())
    }

    pub fn len(&self) -> usize {
        self.e_max.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e_max.is_empty()
    }
}

/// Per-domain terms `α·max(0, E_max − E)²`.
pub fn domain_scores(errors: &[f32], spec: &ScoreSpec) -> Result<Vec<f32>> {
    if errors.len() != spec.len() {
        return Err(Error::Config(format!("{} errors for {} baseline domains", errors.len(), spec.len())));
    }
    errors
        .iter()
        .zip(&spec.e_max)
        .map(|(&e, &e_max)| {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("error rate {e} outside [0, 1]")));
            }
            // α·(E_max − E)² written as 1000·((E_max − E)/E_max)² so that a
            // perfect domain scores exactly 1000.
            let gap = (e_max as f64 - e as f64).max(0.0) / e_max as f64;
            Ok((PERFECT_DOMAIN_SCORE as f64 * gap * gap) as f32)
        })
        .collect()
}

pub fn score(errors: &[f32], spec: &ScoreSpec) -> Result<f32> {
    Ok(domain_scores(errors, spec)?.iter().map(|&s| s as f64).sum::<f64>() as f32)
}

pub fn score_per_param(score: f32, ratio: f32) -> Result<f32> {
    if !(ratio > 0.0) {
        return Err(Error::Config(format!("parameter ratio must be positive, got {ratio}")));
    }
    Ok(score / ratio)
}

/// `1 + A_p·(T − 1) / (32·N_p)`: total parameters relative to one backbone
/// when `T` domains (including the pretraining one) each add `A_p` bits.
pub fn overhead(n_p: u64, a_p_bits: u64, t: u64) -> f64 {
    assert!(n_p > 0 && t >= 1, "overhead needs N_p > 0 and T >= 1");
    1.0 + (a_p_bits as f64 * (t - 1) as f64) / (32.0 * n_p as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverheadReport {
    /// Backbone parameters, classifiers excluded.
    pub n_p: u64,
    /// Bits added by each extra domain.
    pub a_p: Vec<u64>,
    /// Domain count including the pretraining domain.
    pub t: u64,
    pub ratio: f64,
}

impl OverheadReport {
    /// Overhead of the given added domains; their bit counts may differ, in
    /// which case they are summed.
    pub fn new(backbone: &Backbone, domains: &[&DomainParams]) -> Self {
        let n_p = backbone.param_count() as u64;
        let a_p: Vec<u64> = domains.iter().map(|d| count_domain_bits(d)).collect();
        let ratio = 1.0 + a_p.iter().sum::<u64>() as f64 / (32.0 * n_p as f64);
        OverheadReport { n_p, t: a_p.len() as u64 + 1, a_p, ratio }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("n_p\tdomains\ta_p_bits\tratio\n");
        let a_p: Vec<String> = self.a_p.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "{}\t{}\t{}\t{:.6}", self.n_p, self.t, a_p.join(","), self.ratio);
        s
    }
}

/// Exact bits of a deployed domain, classifier excluded: one bit per mask
/// entry, 32 per learned scalar and 32 per batch-norm value (scale, shift,
/// running mean, running variance).
pub fn count_domain_bits(domain: &DomainParams) -> u64 {
    mask_bits(domain) + scalar_bits(domain) + bn_bits(domain)
}

pub fn mask_bits(domain: &DomainParams) -> u64 {
    domain.layers.iter().map(|l| l.mask.shape().iter().product::<usize>() as u64).sum()
}

pub fn scalar_bits(domain: &DomainParams) -> u64 {
    if domain.config.is_piggyback() {
        return 0;
    }
    32 * domain.layers.iter().map(|l| l.scalars.learned_count() as u64).sum::<u64>()
}

pub fn bn_bits(domain: &DomainParams) -> u64 {
    32 * domain.bn.iter().map(|b| b.stored_values() as u64).sum::<u64>()
}

/// Mask and scalar bits per masked weight.
pub fn transform_bits_per_weight(domain: &DomainParams) -> f64 {
    (mask_bits(domain) + scalar_bits(domain)) as f64 / mask_bits(domain) as f64
}

/// All domain bits per backbone parameter.
pub fn bits_per_param(domain: &DomainParams, backbone: &Backbone) -> f64 {
    count_domain_bits(domain) as f64 / backbone.param_count() as f64
}

/// Density and scalar values of one masked layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAnalysis {
    /// Depth of the masked layer, starting at 0.
    pub layer_index: usize,
    /// Percentage of ones in the binary mask.
    pub density: f32,
    /// `k1`, `k2`, `k3`; channel means under channel granularity.
    pub k: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskAnalysis {
    pub layers: Vec<LayerAnalysis>,
}

pub const MASK_ANALYSIS_HEADER: &str = "layer_index\tdensity\tk1\tk2\tk3";

pub fn analyze_masks(domain: &DomainParams) -> Result<MaskAnalysis> {
    let layers = domain
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let k = |j: usize| {
                if domain.config.is_piggyback() {
                    // The dedicated path computes W∘M.
                    [0.0, 0.0, 0.0, 1.0][j]
                } else {
                    match &l.scalars.k[j] {
                        Scalar::Fixed(v) => *v,
                        s => s.mean(),
                    }
                }
            };
            Ok(LayerAnalysis { layer_index: i, density: density(&l.mask.binary())?, k: [k(1), k(2), k(3)] })
        })
        .collect::<Result<_>>()?;
    Ok(MaskAnalysis { layers })
}

impl MaskAnalysis {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{MASK_ANALYSIS_HEADER}\n");
        for l in &self.layers {
            let _ = writeln!(s, "{}\t{:.4}\t{}\t{}\t{}", l.layer_index, l.density, l.k[0], l.k[1], l.k[2]);
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MASK_ANALYSIS_HEADER) {
            return Err(Error::Format("mask analysis header missing".into()));
        }
        let bad = |line: &str| Error::Format(format!("bad mask analysis row {line:?}"));
        let layers = lines
            .map(|line| {
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 5 {
                    return Err(bad(line));
                }
                let num = |s: &str| s.parse::<f32>().map_err(|_| bad(line));
                Ok(LayerAnalysis {
                    layer_index: f[0].parse().map_err(|_| bad(line))?,
                    density: num(f[1])?,
                    k: [num(f[2])?, num(f[3])?, num(f[4])?],
                })
            })
            .collect::<Result<_>>()?;
        Ok(MaskAnalysis { layers })
    }
}

/// One row of a score table.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub domain: String,
    pub accuracy: f32,
    pub e_max: f32,
    pub alpha: f32,
    pub score: f32,
}

pub const SCORE_HEADER: &str = "domain\taccuracy\terror\te_max\talpha\tscore";

/// Score table with a trailing `total` row, plus the parameter ratio and
/// `S_p` rows when a ratio is given.
pub fn score_table(names: &[String], accuracies: &[f32], spec: &ScoreSpec, ratio: Option<f32>) -> Result<String> {
    if names.len() != accuracies.len() {
        return Err(Error::Config("one accuracy per domain name required".into()));
    }
    let errors: Vec<f32> = accuracies.iter().map(|a| 1.0 - a).collect();
    let per = domain_scores(&errors, spec)?;
    let mut s = format!("{SCORE_HEADER}\n");
    for i in 0..names.len() {
        let _ = writeln!(
            s,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.2}",
            names[i], accuracies[i], errors[i], spec.e_max[i], spec.alpha[i], per[i]
        );
    }
    let total = score(&errors, spec)?;
    let _ = writeln!(s, "total\t\t\t\t\t{total:.2}");
    if let Some(r) = ratio {
        let _ = writeln!(s, "params_ratio\t\t\t\t\t{r:.4}");
        let _ = writeln!(s, "per_param\t\t\t\t\t{:.2}", score_per_param(total, r)?);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{Granularity, MaskTransformConfig, Variant};
    use crate::net::{add_domain, ArchSpec};

    #[test]
    fn score_examples() {
        let spec = ScoreSpec::new(vec![0.5]).unwrap();
        assert_eq!(spec.alpha, vec![4000.0]);
        assert_eq!(score(&[0.5], &spec).unwrap(), 0.0);
        assert_eq!(score(&[0.0], &spec).unwrap(), 1000.0);
        assert_eq!(score(&[0.25], &spec).unwrap(), 250.0);
        assert_eq!(score(&[0.9], &spec).unwrap(), 0.0);
        assert!(score(&[0.1, 0.2], &spec).is_err());
        assert!(score(&[1.5], &spec).is_err());
    }

    #[test]
    fn perfect_is_exactly_1000_per_domain() {
        let spec = ScoreSpec::new(vec![0.3, 0.07, 1.0, 0.123]).unwrap();
        assert_eq!(score(&[0.0; 4], &spec).unwrap(), 4000.0);
    }

    #[test]
    fn calibrated_doubled_errors_score_zero() {
        let ft = [0.05, 0.2, 0.7, 0.0];
        let spec = ScoreSpec::calibrate(&ft, 0.01).unwrap();
        assert_eq!(spec.e_max, vec![0.1, 0.4, 1.0, 0.02]);
        assert_eq!(score(&spec.e_max.clone(), &spec).unwrap(), 0.0);
    }

    #[test]
    fn score_monotone_in_error() {
        let spec = ScoreSpec::new(vec![0.4]).unwrap();
        let mut last = f32::INFINITY;
        for i in 0..=100 {
            let s = score(&[i as f32 / 100.0], &spec).unwrap();
            assert!(s <= last);
            last = s;
        }
    }

    #[test]
    fn per_param_and_overhead() {
        assert_eq!(score_per_param(3497.0, 1.29).unwrap().round(), 2711.0);
        assert_eq!(score_per_param(812.0, 1.0).unwrap(), 812.0);
        assert_eq!(score_per_param(0.0, 1.3).unwrap(), 0.0);
        assert!(score_per_param(1.0, 0.0).is_err());
        assert_eq!(overhead(1000, 1000, 1), 1.0);
        assert_eq!(overhead(1000, 1000, 2), 1.03125);
    }

    fn domain(variant: Variant, granularity: Granularity) -> (Backbone, DomainParams) {
        let bb = Backbone::build(ArchSpec::smallnet(), 1).unwrap();
        let cfg = MaskTransformConfig { granularity, ..MaskTransformConfig::new(variant) };
        let d = add_domain(&bb, "d", 5, cfg, 2).unwrap();
        (bb, d)
    }

    #[test]
    fn bit_counts_on_smallnet() {
        let masked = 8 * 9 + 16 * 8 * 9;
        let bn_values = 4 * (8 + 16);
        let (_, p) = domain(Variant::Piggyback, Granularity::PerLayer);
        assert_eq!(count_domain_bits(&p), (masked + 32 * bn_values) as u64);
        let (_, f) = domain(Variant::Full, Granularity::PerLayer);
        assert_eq!(count_domain_bits(&f) - count_domain_bits(&p), 2 * 32 * 3);
        let (_, c) = domain(Variant::Full, Granularity::PerChannel);
        assert_eq!(scalar_bits(&c), 32 * 3 * (8 + 16));
        let ratio = transform_bits_per_weight(&f);
        assert!(ratio > 1.0 && ratio < 2.0, "{ratio}");
    }

    #[test]
    fn overhead_report_matches_formula() {
        let (bb, f) = domain(Variant::Full, Granularity::PerLayer);
        let r = OverheadReport::new(&bb, &[&f, &f]);
        assert_eq!(r.t, 3);
        assert_eq!(r.ratio, overhead(r.n_p, count_domain_bits(&f), 3));
        assert!(r.to_tsv().starts_with("n_p\tdomains\ta_p_bits\tratio\n"));
        assert_eq!(OverheadReport::new(&bb, &[]).ratio, 1.0);
    }

    #[test]
    fn analysis_of_fresh_domain() {
        let (_, f) = domain(Variant::Full, Granularity::PerChannel);
        let a = analyze_masks(&f).unwrap();
        assert_eq!(a.layers.len(), 2);
        assert!(a.layers.iter().all(|l| l.density == 100.0 && l.k == [0.0; 3]));
        assert_eq!(MaskAnalysis::parse_tsv(&a.to_tsv()).unwrap(), a);
        let (_, p) = domain(Variant::Piggyback, Granularity::PerLayer);
        assert_eq!(analyze_masks(&p).unwrap().layers[1].k, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn score_table_layout() {
        let spec = ScoreSpec::new(vec![0.5, 0.5]).unwrap();
        let t = score_table(&["a".into(), "b".into()], &[1.0, 0.75], &spec, Some(1.25)).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], SCORE_HEADER);
        assert!(lines[1].ends_with("\t1000.00"));
        assert!(lines[2].ends_with("\t250.00"));
        assert_eq!(lines[3], "total\t\t\t\t\t1250.00");
        assert_eq!(lines[4], "params_ratio\t\t\t\t\t1.2500");
        assert_eq!(lines[5], "per_param\t\t\t\t\t1000.00");
    }
}
