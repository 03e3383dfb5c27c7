use crate::error::{Error, Result};

use super::{generate_with, DomainDataset, Family, GenParams};

/// Recipe for one generated domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub family: Family,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn new(family: Family, num_classes: usize, n_train: usize, n_test: usize, seed: u64) -> Self {
        DomainSpec { name: family.to_string(), family, num_classes, n_train, n_test, seed }
    }

    pub fn generate(&self) -> Result<DomainDataset> {
        self.generate_with(GenParams::default())
    }

    pub fn generate_with(&self, params: GenParams) -> Result<DomainDataset> {
        let mut ds = generate_with(&self.family, self.num_classes, self.n_train, self.n_test, self.seed, params)?;
        ds.name = self.name.clone();
        Ok(ds)
    }
}

/// A pretraining domain plus the domains added on top of it.
#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub name: String,
    pub base: DomainSpec,
    pub domains: Vec<DomainSpec>,
}

pub const SUITE_NAMES: [&str; 2] = ["mds-3", "mds-5"];

impl Suite {
    /// Stock suites `mds-3` and `mds-5`.
    pub fn stock(name: &str) -> Result<Self> {
        let spec = |family: &str, classes, seed| {
            let family: Family = family.parse().expect("stock family");
            DomainSpec::new(family, classes, 640, 320, seed)
        };
        let mut domains = vec![spec("blobs", 8, 11), spec("bars", 8, 12), spec("digits-lite", 10, 13)];
        match name {
            "mds-3" => {}
            "mds-5" => domains.extend([spec("inverted-digits-lite", 10, 14), spec("rotated-bars", 8, 15)]),
            other => {
                return Err(Error::Config(format!(
                    "unknown suite {other:?} (expected one of {})",
                    SUITE_NAMES.join(", ")
                )))
            }
        }
        let mut base = DomainSpec::new(Family::Blobs, 16, 1600, 320, 1);
        base.name = "base-blobs".into();
        Ok(Suite { name: name.into(), base, domains })
    }

    /// Same suite with every split size multiplied by `factor`.
    pub fn scaled(mut self, factor: f32) -> Self {
        let scale = |n: usize| ((n as f32 * factor).round() as usize).max(1);
        for d in std::iter::once(&mut self.base).chain(self.domains.iter_mut()) {
            d.n_train = scale(d.n_train);
            d.n_test = scale(d.n_test);
        }
        self
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.name == name)
    }
}
