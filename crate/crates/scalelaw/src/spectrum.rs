//! Teacher spectra and system shapes.
//!
//! A [`Spectrum`] holds the base-feature eigenvalues and the squared target
//! weights. A [`SystemShape`] holds model size, dataset size and label noise,
//! and [`Coupling`] turns the two into the prefactors every solver uses.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpectrumError {
    #[error("task-power exponent must exceed 1, got a = {0}")]
    TaskExponent(f64),
    #[error("spectral decay exponent must be positive, got b = {0}")]
    DecayExponent(f64),
    #[error("spectrum must contain at least one mode")]
    Empty,
    #[error("eigenvalue and weight sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("eigenvalue {index} is not strictly positive: {value}")]
    NonPositive { index: usize, value: f64 },
    #[error("eigenvalues must be non-increasing (index {0})")]
    NotSorted(usize),
    #[error("target weight {index} is negative or not finite: {value}")]
    BadWeight { index: usize, value: f64 },
    #[error("mode index {k} out of range 1..={modes}")]
    ModeOutOfRange { k: usize, modes: usize },
    #[error("spectrum file {path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("cannot read spectrum file {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid system shape: {0}")]
    Shape(String),
}

/// Eigenvalues `λ_k` (non-increasing, positive) and squared target weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
    target_weights_sq: Vec<f64>,
}

impl Spectrum {
    pub fn new(eigenvalues: Vec<f64>, target_weights_sq: Vec<f64>) -> Result<Self, SpectrumError> {
        if eigenvalues.is_empty() {
            return Err(SpectrumError::Empty);
        }
        if eigenvalues.len() != target_weights_sq.len() {
            return Err(SpectrumError::LengthMismatch(
                eigenvalues.len(),
                target_weights_sq.len(),
            ));
        }
        for (index, &value) in eigenvalues.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(SpectrumError::NonPositive { index, value });
            }
        }
        if let Some(i) = eigenvalues.windows(2).position(|w| w[1] > w[0]) {
            return Err(SpectrumError::NotSorted(i + 1));
        }
        for (index, &value) in target_weights_sq.iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(SpectrumError::BadWeight { index, value });
            }
        }
        Ok(Self {
            eigenvalues,
            target_weights_sq,
        })
    }

    /// `λ_k = k^{-b}`, `(w*_k)^2 = k^{b-a}` for `k = 1..=modes`.
    pub fn power_law(a: f64, b: f64, modes: usize) -> Result<Self, SpectrumError> {
        if !(a > 1.0) {
            return Err(SpectrumError::TaskExponent(a));
        }
        if !(b > 0.0) {
            return Err(SpectrumError::DecayExponent(b));
        }
        if modes == 0 {
            return Err(SpectrumError::Empty);
        }
        let (lam, w2) = (1..=modes)
            .map(|k| {
                let k = k as f64;
                (k.powf(-b), k.powf(b - a))
            })
            .unzip();
        Self::new(lam, w2)
    }

    pub fn white(modes: usize) -> Result<Self, SpectrumError> {
        if modes == 0 {
            return Err(SpectrumError::Empty);
        }
        Self::new(vec![1.0; modes], vec![1.0; modes])
    }

    /// Reads `lambda w_star_sq` pairs, one mode per line; `#` starts a comment.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, SpectrumError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| SpectrumError::Io {
            path: shown.clone(),
            reason: e.to_string(),
        })?;
        Self::parse(&text).map_err(|e| match e {
            SpectrumError::Parse { line, reason, .. } => SpectrumError::Parse {
                path: shown,
                line,
                reason,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, SpectrumError> {
        let mut lam = Vec::new();
        let mut w2 = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |reason: String| SpectrumError::Parse {
                path: String::new(),
                line: i + 1,
                reason,
            };
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(err(format!("expected 2 columns, found {}", fields.len())));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            lam.push(parse(fields[0])?);
            w2.push(parse(fields[1])?);
        }
        Self::new(lam, w2)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# lambda w_star_sq\n");
        for (l, w) in self.iter() {
            out.push_str(&format!("{l:.17e} {w:.17e}\n"));
        }
        out
    }

    pub fn modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn target_weights_sq(&self) -> &[f64] {
        &self.target_weights_sq
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.eigenvalues
            .iter()
            .copied()
            .zip(self.target_weights_sq.iter().copied())
    }

    pub fn top_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn bottom_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.modes() - 1]
    }

    /// `(1/M) Σ λ_k`.
    pub fn mean_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.modes() as f64
    }

    /// `Σ λ_k (w*_k)^2`, the initial loss before the mode weighting.
    pub fn target_power(&self) -> f64 {
        self.iter().map(|(l, w)| l * w).sum()
    }

    /// Fraction of target power carried by the top `k` modes.
    pub fn task_fraction(&self, k: usize) -> Result<f64, SpectrumError> {
        if k == 0 || k > self.modes() {
            return Err(SpectrumError::ModeOutOfRange {
                k,
                modes: self.modes(),
            });
        }
        let head: f64 = self.iter().take(k).map(|(l, w)| l * w).sum();
        Ok(head / self.target_power())
    }

    /// Same weights, eigenvalues multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, SpectrumError> {
        Self::new(
            self.eigenvalues.iter().map(|l| l * factor).collect(),
            self.target_weights_sq.clone(),
        )
    }
}

/// How finite `N`, `P` relate to the base dimension `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitMode {
    /// `M, N, P` grow together; losses carry a `1/M` mode average.
    #[default]
    Proportional,
    /// `M` is taken to infinity first; losses are plain mode sums.
    NonProportional,
}

/// Model size `N`, dataset size `P` (either may be infinite) and label noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemShape {
    pub model_size: f64,
    pub dataset_size: f64,
    pub noise_std: f64,
    pub limit: LimitMode,
}

impl SystemShape {
    pub fn new(model_size: f64, dataset_size: f64, noise_std: f64, limit: LimitMode) -> Result<Self, SpectrumError> {
        if !(model_size >= 1.0) {
            return Err(SpectrumError::Shape(format!("model size N = {model_size} must be >= 1")));
        }
        if !(dataset_size >= 1.0) {
            return Err(SpectrumError::Shape(format!("dataset size P = {dataset_size} must be >= 1")));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(SpectrumError::Shape(format!("noise std {noise_std} must be finite and >= 0")));
        }
        Ok(Self {
            model_size,
            dataset_size,
            noise_std,
            limit,
        })
    }

    /// Proportional shape from ratios `ν = N/M`, `α = P/M` (infinite allowed).
    pub fn from_ratios(nu: f64, alpha: f64, modes: usize, noise_std: f64) -> Result<Self, SpectrumError> {
        let m = modes as f64;
        if !(nu > 0.0 && alpha > 0.0) {
            return Err(SpectrumError::Shape(format!("ratios must be positive (nu = {nu}, alpha = {alpha})")));
        }
        Ok(Self {
            model_size: nu * m,
            dataset_size: alpha * m,
            noise_std,
            limit: LimitMode::Proportional,
        })
    }

    pub fn nu(&self, modes: usize) -> f64 {
        self.model_size / modes as f64
    }

    pub fn alpha(&self, modes: usize) -> f64 {
        self.dataset_size / modes as f64
    }

    pub fn coupling(&self, modes: usize) -> Coupling {
        Coupling::new(self, modes)
    }

    pub fn with_model_size(mut self, n: f64) -> Self {
        self.model_size = n;
        self
    }

    pub fn with_dataset_size(mut self, p: f64) -> Self {
        self.dataset_size = p;
        self
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_std = sigma;
        self
    }
}

/// Prefactors shared by the mean-field equations.
///
/// `weight` is the mode average (`1/M` proportional, `1` otherwise). The
/// response equations only see `1/P` and `1/N`; the correlation equations
/// see `inv_alpha = 1/(P·weight)` and `inv_nu = 1/(N·weight)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub weight: f64,
    pub inv_p: f64,
    pub inv_n: f64,
    pub noise_var: f64,
}

impl Coupling {
    pub fn new(shape: &SystemShape, modes: usize) -> Self {
        let weight = match shape.limit {
            LimitMode::Proportional => 1.0 / modes as f64,
            LimitMode::NonProportional => 1.0,
        };
        Self {
            weight,
            inv_p: 1.0 / shape.dataset_size,
            inv_n: 1.0 / shape.model_size,
            noise_var: shape.noise_std * shape.noise_std,
        }
    }

    pub fn inv_alpha(&self) -> f64 {
        self.inv_p / self.weight
    }

    pub fn inv_nu(&self) -> f64 {
        self.inv_n / self.weight
    }

    /// Feature scale `s` with `s² = weight`, applied to the design matrix.
    pub fn feature_scale(&self) -> f64 {
        self.weight.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_law_direct_substitution() {
        let s = Spectrum::power_law(2.0, 1.0, 4).unwrap();
        assert_eq!(s.eigenvalues(), &[1.0, 0.5, 1.0 / 3.0, 0.25]);
        for (a, b) in s.target_weights_sq().iter().zip([1.0, 0.5, 1.0 / 3.0, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        let s = Spectrum::power_law(1.5, 1.25, 2).unwrap();
        assert!((s.eigenvalues()[1] - 2f64.powf(-1.25)).abs() < 1e-15);
        assert!((s.target_weights_sq()[1] - 2f64.powf(-0.25)).abs() < 1e-15);
    }

    #[test]
    fn power_law_rejects_bad_exponents() {
        assert_eq!(Spectrum::power_law(1.0, 1.0, 8), Err(SpectrumError::TaskExponent(1.0)));
        assert_eq!(Spectrum::power_law(2.0, 0.0, 8), Err(SpectrumError::DecayExponent(0.0)));
    }

    #[test]
    fn white_spectrum_shapes() {
        let s = Spectrum::white(3).unwrap();
        assert_eq!(s.eigenvalues(), &[1.0; 3]);
        assert_eq!(s.target_weights_sq(), &[1.0; 3]);
        assert_eq!(Spectrum::white(1).unwrap().modes(), 1);
        assert_eq!(Spectrum::white(0), Err(SpectrumError::Empty));
    }

    #[test]
    fn task_fraction_values() {
        let s = Spectrum::white(4).unwrap();
        assert!((s.task_fraction(2).unwrap() - 0.5).abs() < 1e-15);
        assert!((s.task_fraction(4).unwrap() - 1.0).abs() < 1e-15);
        let p = Spectrum::power_law(2.0, 1.0, 2).unwrap();
        assert!((p.task_fraction(1).unwrap() - 0.8).abs() < 1e-15);
        assert!(s.task_fraction(0).is_err());
        assert!(s.task_fraction(5).is_err());
    }

    #[test]
    fn rejects_unsorted_and_nonpositive() {
        assert_eq!(Spectrum::new(vec![1.0, 2.0], vec![1.0, 1.0]), Err(SpectrumError::NotSorted(1)));
        assert!(matches!(
            Spectrum::new(vec![1.0, 0.0], vec![1.0, 1.0]),
            Err(SpectrumError::NonPositive { index: 1, .. })
        ));
        assert!(matches!(
            Spectrum::new(vec![1.0], vec![1.0, 1.0]),
            Err(SpectrumError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn parse_round_trip_with_comments() {
        let text = "# header\n1.0 2.0\n\n0.5 0.25 # trailing\n";
        let s = Spectrum::parse(text).unwrap();
        assert_eq!(s.eigenvalues(), &[1.0, 0.5]);
        assert_eq!(s.target_weights_sq(), &[2.0, 0.25]);
        let back = Spectrum::parse(&s.to_text()).unwrap();
        assert_eq!(back, s);
        assert!(matches!(Spectrum::parse("1.0\n"), Err(SpectrumError::Parse { line: 1, .. })));
    }

    #[test]
    fn coupling_prefactors() {
        let shape = SystemShape::from_ratios(2.0, 4.0, 100, 0.0).unwrap();
        let c = shape.coupling(100);
        assert!((c.inv_alpha() - 0.25).abs() < 1e-15);
        assert!((c.inv_nu() - 0.5).abs() < 1e-15);
        assert!((c.inv_p - 1.0 / 400.0).abs() < 1e-18);
        let np = SystemShape::new(10.0, 20.0, 0.0, LimitMode::NonProportional).unwrap();
        let c = np.coupling(1000);
        assert_eq!(c.weight, 1.0);
        assert!((c.inv_alpha() - 0.05).abs() < 1e-15);
        let inf = SystemShape::new(f64::INFINITY, f64::INFINITY, 0.0, LimitMode::Proportional).unwrap();
        let c = inf.coupling(8);
        assert_eq!(c.inv_alpha(), 0.0);
        assert_eq!(c.inv_nu(), 0.0);
    }

    #[test]
    fn shape_validation() {
        assert!(SystemShape::new(0.0, 1.0, 0.0, LimitMode::Proportional).is_err());
        assert!(SystemShape::new(1.0, 1.0, -1.0, LimitMode::Proportional).is_err());
    }

    proptest::proptest! {
        #[test]
        fn task_fraction_monotone(a in 1.05f64..4.0, b in 0.1f64..3.0, m in 1usize..64) {
            let s = Spectrum::power_law(a, b, m).unwrap();
            let mut prev = 0.0;
            for k in 1..=m {
                let c = s.task_fraction(k).unwrap();
                proptest::prop_assert!(c >= prev - 1e-15);
                prev = c;
            }
            proptest::prop_assert!((prev - 1.0).abs() < 1e-12);
            for (k, (l, w)) in s.iter().enumerate() {
                let want = ((k + 1) as f64).powf(-a);
                proptest::prop_assert!((l * w - want).abs() <= 1e-12 * want);
            }
        }
    }
}
