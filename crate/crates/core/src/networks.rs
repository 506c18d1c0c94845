//! The coupled encoder `F`, decoder `G` and distance network `D`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{Activation, MlpNetwork, Mode};
use crate::rng::SplitRng;

/// Gradient norms below this are treated as degenerate.
pub const GRADIENT_FLOOR: f64 = 1e-8;

/// A scalar field over points whose zero set is the target manifold.
pub trait DistanceField {
    fn dim(&self) -> usize;
    fn distance(&self, point: &[f64]) -> Result<f64>;
    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>>;
}

pub trait Decoder {
    fn latent_dim(&self) -> usize;
    fn ambient_dim(&self) -> usize;
    fn decode(&self, z: &[f64]) -> Result<Vec<f64>>;

    fn decode_batch(&self, z: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(z.rows(), self.ambient_dim());
        for i in 0..z.rows() {
            let x = self.decode(z.row(i))?;
            out.row_mut(i).copy_from_slice(&x);
        }
        Ok(out)
    }
}

pub trait Encoder {
    fn encode(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// `grad D / |grad D|`, or [`Error::DegenerateGradient`] when the norm is
/// below [`GRADIENT_FLOOR`].
pub fn normalized_descent_direction<F: DistanceField + ?Sized>(field: &F, point: &[f64]) -> Result<Vec<f64>> {
    let g = field.gradient(point)?;
    normalize_gradient(g)
}

/// One full projection step `p - D(p) grad D / |grad D|`.
pub fn shift<F: DistanceField + ?Sized>(field: &F, point: &[f64]) -> Result<Vec<f64>> {
    let d = field.distance(point)?;
    let dir = normalized_descent_direction(field, point)?;
    Ok(point.iter().zip(&dir).map(|(p, u)| p - d * u).collect())
}

pub fn normalize_gradient(mut g: Vec<f64>) -> Result<Vec<f64>> {
    let n = linalg::norm(&g);
    if !(n >= GRADIENT_FLOOR) {
        return Err(Error::DegenerateGradient { norm: n });
    }
    g.iter_mut().for_each(|v| *v /= n);
    Ok(g)
}

/// A single-output network read as a distance field.
impl DistanceField for MlpNetwork {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn distance(&self, point: &[f64]) -> Result<f64> {
        Ok(self.predict(point)?[0])
    }

    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.input_vjp(point, &[1.0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    /// `D` measures distance to the decoded manifold in data space.
    Ambient,
    /// `D` measures distance to the encoded clean set in latent space.
    Latent,
}

impl Space {
    pub fn name(self) -> &'static str {
        match self {
            Space::Ambient => "ambient",
            Space::Latent => "latent",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "ambient" => Some(Space::Ambient),
            "latent" => Some(Space::Latent),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub dropout: Vec<f64>,
}

impl NetSpec {
    /// Hidden layers share one activation and dropout rate; the output layer
    /// has its own activation and no dropout.
    pub fn mlp(sizes: &[usize], hidden: Activation, output: Activation, hidden_dropout: f64) -> Self {
        let n = sizes.len().saturating_sub(1);
        let mut activations = vec![hidden; n];
        let mut dropout = vec![hidden_dropout; n];
        if n > 0 {
            activations[n - 1] = output;
            dropout[n - 1] = 0.0;
        }
        Self {
            sizes: sizes.to_vec(),
            activations,
            dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes.first().copied().unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.sizes.last().copied().unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn validate(&self, name: &str) -> Result<()> {
        let n = self.sizes.len();
        if n < 2 || self.sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("{name}: need at least two nonzero widths")));
        }
        if self.activations.len() != n - 1 || self.dropout.len() != n - 1 {
            return Err(Error::InvalidConfig(format!(
                "{name}: {} layers but {} activations and {} dropout rates",
                n - 1,
                self.activations.len(),
                self.dropout.len()
            )));
        }
        Ok(())
    }

    pub fn build(&self, rng: &mut SplitRng) -> Result<MlpNetwork> {
        MlpNetwork::he_init(&self.sizes, &self.activations, &self.dropout, rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub encoder: NetSpec,
    pub decoder: NetSpec,
    pub distance: NetSpec,
    pub latent_dim: usize,
}

impl ArchitectureSpec {
    /// MLP triple for the three-dimensional circle benchmark (latent width 8).
    /// Used as an ambient model, the distance network reads the code `F(x)`.
    pub fn synthetic() -> Self {
        Self {
            encoder: NetSpec::mlp(&[3, 64, 32, 16, 8], Activation::Relu, Activation::Identity, 0.0),
            decoder: NetSpec::mlp(&[8, 16, 32, 64, 3], Activation::Relu, Activation::Identity, 0.0),
            distance: NetSpec::mlp(&[8, 64, 32, 16, 1], Activation::Relu, Activation::Identity, 0.2),
            latent_dim: 8,
        }
    }

    /// Desk-scale MNIST: MLP autoencoder with an 18-wide latent code and a
    /// latent distance network.
    pub fn mnist_desk() -> Self {
        Self {
            encoder: NetSpec::mlp(&[784, 256, 64, 18], Activation::Relu, Activation::Identity, 0.0),
            decoder: NetSpec::mlp(&[18, 64, 256, 784], Activation::Relu, Activation::Sigmoid, 0.0),
            distance: NetSpec::mlp(&[18, 100, 50, 20, 1], Activation::Relu, Activation::Identity, 0.2),
            latent_dim: 18,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn validate(&self, space: Space) -> Result<()> {
        self.encoder.validate("encoder")?;
        self.decoder.validate("decoder")?;
        self.distance.validate("distance")?;
        let ambient = self.ambient_dim();
        let checks = [
            ("encoder output", self.latent_dim, self.encoder.output_dim()),
            ("decoder input", self.latent_dim, self.decoder.input_dim()),
            ("decoder output", ambient, self.decoder.output_dim()),
            ("distance output", 1, self.distance.output_dim()),
            (
                "distance input",
                distance_input(space, ambient, self.latent_dim, self.distance.input_dim()),
                self.distance.input_dim(),
            ),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::InvalidConfig(format!("{what}: expected width {expected}, got {got}")));
            }
        }
        Ok(())
    }
}

/// Expected distance-network width. Ambient models may read either the point
/// or its code; latent models read codes.
fn distance_input(space: Space, ambient: usize, latent: usize, got: usize) -> usize {
    match space {
        Space::Ambient if got == latent => latent,
        Space::Ambient => ambient,
        Space::Latent => latent,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldModel {
    pub encoder: MlpNetwork,
    pub decoder: MlpNetwork,
    pub distance_net: MlpNetwork,
    pub sigma_d: f64,
    pub space: Space,
}

impl ManifoldModel {
    /// Seeded initialization. The three networks draw from independent
    /// children of the seed, in encoder, decoder, distance order.
    pub fn build(spec: &ArchitectureSpec, space: Space, sigma_d: f64, seed: u64) -> Result<Self> {
        spec.validate(space)?;
        if !(sigma_d > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma_d must be positive, got {sigma_d}")));
        }
        let mut root = SplitRng::new(seed);
        let encoder = spec.encoder.build(&mut root.split())?;
        let decoder = spec.decoder.build(&mut root.split())?;
        let distance_net = spec.distance.build(&mut root.split())?;
        Ok(Self {
            encoder,
            decoder,
            distance_net,
            sigma_d,
            space,
        })
    }

    /// Assembles a model from existing networks, checking the width contract.
    pub fn from_parts(encoder: MlpNetwork, decoder: MlpNetwork, distance_net: MlpNetwork, sigma_d: f64, space: Space) -> Result<Self> {
        let latent = encoder.output_dim();
        let ambient = encoder.input_dim();
        let checks = [
            ("decoder input", latent, decoder.input_dim()),
            ("decoder output", ambient, decoder.output_dim()),
            (
                "distance input",
                distance_input(space, ambient, latent, distance_net.input_dim()),
                distance_net.input_dim(),
            ),
            ("distance output", 1, distance_net.output_dim()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::InvalidConfig(format!("{what}: expected width {expected}, got {got}")));
            }
        }
        Ok(Self {
            encoder,
            decoder,
            distance_net,
            sigma_d,
            space,
        })
    }

    pub fn ambient_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// An ambient model whose distance network reads the code, so that
    /// `D(x) = D_net(F(x))`. A code as wide as the point is read as the point.
    pub fn distance_reads_code(&self) -> bool {
        self.space == Space::Ambient && self.distance_net.input_dim() != self.ambient_dim()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.encoder.set_mode(mode);
        self.decoder.set_mode(mode);
        self.distance_net.set_mode(mode);
    }

    /// `G(F(x))`, the single-pass autoencoder restoration.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decoder.predict(&self.encoder.predict(x)?)
    }

    pub fn encode_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.encoder.predict_batch(x)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count() + self.distance_net.param_count()
    }

    /// Encoder, decoder and distance parameters, concatenated.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.encoder.params_flat();
        p.extend(self.decoder.params_flat());
        p.extend(self.distance_net.params_flat());
        p
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Dimension {
                context: "model parameters",
                expected: self.param_count(),
                got: p.len(),
            });
        }
        let a = self.encoder.param_count();
        let b = a + self.decoder.param_count();
        self.encoder.set_params_flat(&p[..a])?;
        self.decoder.set_params_flat(&p[a..b])?;
        self.distance_net.set_params_flat(&p[b..])
    }
}

impl DistanceField for ManifoldModel {
    fn dim(&self) -> usize {
        match self.space {
            Space::Ambient => self.ambient_dim(),
            Space::Latent => self.latent_dim(),
        }
    }

    /// Raw network output; negative values are possible and not clamped.
    fn distance(&self, point: &[f64]) -> Result<f64> {
        if self.distance_reads_code() {
            return self.distance_net.distance(&self.encoder.predict(point)?);
        }
        self.distance_net.distance(point)
    }

    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        if self.distance_reads_code() {
            let g = self.distance_net.gradient(&self.encoder.predict(point)?)?;
            return self.encoder.input_vjp(point, &g);
        }
        self.distance_net.gradient(point)
    }
}

impl Decoder for ManifoldModel {
    fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    fn ambient_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.predict(z)
    }

    fn decode_batch(&self, z: &Matrix) -> Result<Matrix> {
        self.decoder.predict_batch(z)
    }
}

impl Encoder for ManifoldModel {
    fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.predict(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_check, pattern_signature, DenseLayer, Probe};

    #[test]
    fn synthetic_encoder_parameter_count() {
        let spec = ArchitectureSpec::synthetic();
        assert_eq!(spec.encoder.param_count(), 3 * 64 + 64 + 64 * 32 + 32 + 32 * 16 + 16 + 16 * 8 + 8);
        assert_eq!(spec.encoder.param_count(), 3000);
        let model = ManifoldModel::build(&spec, Space::Ambient, 0.2, 1).unwrap();
        assert_eq!(model.encoder.param_count(), 3000);
    }

    #[test]
    fn mnist_distance_net_reads_latent_codes() {
        let spec = ArchitectureSpec::mnist_desk();
        assert_eq!(spec.distance.sizes, vec![18, 100, 50, 20, 1]);
        let model = ManifoldModel::build(&spec, Space::Latent, 0.4, 3).unwrap();
        assert_eq!(model.dim(), 18);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let spec = ArchitectureSpec::synthetic();
        let a = ManifoldModel::build(&spec, Space::Ambient, 0.2, 42).unwrap();
        let b = ManifoldModel::build(&spec, Space::Ambient, 0.2, 42).unwrap();
        let c = ManifoldModel::build(&spec, Space::Ambient, 0.2, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn incomposable_spec_is_rejected() {
        let mut spec = ArchitectureSpec::synthetic();
        spec.decoder.sizes[0] = 7;
        assert!(ManifoldModel::build(&spec, Space::Ambient, 0.2, 0).is_err());
        let mut spec = ArchitectureSpec::synthetic();
        spec.distance.sizes[0] = 5;
        assert!(spec.validate(Space::Ambient).is_err());
        // a point-reading distance net cannot serve a latent model
        spec.distance.sizes[0] = 3;
        assert!(spec.validate(Space::Ambient).is_ok());
        assert!(spec.validate(Space::Latent).is_err());
    }

    #[test]
    fn synthetic_distance_reads_the_code() {
        let model = ManifoldModel::build(&ArchitectureSpec::synthetic(), Space::Ambient, 0.2, 2).unwrap();
        assert!(model.distance_reads_code());
        assert_eq!(model.dim(), 3);
        let p = [0.4, -1.1, 0.3];
        let z = model.encoder.predict(&p).unwrap();
        assert_eq!(model.distance(&p).unwrap(), model.distance_net.distance(&z).unwrap());
        let latent = ManifoldModel::build(&ArchitectureSpec::synthetic(), Space::Latent, 0.2, 2).unwrap();
        assert!(!latent.distance_reads_code());
        assert_eq!(latent.dim(), 8);
    }

    #[test]
    fn untrained_distance_is_finite() {
        let model = ManifoldModel::build(&ArchitectureSpec::synthetic(), Space::Ambient, 0.2, 5).unwrap();
        for p in [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-3.0, 2.0, 9.0]] {
            assert!(model.distance(&p).unwrap().is_finite());
        }
        assert!(model.distance(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn linear_distance_gradient_is_weight_vector() {
        let w = [0.25, -1.5, 2.0];
        let layer = DenseLayer::new(Matrix::from_vec(1, 3, w.to_vec()).unwrap(), vec![0.7], Activation::Identity, 0.0).unwrap();
        let net = MlpNetwork::new(vec![layer]).unwrap();
        assert_eq!(net.gradient(&[3.0, -1.0, 0.5]).unwrap(), w.to_vec());
    }

    #[test]
    fn distance_gradient_matches_finite_differences() {
        let model = ManifoldModel::build(&ArchitectureSpec::synthetic(), Space::Ambient, 0.2, 17).unwrap();
        let mut rng = SplitRng::new(4);
        for _ in 0..5 {
            let p: Vec<f64> = (0..3).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
            let g = model.gradient(&p).unwrap();
            let report = finite_diff_check(
                &p,
                &g,
                |x| {
                    let z = model.encoder.predict(x).unwrap();
                    let mut bits = model.encoder.activation_pattern(x).unwrap();
                    bits.extend(model.distance_net.activation_pattern(&z).unwrap());
                    Probe {
                        value: model.distance(x).unwrap(),
                        signature: pattern_signature(bits),
                    }
                },
                1e-5,
                1e-4,
            );
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn normalized_direction_cases() {
        struct Fixed(Vec<f64>);
        impl DistanceField for Fixed {
            fn dim(&self) -> usize {
                self.0.len()
            }
            fn distance(&self, _: &[f64]) -> Result<f64> {
                Ok(1.0)
            }
            fn gradient(&self, _: &[f64]) -> Result<Vec<f64>> {
                Ok(self.0.clone())
            }
        }
        let d = normalized_descent_direction(&Fixed(vec![3.0, 4.0, 0.0]), &[0.0; 3]).unwrap();
        assert_eq!(d, vec![0.6, 0.8, 0.0]);
        let d = normalized_descent_direction(&Fixed(vec![1e-3, -7.0, 2.5]), &[0.0; 3]).unwrap();
        assert!((linalg::norm(&d) - 1.0).abs() < 1e-12);
        assert!(matches!(
            normalized_descent_direction(&Fixed(vec![0.0; 3]), &[0.0; 3]),
            Err(Error::DegenerateGradient { .. })
        ));
    }
}
