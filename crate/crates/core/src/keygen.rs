//! Secret-to-vector derivation: HKDF-SHA256, byte normalization into
//! [-1, 1], then a frozen seed-initialized mapping network.

use hkdf::Hkdf;
use ndarray::Array2;
use sha2::Sha256;

use crate::error::{contract_err, dim_err, Result};
use crate::numerics::{Activation, Mlp, MlpSpec, Real, Rng};

pub const KDF_SALT: &[u8] = b"iFADIT-v1";
pub const KDF_INFO: &[u8] = b"sif-key";
/// Environment variable consulted when no secret is passed on the command line.
pub const SECRET_ENV: &str = "IFADIT_SECRET";

/// A user secret of arbitrary non-zero length. Never persisted, never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(Vec<u8>);

impl std::fmt::Debug for Secret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Secret(<{} bytes redacted>)", self.0.len())
    }
}

impl Secret {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return contract_err("secret must not be empty");
        }
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// Random secret of `len` bytes.
    pub fn random(rng: &mut Rng, len: usize) -> Self {
        let mut b = vec![0u8; len.max(1)];
        rng.fill_bytes(&mut b);
        Self(b)
    }

    /// Copy with bit `bit` (counted from the first byte's LSB) flipped.
    pub fn flip_bit(&self, bit: usize) -> Self {
        let mut b = self.0.clone();
        let n = b.len();
        b[(bit / 8) % n] ^= 1 << (bit % 8);
        Self(b)
    }

    /// The flag value when given, else [`SECRET_ENV`].
    pub fn from_flag_or_env(flag: Option<&str>) -> Option<Result<Self>> {
        match flag {
            Some(s) => Some(Self::new(s.as_bytes())),
            None => std::env::var_os(SECRET_ENV).map(|v| Self::new(v.to_string_lossy().as_bytes())),
        }
    }
}

/// HKDF-SHA256 extract-and-expand with the fixed salt and info strings.
pub fn kdf(secret: &Secret, out_len: usize) -> Result<Vec<u8>> {
    if out_len == 0 {
        return contract_err("kdf output length must be at least 1");
    }
    let hk = Hkdf::<Sha256>::new(Some(KDF_SALT), secret.as_bytes());
    let mut okm = vec![0u8; out_len];
    if hk.expand(KDF_INFO, &mut okm).is_err() {
        return contract_err(format!("kdf output length {out_len} exceeds 255 hash blocks"));
    }
    Ok(okm)
}

/// Maps each byte `b` to `2b/255 - 1`.
pub fn norm<T: Real>(bytes: &[u8]) -> Vec<T> {
    bytes.iter().map(|&b| T::of(2.0 * b as f64 / 255.0 - 1.0)).collect()
}

/// Conditioning vector `k` fed to every coupling block.
#[derive(Debug, Clone, PartialEq)]
pub struct SecretVector<T>(Vec<T>);

impl<T: Real> SecretVector<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_row(&self) -> Array2<T> {
        Array2::from_shape_vec((1, self.0.len()), self.0.clone()).expect("row shape")
    }
}

/// Frozen `d_k -> d_k -> d_k` tanh mapping network. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyGen<T> {
    mapping: Mlp<T>,
}

impl<T: Real> KeyGen<T> {
    pub fn new(d_k: usize, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(vec![d_k, d_k, d_k], Activation::Tanh, Activation::None)?;
        let mut mapping = Mlp::new(spec, &mut Rng::new(seed).derive("key-mapping"));
        mapping.frozen = true;
        Ok(Self { mapping })
    }

    pub fn from_mapping(mut mapping: Mlp<T>) -> Result<Self> {
        let s = mapping.spec();
        if s.input_dim() != s.output_dim() {
            return dim_err("key mapping must be square");
        }
        mapping.frozen = true;
        Ok(Self { mapping })
    }

    pub fn d_k(&self) -> usize {
        self.mapping.spec().input_dim()
    }

    pub fn mapping(&self) -> &Mlp<T> {
        &self.mapping
    }

    pub(crate) fn mapping_mut(&mut self) -> &mut Mlp<T> {
        &mut self.mapping
    }

    pub fn cast<U: Real>(&self) -> KeyGen<U> {
        KeyGen { mapping: self.mapping.cast() }
    }

    pub fn mapping_f(&self, v: &[T]) -> Result<SecretVector<T>> {
        if v.len() != self.d_k() {
            return dim_err(format!("mapping expects {} entries, got {}", self.d_k(), v.len()));
        }
        let row = Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape");
        let out = self.mapping.forward(&row)?;
        Ok(SecretVector(out.into_raw_vec_and_offset().0))
    }

    /// `mapping_f(norm(kdf(s, d_k)))`.
    pub fn keygen(&self, s: &Secret) -> Result<SecretVector<T>> {
        let bytes = kdf(s, self.d_k())?;
        self.mapping_f(&norm::<T>(&bytes))
    }

    /// Stacks one key per secret into a `len x d_k` matrix.
    pub fn keygen_rows(&self, secrets: &[&Secret]) -> Result<Array2<T>> {
        let mut out = Array2::zeros((secrets.len(), self.d_k()));
        for (i, s) in secrets.iter().enumerate() {
            let k = self.keygen(s)?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(k.as_slice()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;

    fn differing_bit_fraction(a: &[u8], b: &[u8]) -> f64 {
        let bits: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
        bits as f64 / (8 * a.len()) as f64
    }

    #[test]
    fn rfc5869_case_1() {
        let ikm = hex::decode("0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b").unwrap();
        let salt = hex::decode("000102030405060708090a0b0c").unwrap();
        let info = hex::decode("f0f1f2f3f4f5f6f7f8f9").unwrap();
        let hk = Hkdf::<Sha256>::new(Some(&salt), &ikm);
        let mut okm = [0u8; 42];
        hk.expand(&info, &mut okm).unwrap();
        assert_eq!(
            hex::encode(okm),
            "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf34007208d5b887185865"
        );
    }

    #[test]
    fn kdf_is_deterministic_and_sized() {
        let s = Secret::new("alice").unwrap();
        assert_eq!(kdf(&s, 64).unwrap(), kdf(&s, 64).unwrap());
        assert_eq!(kdf(&s, 64).unwrap().len(), 64);
        assert_eq!(kdf(&s, 1).unwrap().len(), 1);
        assert!(kdf(&s, 0).is_err());
    }

    #[test]
    fn empty_secret_rejected() {
        assert!(matches!(Secret::new(""), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn secret_debug_is_redacted() {
        let s = Secret::new("hunter2").unwrap();
        assert!(!format!("{s:?}").contains("hunter2"));
    }

    #[test]
    fn neighbouring_secrets_avalanche() {
        let a = kdf(&Secret::new("alice").unwrap(), 64).unwrap();
        let b = kdf(&Secret::new("alicf").unwrap(), 64).unwrap();
        let f = differing_bit_fraction(&a, &b);
        assert!((0.35..0.65).contains(&f), "{f}");

        let mut rng = Rng::new(9);
        let mut total = 0.0;
        for i in 0..1000 {
            let base = format!("user-{i}-{}", rng.next_u64());
            let mut other = base.clone().into_bytes();
            let last = other.len() - 1;
            other[last] = other[last].wrapping_add(1);
            let ka = kdf(&Secret::new(base).unwrap(), 64).unwrap();
            let kb = kdf(&Secret::new(other).unwrap(), 64).unwrap();
            total += differing_bit_fraction(&ka, &kb);
        }
        let mean = total / 1000.0;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn norm_endpoints() {
        let v = norm::<f64>(&[0, 255, 51]);
        assert_eq!(v[0], -1.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] + 0.6).abs() < 1e-15);
    }

    #[test]
    fn keygen_shape_and_determinism() {
        let kg = KeyGen::<f64>::new(64, 7).unwrap();
        let s = Secret::new("correct horse").unwrap();
        let k1 = kg.keygen(&s).unwrap();
        assert_eq!(k1.len(), 64);
        assert_eq!(k1, kg.keygen(&s).unwrap());
        assert_eq!(k1, KeyGen::<f64>::new(64, 7).unwrap().keygen(&s).unwrap());
        assert!(kg.mapping_f(&[0.0; 3]).is_err());
    }

    #[test]
    fn mapping_separates_distinct_inputs() {
        let kg = KeyGen::<f64>::new(64, 7).unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let a = Secret::random(&mut rng, 16);
            let b = Secret::random(&mut rng, 16);
            let va = norm::<f64>(&kdf(&a, 64).unwrap());
            let vb = norm::<f64>(&kdf(&b, 64).unwrap());
            let ka = kg.mapping_f(&va).unwrap();
            let kb = kg.mapping_f(&vb).unwrap();
            assert!(cosine(ka.as_slice(), kb.as_slice()).unwrap() < 0.99);
        }
    }

    #[test]
    fn one_bit_flip_decorrelates_keys() {
        let kg = KeyGen::<f64>::new(64, 7).unwrap();
        let mut rng = Rng::new(2);
        let mut low = 0;
        for i in 0..1000 {
            let s = Secret::random(&mut rng, 12);
            let t = s.flip_bit(i % 96);
            let c = cosine(kg.keygen(&s).unwrap().as_slice(), kg.keygen(&t).unwrap().as_slice()).unwrap();
            if c < 0.9 {
                low += 1;
            }
        }
        assert!(low >= 950, "{low}");
    }
}
