//! Numerical certification of the network's transform behaviour: paired
//! forward passes on transformed and untransformed inputs, per layer family
//! and end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::EuclideanTransform;
use crate::model::{EqMotion, InteractionGraph};
use crate::numerics::{softmax_temperature, Tensor};

#[derive(Clone, Debug, Serialize)]
pub struct FamilyDeviation {
    pub family: String,
    /// Largest max-abs deviation seen over all trials and layers.
    pub max_deviation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CertificationReport {
    pub trials: usize,
    pub identity_only: bool,
    pub families: Vec<FamilyDeviation>,
}

impl CertificationReport {
    pub fn deviation(&self, family: &str) -> Option<f64> {
        self.families
            .iter()
            .find(|f| f.family == family)
            .map(|f| f.max_deviation)
    }

    /// Families whose deviation exceeds `tolerance` (or is not finite).
    pub fn failures(&self, tolerance: f64) -> Vec<&str> {
        self.families
            .iter()
            .filter(|f| !(f.max_deviation <= tolerance))
            .map(|f| f.family.as_str())
            .collect()
    }
}

struct Tracker(Vec<FamilyDeviation>);

impl Tracker {
    fn record(&mut self, family: &str, deviation: f64) {
        match self.0.iter_mut().find(|f| f.family == family) {
            Some(f) => {
                // NaN must stick, so compare by hand instead of f64::max.
                if !(f.max_deviation >= deviation) {
                    f.max_deviation = deviation;
                }
            }
            None => self.0.push(FamilyDeviation {
                family: family.into(),
                max_deviation: deviation,
            }),
        }
    }
}

fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn random_interactions(m: usize, k: usize, rng: &mut impl Rng) -> Result<InteractionGraph> {
    let mut data = Vec::with_capacity(m * m * k);
    for _ in 0..m * m {
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        data.extend(softmax_temperature(&logits, 1.0)?);
    }
    InteractionGraph::new(Tensor::new(vec![m, m, k], data)?)
}

/// Run `trials` paired passes. Each trial draws a fresh transform (the
/// identity when `identity_only`) and fresh random inputs for every family.
///
/// Families: `init`, `reasoning`, `inner_attention`, `inter_aggregate`,
/// `velocity_injection` (when enabled), `nonlinear`, `pattern_update`,
/// `decode` and `network`. Pattern features and interaction weights are
/// compared for invariance, everything else for equivariance.
pub fn certify(model: &EqMotion, trials: usize, identity_only: bool, seed: u64) -> Result<CertificationReport> {
    let cfg = model.config();
    let (m, n) = (cfg.num_agents, cfg.space_dim);
    let geo_shape = [m, cfg.geo_channels, n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker(Vec::new());
    for _ in 0..trials {
        let tr = if identity_only {
            EuclideanTransform::identity(n)
        } else {
            EuclideanTransform::random(n, true, &mut rng)?
        };
        let x = uniform(&[m, cfg.past_len, n], 2.0, &mut rng);
        let tx = tr.apply(&x)?;

        let (g0, h0) = model.init_features(&x)?;
        let (tg0, th0) = model.init_features(&tx)?;
        // With the DCT the geometric features are built from centred
        // coefficients, so they only rotate.
        let expect = if cfg.use_dct { tr.apply_linear(&g0)? } else { tr.apply(&g0)? };
        t.record("init", tg0.max_abs_diff(&expect).max(th0.max_abs_diff(&h0)));

        let geo = uniform(&geo_shape, 2.0, &mut rng);
        let tgeo = tr.apply(&geo)?;
        let pat = uniform(&[m, cfg.pattern_dim], 1.0, &mut rng);

        let c = model.reason_interactions(&geo, &pat)?;
        let tc = model.reason_interactions(&tgeo, &pat)?;
        t.record("reasoning", tc.weights().max_abs_diff(c.weights()));

        let graph = random_interactions(m, cfg.num_categories, &mut rng)?;
        let speeds = uniform(&[m, cfg.past_len], 1.0, &mut rng).map(f64::abs);
        for layer in 0..cfg.num_layers {
            let pairs: [(&str, Box<dyn Fn(&Tensor) -> Result<Tensor>>); 3] = [
                ("inner_attention", Box::new(|g| model.inner_attention(g, &pat, layer))),
                ("inter_aggregate", Box::new(|g| model.inter_aggregate(g, &pat, &graph, layer))),
                ("nonlinear", Box::new(|g| model.equivariant_nonlinear(g, layer))),
            ];
            for (family, f) in pairs {
                let dev = f(&tgeo)?.max_abs_diff(&tr.apply(&f(&geo)?)?);
                t.record(family, dev);
            }
            let h = model.pattern_update(&geo, &pat, layer)?;
            let th = model.pattern_update(&tgeo, &pat, layer)?;
            t.record("pattern_update", th.max_abs_diff(&h));
        }
        if cfg.use_velocity_injection {
            let v = model.inject_velocity(&geo, &speeds)?;
            let tv = model.inject_velocity(&tgeo, &speeds)?;
            t.record("velocity_injection", tv.max_abs_diff(&tr.apply(&v)?));
        }
        let anchor: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t_anchor = tr.apply(&Tensor::new(vec![1, n], anchor.clone())?)?;
        // DCT coefficients carry no translation; the anchor does.
        let decode_geo = if cfg.use_dct { tr.apply_linear(&geo)? } else { tgeo.clone() };
        for head in 0..cfg.num_heads {
            let y = model.decode_output(&geo, head, &anchor)?;
            let ty = model.decode_output(&decode_geo, head, t_anchor.data())?;
            t.record("decode", ty.max_abs_diff(&tr.apply(&y)?));
        }

        let base = model.predict(&x)?;
        let moved = model.predict(&tx)?;
        let mut dev: f64 = 0.0;
        for (a, b) in base.heads.iter().zip(&moved.heads) {
            let d = b.max_abs_diff(&tr.apply(a)?);
            dev = if d.is_nan() { d } else { dev.max(d) };
        }
        t.record("network", dev);
        t.record(
            "reasoning",
            moved.interactions.weights().max_abs_diff(base.interactions.weights()),
        );
    }
    Ok(CertificationReport {
        trials,
        identity_only,
        families: t.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, VelocityInjection};

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_agents: 3,
            past_len: 4,
            future_len: 3,
            geo_channels: 4,
            pattern_dim: 4,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            use_velocity_injection: true,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_model_certifies() {
        let model = EqMotion::new(cfg(), 1).unwrap();
        let r = certify(&model, 5, false, 2).unwrap();
        assert_eq!(r.families.len(), 9);
        assert!(r.failures(1e-10).is_empty(), "{r:?}");
    }

    #[test]
    fn dct_model_certifies() {
        let model = EqMotion::new(ModelConfig { use_dct: true, ..cfg() }, 4).unwrap();
        let r = certify(&model, 5, false, 3).unwrap();
        assert!(r.failures(1e-10).is_empty(), "{r:?}");
    }

    #[test]
    fn identity_mode_is_exact() {
        let model = EqMotion::new(cfg(), 1).unwrap();
        let r = certify(&model, 1, true, 2).unwrap();
        assert!(r.families.iter().all(|f| f.max_deviation == 0.0), "{r:?}");
    }

    #[test]
    fn additive_injection_is_flagged() {
        let cfg = ModelConfig {
            velocity_injection_mode: VelocityInjection::Additive,
            ..cfg()
        };
        let model = EqMotion::new(cfg, 1).unwrap();
        let r = certify(&model, 3, false, 2).unwrap();
        let failed = r.failures(1e-8);
        assert!(failed.contains(&"velocity_injection"), "{failed:?}");
        assert!(failed.contains(&"network"), "{failed:?}");
        assert!(!failed.contains(&"inner_attention"));
    }
}
