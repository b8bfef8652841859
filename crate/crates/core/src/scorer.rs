//! KGE score functions: TransE (L1/L2), ComplEx and RotatE.
//!
//! `score` returns each function's natural value (a distance for TransE and
//! RotatE, a similarity for ComplEx). `energy` is the lower-is-better form
//! fed to the margin loss; `plausibility` is its negation and is what the
//! evaluator ranks by.
//!
//! Complex-valued functions read a `d`-wide row as `d/2` real parts followed
//! by `d/2` imaginary parts. RotatE relation rows are unconstrained complex
//! numbers projected onto the unit circle inside the scorer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId};
use crate::store::EmbeddingView;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFunction {
    #[default]
    #[serde(rename = "transe_l1")]
    TransEL1,
    #[serde(rename = "transe_l2")]
    TransEL2,
    #[serde(rename = "complex")]
    ComplEx,
    #[serde(rename = "rotate")]
    RotatE,
}

impl ScoreFunction {
    pub const ALL: [ScoreFunction; 4] = [
        ScoreFunction::TransEL1,
        ScoreFunction::TransEL2,
        ScoreFunction::ComplEx,
        ScoreFunction::RotatE,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreFunction::TransEL1 => "transe_l1",
            ScoreFunction::TransEL2 => "transe_l2",
            ScoreFunction::ComplEx => "complex",
            ScoreFunction::RotatE => "rotate",
        }
    }

    pub fn is_complex(self) -> bool {
        matches!(self, ScoreFunction::ComplEx | ScoreFunction::RotatE)
    }

    /// True when a larger `score` means a more plausible triple.
    pub fn higher_is_better(self) -> bool {
        matches!(self, ScoreFunction::ComplEx)
    }

    pub fn check_dim(self, dim: usize) -> Result<()> {
        if self.is_complex() && !dim.is_multiple_of(2) {
            return Err(Error::OddDimension(self.name(), dim));
        }
        Ok(())
    }

    pub fn score(self, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
        match self {
            ScoreFunction::TransEL1 => h.iter().zip(r).zip(t).map(|((h, r), t)| (h + r - t).abs()).sum(),
            ScoreFunction::TransEL2 => h
                .iter()
                .zip(r)
                .zip(t)
                .map(|((h, r), t)| {
                    let x = h + r - t;
                    x * x
                })
                .sum::<f64>()
                .sqrt(),
            ScoreFunction::ComplEx => {
                let (hr_re, hr_im) = complex_product(h, r);
                complex_real_dot(&hr_re, &hr_im, t)
            }
            ScoreFunction::RotatE => {
                let (re, im) = rotate(h, r);
                complex_distance(&re, &im, t)
            }
        }
    }

    pub fn energy(self, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
        let s = self.score(h, r, t);
        if self.higher_is_better() {
            -s
        } else {
            s
        }
    }

    pub fn plausibility(self, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
        -self.energy(h, r, t)
    }

    /// Adds `scale · ∂energy/∂{h,r,t}` into the gradient buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn energy_grad(
        self,
        h: &[f64],
        r: &[f64],
        t: &[f64],
        scale: f64,
        gh: &mut [f64],
        gr: &mut [f64],
        gt: &mut [f64],
    ) {
        match self {
            ScoreFunction::TransEL1 => {
                for j in 0..h.len() {
                    let x = h[j] + r[j] - t[j];
                    let s = if x > 0.0 {
                        scale
                    } else if x < 0.0 {
                        -scale
                    } else {
                        0.0
                    };
                    gh[j] += s;
                    gr[j] += s;
                    gt[j] -= s;
                }
            }
            ScoreFunction::TransEL2 => {
                let norm = self.score(h, r, t);
                if norm == 0.0 {
                    return;
                }
                for j in 0..h.len() {
                    let g = scale * (h[j] + r[j] - t[j]) / norm;
                    gh[j] += g;
                    gr[j] += g;
                    gt[j] -= g;
                }
            }
            ScoreFunction::ComplEx => {
                // energy = -Σ (ac - bd) e + (ad + bc) f
                let k = h.len() / 2;
                let s = -scale;
                for j in 0..k {
                    let (a, b) = (h[j], h[j + k]);
                    let (c, d) = (r[j], r[j + k]);
                    let (e, f) = (t[j], t[j + k]);
                    gh[j] += s * (c * e + d * f);
                    gh[j + k] += s * (c * f - d * e);
                    gr[j] += s * (a * e + b * f);
                    gr[j + k] += s * (a * f - b * e);
                    gt[j] += s * (a * c - b * d);
                    gt[j + k] += s * (a * d + b * c);
                }
            }
            ScoreFunction::RotatE => {
                let k = h.len() / 2;
                for j in 0..k {
                    let (a, b) = (h[j], h[j + k]);
                    let (c, d) = (r[j], r[j + k]);
                    let (e, f) = (t[j], t[j + k]);
                    let m = (c * c + d * d).sqrt();
                    let (u, v) = if m == 0.0 { (1.0, 0.0) } else { (c / m, d / m) };
                    let p = a * u - b * v - e;
                    let q = a * v + b * u - f;
                    let dist = (p * p + q * q).sqrt();
                    if dist == 0.0 {
                        continue;
                    }
                    let (gp, gq) = (scale * p / dist, scale * q / dist);
                    gh[j] += gp * u + gq * v;
                    gh[j + k] += -gp * v + gq * u;
                    gt[j] -= gp;
                    gt[j + k] -= gq;
                    if m > 0.0 {
                        let gu = gp * a + gq * b;
                        let gv = -gp * b + gq * a;
                        let m3 = m * m * m;
                        gr[j] += d * (gu * d - gv * c) / m3;
                        gr[j + k] += c * (gv * c - gu * d) / m3;
                    }
                }
            }
        }
    }
}

impl fmt::Display for ScoreFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreFunction::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scorer {s:?}")))
    }
}

fn complex_product(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = x.len() / 2;
    (0..k)
        .map(|j| {
            let (a, b, c, d) = (x[j], x[j + k], y[j], y[j + k]);
            (a * c - b * d, a * d + b * c)
        })
        .unzip()
}

/// `Σ_j Re(z_j · conj(t_j))`
fn complex_real_dot(re: &[f64], im: &[f64], t: &[f64]) -> f64 {
    let k = re.len();
    (0..k).map(|j| re[j] * t[j] + im[j] * t[j + k]).sum()
}

/// `Σ_j |z_j − t_j|`
fn complex_distance(re: &[f64], im: &[f64], t: &[f64]) -> f64 {
    let k = re.len();
    (0..k)
        .map(|j| {
            let p = re[j] - t[j];
            let q = im[j] - t[j + k];
            (p * p + q * q).sqrt()
        })
        .sum()
}

fn unit(c: f64, d: f64) -> (f64, f64) {
    let m = (c * c + d * d).sqrt();
    if m == 0.0 {
        (1.0, 0.0)
    } else {
        (c / m, d / m)
    }
}

/// `h ∘ r̂` with `r̂` the unit-modulus projection of `r`.
fn rotate(h: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = h.len() / 2;
    (0..k)
        .map(|j| {
            let (a, b) = (h[j], h[j + k]);
            let (u, v) = unit(r[j], r[j + k]);
            (a * u - b * v, a * v + b * u)
        })
        .unzip()
}

fn check_entity(view: &EmbeddingView, id: EntityId) -> Result<()> {
    if id >= view.num_entities() {
        return Err(Error::UnknownId {
            kind: "entity",
            id,
            size: view.num_entities(),
        });
    }
    Ok(())
}

fn check_relation(view: &EmbeddingView, id: RelationId) -> Result<()> {
    if id >= view.num_relations() {
        return Err(Error::UnknownId {
            kind: "relation",
            id,
            size: view.num_relations(),
        });
    }
    Ok(())
}

/// Natural-orientation score of one triple.
pub fn score(view: &EmbeddingView, h: EntityId, r: RelationId, t: EntityId, f: ScoreFunction) -> Result<f64> {
    f.check_dim(view.dim())?;
    check_entity(view, h)?;
    check_entity(view, t)?;
    check_relation(view, r)?;
    Ok(f.score(view.entities.row(h), view.relations.row(r), view.entities.row(t)))
}

/// `out[t] = score(h, r, t)` for every entity `t`.
pub fn score_against_all_tails(view: &EmbeddingView, h: EntityId, r: RelationId, f: ScoreFunction) -> Result<Vec<f64>> {
    f.check_dim(view.dim())?;
    check_entity(view, h)?;
    check_relation(view, r)?;
    let (hv, rv) = (view.entities.row(h), view.relations.row(r));
    let ents = &view.entities;
    let out = match f {
        ScoreFunction::TransEL1 | ScoreFunction::TransEL2 => {
            let hr: Vec<f64> = hv.iter().zip(rv).map(|(a, b)| a + b).collect();
            (0..ents.rows())
                .map(|t| {
                    let tv = ents.row(t);
                    if f == ScoreFunction::TransEL1 {
                        hr.iter().zip(tv).map(|(x, y)| (x - y).abs()).sum()
                    } else {
                        hr.iter().zip(tv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                    }
                })
                .collect()
        }
        ScoreFunction::ComplEx => {
            let (re, im) = complex_product(hv, rv);
            (0..ents.rows()).map(|t| complex_real_dot(&re, &im, ents.row(t))).collect()
        }
        ScoreFunction::RotatE => {
            let (re, im) = rotate(hv, rv);
            (0..ents.rows()).map(|t| complex_distance(&re, &im, ents.row(t))).collect()
        }
    };
    Ok(out)
}

/// `out[h] = score(h, r, t)` for every entity `h`.
pub fn score_against_all_heads(view: &EmbeddingView, r: RelationId, t: EntityId, f: ScoreFunction) -> Result<Vec<f64>> {
    f.check_dim(view.dim())?;
    check_entity(view, t)?;
    check_relation(view, r)?;
    let (rv, tv) = (view.relations.row(r), view.entities.row(t));
    let ents = &view.entities;
    let k = rv.len() / 2;
    let out = match f {
        ScoreFunction::TransEL1 | ScoreFunction::TransEL2 => {
            let tr: Vec<f64> = tv.iter().zip(rv).map(|(a, b)| a - b).collect();
            (0..ents.rows())
                .map(|h| {
                    let hv = ents.row(h);
                    if f == ScoreFunction::TransEL1 {
                        hv.iter().zip(&tr).map(|(x, y)| (x - y).abs()).sum()
                    } else {
                        hv.iter().zip(&tr).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                    }
                })
                .collect()
        }
        ScoreFunction::ComplEx => {
            // Re(h r conj t) = Σ a (ce + df) + b (cf − de)
            let mut w = vec![0.0; 2 * k];
            for j in 0..k {
                let (c, d, e, g) = (rv[j], rv[j + k], tv[j], tv[j + k]);
                w[j] = c * e + d * g;
                w[j + k] = c * g - d * e;
            }
            (0..ents.rows())
                .map(|h| ents.row(h).iter().zip(&w).map(|(x, y)| x * y).sum())
                .collect()
        }
        ScoreFunction::RotatE => {
            // |h r̂ − t| = |h − t conj(r̂)|
            let mut re = vec![0.0; k];
            let mut im = vec![0.0; k];
            for j in 0..k {
                let (u, v) = unit(rv[j], rv[j + k]);
                let (e, g) = (tv[j], tv[j + k]);
                re[j] = e * u + g * v;
                im[j] = g * u - e * v;
            }
            let mut target = re;
            target.extend_from_slice(&im);
            (0..ents.rows())
                .map(|h| {
                    let hv = ents.row(h);
                    (0..k)
                        .map(|j| {
                            let p = hv[j] - target[j];
                            let q = hv[j + k] - target[j + k];
                            (p * p + q * q).sqrt()
                        })
                        .sum()
                })
                .collect()
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn view(ents: Vec<f64>, rels: Vec<f64>, dim: usize) -> EmbeddingView {
        EmbeddingView {
            entities: Matrix::from_vec(ents.len() / dim, dim, ents).unwrap(),
            relations: Matrix::from_vec(rels.len() / dim, dim, rels).unwrap(),
        }
    }

    #[test]
    fn transe_examples() {
        let f = ScoreFunction::TransEL1;
        assert_eq!(f.score(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]), 0.0);
        assert_eq!(f.score(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(ScoreFunction::TransEL2.score(&[3.0, 0.0], &[0.0, 4.0], &[0.0, 0.0]), 5.0);
    }

    #[test]
    fn complex_example() {
        let one = [1.0, 0.0];
        assert_eq!(ScoreFunction::ComplEx.score(&one, &one, &one), 1.0);
        // (0 + 1i)(0 + 1i) conj(−1 + 0i) = 1
        assert_eq!(ScoreFunction::ComplEx.score(&[0.0, 1.0], &[0.0, 1.0], &[-1.0, 0.0]), 1.0);
    }

    #[test]
    fn rotate_projects_relation() {
        // r = 2i projects to i; 1 · i = i.
        let f = ScoreFunction::RotatE;
        assert!(f.score(&[1.0, 0.0], &[0.0, 2.0], &[0.0, 1.0]).abs() < 1e-15);
        assert_eq!(f.score(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn odd_dimension_rejected() {
        let v = view(vec![0.0; 6], vec![0.0; 3], 3);
        assert!(matches!(score(&v, 0, 0, 1, ScoreFunction::ComplEx), Err(Error::OddDimension(..))));
        assert!(score(&v, 0, 0, 1, ScoreFunction::TransEL1).is_ok());
        assert!(matches!(score(&v, 0, 1, 1, ScoreFunction::TransEL1), Err(Error::UnknownId { .. })));
    }

    #[test]
    fn exact_tail_is_minimum() {
        let v = view(vec![0.0, 0.0, 1.0, 1.0, 5.0, -2.0], vec![1.0, 1.0], 2);
        let s = score_against_all_tails(&v, 0, 0, ScoreFunction::TransEL1).unwrap();
        assert_eq!(s[1], 0.0);
        assert!(s[0] > 0.0 && s[2] > 0.0);
    }

    #[test]
    fn zero_embeddings_constant() {
        let v = view(vec![0.0; 8], vec![0.0; 2], 2);
        for f in ScoreFunction::ALL {
            let s = score_against_all_tails(&v, 1, 0, f).unwrap();
            assert!(s.iter().all(|&x| x == s[0]), "{f}");
        }
    }

    #[test]
    fn names_round_trip() {
        for f in ScoreFunction::ALL {
            assert_eq!(f.name().parse::<ScoreFunction>().unwrap(), f);
            let json = serde_json::to_string(&f).unwrap();
            assert_eq!(json, format!("\"{}\"", f.name()));
        }
    }
}
