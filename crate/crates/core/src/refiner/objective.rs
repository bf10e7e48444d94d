//! Refinement objectives and their analytic gradients.
//!
//! Both objectives share one shape. The refined vector is
//! `y = base + scale · (X · u')` and the loss is
//!
//! ```text
//! L = ‖y − attract‖² − β · ‖y − repel‖² + λ · Σ u'
//! ```
//!
//! The target objective uses `base = 0`, `scale = 1`, `attract = t` and no
//! repulsion. The aspect objective uses `base = a`, `scale = α`,
//! `attract = t̃` and `repel = t'` when the sentence has a second target.
//!
//! Gradients treat the step-function mask as fixed: retained coordinates
//! pass the gradient straight through, zeroed ones receive none.

use ndarray::{Array1, ArrayView1, ArrayView2};

use super::coefficients::{apply_mask, check_shapes, raw_coefficients};
use crate::error::{Error, Result};

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_len(what: &str, v: ArrayView1<'_, f64>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Shape(format!("{what} has length {}, expected {len}", v.len())));
    }
    Ok(())
}

/// `‖t̃ − t‖² + λ · Σ u'`.
pub fn target_loss(
    refined: ArrayView1<'_, f64>,
    target: ArrayView1<'_, f64>,
    u_sparse: ArrayView1<'_, f64>,
    lambda: f64,
) -> Result<f64> {
    check_len("target", target, refined.len())?;
    Ok(squared_distance(refined, target) + lambda * u_sparse.sum())
}

/// `‖ã − t̃‖² − β · ‖ã − t'‖² + λ · Σ u'`; the β term vanishes without `t'`.
pub fn aspect_loss(
    refined_aspect: ArrayView1<'_, f64>,
    refined_target: ArrayView1<'_, f64>,
    irrelevant: Option<ArrayView1<'_, f64>>,
    u_sparse: ArrayView1<'_, f64>,
    beta: f64,
    lambda: f64,
) -> Result<f64> {
    let m = refined_aspect.len();
    check_len("refined target", refined_target, m)?;
    let mut loss = squared_distance(refined_aspect, refined_target) + lambda * u_sparse.sum();
    if let Some(t) = irrelevant {
        check_len("irrelevant target", t, m)?;
        loss -= beta * squared_distance(refined_aspect, t);
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Objective {
    base: Option<Array1<f64>>,
    scale: f64,
    attract: Array1<f64>,
    repel: Option<Array1<f64>>,
    beta: f64,
    lambda: f64,
}

impl Objective {
    pub fn target(target: Array1<f64>, lambda: f64) -> Self {
        Self {
            base: None,
            scale: 1.0,
            attract: target,
            repel: None,
            beta: 0.0,
            lambda,
        }
    }

    pub fn aspect(
        aspect: Array1<f64>,
        refined_target: Array1<f64>,
        irrelevant: Option<Array1<f64>>,
        alpha: f64,
        beta: f64,
        lambda: f64,
    ) -> Self {
        Self {
            base: Some(aspect),
            scale: alpha,
            attract: refined_target,
            repel: irrelevant,
            beta,
            lambda,
        }
    }

    pub fn dim(&self) -> usize {
        self.attract.len()
    }

    fn check(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        let m = x.nrows();
        check_len("anchor", self.attract.view(), m)?;
        if let Some(b) = &self.base {
            check_len("aspect", b.view(), m)?;
        }
        if let Some(r) = &self.repel {
            check_len("irrelevant target", r.view(), m)?;
        }
        Ok(())
    }

    /// The refined vector produced by coefficients `u_sparse`.
    pub fn output(&self, x: ArrayView2<'_, f64>, u_sparse: ArrayView1<'_, f64>) -> Array1<f64> {
        let recon = x.dot(&u_sparse);
        match &self.base {
            None => recon,
            Some(a) => a + &(recon * self.scale),
        }
    }

    pub fn loss(&self, output: ArrayView1<'_, f64>, u_sparse: ArrayView1<'_, f64>) -> f64 {
        let mut loss = squared_distance(output, self.attract.view()) + self.lambda * u_sparse.sum();
        if let Some(r) = &self.repel {
            loss -= self.beta * squared_distance(output, r.view());
        }
        loss
    }

    /// Loss at `(W, b)` with the retained set pinned to `mask`.
    pub fn masked_loss(
        &self,
        x: ArrayView2<'_, f64>,
        weights: ArrayView1<'_, f64>,
        bias: ArrayView1<'_, f64>,
        mask: &[bool],
    ) -> Result<f64> {
        check_shapes(x, weights, bias)?;
        self.check(x)?;
        check_mask(mask, x.ncols())?;
        let u = raw_coefficients(x, weights, bias);
        let u_sparse = apply_mask(u.view(), mask);
        let out = self.output(x, u_sparse.view());
        Ok(self.loss(out.view(), u_sparse.view()))
    }

    /// Analytic gradient of [`Objective::masked_loss`] with respect to `W` and `b`.
    pub fn gradient(
        &self,
        x: ArrayView2<'_, f64>,
        weights: ArrayView1<'_, f64>,
        bias: ArrayView1<'_, f64>,
        mask: &[bool],
    ) -> Result<Gradient> {
        check_shapes(x, weights, bias)?;
        self.check(x)?;
        check_mask(mask, x.ncols())?;
        let u = raw_coefficients(x, weights, bias);
        let u_sparse = apply_mask(u.view(), mask);
        let out = self.output(x, u_sparse.view());
        Ok(self.gradient_at(x, &u, &out, mask))
    }

    pub(crate) fn gradient_at(
        &self,
        x: ArrayView2<'_, f64>,
        u: &Array1<f64>,
        output: &Array1<f64>,
        mask: &[bool],
    ) -> Gradient {
        // dL/dy
        let mut g_out = (output - &self.attract) * 2.0;
        if let Some(r) = &self.repel {
            g_out.scaled_add(-2.0 * self.beta, &(output - r));
        }
        // dL/du'_i = scale · x_i · dL/dy + λ, then through the mask and sigmoid
        let g_coef = x.t().dot(&g_out) * self.scale;
        let g_pre: Array1<f64> = g_coef
            .iter()
            .zip(u.iter())
            .zip(mask)
            .map(|((&g, &ui), &keep)| if keep { (g + self.lambda) * ui * (1.0 - ui) } else { 0.0 })
            .collect();
        Gradient {
            weights: x.dot(&g_pre),
            bias: g_pre,
        }
    }
}

fn check_mask(mask: &[bool], n: usize) -> Result<()> {
    if mask.len() != n {
        return Err(Error::Shape(format!("mask has length {}, expected {n}", mask.len())));
    }
    Ok(())
}
