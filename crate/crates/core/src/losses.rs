//! Similarity matrices, the directional contrastive term, stage losses,
//! and the learnable temperature.
//!
//! Each directional term is the standard InfoNCE cross-entropy: per row i,
//! -log( exp(S_ii / tau) / sum_k exp(S_ik / tau) ), averaged over rows and
//! computed with a max-shifted log-sum-exp. A stage loss is the mean of its
//! directional terms, which reproduces the 1/(4n) and 1/(6n) aggregate
//! normalizations.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Learnable softmax temperature, stored as the log-parameter rho.
#[derive(Debug, Clone, PartialEq)]
pub struct Temperature {
    pub rho: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Temperature {
    pub fn from_tau(tau_init: f64, tau_min: f64, tau_max: f64) -> Result<Self> {
        if !(tau_min > 0.0 && tau_max >= tau_min) {
            return Err(Error::domain(format!(
                "temperature bounds must satisfy 0 < tau_min <= tau_max, got [{tau_min}, {tau_max}]"
            )));
        }
        if !(tau_init >= tau_min && tau_init <= tau_max) {
            return Err(Error::domain(format!(
                "tau_init {tau_init} outside [{tau_min}, {tau_max}]"
            )));
        }
        Ok(Temperature {
            rho: tau_init.ln(),
            tau_min,
            tau_max,
        })
    }

    pub fn tau(&self) -> f64 {
        self.rho.exp().clamp(self.tau_min, self.tau_max)
    }

    /// Projection step applied after every optimizer update.
    pub fn clamp_rho(&mut self) {
        self.rho = self.rho.clamp(self.tau_min.ln(), self.tau_max.ln());
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::from_tau(0.07, 0.01, 100.0).expect("default bounds are valid")
    }
}

/// Which modality alignment terms participate in a stage loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub text: bool,
    pub image: bool,
    pub point: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        text: true,
        image: true,
        point: true,
    };

    pub fn any_stage1(&self) -> bool {
        self.text || self.image
    }

    pub fn any(&self) -> bool {
        self.text || self.image || self.point
    }
}

/// Per-modality feature rows of one batch.
#[derive(Debug, Clone)]
pub struct BatchFeatures {
    pub point: Mat,
    pub image: Mat,
    pub text: Mat,
    /// Mixed-point-cloud features; present in stage 2 only.
    pub mixed: Option<Mat>,
}

impl BatchFeatures {
    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.point.rows, self.point.cols);
        let mut mats = vec![("point", &self.point), ("image", &self.image), ("text", &self.text)];
        if let Some(m) = &self.mixed {
            mats.push(("mixed", m));
        }
        for (name, m) in mats {
            if m.rows != n || m.cols != d {
                return Err(Error::shape(
                    format!("{n} x {d}"),
                    format!("{} x {} for {name}", m.rows, m.cols),
                ));
            }
            for r in 0..m.rows {
                let norm = linalg::norm(m.row(r));
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::domain(format!(
                        "{name} row {r} is not unit norm: |v| = {norm}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Entry (i, k) = dot(X_i, Y_k). Rows are expected unit-norm.
pub fn similarity_matrix(x: &Mat, y: &Mat) -> Result<Mat> {
    if x.cols != y.cols || x.rows != y.rows {
        return Err(Error::shape(
            format!("{} x {}", x.rows, x.cols),
            format!("{} x {}", y.rows, y.cols),
        ));
    }
    let n = x.rows;
    let mut s = Mat::zeros(n, n);
    for i in 0..n {
        let xi = x.row(i);
        for k in 0..n {
            *s.at_mut(i, k) = linalg::dot(xi, y.row(k));
        }
    }
    Ok(s)
}

/// Mean over rows of -log softmax(S_i / tau)[i], max-shifted for stability.
pub fn info_nce_dir(s_sim: &Mat, tau: f64) -> Result<f64> {
    if s_sim.rows != s_sim.cols {
        return Err(Error::shape(
            "square similarity matrix".to_string(),
            format!("{} x {}", s_sim.rows, s_sim.cols),
        ));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::domain(format!("tau must be > 0, got {tau}")));
    }
    if s_sim.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "similarity matrix".to_string(),
        });
    }
    let n = s_sim.rows;
    let mut total = 0.0;
    for i in 0..n {
        let row = s_sim.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
        let sum_exp: f64 = row.iter().map(|&v| (v / tau - max).exp()).sum();
        total += max + sum_exp.ln() - row[i] / tau;
    }
    Ok(total / n as f64)
}

/// One directional term with its exact gradients: loss J(X, Y), dJ/dX,
/// dJ/dY, and dJ/dtau.
fn nce_dir_with_grad(x: &Mat, y: &Mat, tau: f64) -> Result<(f64, Mat, Mat, f64)> {
    let s = similarity_matrix(x, y)?;
    let n = s.rows;
    let loss = info_nce_dir(&s, tau)?;

    let mut dx = Mat::zeros(x.rows, x.cols);
    let mut dy = Mat::zeros(y.rows, y.cols);
    let mut dtau = 0.0;
    let inv_ntau = 1.0 / (n as f64 * tau);
    for i in 0..n {
        let row = s.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
        let exps: Vec<f64> = row.iter().map(|&v| (v / tau - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for k in 0..n {
            let coeff = inv_ntau * (exps[k] / z - if k == i { 1.0 } else { 0.0 });
            if coeff != 0.0 {
                linalg::axpy(dx.row_mut(i), coeff, y.row(k));
                linalg::axpy(dy.row_mut(k), coeff, x.row(i));
            }
            dtau -= coeff * row[k] / tau;
        }
    }
    Ok((loss, dx, dy, dtau))
}

/// Stage-1 loss: mean of the four directional terms P->I, I->P, P->T, T->P.
pub fn loss_stage1(mp: &Mat, mi: &Mat, mt: &Mat, tau: f64) -> Result<f64> {
    loss_stage1_terms(
        mp,
        mi,
        mt,
        tau,
        LossTerms {
            text: true,
            image: true,
            point: false,
        },
    )
}

/// Stage-1 loss restricted to the enabled modality terms.
pub fn loss_stage1_terms(
    mp: &Mat,
    mi: &Mat,
    mt: &Mat,
    tau: f64,
    terms: LossTerms,
) -> Result<f64> {
    if !terms.any_stage1() {
        return Err(Error::domain("stage-1 loss needs text and/or image terms"));
    }
    let mut parts = Vec::new();
    if terms.image {
        parts.push(info_nce_dir(&similarity_matrix(mp, mi)?, tau)?);
        parts.push(info_nce_dir(&similarity_matrix(mi, mp)?, tau)?);
    }
    if terms.text {
        parts.push(info_nce_dir(&similarity_matrix(mp, mt)?, tau)?);
        parts.push(info_nce_dir(&similarity_matrix(mt, mp)?, tau)?);
    }
    Ok(parts.iter().sum::<f64>() / parts.len() as f64)
}

/// Stage-2 loss: mean of the six directional terms M<->I, M<->T, M<->P.
pub fn loss_stage2(mm: &Mat, mp: &Mat, mi: &Mat, mt: &Mat, tau: f64) -> Result<f64> {
    loss_stage2_terms(mm, mp, mi, mt, tau, LossTerms::ALL)
}

/// Stage-2 loss restricted to the enabled modality terms.
pub fn loss_stage2_terms(
    mm: &Mat,
    mp: &Mat,
    mi: &Mat,
    mt: &Mat,
    tau: f64,
    terms: LossTerms,
) -> Result<f64> {
    if !terms.any() {
        return Err(Error::domain("stage-2 loss needs at least one modality term"));
    }
    let mut parts = Vec::new();
    if terms.image {
        parts.push(info_nce_dir(&similarity_matrix(mm, mi)?, tau)?);
        parts.push(info_nce_dir(&similarity_matrix(mi, mm)?, tau)?);
    }
    if terms.text {
        parts.push(info_nce_dir(&similarity_matrix(mm, mt)?, tau)?);
        parts.push(info_nce_dir(&similarity_matrix(mt, mm)?, tau)?);
    }
    if terms.point {
        parts.push(info_nce_dir(&similarity_matrix(mm, mp)?, tau)?);
        parts.push(info_nce_dir(&similarity_matrix(mp, mm)?, tau)?);
    }
    Ok(parts.iter().sum::<f64>() / parts.len() as f64)
}

/// Gradients of a stage loss with respect to every feature row and rho.
#[derive(Debug, Clone)]
pub struct StageGrads {
    pub loss: f64,
    /// dL/d(point rows); stage-2 target rows in stage 2.
    pub d_point: Mat,
    pub d_image: Mat,
    pub d_text: Mat,
    /// dL/d(mixed rows); present for stage 2.
    pub d_mixed: Option<Mat>,
    /// dL/drho with tau = exp(rho).
    pub d_rho: f64,
}

/// Stage-1 loss with exact gradients for all rows and rho. Gradients of
/// frozen modalities are returned; callers decide what to update.
pub fn loss_stage1_backward(
    mp: &Mat,
    mi: &Mat,
    mt: &Mat,
    temperature: &Temperature,
    terms: LossTerms,
) -> Result<StageGrads> {
    if !terms.any_stage1() {
        return Err(Error::domain("stage-1 loss needs text and/or image terms"));
    }
    let tau = temperature_value(temperature);
    let mut d_point = Mat::zeros(mp.rows, mp.cols);
    let mut d_image = Mat::zeros(mi.rows, mi.cols);
    let mut d_text = Mat::zeros(mt.rows, mt.cols);
    let mut losses = Vec::new();
    let mut dtau = 0.0;

    let run =
        |a: &Mat, b: &Mat, da_acc: &mut Mat, db_acc: &mut Mat, losses: &mut Vec<f64>, dtau: &mut f64| -> Result<()> {
            let (loss, da, db, dt) = nce_dir_with_grad(a, b, tau)?;
            add_assign(da_acc, &da);
            add_assign(db_acc, &db);
            losses.push(loss);
            *dtau += dt;
            Ok(())
        };

    if terms.image {
        run(mp, mi, &mut d_point, &mut d_image, &mut losses, &mut dtau)?;
        run(mi, mp, &mut d_image, &mut d_point, &mut losses, &mut dtau)?;
    }
    if terms.text {
        run(mp, mt, &mut d_point, &mut d_text, &mut losses, &mut dtau)?;
        run(mt, mp, &mut d_text, &mut d_point, &mut losses, &mut dtau)?;
    }

    let count = losses.len() as f64;
    scale(&mut d_point, 1.0 / count);
    scale(&mut d_image, 1.0 / count);
    scale(&mut d_text, 1.0 / count);
    let loss = losses.iter().sum::<f64>() / count;
    let d_rho = dtau / count * tau;
    Ok(StageGrads {
        loss,
        d_point,
        d_image,
        d_text,
        d_mixed: None,
        d_rho,
    })
}

/// Stage-2 loss with exact gradients for all rows and rho.
pub fn loss_stage2_backward(
    mm: &Mat,
    mp: &Mat,
    mi: &Mat,
    mt: &Mat,
    temperature: &Temperature,
    terms: LossTerms,
) -> Result<StageGrads> {
    if !terms.any() {
        return Err(Error::domain("stage-2 loss needs at least one modality term"));
    }
    let tau = temperature_value(temperature);
    let mut d_mixed = Mat::zeros(mm.rows, mm.cols);
    let mut d_point = Mat::zeros(mp.rows, mp.cols);
    let mut d_image = Mat::zeros(mi.rows, mi.cols);
    let mut d_text = Mat::zeros(mt.rows, mt.cols);
    let mut losses = Vec::new();
    let mut dtau = 0.0;

    let run =
        |a: &Mat, b: &Mat, da_acc: &mut Mat, db_acc: &mut Mat, losses: &mut Vec<f64>, dtau: &mut f64| -> Result<()> {
            let (loss, da, db, dt) = nce_dir_with_grad(a, b, tau)?;
            add_assign(da_acc, &da);
            add_assign(db_acc, &db);
            losses.push(loss);
            *dtau += dt;
            Ok(())
        };

    if terms.image {
        run(mm, mi, &mut d_mixed, &mut d_image, &mut losses, &mut dtau)?;
        run(mi, mm, &mut d_image, &mut d_mixed, &mut losses, &mut dtau)?;
    }
    if terms.text {
        run(mm, mt, &mut d_mixed, &mut d_text, &mut losses, &mut dtau)?;
        run(mt, mm, &mut d_text, &mut d_mixed, &mut losses, &mut dtau)?;
    }
    if terms.point {
        run(mm, mp, &mut d_mixed, &mut d_point, &mut losses, &mut dtau)?;
        run(mp, mm, &mut d_point, &mut d_mixed, &mut losses, &mut dtau)?;
    }

    let count = losses.len() as f64;
    scale(&mut d_mixed, 1.0 / count);
    scale(&mut d_point, 1.0 / count);
    scale(&mut d_image, 1.0 / count);
    scale(&mut d_text, 1.0 / count);
    let loss = losses.iter().sum::<f64>() / count;
    let d_rho = dtau / count * tau;
    Ok(StageGrads {
        loss,
        d_point,
        d_image,
        d_text,
        d_mixed: Some(d_mixed),
        d_rho,
    })
}

/// Literal reading of the printed contrastive term: the denominator sums
/// exp(x_j . y_j / tau) over the paired (diagonal) products, making it
/// row-independent. Kept for inspection only.
pub fn info_nce_literal(x: &Mat, y: &Mat, tau: f64) -> Result<f64> {
    if x.rows != y.rows || x.cols != y.cols {
        return Err(Error::shape(
            format!("{} x {}", x.rows, x.cols),
            format!("{} x {}", y.rows, y.cols),
        ));
    }
    let n = x.rows;
    let a: Vec<f64> = (0..n)
        .map(|i| linalg::dot(x.row(i), y.row(i)) / tau)
        .collect();
    let max = a.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + a.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - a.iter().sum::<f64>() / n as f64)
}

/// Literal-form directional term with gradients; only diagonal products
/// carry gradient, mirroring the degenerate structure of the printed
/// denominator.
fn literal_dir_with_grad(x: &Mat, y: &Mat, tau: f64) -> Result<(f64, Mat, Mat, f64)> {
    let loss = info_nce_literal(x, y, tau)?;
    let n = x.rows;
    let a: Vec<f64> = (0..n)
        .map(|i| linalg::dot(x.row(i), y.row(i)) / tau)
        .collect();
    let max = a.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = a.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut dx = Mat::zeros(x.rows, x.cols);
    let mut dy = Mat::zeros(y.rows, y.cols);
    let mut dtau = 0.0;
    for k in 0..n {
        let da = exps[k] / z - 1.0 / n as f64;
        linalg::axpy(dx.row_mut(k), da / tau, y.row(k));
        linalg::axpy(dy.row_mut(k), da / tau, x.row(k));
        dtau -= da * a[k] / tau;
    }
    Ok((loss, dx, dy, dtau))
}

/// Stage-1 gradients under the literal form; same term structure as
/// [`loss_stage1_backward`].
pub fn loss_stage1_literal_backward(
    mp: &Mat,
    mi: &Mat,
    mt: &Mat,
    temperature: &Temperature,
    terms: LossTerms,
) -> Result<StageGrads> {
    if !terms.any_stage1() {
        return Err(Error::domain("stage-1 loss needs text and/or image terms"));
    }
    let tau = temperature_value(temperature);
    let mut d_point = Mat::zeros(mp.rows, mp.cols);
    let mut d_image = Mat::zeros(mi.rows, mi.cols);
    let mut d_text = Mat::zeros(mt.rows, mt.cols);
    let mut losses = Vec::new();
    let mut dtau = 0.0;
    let run = |a: &Mat,
                   b: &Mat,
                   da_acc: &mut Mat,
                   db_acc: &mut Mat,
                   losses: &mut Vec<f64>,
                   dtau: &mut f64|
     -> Result<()> {
        let (loss, da, db, dt) = literal_dir_with_grad(a, b, tau)?;
        add_assign(da_acc, &da);
        add_assign(db_acc, &db);
        losses.push(loss);
        *dtau += dt;
        Ok(())
    };
    if terms.image {
        run(mp, mi, &mut d_point, &mut d_image, &mut losses, &mut dtau)?;
        run(mi, mp, &mut d_image, &mut d_point, &mut losses, &mut dtau)?;
    }
    if terms.text {
        run(mp, mt, &mut d_point, &mut d_text, &mut losses, &mut dtau)?;
        run(mt, mp, &mut d_text, &mut d_point, &mut losses, &mut dtau)?;
    }
    let count = losses.len() as f64;
    scale(&mut d_point, 1.0 / count);
    scale(&mut d_image, 1.0 / count);
    scale(&mut d_text, 1.0 / count);
    Ok(StageGrads {
        loss: losses.iter().sum::<f64>() / count,
        d_point,
        d_image,
        d_text,
        d_mixed: None,
        d_rho: dtau / count * tau,
    })
}

/// Stage-2 gradients under the literal form; same term structure as
/// [`loss_stage2_backward`].
pub fn loss_stage2_literal_backward(
    mm: &Mat,
    mp: &Mat,
    mi: &Mat,
    mt: &Mat,
    temperature: &Temperature,
    terms: LossTerms,
) -> Result<StageGrads> {
    if !terms.any() {
        return Err(Error::domain("stage-2 loss needs at least one modality term"));
    }
    let tau = temperature_value(temperature);
    let mut d_mixed = Mat::zeros(mm.rows, mm.cols);
    let mut d_point = Mat::zeros(mp.rows, mp.cols);
    let mut d_image = Mat::zeros(mi.rows, mi.cols);
    let mut d_text = Mat::zeros(mt.rows, mt.cols);
    let mut losses = Vec::new();
    let mut dtau = 0.0;
    let run = |a: &Mat,
                   b: &Mat,
                   da_acc: &mut Mat,
                   db_acc: &mut Mat,
                   losses: &mut Vec<f64>,
                   dtau: &mut f64|
     -> Result<()> {
        let (loss, da, db, dt) = literal_dir_with_grad(a, b, tau)?;
        add_assign(da_acc, &da);
        add_assign(db_acc, &db);
        losses.push(loss);
        *dtau += dt;
        Ok(())
    };
    if terms.image {
        run(mm, mi, &mut d_mixed, &mut d_image, &mut losses, &mut dtau)?;
        run(mi, mm, &mut d_image, &mut d_mixed, &mut losses, &mut dtau)?;
    }
    if terms.text {
        run(mm, mt, &mut d_mixed, &mut d_text, &mut losses, &mut dtau)?;
        run(mt, mm, &mut d_text, &mut d_mixed, &mut losses, &mut dtau)?;
    }
    if terms.point {
        run(mm, mp, &mut d_mixed, &mut d_point, &mut losses, &mut dtau)?;
        run(mp, mm, &mut d_point, &mut d_mixed, &mut losses, &mut dtau)?;
    }
    let count = losses.len() as f64;
    scale(&mut d_mixed, 1.0 / count);
    scale(&mut d_point, 1.0 / count);
    scale(&mut d_image, 1.0 / count);
    scale(&mut d_text, 1.0 / count);
    Ok(StageGrads {
        loss: losses.iter().sum::<f64>() / count,
        d_point,
        d_image,
        d_text,
        d_mixed: Some(d_mixed),
        d_rho: dtau / count * tau,
    })
}

fn temperature_value(t: &Temperature) -> f64 {
    t.tau()
}

fn add_assign(acc: &mut Mat, other: &Mat) {
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

fn scale(m: &mut Mat, s: f64) {
    for v in &mut m.data {
        *v *= s;
    }
}
