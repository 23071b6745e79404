//! The trainable point encoder: a per-point MLP, channelwise max pooling,
//! and a linear projection head, with unit-normalized output and exact
//! analytic gradients.
//!
//! Per point x: r = relu(W2 relu(W1 x + b1) + b2); the cloud feature is
//! y = W3 (max-pool over points of r) + b3, scaled to unit L2 norm.
//! Max pooling makes the feature permutation invariant; pooling ties break
//! toward the smallest point index so backward is well defined.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub w3: Mat,
    pub b3: Vec<f64>,
}

impl EncoderParams {
    pub fn hidden(&self) -> usize {
        self.w1.rows
    }

    pub fn dim(&self) -> usize {
        self.w3.rows
    }

    pub fn zeros_like(&self) -> EncoderParams {
        EncoderParams {
            w1: Mat::zeros(self.w1.rows, self.w1.cols),
            b1: vec![0.0; self.b1.len()],
            w2: Mat::zeros(self.w2.rows, self.w2.cols),
            b2: vec![0.0; self.b2.len()],
            w3: Mat::zeros(self.w3.rows, self.w3.cols),
            b3: vec![0.0; self.b3.len()],
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.data.len()
            + self.b1.len()
            + self.w2.data.len()
            + self.b2.len()
            + self.w3.data.len()
            + self.b3.len()
    }

    /// Tensors in fixed order (w1, b1, w2, b2, w3, b3), flattened row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.w1.data);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2.data);
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(&self.w3.data);
        out.extend_from_slice(&self.b3);
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                format!("{} params", self.num_params()),
                format!("{}", flat.len()),
            ));
        }
        let mut pos = 0;
        for chunk in [
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
            &mut self.w3.data,
            &mut self.b3,
        ] {
            let len = chunk.len();
            chunk.copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
        Ok(())
    }

    /// Human-readable location of a flat parameter index, for diagnostics.
    pub fn locate(&self, flat_index: usize) -> String {
        let sizes = [
            ("w1", self.w1.data.len()),
            ("b1", self.b1.len()),
            ("w2", self.w2.data.len()),
            ("b2", self.b2.len()),
            ("w3", self.w3.data.len()),
            ("b3", self.b3.len()),
        ];
        let mut rem = flat_index;
        for (name, len) in sizes {
            if rem < len {
                return format!("{name}[{rem}]");
            }
            rem -= len;
        }
        format!("out-of-range[{flat_index}]")
    }
}

/// He-initialized weights, zero biases, deterministic in the seed.
pub fn init_params(seed: u64, hidden: usize, dim: usize) -> Result<EncoderParams> {
    if hidden < 4 || dim < 4 {
        return Err(Error::domain(format!(
            "encoder needs hidden >= 4 and dim >= 4, got h={hidden} d={dim}"
        )));
    }
    let mut stream = rng::stream(seed, "init", &[hidden as u64, dim as u64]);
    let mut gaussian_mat = |rows: usize, cols: usize, std: f64| -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for v in &mut m.data {
            let g: f64 = StandardNormal.sample(&mut stream);
            *v = std * g;
        }
        m
    };
    let w1 = gaussian_mat(hidden, 3, (2.0 / 3.0_f64).sqrt());
    let w2 = gaussian_mat(hidden, hidden, (2.0 / hidden as f64).sqrt());
    let w3 = gaussian_mat(dim, hidden, (2.0 / hidden as f64).sqrt());
    Ok(EncoderParams {
        w1,
        b1: vec![0.0; hidden],
        w2,
        b2: vec![0.0; hidden],
        w3,
        b3: vec![0.0; dim],
    })
}

/// Reverse-accumulation record of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Input points, copied so backward is self-contained.
    pub points: Vec<[f64; 3]>,
    /// First hidden activations per point (N x h).
    pub z1: Mat,
    /// Pooling winner (point index) per channel, smallest index on ties.
    pub winners: Vec<usize>,
    /// Pooled second hidden activations (h).
    pub pooled: Vec<f64>,
    /// Pre-normalization output (d) and its norm.
    pub y: Vec<f64>,
    pub y_norm: f64,
    /// Unit-normalized output feature (d).
    pub feature: Vec<f64>,
}

fn point_hidden(params: &EncoderParams, x: &[f64; 3], z1_out: &mut [f64], z2_out: &mut [f64]) {
    let h = params.hidden();
    for c in 0..h {
        let row = params.w1.row(c);
        let a = row[0] * x[0] + row[1] * x[1] + row[2] * x[2] + params.b1[c];
        z1_out[c] = if a > 0.0 { a } else { 0.0 };
    }
    for c in 0..h {
        let a = linalg::dot(params.w2.row(c), z1_out) + params.b2[c];
        z2_out[c] = if a > 0.0 { a } else { 0.0 };
    }
}

/// Encode a cloud, recording the tape needed for exact gradients.
pub fn forward(points: &[[f64; 3]], params: &EncoderParams) -> Result<(Vec<f64>, ForwardTape)> {
    let n = points.len();
    if n == 0 {
        return Err(Error::domain("encoder input must contain at least one point"));
    }
    let h = params.hidden();

    let mut z1 = Mat::zeros(n, h);
    let mut pooled = vec![f64::NEG_INFINITY; h];
    let mut winners = vec![0usize; h];
    let mut z2 = vec![0.0; h];
    for (p, x) in points.iter().enumerate() {
        let z1_row = &mut z1.data[p * h..(p + 1) * h];
        // z2 recomputed in-place per point; only the pooled max survives
        for c in 0..h {
            let row = params.w1.row(c);
            let a = row[0] * x[0] + row[1] * x[1] + row[2] * x[2] + params.b1[c];
            z1_row[c] = if a > 0.0 { a } else { 0.0 };
        }
        for c in 0..h {
            let a = linalg::dot(params.w2.row(c), z1_row) + params.b2[c];
            z2[c] = if a > 0.0 { a } else { 0.0 };
        }
        for c in 0..h {
            if z2[c] > pooled[c] {
                pooled[c] = z2[c];
                winners[c] = p;
            }
        }
    }

    let mut y = params.w3.matvec(&pooled);
    for (v, b) in y.iter_mut().zip(&params.b3) {
        *v += b;
    }
    let y_norm = linalg::norm(&y);
    if y_norm <= 1e-12 {
        return Err(Error::DegenerateFeature);
    }
    let feature: Vec<f64> = y.iter().map(|v| v / y_norm).collect();

    let tape = ForwardTape {
        points: points.to_vec(),
        z1,
        winners,
        pooled,
        y,
        y_norm,
        feature: feature.clone(),
    };
    Ok((feature, tape))
}

/// Encode without recording a tape (frozen encoders, evaluation).
pub fn forward_feature(points: &[[f64; 3]], params: &EncoderParams) -> Result<Vec<f64>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::domain("encoder input must contain at least one point"));
    }
    let h = params.hidden();
    let mut pooled = vec![f64::NEG_INFINITY; h];
    let mut z1 = vec![0.0; h];
    let mut z2 = vec![0.0; h];
    for x in points {
        point_hidden(params, x, &mut z1, &mut z2);
        for c in 0..h {
            if z2[c] > pooled[c] {
                pooled[c] = z2[c];
            }
        }
    }
    let mut y = params.w3.matvec(&pooled);
    for (v, b) in y.iter_mut().zip(&params.b3) {
        *v += b;
    }
    let y_norm = linalg::norm(&y);
    if y_norm <= 1e-12 {
        return Err(Error::DegenerateFeature);
    }
    Ok(y.iter().map(|v| v / y_norm).collect())
}

/// Exact gradients of a scalar loss with upstream dL/dfeature.
///
/// Chains through the L2-normalization Jacobian (I - ff^T)/|y|, routes
/// pooled gradients to the recorded winners only, and applies the ReLU
/// masks captured by the tape. Optionally also returns dL/dpoints.
pub fn backward(
    tape: &ForwardTape,
    params: &EncoderParams,
    upstream: &[f64],
    want_input_grads: bool,
) -> Result<(EncoderParams, Option<Vec<[f64; 3]>>)> {
    let h = params.hidden();
    let d = params.dim();
    if upstream.len() != d {
        return Err(Error::shape(
            format!("{d} upstream dims"),
            format!("{}", upstream.len()),
        ));
    }
    if tape.z1.cols != h || tape.pooled.len() != h || tape.y.len() != d {
        return Err(Error::shape(
            format!("tape for h={h}, d={d}"),
            format!("h={}, d={}", tape.z1.cols, tape.y.len()),
        ));
    }

    let mut grads = params.zeros_like();

    // through y = |y| * feature: dL/dy = (upstream - f (f . upstream)) / |y|
    let f_dot_u = linalg::dot(&tape.feature, upstream);
    let dy: Vec<f64> = upstream
        .iter()
        .zip(&tape.feature)
        .map(|(u, f)| (u - f * f_dot_u) / tape.y_norm)
        .collect();

    grads.w3.add_outer(&dy, &tape.pooled, 1.0);
    linalg::axpy(&mut grads.b3, 1.0, &dy);
    let dpooled = params.w3.matvec_t(&dy);

    // group channels by their winning point, ascending, for a fixed
    // accumulation order
    let mut by_point: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for c in 0..h {
        if tape.pooled[c] > 0.0 && dpooled[c] != 0.0 {
            by_point.entry(tape.winners[c]).or_default().push(c);
        }
    }

    let mut input_grads = if want_input_grads {
        Some(vec![[0.0; 3]; tape.points.len()])
    } else {
        None
    };

    let mut da2 = vec![0.0; h];
    for (&p, channels) in &by_point {
        for v in da2.iter_mut() {
            *v = 0.0;
        }
        for &c in channels {
            da2[c] = dpooled[c];
        }
        let z1_row = tape.z1.row(p);
        grads.w2.add_outer(&da2, z1_row, 1.0);
        linalg::axpy(&mut grads.b2, 1.0, &da2);

        let dz1 = params.w2.matvec_t(&da2);
        let mut da1 = dz1;
        for (k, v) in da1.iter_mut().enumerate() {
            if z1_row[k] <= 0.0 {
                *v = 0.0;
            }
        }
        let x = tape.points[p];
        for c in 0..h {
            if da1[c] == 0.0 {
                continue;
            }
            let row = grads.w1.row_mut(c);
            row[0] += da1[c] * x[0];
            row[1] += da1[c] * x[1];
            row[2] += da1[c] * x[2];
        }
        linalg::axpy(&mut grads.b1, 1.0, &da1);

        if let Some(ig) = input_grads.as_mut() {
            let dx = params.w1.matvec_t(&da1);
            ig[p][0] += dx[0];
            ig[p][1] += dx[1];
            ig[p][2] += dx[2];
        }
    }

    Ok((grads, input_grads))
}
