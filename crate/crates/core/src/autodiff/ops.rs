//! Primitive differentiable operations.
//!
//! Every op validates shapes with assertions: callers are expected to
//! have checked domain-level contracts already. Backward closures write
//! gradient contributions for each parent via `accum`.

use ndarray::{s, Array1, Array2, Array3, Axis, Ix1, Ix2, Ix3, IxDyn};

use super::graph::{accum, Arr, Graph, Var};

/// Absolute sampling grid: channel 0 holds x (column) and channel 1
/// holds y (row) pixel-center coordinates.
pub fn identity_grid(h: usize, w: usize) -> Arr {
    let mut g = Array3::<f64>::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            g[[0, y, x]] = x as f64;
            g[[1, y, x]] = y as f64;
        }
    }
    g.into_dyn()
}

pub(crate) fn reshaped(a: &Arr, shape: &[usize]) -> Arr {
    a.to_owned()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch")
}

impl Graph {
    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        // (a_val, b_val, g_out) -> (grad_a, grad_b)
        df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let mut out = av.clone();
        out.zip_mut_with(bv, |x, &y| *x = f(*x, y));
        let needs = self.any_needs_grad(&[a, b]);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let (av, bv) = (g.value(a), g.value(b));
            let mut ga = if na { Some(Arr::zeros(av.raw_dim())) } else { None };
            let mut gb = if nb { Some(Arr::zeros(bv.raw_dim())) } else { None };
            for (i, (&x, &y)) in av.iter().zip(bv.iter()).enumerate() {
                let gout = go.as_slice().unwrap()[i];
                let (dx, dy) = df(x, y, gout);
                if let Some(ga) = ga.as_mut() {
                    ga.as_slice_mut().unwrap()[i] = dx;
                }
                if let Some(gb) = gb.as_mut() {
                    gb.as_slice_mut().unwrap()[i] = dy;
                }
            }
            if let Some(ga) = ga {
                accum(&mut grads[a.0], ga);
            }
            if let Some(gb) = gb {
                accum(&mut grads[b.0], gb);
            }
        };
        self.push(out, needs, Some(Box::new(bwd)), false)
    }

    fn unary_elementwise(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        // (x_val, y_val) -> dy/dx
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let out = self.value(x).mapv(&f);
        let needs = self.needs_grad(x);
        let out_id = self.nodes.len();
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let xv = g.value(x);
            let yv = &g.nodes[out_id].value;
            let mut gx = Arr::zeros(xv.raw_dim());
            for (i, (&xi, &yi)) in xv.iter().zip(yv.iter()).enumerate() {
                gx.as_slice_mut().unwrap()[i] = go.as_slice().unwrap()[i] * df(xi, yi);
            }
            accum(&mut grads[x.0], gx);
        };
        self.push(out, needs, Some(Box::new(bwd)), false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x / y, |x, y, g| (g / y, -g * x / (y * y)))
    }

    /// Elementwise maximum; ties route the gradient to the first input.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(
            a,
            b,
            f64::max,
            |x, y, g| if x >= y { (g, 0.0) } else { (0.0, g) },
        )
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, |v| -v, |_, _| -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary_elementwise(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary_elementwise(x, move |v| v * c, move |_, _| c)
    }

    /// `c - x`, used for mask complements `1 - m`.
    pub fn sub_from_scalar(&mut self, c: f64, x: Var) -> Var {
        self.unary_elementwise(x, move |v| c - v, |_, _| -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, |v| v.max(0.0), |x, _| if x >= 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        self.unary_elementwise(
            x,
            move |v| if v >= 0.0 { v } else { alpha * v },
            move |x, _| if x >= 0.0 { 1.0 } else { alpha },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary_elementwise(
            x,
            |v| 1.0 / (1.0 + (-v).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    pub fn tanh_op(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp_op(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, f64::exp, |_, y| y)
    }

    pub fn ln_op(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, f64::ln, |x, _| 1.0 / x)
    }

    /// Square root with a guarded subgradient at zero.
    pub fn sqrt_op(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, f64::sqrt, |_, y| 0.5 / y.max(1e-12))
    }

    /// Absolute value; subgradient 0 at the kink.
    pub fn abs_op(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, |v| 1.0 / v, |x, _| -1.0 / (x * x))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let needs = self.needs_grad(x);
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let dim = g.value(x).raw_dim();
            accum(&mut grads[x.0], Arr::from_elem(dim, go[[0]]));
        };
        self.push(
            Arr::from_elem(IxDyn(&[1]), total),
            needs,
            Some(Box::new(bwd)),
            false,
        )
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let total = self.value(x).sum() / n;
        let needs = self.needs_grad(x);
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let dim = g.value(x).raw_dim();
            accum(&mut grads[x.0], Arr::from_elem(dim, go[[0]] / n));
        };
        self.push(
            Arr::from_elem(IxDyn(&[1]), total),
            needs,
            Some(Box::new(bwd)),
            false,
        )
    }

    /// Maximum element, shape `[1]`; subgradient to the first maximizer.
    pub fn max_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (mut best_i, mut best) = (0usize, f64::NEG_INFINITY);
        for (i, &v) in xv.iter().enumerate() {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        let needs = self.needs_grad(x);
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let mut gx = Arr::zeros(g.value(x).raw_dim());
            gx.as_slice_mut().unwrap()[best_i] = go[[0]];
            accum(&mut grads[x.0], gx);
        };
        self.push(
            Arr::from_elem(IxDyn(&[1]), best),
            needs,
            Some(Box::new(bwd)),
            false,
        )
    }

    /// Stop-gradient: same value, no backward edge.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = reshaped(self.value(x), shape);
        let needs = self.needs_grad(x);
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let dim: Vec<usize> = g.value(x).shape().to_vec();
            accum(&mut grads[x.0], reshaped(go, &dim));
        };
        self.push(out, needs, Some(Box::new(bwd)), false)
    }

    /// Rows `r0..r1` of a 2-D matrix.
    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let out = xv.slice(s![r0..r1, ..]).to_owned().into_dyn();
        let needs = self.needs_grad(x);
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let dim = g.value(x).raw_dim();
            let mut gx = Array2::<f64>::zeros((dim[0], dim[1]));
            let gov = go.view().into_dimensionality::<Ix2>().unwrap();
            gx.slice_mut(s![r0..r1, ..]).assign(&gov);
            accum(&mut grads[x.0], gx.into_dyn());
        };
        self.push(out, needs, Some(Box::new(bwd)), false)
    }

    /// Matrix product of 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let out = av.dot(&bv).into_dyn();
        let needs = self.any_needs_grad(&[a, b]);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let av = g.value(a).view().into_dimensionality::<Ix2>().unwrap();
            let bv = g.value(b).view().into_dimensionality::<Ix2>().unwrap();
            let gov = go.view().into_dimensionality::<Ix2>().unwrap();
            if na {
                accum(&mut grads[a.0], gov.dot(&bv.t()).into_dyn());
            }
            if nb {
                accum(&mut grads[b.0], av.t().dot(&gov).into_dyn());
            }
        };
        self.push(out, needs, Some(Box::new(bwd)), false)
    }

    /// Transpose of a 2-D matrix.
    pub fn transpose2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let out = xv.t().to_owned().into_dyn();
        let needs = self.needs_grad(x);
        let bwd = move |_g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let gov = go.view().into_dimensionality::<Ix2>().unwrap();
            accum(&mut grads[x.0], gov.t().to_owned().into_dyn());
        };
        self.push(out, needs, Some(Box::new(bwd)), false)
    }

    /// Column-wise maximum of a 2-D matrix, shape `(1, C)`; subgradient
    /// to the first maximizer per column.
    pub fn col_max(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let (r, c) = xv.dim();
        assert!(r > 0, "col_max of empty matrix");
        let mut out = Array2::<f64>::zeros((1, c));
        let mut arg = vec![0usize; c];
        for j in 0..c {
            let (mut bi, mut bv) = (0usize, f64::NEG_INFINITY);
            for i in 0..r {
                if xv[[i, j]] > bv {
                    bv = xv[[i, j]];
                    bi = i;
                }
            }
            out[[0, j]] = bv;
            arg[j] = bi;
        }
        let needs = self.needs_grad(x);
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let gov = go.view().into_dimensionality::<Ix2>().unwrap();
            let dim = g.value(x).raw_dim();
            let mut gx = Array2::<f64>::zeros((dim[0], dim[1]));
            for (j, &i) in arg.iter().enumerate() {
                gx[[i, j]] = gov[[0, j]];
            }
            accum(&mut grads[x.0], gx.into_dyn());
        };
        self.push(out.into_dyn(), needs, Some(Box::new(bwd)), false)
    }

    /// Channel concatenation of `(C_i, H, W)` maps.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of empty list");
        let shapes: Vec<Vec<usize>> = parts
            .iter()
            .map(|p| self.value(*p).shape().to_vec())
            .collect();
        let (h, w) = (shapes[0][1], shapes[0][2]);
        for sh in &shapes {
            assert_eq!((sh[1], sh[2]), (h, w), "concat spatial mismatch");
        }
        let total_c: usize = shapes.iter().map(|sh| sh[0]).sum();
        let mut out = Array3::<f64>::zeros((total_c, h, w));
        let mut off = 0usize;
        for (p, sh) in parts.iter().zip(&shapes) {
            let v = self.value(*p).view().into_dimensionality::<Ix3>().unwrap();
            out.slice_mut(s![off..off + sh[0], .., ..]).assign(&v);
            off += sh[0];
        }
        let needs = self.any_needs_grad(parts);
        let parts_own: Vec<Var> = parts.to_vec();
        let channels: Vec<usize> = shapes.iter().map(|sh| sh[0]).collect();
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let gov = go.view().into_dimensionality::<Ix3>().unwrap();
            let mut off = 0usize;
            for (p, &c) in parts_own.iter().zip(&channels) {
                if g.needs_grad(*p) {
                    let gp = gov.slice(s![off..off + c, .., ..]).to_owned().into_dyn();
                    accum(&mut grads[p.0], gp);
                }
                off += c;
            }
        };
        self.push(out.into_dyn(), needs, Some(Box::new(bwd)), false)
    }

    /// Channel-axis sum of a `(C, H, W)` map, keeping the axis: `(1, H, W)`.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let summed = xv.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
        let needs = self.needs_grad(x);
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let dim = g.value(x).raw_dim();
            let gov = go.view().into_dimensionality::<Ix3>().unwrap();
            let mut gx = Array3::<f64>::zeros((dim[0], dim[1], dim[2]));
            for c in 0..dim[0] {
                gx.slice_mut(s![c, .., ..]).assign(&gov.slice(s![0, .., ..]));
            }
            accum(&mut grads[x.0], gx.into_dyn());
        };
        self.push(summed, needs, Some(Box::new(bwd)), false)
    }

    /// `(1, H, W) * (C, H, W)` with per-pixel broadcasting over channels.
    pub fn broadcast_mul_channel(&mut self, mask: Var, x: Var) -> Var {
        let mv = self.value(mask).view().into_dimensionality::<Ix3>().unwrap();
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(mv.dim().0, 1, "mask must have one channel");
        assert_eq!(
            (mv.dim().1, mv.dim().2),
            (xv.dim().1, xv.dim().2),
            "broadcast spatial mismatch"
        );
        let (c, h, w) = xv.dim();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[ch, y, xx]] = mv[[0, y, xx]] * xv[[ch, y, xx]];
                }
            }
        }
        let needs = self.any_needs_grad(&[mask, x]);
        let (nm, nx) = (self.needs_grad(mask), self.needs_grad(x));
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let mv = g.value(mask).view().into_dimensionality::<Ix3>().unwrap();
            let xv = g.value(x).view().into_dimensionality::<Ix3>().unwrap();
            let gov = go.view().into_dimensionality::<Ix3>().unwrap();
            let (c, h, w) = xv.dim();
            if nm {
                let mut gm = Array3::<f64>::zeros((1, h, w));
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gm[[0, y, xx]] += gov[[ch, y, xx]] * xv[[ch, y, xx]];
                        }
                    }
                }
                accum(&mut grads[mask.0], gm.into_dyn());
            }
            if nx {
                let mut gx = Array3::<f64>::zeros((c, h, w));
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[[ch, y, xx]] = gov[[ch, y, xx]] * mv[[0, y, xx]];
                        }
                    }
                }
                accum(&mut grads[x.0], gx.into_dyn());
            }
        };
        self.push(out.into_dyn(), needs, Some(Box::new(bwd)), false)
    }

    /// Add a per-channel bias `(C,)` to a `(C, H, W)` map.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.dim().0, bv.len(), "bias length mismatch");
        let mut out = xv.to_owned();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            plane += bv[c];
        }
        let needs = self.any_needs_grad(&[x, bias]);
        let (nx, nb) = (self.needs_grad(x), self.needs_grad(bias));
        let bwd = move |_g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let gov = go.view().into_dimensionality::<Ix3>().unwrap();
            if nx {
                accum(&mut grads[x.0], gov.to_owned().into_dyn());
            }
            if nb {
                let gb: Array1<f64> = gov
                    .axis_iter(Axis(0))
                    .map(|plane| plane.sum())
                    .collect();
                accum(&mut grads[bias.0], gb.into_dyn());
            }
        };
        self.push(out.into_dyn(), needs, Some(Box::new(bwd)), false)
    }

    /// im2col: `(C, H, W)` to `(C*k*k, L)` patches for convolution.
    pub fn unfold(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        let hout = (h + 2 * pad - k) / stride + 1;
        let wout = (w + 2 * pad - k) / stride + 1;
        let out = unfold_forward(&xv.to_owned(), k, stride, pad, hout, wout);
        let needs = self.needs_grad(x);
        let bwd = move |_g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let gov = go.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array3::<f64>::zeros((c, h, w));
            for ky in 0..k {
                for kx in 0..k {
                    for oy in 0..hout {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wout {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let col = oy * wout + ox;
                            for ch in 0..c {
                                let row = ch * k * k + ky * k + kx;
                                gx[[ch, iy as usize, ix as usize]] += gov[[row, col]];
                            }
                        }
                    }
                }
            }
            accum(&mut grads[x.0], gx.into_dyn());
        };
        self.push(out.into_dyn(), needs, Some(Box::new(bwd)), false)
    }

    /// Bilinear sampling of `field (C, Hf, Wf)` at absolute positions
    /// `coords (2, H, W)`; out-of-bounds positions clamp to the border.
    /// Differentiable w.r.t. both operands; the position gradient is
    /// zero where clamping is active.
    pub fn grid_sample(&mut self, field: Var, coords: Var) -> Var {
        let fv = self.value(field).view().into_dimensionality::<Ix3>().unwrap();
        let cv = self.value(coords).view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(cv.dim().0, 2, "coords must be (2, H, W)");
        let (c, hf, wf) = fv.dim();
        let (_, h, w) = cv.dim();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for y in 0..h {
            for x in 0..w {
                let sp = SamplePoint::new(cv[[0, y, x]], cv[[1, y, x]], wf, hf);
                for ch in 0..c {
                    out[[ch, y, x]] = sp.sample(&fv, ch);
                }
            }
        }
        let needs = self.any_needs_grad(&[field, coords]);
        let (nf, nc) = (self.needs_grad(field), self.needs_grad(coords));
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let fv = g.value(field).view().into_dimensionality::<Ix3>().unwrap();
            let cv = g.value(coords).view().into_dimensionality::<Ix3>().unwrap();
            let gov = go.view().into_dimensionality::<Ix3>().unwrap();
            let (c, hf, wf) = fv.dim();
            let (_, h, w) = cv.dim();
            let mut gf = if nf {
                Some(Array3::<f64>::zeros((c, hf, wf)))
            } else {
                None
            };
            let mut gc = if nc {
                Some(Array3::<f64>::zeros((2, h, w)))
            } else {
                None
            };
            for y in 0..h {
                for x in 0..w {
                    let sp = SamplePoint::new(cv[[0, y, x]], cv[[1, y, x]], wf, hf);
                    for ch in 0..c {
                        let gout = gov[[ch, y, x]];
                        if gout == 0.0 {
                            continue;
                        }
                        if let Some(gf) = gf.as_mut() {
                            sp.scatter(gf, ch, gout);
                        }
                        if let Some(gc) = gc.as_mut() {
                            let (dx, dy) = sp.pos_grad(&fv, ch);
                            gc[[0, y, x]] += gout * dx;
                            gc[[1, y, x]] += gout * dy;
                        }
                    }
                }
            }
            if let Some(gf) = gf {
                accum(&mut grads[field.0], gf.into_dyn());
            }
            if let Some(gc) = gc {
                accum(&mut grads[coords.0], gc.into_dyn());
            }
        };
        self.push(out.into_dyn(), needs, Some(Box::new(bwd)), false)
    }

    /// Nearest-neighbor 2x upsampling of a `(C, H, W)` map.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xv[[ch, y, xx]];
                    out[[ch, 2 * y, 2 * xx]] = v;
                    out[[ch, 2 * y, 2 * xx + 1]] = v;
                    out[[ch, 2 * y + 1, 2 * xx]] = v;
                    out[[ch, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
        let needs = self.needs_grad(x);
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let gov = go.view().into_dimensionality::<Ix3>().unwrap();
            let dim = g.value(x).raw_dim();
            let (c, h, w) = (dim[0], dim[1], dim[2]);
            let mut gx = Array3::<f64>::zeros((c, h, w));
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        gx[[ch, y, xx]] = gov[[ch, 2 * y, 2 * xx]]
                            + gov[[ch, 2 * y, 2 * xx + 1]]
                            + gov[[ch, 2 * y + 1, 2 * xx]]
                            + gov[[ch, 2 * y + 1, 2 * xx + 1]];
                    }
                }
            }
            accum(&mut grads[x.0], gx.into_dyn());
        };
        self.push(out.into_dyn(), needs, Some(Box::new(bwd)), false)
    }

    /// 2x2 average pooling; requires even spatial dims.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let mut out = Array3::<f64>::zeros((c, h / 2, w / 2));
        for ch in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    out[[ch, y, xx]] = 0.25
                        * (xv[[ch, 2 * y, 2 * xx]]
                            + xv[[ch, 2 * y, 2 * xx + 1]]
                            + xv[[ch, 2 * y + 1, 2 * xx]]
                            + xv[[ch, 2 * y + 1, 2 * xx + 1]]);
                }
            }
        }
        let needs = self.needs_grad(x);
        let bwd = move |g: &Graph, go: &Arr, grads: &mut Vec<Option<Arr>>| {
            let gov = go.view().into_dimensionality::<Ix3>().unwrap();
            let dim = g.value(x).raw_dim();
            let (c, h, w) = (dim[0], dim[1], dim[2]);
            let mut gx = Array3::<f64>::zeros((c, h, w));
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        gx[[ch, y, xx]] = 0.25 * gov[[ch, y / 2, xx / 2]];
                    }
                }
            }
            accum(&mut grads[x.0], gx.into_dyn());
        };
        self.push(out.into_dyn(), needs, Some(Box::new(bwd)), false)
    }
}

fn unfold_forward(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array2::<f64>::zeros((c * k * k, hout * wout));
    for ky in 0..k {
        for kx in 0..k {
            for oy in 0..hout {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ox in 0..wout {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let col = oy * wout + ox;
                    for ch in 0..c {
                        out[[ch * k * k + ky * k + kx, col]] = x[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    out
}

/// One clamped bilinear sample location shared by forward and backward.
struct SamplePoint {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    x_interior: bool,
    y_interior: bool,
}

impl SamplePoint {
    fn new(sx: f64, sy: f64, wf: usize, hf: usize) -> Self {
        let max_x = (wf - 1) as f64;
        let max_y = (hf - 1) as f64;
        let cx = sx.clamp(0.0, max_x);
        let cy = sy.clamp(0.0, max_y);
        let (x0, fx) = split_cell(cx, wf);
        let (y0, fy) = split_cell(cy, hf);
        SamplePoint {
            x0,
            y0,
            x1: (x0 + 1).min(wf - 1),
            y1: (y0 + 1).min(hf - 1),
            fx,
            fy,
            x_interior: sx > 0.0 && sx < max_x,
            y_interior: sy > 0.0 && sy < max_y,
        }
    }

    fn sample(&self, f: &ndarray::ArrayView3<f64>, ch: usize) -> f64 {
        let (fx, fy) = (self.fx, self.fy);
        (1.0 - fy) * ((1.0 - fx) * f[[ch, self.y0, self.x0]] + fx * f[[ch, self.y0, self.x1]])
            + fy * ((1.0 - fx) * f[[ch, self.y1, self.x0]] + fx * f[[ch, self.y1, self.x1]])
    }

    fn scatter(&self, gf: &mut Array3<f64>, ch: usize, g: f64) {
        let (fx, fy) = (self.fx, self.fy);
        gf[[ch, self.y0, self.x0]] += g * (1.0 - fy) * (1.0 - fx);
        gf[[ch, self.y0, self.x1]] += g * (1.0 - fy) * fx;
        gf[[ch, self.y1, self.x0]] += g * fy * (1.0 - fx);
        gf[[ch, self.y1, self.x1]] += g * fy * fx;
    }

    /// d(sample)/d(sx), d(sample)/d(sy); zero along clamped axes.
    fn pos_grad(&self, f: &ndarray::ArrayView3<f64>, ch: usize) -> (f64, f64) {
        let (fx, fy) = (self.fx, self.fy);
        let dx = if self.x_interior {
            (1.0 - fy) * (f[[ch, self.y0, self.x1]] - f[[ch, self.y0, self.x0]])
                + fy * (f[[ch, self.y1, self.x1]] - f[[ch, self.y1, self.x0]])
        } else {
            0.0
        };
        let dy = if self.y_interior {
            (1.0 - fx) * (f[[ch, self.y1, self.x0]] - f[[ch, self.y0, self.x0]])
                + fx * (f[[ch, self.y1, self.x1]] - f[[ch, self.y0, self.x1]])
        } else {
            0.0
        };
        (dx, dy)
    }
}

/// Split a clamped in-range coordinate into its base cell and fraction.
fn split_cell(c: f64, extent: usize) -> (usize, f64) {
    if extent == 1 {
        return (0, 0.0);
    }
    let base = (c.floor() as usize).min(extent - 2);
    (base, c - base as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr3(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Arr {
        Array3::from_shape_fn((c, h, w), |(a, b, d)| f(a, b, d)).into_dyn()
    }

    #[test]
    fn grid_sample_identity_is_exact() {
        let mut g = Graph::new();
        let field = g.leaf(arr3(2, 4, 5, |c, y, x| (c * 100 + y * 10 + x) as f64));
        let coords = g.constant(identity_grid(4, 5));
        let out = g.grid_sample(field, coords);
        assert_eq!(g.value(out), g.value(field));
    }

    #[test]
    fn grid_sample_half_integer_averages() {
        let mut g = Graph::new();
        // ramp in x: value = x
        let field = g.leaf(arr3(1, 4, 4, |_, _, x| x as f64));
        let mut coords = Array3::<f64>::zeros((2, 1, 1));
        coords[[0, 0, 0]] = 1.5;
        coords[[1, 0, 0]] = 2.0;
        let coords = g.constant(coords.into_dyn());
        let out = g.grid_sample(field, coords);
        assert!((g.value(out)[[0, 0, 0]] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn grid_sample_clamps_to_border() {
        let mut g = Graph::new();
        let field = g.leaf(arr3(1, 3, 3, |_, y, x| (y * 3 + x) as f64));
        let mut coords = Array3::<f64>::zeros((2, 1, 2));
        coords[[0, 0, 0]] = -5.0;
        coords[[1, 0, 0]] = -5.0;
        coords[[0, 0, 1]] = 10.0;
        coords[[1, 0, 1]] = 10.0;
        let coords = g.constant(coords.into_dyn());
        let out = g.grid_sample(field, coords);
        assert_eq!(g.value(out)[[0, 0, 0]], 0.0);
        assert_eq!(g.value(out)[[0, 0, 1]], 8.0);
    }

    #[test]
    fn unfold_matches_manual_patch() {
        let mut g = Graph::new();
        let x = g.leaf(arr3(1, 3, 3, |_, y, x| (y * 3 + x) as f64));
        let cols = g.unfold(x, 3, 1, 1);
        let v = g.value(cols);
        // center output position (1,1) sees the full image
        let col = 1 * 3 + 1;
        for j in 0..9 {
            assert_eq!(v[[j, col]], j as f64);
        }
        // corner (0,0) with pad 1: top-left entries are zero padding
        assert_eq!(v[[0, 0]], 0.0);
        assert_eq!(v[[4, 0]], 0.0); // kernel center hits pixel (0,0)
    }

    #[test]
    fn matmul_grads_match_transpose_rule() {
        let mut g = Graph::new();
        let a = g.leaf(Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64).into_dyn());
        let b = g.leaf(Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64).into_dyn());
        let y = g.matmul(a, b);
        let s = g.sum(y);
        let grads = g.backward(s);
        // d sum(AB) / dA = ones * B^T
        let bv = g.value(b).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let expect = Array2::<f64>::ones((2, 2)).dot(&bv.t());
        assert_eq!(grads.wrt(a).unwrap().clone().into_dimensionality::<Ix2>().unwrap(), expect);
    }
}
