use crate::tensor::Tensor;
use crate::var::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one `[c, h, w]` image into a `[c*k*k, ho*wo]` matrix.
fn im2col(x: &[f32], g: &ConvGeometry, col: &mut [f32]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `dx`.
fn col2im(col: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && (ix as usize) < g.width {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c[m, n] = alpha * op(a)[m, k] * op(b)[k, n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides above address only elements inside `a`, `b` and `c`;
    // every call site derives them from the slice dimensions.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Var {
    /// 2-D convolution. `weight` is `[out, in, k, k]`, `bias` is `[out]`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, padding: usize) -> Var {
        let (n, cin, h, w) = self.value().dims4();
        let (cout, wcin, k, k2) = weight.value().dims4();
        assert_eq!(k, k2, "only square kernels are supported");
        assert_eq!(cin, wcin, "conv2d channel mismatch: input {cin}, weight {wcin}");
        assert!(h + 2 * padding >= k && w + 2 * padding >= k, "kernel larger than input");
        let geo = ConvGeometry {
            in_channels: cin,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
        };
        let (ho, wo) = (geo.out_height(), geo.out_width());
        let (rows, cols) = (geo.col_rows(), geo.col_cols());
        let x = self.value().data();
        let wt = weight.value().data();
        let mut out = vec![0.0f32; n * cout * ho * wo];
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * cols] };
        for i in 0..n {
            let xi = &x[i * cin * h * w..(i + 1) * cin * h * w];
            let src: &[f32] = if geo.is_pointwise() {
                xi
            } else {
                im2col(xi, &geo, &mut col);
                &col
            };
            let yi = &mut out[i * cout * cols..(i + 1) * cout * cols];
            if let Some(b) = bias {
                for (o, chunk) in yi.chunks_mut(cols).enumerate() {
                    chunk.fill(b.value().data()[o]);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            gemm(cout, rows, cols, wt, (rows as isize, 1), src, (cols as isize, 1), beta, yi);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(
            Tensor::new(&[n, cout, ho, wo], out),
            parents,
            Box::new(move |g, p| conv2d_backward(g, p, &geo, n, cout)),
        )
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&self) -> Var {
        let (n, c, h, w) = self.value().dims4();
        let src = self.value().data();
        let mut out = vec![0.0f32; n * c * 4 * h * w];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = plane[(y / 2) * w + x / 2];
                }
            }
        }
        Var::from_op(
            Tensor::new(&[n, c, 2 * h, 2 * w], out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0f32; n * c * h * w];
                for (gp, dp) in g.data().chunks(4 * h * w).zip(dx.chunks_mut(h * w)) {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dp[(y / 2) * w + x / 2] += gp[y * 2 * w + x];
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], dx))]
            }),
        )
    }
}

fn conv2d_backward(
    g: &Tensor,
    p: &[Var],
    geo: &ConvGeometry,
    n: usize,
    cout: usize,
) -> Vec<Option<Tensor>> {
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let (cin, h, w) = (geo.in_channels, geo.height, geo.width);
    let x = p[0].value().data();
    let wt = p[1].value().data();
    let gd = g.data();
    let want_x = p[0].requires_grad();
    let want_w = p[1].requires_grad();
    let want_b = p.len() > 2 && p[2].requires_grad();

    let mut dx = want_x.then(|| vec![0.0f32; n * cin * h * w]);
    let mut dw = want_w.then(|| vec![0.0f32; cout * rows]);
    let mut col = vec![0.0f32; if geo.is_pointwise() { 0 } else { rows * cols }];
    let mut dcol = vec![0.0f32; if want_x { rows * cols } else { 0 }];
    for i in 0..n {
        let gi = &gd[i * cout * cols..(i + 1) * cout * cols];
        if let Some(dw) = dw.as_mut() {
            let xi = &x[i * cin * h * w..(i + 1) * cin * h * w];
            let src: &[f32] = if geo.is_pointwise() {
                xi
            } else {
                im2col(xi, geo, &mut col);
                &col
            };
            // dW[cout, rows] += dY[cout, cols] · colᵀ[cols, rows]
            gemm(cout, cols, rows, gi, (cols as isize, 1), src, (1, cols as isize), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * cin * h * w..(i + 1) * cin * h * w];
            if geo.is_pointwise() {
                // dX[cin, cols] = Wᵀ[cin, cout] · dY[cout, cols]
                gemm(rows, cout, cols, wt, (1, rows as isize), gi, (cols as isize, 1), 0.0, dxi);
            } else {
                gemm(
                    rows,
                    cout,
                    cols,
                    wt,
                    (1, rows as isize),
                    gi,
                    (cols as isize, 1),
                    0.0,
                    &mut dcol,
                );
                col2im(&dcol, geo, dxi);
            }
        }
    }
    let db = want_b.then(|| {
        let mut db = vec![0.0f32; cout];
        for i in 0..n {
            for (o, chunk) in gd[i * cout * cols..(i + 1) * cout * cols].chunks(cols).enumerate() {
                db[o] += chunk.iter().sum::<f32>();
            }
        }
        Tensor::new(&[cout], db)
    });

    let mut grads = vec![
        dx.map(|d| Tensor::new(&[n, cin, h, w], d)),
        dw.map(|d| Tensor::new(&[cout, cin, geo.kernel, geo.kernel], d)),
    ];
    if p.len() > 2 {
        grads.push(db);
    }
    grads
}
