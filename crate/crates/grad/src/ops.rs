use crate::tensor::Tensor;
use crate::var::Var;

fn unary(x: &Var, value: Tensor, df: impl Fn(f32, f32) -> f32 + 'static) -> Var {
    // df(input, output) -> local derivative
    let out_for_grad = value.clone();
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let xv = parents[0].value();
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(out_for_grad.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data))]
        }),
    )
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                vec![
                    Some(g.zip_map(p[1].value(), |g, b| g * b)),
                    Some(g.zip_map(p[0].value(), |g, a| g * a)),
                ]
            }),
        )
    }

    pub fn scale(&self, factor: f32) -> Var {
        let value = self.value().map(|v| v * factor);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.map(|v| v * factor))]),
        )
    }

    pub fn add_scalar(&self, c: f32) -> Var {
        let value = self.value().map(|v| v + c);
        Var::from_op(value, vec![self.clone()], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn relu(&self) -> Var {
        let value = self.value().map(|v| v.max(0.0));
        unary(self, value, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f32) -> Var {
        let value = self.value().map(|v| if v > 0.0 { v } else { slope * v });
        unary(self, value, move |x, _| if x > 0.0 { 1.0 } else { slope })
    }

    pub fn tanh(&self) -> Var {
        let value = self.value().map(f32::tanh);
        unary(self, value, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().map(sigmoid);
        unary(self, value, |_, y| y * (1.0 - y))
    }

    pub fn abs(&self) -> Var {
        let value = self.value().map(f32::abs);
        unary(self, value, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Var {
        let value = self.value().map(|v| v * v);
        unary(self, value, |x, _| 2.0 * x)
    }

    /// `ln(max(x, floor))`; zero gradient below the floor.
    pub fn log_floor(&self, floor: f32) -> Var {
        let value = self.value().map(|v| v.max(floor).ln());
        unary(self, value, move |x, _| if x > floor { 1.0 / x } else { 0.0 })
    }

    /// `atanh(clamp(x, -limit, limit))`; zero gradient outside the clamp.
    pub fn atanh_clip(&self, limit: f32) -> Var {
        let value = self.value().map(|v| v.clamp(-limit, limit).atanh());
        unary(self, value, move |x, _| {
            if x.abs() < limit {
                1.0 / (1.0 - x * x)
            } else {
                0.0
            }
        })
    }

    pub fn sum_all(&self) -> Var {
        let value = Tensor::scalar(self.value().sum() as f32);
        let shape = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().numel() as f32;
        self.sum_all().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let old = self.shape().to_vec();
        let value = self.value().clone().reshape(shape);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&old))]),
        )
    }

    /// Concatenation along `axis`.
    pub fn cat(vars: &[Var], axis: usize) -> Var {
        assert!(!vars.is_empty(), "cat of zero tensors");
        let first = vars[0].shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let sizes: Vec<usize> = vars
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), first.len(), "cat rank mismatch");
                assert_eq!(&s[..axis], &first[..axis], "cat shape mismatch");
                assert_eq!(&s[axis + 1..], &first[axis + 1..], "cat shape mismatch");
                s[axis]
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in vars.iter().zip(&sizes) {
                let chunk = sz * inner;
                data.extend_from_slice(&v.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, data);
        Var::from_op(
            value,
            vars.to_vec(),
            Box::new(move |g, parents| {
                let mut outs: Vec<Vec<f32>> = sizes
                    .iter()
                    .map(|&sz| Vec::with_capacity(outer * sz * inner))
                    .collect();
                let gd = g.data();
                let mut offset = 0;
                for _ in 0..outer {
                    for (out, &sz) in outs.iter_mut().zip(&sizes) {
                        let chunk = sz * inner;
                        out.extend_from_slice(&gd[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                outs.into_iter()
                    .zip(parents)
                    .map(|(d, p)| Some(Tensor::new(p.shape(), d)))
                    .collect()
            }),
        )
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&self) -> Var {
        let (n, c, h, w) = self.value().dims4();
        let hw = h * w;
        let data = self
            .value()
            .data()
            .chunks(hw)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let value = Tensor::new(&[n, c], data);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(n * c * hw);
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv / hw as f32, hw));
                }
                vec![Some(Tensor::new(&[n, c, h, w], d))]
            }),
        )
    }

    /// `x[n, in] · weight[out, in]ᵀ + bias[out]`.
    pub fn linear(&self, weight: &Var, bias: &Var) -> Var {
        let (n, fin) = match self.shape() {
            &[n, f] => (n, f),
            s => panic!("linear expects [n, in], got {s:?}"),
        };
        let (fout, win) = match weight.shape() {
            &[o, i] => (o, i),
            s => panic!("linear weight expects [out, in], got {s:?}"),
        };
        assert_eq!(fin, win, "linear width mismatch");
        assert_eq!(bias.shape(), &[fout], "linear bias shape");
        let mut out = vec![0.0f32; n * fout];
        let (x, wt, b) = (self.value().data(), weight.value().data(), bias.value().data());
        for r in 0..n {
            for o in 0..fout {
                let mut acc = b[o];
                for i in 0..fin {
                    acc += x[r * fin + i] * wt[o * fin + i];
                }
                out[r * fout + o] = acc;
            }
        }
        Var::from_op(
            Tensor::new(&[n, fout], out),
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, p| {
                let (x, wt) = (p[0].value().data(), p[1].value().data());
                let gd = g.data();
                let mut dx = vec![0.0f32; n * fin];
                let mut dw = vec![0.0f32; fout * fin];
                let mut db = vec![0.0f32; fout];
                for r in 0..n {
                    for o in 0..fout {
                        let go = gd[r * fout + o];
                        db[o] += go;
                        for i in 0..fin {
                            dx[r * fin + i] += go * wt[o * fin + i];
                            dw[o * fin + i] += go * x[r * fin + i];
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[n, fin], dx)),
                    Some(Tensor::new(&[fout, fin], dw)),
                    Some(Tensor::new(&[fout], db)),
                ]
            }),
        )
    }

    /// Row-wise softmax of an `[n, k]` tensor.
    pub fn softmax_rows(&self) -> Var {
        let (n, k) = match self.shape() {
            &[n, k] => (n, k),
            s => panic!("softmax_rows expects [n, k], got {s:?}"),
        };
        let mut out = vec![0.0f32; n * k];
        for (row, dst) in self.value().data().chunks(k).zip(out.chunks_mut(k)) {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0f64;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                z += *d as f64;
            }
            for d in dst.iter_mut() {
                *d = (*d as f64 / z) as f32;
            }
        }
        let value = Tensor::new(&[n, k], out);
        let probs = value.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0f32; n * k];
                for r in 0..n {
                    let p = &probs.data()[r * k..(r + 1) * k];
                    let gr = &g.data()[r * k..(r + 1) * k];
                    let dot: f32 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dx[r * k + j] = p[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(&[n, k], dx))]
            }),
        )
    }

    /// Reduces to a scalar through a caller-supplied function that returns
    /// both the value and its gradient with respect to every input element.
    pub fn scalar_map(&self, f: impl Fn(&[f32]) -> (f32, Vec<f32>)) -> Var {
        let (value, grad) = f(self.value().data());
        assert_eq!(grad.len(), self.value().numel(), "scalar_map gradient length");
        let grad = Tensor::new(self.shape(), grad);
        Var::from_op(
            Tensor::scalar(value),
            vec![self.clone()],
            Box::new(move |g, _| {
                let s = g.item();
                vec![Some(grad.map(|v| v * s))]
            }),
        )
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Sum of scalar vars.
pub fn sum(vars: &[Var]) -> Var {
    let mut it = vars.iter();
    let first = it.next().expect("sum of zero terms").clone();
    it.fold(first, |acc, v| acc.add(v))
}
