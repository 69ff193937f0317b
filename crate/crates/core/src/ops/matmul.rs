use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Tensor};

fn mat(data: &[f64], rows: usize, cols: usize, transposed: bool) -> Mat<'_> {
    if transposed {
        Mat::transposed(data, cols, rows)
    } else {
        Mat::row_major(data, rows, cols)
    }
}

impl<'t> Var<'t> {
    /// Batched matrix product `[B, M, K] @ [B, K, N]`, or `[B, M, K] @ [B, N, K]^T`
    /// when `rhs_transposed`.
    pub fn bmm(&self, rhs: &Var<'t>, rhs_transposed: bool) -> Result<Var<'t>> {
        let (&[b, m, k], rs) = (self.shape(), rhs.shape()) else {
            return Err(Error::shape(
                "bmm",
                format!("lhs {:?} is not [B, M, K]", self.shape()),
            ));
        };
        let (rb, rk, n) = match (rs, rhs_transposed) {
            (&[rb, rk, n], false) => (rb, rk, n),
            (&[rb, n, rk], true) => (rb, rk, n),
            _ => return Err(Error::shape("bmm", format!("rhs {rs:?} is not rank 3"))),
        };
        if rb != b || rk != k {
            return Err(Error::shape(
                "bmm",
                format!("{:?} @ {rs:?} (transposed: {rhs_transposed})", self.shape()),
            ));
        }
        let a = self.value.clone();
        let bt = rhs.value.clone();
        let mut out = vec![0.0; b * m * n];
        for i in 0..b {
            gemm(
                Mat::row_major(&a.data()[i * m * k..][..m * k], m, k),
                mat(&bt.data()[i * k * n..][..k * n], k, n, rhs_transposed),
                &mut out[i * m * n..][..m * n],
                0.0,
            );
        }
        let out = Tensor::from_parts(vec![b, m, n], out);
        self.tape.record("bmm", out, &[self, rhs], move |g, needs| {
            let da = needs[0].then(|| {
                let mut da = vec![0.0; b * m * k];
                for i in 0..b {
                    let rhs = &bt.data()[i * k * n..][..k * n];
                    // dA = G @ B^T, where B is the effective (k x n) operand.
                    gemm(
                        Mat::row_major(&g[i * m * n..][..m * n], m, n),
                        mat(rhs, n, k, !rhs_transposed),
                        &mut da[i * m * k..][..m * k],
                        0.0,
                    );
                }
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![0.0; b * k * n];
                for i in 0..b {
                    let lhs = &a.data()[i * m * k..][..m * k];
                    let gi = &g[i * m * n..][..m * n];
                    if rhs_transposed {
                        // stored as [n, k]: d = G^T @ A
                        gemm(
                            Mat::transposed(gi, m, n),
                            Mat::row_major(lhs, m, k),
                            &mut db[i * k * n..][..k * n],
                            0.0,
                        );
                    } else {
                        gemm(
                            Mat::transposed(lhs, m, k),
                            Mat::row_major(gi, m, n),
                            &mut db[i * k * n..][..k * n],
                            0.0,
                        );
                    }
                }
                db
            });
            vec![da, db]
        })
    }
}
