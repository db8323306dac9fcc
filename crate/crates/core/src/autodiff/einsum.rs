//! Two-operand Einstein-summation contraction.
//!
//! Axes are classified as batch (in both inputs and the output), left/right
//! free (in one input and the output), contracted (in both inputs only) or
//! summed-out (in one input only). Each operand is permuted to
//! `(batch, free, contracted)` order and the product runs as a batched
//! matrix multiply.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{permute_data, Tensor};

/// Below this many multiply-adds per batch entry the plain loop beats GEMM setup.
const GEMM_MIN_WORK: usize = 8 * 1024;

/// A parsed `"ab,bc->ac"` signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EinsumSpec {
    pub lhs: Vec<char>,
    pub rhs: Vec<char>,
    pub out: Vec<char>,
}

impl EinsumSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let fail = |reason: &str| Error::Parse { spec: spec.to_string(), reason: reason.to_string() };
        let compact: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let (inputs, out) = compact.split_once("->").ok_or_else(|| fail("missing '->'"))?;
        if out.contains("->") {
            return Err(fail("more than one '->'"));
        }
        let operands: Vec<&str> = inputs.split(',').collect();
        if operands.len() != 2 {
            return Err(fail("expected exactly two input operands"));
        }
        let letters = |s: &str| -> Result<Vec<char>> {
            let v: Vec<char> = s.chars().collect();
            if let Some(c) = v.iter().find(|c| !c.is_ascii_alphabetic()) {
                return Err(fail(&format!("invalid index character {c:?}")));
            }
            for (i, c) in v.iter().enumerate() {
                if v[..i].contains(c) {
                    return Err(fail(&format!("index {c:?} repeated within one operand")));
                }
            }
            Ok(v)
        };
        let parsed = EinsumSpec { lhs: letters(operands[0])?, rhs: letters(operands[1])?, out: letters(out)? };
        if let Some(c) = parsed.out.iter().find(|c| !parsed.lhs.contains(c) && !parsed.rhs.contains(c)) {
            return Err(fail(&format!("output index {c:?} does not appear in any input")));
        }
        Ok(parsed)
    }
}

impl std::fmt::Display for EinsumSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = |v: &[char]| v.iter().collect::<String>();
        write!(f, "{},{}->{}", s(&self.lhs), s(&self.rhs), s(&self.out))
    }
}

/// Contracts `a` and `b` according to `spec`, e.g. `"ij,jk->ik"`.
pub fn contract<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, spec: &str) -> Result<Tensor<T>> {
    let parsed = EinsumSpec::parse(spec)?;
    contract_parsed(a, b, &parsed)
}

pub fn contract_parsed<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, spec: &EinsumSpec) -> Result<Tensor<T>> {
    let (data, shape) = contract_raw(a.data(), a.shape(), &spec.lhs, b.data(), b.shape(), &spec.rhs, &spec.out)?;
    Tensor::new(&shape, data)
}

fn extents(
    a_shape: &[usize],
    la: &[char],
    b_shape: &[usize],
    lb: &[char],
) -> Result<HashMap<char, usize>> {
    if a_shape.len() != la.len() || b_shape.len() != lb.len() {
        return Err(Error::shape(format!(
            "einsum operands of rank {} and {} labelled with {} and {} indices",
            a_shape.len(),
            b_shape.len(),
            la.len(),
            lb.len()
        )));
    }
    let mut ext = HashMap::new();
    for (&c, &n) in la.iter().zip(a_shape).chain(lb.iter().zip(b_shape)) {
        if let Some(&prev) = ext.get(&c) {
            if prev != n {
                return Err(Error::shape(format!("einsum index {c:?} has extents {prev} and {n}")));
            }
        } else {
            ext.insert(c, n);
        }
    }
    Ok(ext)
}

/// Permutes `data` so that the axes named `order` come first (in that order)
/// and the axes named `summed` come last, then sums the trailing block away.
fn arrange<T: Scalar>(data: &[T], shape: &[usize], labels: &[char], order: &[char], summed: &[char]) -> Vec<T> {
    let pos = |c: &char| labels.iter().position(|x| x == c).expect("label present");
    let perm: Vec<usize> = order.iter().chain(summed).map(pos).collect();
    let arranged = permute_data(data, shape, &perm);
    let block: usize = summed.iter().map(|c| shape[pos(c)]).product();
    if summed.is_empty() {
        return arranged;
    }
    if block == 0 {
        let kept: usize = order.iter().map(|c| shape[pos(c)]).product();
        return vec![T::zero(); kept];
    }
    arranged.chunks(block).map(|chunk| chunk.iter().copied().sum()).collect()
}

/// Raw-buffer contraction shared by the forward op and both backward rules.
pub(crate) fn contract_raw<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    la: &[char],
    b: &[T],
    b_shape: &[usize],
    lb: &[char],
    lo: &[char],
) -> Result<(Vec<T>, Vec<usize>)> {
    let ext = extents(a_shape, la, b_shape, lb)?;
    if let Some(c) = lo.iter().find(|c| !ext.contains_key(c)) {
        return Err(Error::Parse {
            spec: lo.iter().collect::<String>(),
            reason: format!("output index {c:?} does not appear in any input"),
        });
    }
    let in_a = |c: &char| la.contains(c);
    let in_b = |c: &char| lb.contains(c);
    let in_o = |c: &char| lo.contains(c);

    let batch: Vec<char> = lo.iter().copied().filter(|c| in_a(c) && in_b(c)).collect();
    let left: Vec<char> = lo.iter().copied().filter(|c| in_a(c) && !in_b(c)).collect();
    let right: Vec<char> = lo.iter().copied().filter(|c| in_b(c) && !in_a(c)).collect();
    let contr: Vec<char> = la.iter().copied().filter(|c| in_b(c) && !in_o(c)).collect();
    let a_sum: Vec<char> = la.iter().copied().filter(|c| !in_b(c) && !in_o(c)).collect();
    let b_sum: Vec<char> = lb.iter().copied().filter(|c| !in_a(c) && !in_o(c)).collect();

    let size = |v: &[char]| v.iter().map(|c| ext[c]).product::<usize>();
    let (nb, nl, nr, nc) = (size(&batch), size(&left), size(&right), size(&contr));

    let a_order: Vec<char> = batch.iter().chain(&left).chain(&contr).copied().collect();
    let b_order: Vec<char> = batch.iter().chain(&contr).chain(&right).copied().collect();
    let a2 = arrange(a, a_shape, la, &a_order, &a_sum);
    let b2 = arrange(b, b_shape, lb, &b_order, &b_sum);

    let mut c = vec![T::zero(); nb * nl * nr];
    batched_matmul(&a2, &b2, &mut c, nb, nl, nc, nr);

    let c_labels: Vec<char> = batch.iter().chain(&left).chain(&right).copied().collect();
    let c_shape: Vec<usize> = c_labels.iter().map(|l| ext[l]).collect();
    let perm: Vec<usize> = lo.iter().map(|l| c_labels.iter().position(|x| x == l).unwrap()).collect();
    let out_shape: Vec<usize> = lo.iter().map(|l| ext[l]).collect();
    Ok((permute_data(&c, &c_shape, &perm), out_shape))
}

fn batched_matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], nb: usize, m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || nb == 0 {
        return;
    }
    let use_gemm = k > 0 && m * k * n >= GEMM_MIN_WORK;
    for t in 0..nb {
        let at = &a[t * m * k..(t + 1) * m * k];
        let bt = &b[t * k * n..(t + 1) * k * n];
        let ct = &mut c[t * m * n..(t + 1) * m * n];
        if use_gemm {
            T::gemm(m, k, n, T::one(), at, k, 1, bt, n, 1, T::zero(), ct, n, 1);
        } else if n == 1 {
            for (i, out) in ct.iter_mut().enumerate() {
                *out = at[i * k..(i + 1) * k].iter().zip(bt).map(|(&x, &y)| x * y).sum();
            }
        } else {
            for i in 0..m {
                let row = &mut ct[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = at[i * k + p];
                    for (r, &bv) in row.iter_mut().zip(&bt[p * n..(p + 1) * n]) {
                        *r += aip * bv;
                    }
                }
            }
        }
    }
}

/// Gradient of a contraction with respect to its left operand.
///
/// Indices of the left operand that appear nowhere else were summed out in
/// the forward pass; their gradient is the reduced gradient broadcast back.
pub(crate) fn contract_grad_lhs<T: Scalar>(
    grad_out: &[T],
    spec: &EinsumSpec,
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
) -> Result<Vec<T>> {
    let out_shape: Vec<usize> = {
        let ext = extents(a_shape, &spec.lhs, b_shape, &spec.rhs)?;
        spec.out.iter().map(|c| ext[c]).collect()
    };
    let kept: Vec<char> =
        spec.lhs.iter().copied().filter(|c| spec.out.contains(c) || spec.rhs.contains(c)).collect();
    let (reduced, _) = contract_raw(grad_out, &out_shape, &spec.out, b, b_shape, &spec.rhs, &kept)?;
    Ok(broadcast_back(reduced, &kept, &spec.lhs, a_shape))
}

pub(crate) fn contract_grad_rhs<T: Scalar>(
    grad_out: &[T],
    spec: &EinsumSpec,
    a: &[T],
    a_shape: &[usize],
    b_shape: &[usize],
) -> Result<Vec<T>> {
    let swapped = EinsumSpec { lhs: spec.rhs.clone(), rhs: spec.lhs.clone(), out: spec.out.clone() };
    contract_grad_lhs(grad_out, &swapped, b_shape, a, a_shape)
}

/// Expands `data` (labelled `kept`) to the full `labels` layout by repeating
/// it along every label missing from `kept`.
fn broadcast_back<T: Scalar>(data: Vec<T>, kept: &[char], labels: &[char], shape: &[usize]) -> Vec<T> {
    if kept.len() == labels.len() {
        let kept_shape: Vec<usize> =
            kept.iter().map(|c| shape[labels.iter().position(|x| x == c).unwrap()]).collect();
        let perm: Vec<usize> = labels.iter().map(|c| kept.iter().position(|x| x == c).unwrap()).collect();
        return permute_data(&data, &kept_shape, &perm);
    }
    let missing: Vec<char> = labels.iter().copied().filter(|c| !kept.contains(c)).collect();
    let pos = |c: &char| labels.iter().position(|x| x == c).unwrap();
    let block: usize = missing.iter().map(|c| shape[pos(c)]).product();
    let mut expanded = Vec::with_capacity(data.len() * block);
    for &v in &data {
        expanded.extend(std::iter::repeat_n(v, block));
    }
    let order: Vec<char> = kept.iter().chain(&missing).copied().collect();
    let order_shape: Vec<usize> = order.iter().map(|c| shape[pos(c)]).collect();
    let perm: Vec<usize> = labels.iter().map(|c| order.iter().position(|x| x == c).unwrap()).collect();
    permute_data(&expanded, &order_shape, &perm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors() {
        for bad in ["ij,jk", "ij->i", "ij,jk,kl->il", "i1,jk->ik", "ii,ij->j", "ij,jk->iz", "ij,jk->ii"] {
            assert!(matches!(EinsumSpec::parse(bad), Err(Error::Parse { .. })), "{bad}");
        }
        let s = EinsumSpec::parse(" ij , jk -> ik ").unwrap();
        assert_eq!(s.to_string(), "ij,jk->ik");
    }

    #[test]
    fn shared_axis_mismatch_is_a_shape_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(contract(&a, &b, "ij,jk->ik"), Err(Error::Shape(_))));
        assert!(matches!(contract(&a, &b, "ijk,jk->ik"), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_contraction() {
        let eye = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::new(&[2, 2], vec![0.3, -1.2, 4.5, 2.0]).unwrap();
        assert_eq!(contract(&eye, &b, "ij,jk->ik").unwrap(), b);
    }

    #[test]
    fn multiplicative_identity() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i as f64 * 0.7).sin());
        let ones = Tensor::<f64>::ones(&[3, 4]);
        assert_eq!(contract(&a, &ones, "ild,ld->ild").unwrap(), a);
    }

    #[test]
    fn summed_out_axes_and_scalar_output() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[4], |i| i as f64 + 1.0);
        // sum_ij a_ij * sum_k b_k
        let s = contract(&a, &b, "ij,k->").unwrap();
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.data()[0], 15.0 * 10.0);
        let outer = contract(&b, &b, "i,j->ij").unwrap();
        assert_eq!(outer.get(&[2, 3]), 12.0);
    }

    #[test]
    fn large_batch_uses_gemm_path_consistently() {
        let a = Tensor::<f64>::from_fn(&[3, 40, 30], |i| ((i * 7 % 13) as f64) - 6.0);
        let b = Tensor::<f64>::from_fn(&[3, 30, 20], |i| ((i * 5 % 11) as f64) - 5.0);
        let c = contract(&a, &b, "bij,bjk->bik").unwrap();
        for t in 0..3 {
            for i in 0..40 {
                for k in 0..20 {
                    let want: f64 = (0..30).map(|j| a.get(&[t, i, j]) * b.get(&[t, j, k])).sum();
                    assert_eq!(c.get(&[t, i, k]), want);
                }
            }
        }
    }
}
