//! Central finite-difference verification of tape gradients. Runs in `f64`;
//! the step and tolerance defaults suit smooth ops at unit scale.

use ndarray::ArrayD;

use super::{Tape, TensorRef};

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients of `f` w.r.t. every entry of `inputs` against
/// central finite differences. `f` must rebuild the computation on the tape
/// it is given and return a scalar node.
pub fn check_input_grads<Builder>(
    build: Builder,
    inputs: &[ArrayD<f64>],
    step: f64,
    rel_tol: f64,
) -> GradCheckReport
where
    Builder: Fn(&mut Tape<f64>, &[TensorRef]) -> TensorRef,
{
    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::new(false);
        let refs: Vec<TensorRef> = arrays.iter().map(|a| tape.leaf(a.clone(), false)).collect();
        let out = build(&mut tape, &refs);
        *tape.value(out).first().expect("scalar output")
    };

    // Analytic pass.
    let mut tape = Tape::new(true);
    let refs: Vec<TensorRef> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let out = build(&mut tape, &refs);
    let grads = tape.backward(out);

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(refs[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        let n = input.len();
        for flat in 0..n {
            let orig = work[i].as_slice().unwrap()[flat];
            let h = step * (1.0 + orig.abs());
            work[i].as_slice_mut().unwrap()[flat] = orig + h;
            let fp = eval(&work);
            work[i].as_slice_mut().unwrap()[flat] = orig - h;
            let fm = eval(&work);
            work[i].as_slice_mut().unwrap()[flat] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[flat];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            let rel = (an - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    assert!(
        max_rel <= rel_tol,
        "gradient check failed: max relative error {max_rel:.3e} > {rel_tol:.1e} over {checked} entries"
    );
    GradCheckReport {
        max_rel_err: max_rel,
        checked,
    }
}
