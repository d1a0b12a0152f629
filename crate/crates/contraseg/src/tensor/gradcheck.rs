//! Central finite-difference gradient verification.

use super::{Graph, Result, Tensor, Var};

/// Settings for [`gradcheck`]. `rel_tol` bounds |analytic - numeric| relative
/// to the larger magnitude; elements where both are below `zero_floor` are
/// treated as matching zeros.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    pub zero_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            zero_floor: 1e-7,
        }
    }
}

/// Checks the gradient of a scalar-valued graph builder against central
/// finite differences, perturbing every element of every input marked
/// `requires_grad`. The builder is re-invoked from scratch for each probe, so
/// it must be a pure function of the supplied tensors.
pub fn gradcheck<F>(build: F, inputs: &[Tensor], cfg: &GradCheck) -> std::result::Result<(), String>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradcheck_skip(build, inputs, cfg, |_, _| false)
}

/// [`gradcheck`] with a probe filter. Elements where `skip(input, element)`
/// returns true are not compared; losses whose forward pass reads a tensor
/// through both a live branch and a stop-gradient branch use this to exclude
/// the stop-gradient elements, where finite differences see the severed path
/// but the analytic gradient intentionally does not.
pub fn gradcheck_skip<F, S>(
    build: F,
    inputs: &[Tensor],
    cfg: &GradCheck,
    skip: S,
) -> std::result::Result<(), String>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    S: Fn(usize, usize) -> bool,
{
    let eval = |tensors: &[Tensor]| -> std::result::Result<(f64, Vec<Option<Vec<f64>>>), String> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t)).collect();
        let root = build(&mut g, &vars).map_err(|e| e.to_string())?;
        if g.value(root).numel() != 1 {
            return Err(format!(
                "gradcheck root must be scalar, got {:?}",
                g.shape(root)
            ));
        }
        g.backward(root).map_err(|e| e.to_string())?;
        let grads = vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec())).collect();
        Ok((g.item(root), grads))
    };

    let (_, analytic) = eval(inputs)?;
    let mut work: Vec<Tensor> = inputs.to_vec();

    for (ti, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let a = analytic[ti]
            .clone()
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for ei in 0..input.numel() {
            if skip(ti, ei) {
                continue;
            }
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + cfg.step;
            let (fp, _) = eval(&work)?;
            work[ti].data_mut()[ei] = orig - cfg.step;
            let (fm, _) = eval(&work)?;
            work[ti].data_mut()[ei] = orig;

            let numeric = (fp - fm) / (2.0 * cfg.step);
            let scale = a[ei].abs().max(numeric.abs());
            if scale <= cfg.zero_floor {
                continue;
            }
            let rel = (a[ei] - numeric).abs() / scale;
            if rel > cfg.rel_tol {
                return Err(format!(
                    "gradient mismatch: input {ti} element {ei}: analytic {} vs numeric {} (rel err {rel:.3e} > {:.1e})",
                    a[ei], numeric, cfg.rel_tol
                ));
            }
        }
    }
    Ok(())
}

/// [`gradcheck`] repeated over several independently seeded instances
/// produced by `make_inputs(instance_index)`.
pub fn gradcheck_multi<F, M>(
    make_inputs: M,
    build: F,
    instances: usize,
    cfg: &GradCheck,
) -> std::result::Result<(), String>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    M: Fn(u64) -> Vec<Tensor>,
{
    for i in 0..instances {
        let inputs = make_inputs(i as u64);
        gradcheck(&build, &inputs, cfg).map_err(|e| format!("instance {i}: {e}"))?;
    }
    Ok(())
}
