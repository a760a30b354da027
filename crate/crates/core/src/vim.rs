//! Bidirectional selective-scan token mixer.
//!
//! One block maps `[N, T, D] → [N, T, D]`:
//!
//! ```text
//! z    = in_proj(rms_norm(x))                 [N, T, 2D]
//! gate = silu(gate_proj(rms_norm(x)))         [N, T, 2D]
//! fwd  = scan(silu(causal_conv(z)))
//! bwd  = reverse(scan(silu(causal_conv(reverse(z)))))
//! out  = x + out_proj(gate ∘ (fwd + bwd))
//! ```
//!
//! The two directions have independent conv and scan parameters; reversing
//! the token order while swapping the branch roles reverses the output
//! exactly. A stack applies blocks in order and finishes with one more RMS
//! norm.

use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::numcore::ops;
use crate::numcore::tape::{ParamId, ParamStore, Tape, Var};
use crate::numcore::tensor::Tensor;
use crate::ssm::{selective_scan, SsmParams};

/// Depthwise convolution width used in every branch.
pub const CONV_WIDTH: usize = 4;

/// Channel expansion factor: inner width is `expand · dim`.
pub const EXPAND: usize = 2;

const NORM_EPS: f64 = 1e-6;

/// Parameters of one scan direction: short causal conv then selective scan.
pub struct BranchParams {
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub ssm: SsmParams,
}

impl BranchParams {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_inner: usize,
        n: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let kb = 1.0 / (CONV_WIDTH as f64).sqrt();
        let conv_kernel = store.register(
            format!("{prefix}.conv_kernel"),
            uniform_tensor(rng, &[d_inner, CONV_WIDTH], kb),
        );
        let conv_bias = store.register(
            format!("{prefix}.conv_bias"),
            uniform_tensor(rng, &[d_inner], kb),
        );
        let ssm = SsmParams::init(store, &format!("{prefix}.ssm"), d_inner, n, rng);
        BranchParams {
            conv_kernel,
            conv_bias,
            ssm,
        }
    }
}

/// One bidirectional block. `dim` is the token width on the residual stream.
pub struct VimBlockParams {
    pub dim: usize,
    pub d_inner: usize,
    pub norm_scale: ParamId,
    pub in_proj: ParamId,
    pub gate_proj: ParamId,
    pub out_proj: ParamId,
    pub fwd: BranchParams,
    pub bwd: BranchParams,
}

fn uniform_tensor(rng: &mut ChaCha12Rng, shape: &[usize], bound: f64) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

impl VimBlockParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        n_state: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let d_inner = EXPAND * dim;
        let norm_scale = store.register(format!("{prefix}.norm_scale"), Tensor::ones(&[dim]));
        let ib = 1.0 / (dim as f64).sqrt();
        let in_proj = store.register(
            format!("{prefix}.in_proj"),
            uniform_tensor(rng, &[dim, d_inner], ib),
        );
        let gate_proj = store.register(
            format!("{prefix}.gate_proj"),
            uniform_tensor(rng, &[dim, d_inner], ib),
        );
        let ob = 1.0 / (d_inner as f64).sqrt();
        let out_proj = store.register(
            format!("{prefix}.out_proj"),
            uniform_tensor(rng, &[d_inner, dim], ob),
        );
        let fwd = BranchParams::init(store, &format!("{prefix}.fwd"), d_inner, n_state, rng);
        let bwd = BranchParams::init(store, &format!("{prefix}.bwd"), d_inner, n_state, rng);
        VimBlockParams {
            dim,
            d_inner,
            norm_scale,
            in_proj,
            gate_proj,
            out_proj,
            fwd,
            bwd,
        }
    }

    /// Same parameters with the two direction roles exchanged.
    #[cfg(test)]
    fn swapped(&self) -> VimBlockParams {
        VimBlockParams {
            dim: self.dim,
            d_inner: self.d_inner,
            norm_scale: self.norm_scale,
            in_proj: self.in_proj,
            gate_proj: self.gate_proj,
            out_proj: self.out_proj,
            fwd: BranchParams {
                conv_kernel: self.bwd.conv_kernel,
                conv_bias: self.bwd.conv_bias,
                ssm: SsmParams { ..self.bwd.ssm },
            },
            bwd: BranchParams {
                conv_kernel: self.fwd.conv_kernel,
                conv_bias: self.fwd.conv_bias,
                ssm: SsmParams { ..self.fwd.ssm },
            },
        }
    }
}

fn branch_forward(
    tape: &mut Tape,
    store: &ParamStore,
    branch: &BranchParams,
    z: Var,
) -> Result<Var> {
    let kern = tape.param(store, branch.conv_kernel);
    let bias = tape.param(store, branch.conv_bias);
    let conv = ops::conv1d_depthwise(tape, z, kern, Some(bias), true)?;
    let act = ops::silu(tape, conv);
    selective_scan(tape, store, &branch.ssm, act)
}

/// Applies one block to `tokens: [N, T, D]`.
pub fn vim_block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &VimBlockParams,
    tokens: Var,
) -> Result<Var> {
    let scale = tape.param(store, params.norm_scale);
    let normed = ops::rms_norm(tape, tokens, scale, NORM_EPS)?;
    let in_w = tape.param(store, params.in_proj);
    let z = ops::matmul(tape, normed, in_w)?;
    let gate_w = tape.param(store, params.gate_proj);
    let gate_pre = ops::matmul(tape, normed, gate_w)?;
    let gate = ops::silu(tape, gate_pre);

    let fwd = branch_forward(tape, store, &params.fwd, z)?;
    let z_rev = ops::reverse_axis(tape, z, 1)?;
    let bwd_rev = branch_forward(tape, store, &params.bwd, z_rev)?;
    let bwd = ops::reverse_axis(tape, bwd_rev, 1)?;

    let mixed = ops::add(tape, fwd, bwd)?;
    let gated = ops::mul(tape, gate, mixed)?;
    let out_w = tape.param(store, params.out_proj);
    let proj = ops::matmul(tape, gated, out_w)?;
    ops::add(tape, tokens, proj)
}

/// A stack of blocks followed by a final RMS norm.
pub struct VimStack {
    pub blocks: Vec<VimBlockParams>,
    pub final_norm: ParamId,
}

impl VimStack {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        depth: usize,
        dim: usize,
        n_state: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| VimBlockParams::init(store, &format!("{prefix}.block{i}"), dim, n_state, rng))
            .collect();
        let final_norm = store.register(format!("{prefix}.final_norm"), Tensor::ones(&[dim]));
        VimStack { blocks, final_norm }
    }
}

/// Runs every block in order, then the final norm. An empty stack reduces to
/// the final norm alone.
pub fn stack_forward(
    tape: &mut Tape,
    store: &ParamStore,
    stack: &VimStack,
    tokens: Var,
) -> Result<Var> {
    let mut h = tokens;
    for block in &stack.blocks {
        h = vim_block_forward(tape, store, block, h)?;
    }
    let scale = tape.param(store, stack.final_norm);
    ops::rms_norm(tape, h, scale, NORM_EPS)
}
