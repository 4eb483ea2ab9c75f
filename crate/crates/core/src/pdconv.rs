//! Plane-decomposed convolution blocks and the dense backbone built from them.
//!
//! A 3×3×3 kernel is replaced by three plane kernels, each collapsing one
//! axis: `k_r` is 1×3×3, `k_a` is 3×1×3, `k_z` is 3×3×1. A block runs one or
//! more chains of these kernels (ReLU after every kernel) and averages the
//! chain outputs. Which chains run is set by [`Topology`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    avg_pool3d, avg_pool3d_backward, conv3d, conv3d_backward, conv3d_macs, relu, relu_backward,
    Padding, Tensor,
};

/// Kernel slot inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelId {
    /// 1×3×3, range axis collapsed.
    R,
    /// 3×1×3, azimuth axis collapsed.
    A,
    /// 3×3×1, height axis collapsed.
    Z,
    /// Plain 3×3×3.
    Full,
}

impl KernelId {
    pub const ALL: [KernelId; 4] = [KernelId::R, KernelId::A, KernelId::Z, KernelId::Full];

    pub fn extents(self) -> [usize; 3] {
        match self {
            KernelId::R => [1, 3, 3],
            KernelId::A => [3, 1, 3],
            KernelId::Z => [3, 3, 1],
            KernelId::Full => [3, 3, 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelId::R => "k_r",
            KernelId::A => "k_a",
            KernelId::Z => "k_z",
            KernelId::Full => "k_full",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Block wiring, named after the rows of the structure comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    /// One serial chain in the configured order.
    #[serde(rename = "a")]
    Serial,
    /// Three single-kernel branches.
    #[serde(rename = "b")]
    Parallel,
    /// The configured order and its first cyclic rotation.
    #[serde(rename = "c")]
    HybridTwo,
    /// All three cyclic rotations of the configured order.
    #[default]
    #[serde(rename = "d")]
    HybridThree,
    /// Two-kernel chain, 3×1×3 then 1×3×3.
    #[serde(rename = "assym")]
    Asymmetric,
    /// A single full 3×3×3 kernel.
    #[serde(rename = "naive")]
    Full3d,
}

impl Topology {
    pub fn label(self) -> &'static str {
        match self {
            Topology::Serial => "a",
            Topology::Parallel => "b",
            Topology::HybridTwo => "c",
            Topology::HybridThree => "d",
            Topology::Asymmetric => "assym",
            Topology::Full3d => "naive",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Ok(match s {
            "a" => Topology::Serial,
            "b" => Topology::Parallel,
            "c" => Topology::HybridTwo,
            "d" => Topology::HybridThree,
            "assym" => Topology::Asymmetric,
            "naive" => Topology::Full3d,
            other => return Err(Error::config(format!("unknown pdconv.topology {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdStackConfig {
    pub topology: Topology,
    /// Kernel order of serial chains; a permutation of `R, A, Z`.
    pub order: [KernelId; 3],
    /// Skips every ReLU. Only meant for checking the block against linear
    /// references.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub linear: bool,
}

impl Default for PdStackConfig {
    fn default() -> Self {
        PdStackConfig::new(Topology::default())
    }
}

impl PdStackConfig {
    pub fn new(topology: Topology) -> Self {
        PdStackConfig { topology, order: [KernelId::R, KernelId::A, KernelId::Z], linear: false }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = self.order.to_vec();
        seen.sort();
        if seen != [KernelId::R, KernelId::A, KernelId::Z] {
            return Err(Error::config(format!("pdconv.order must permute r, a, z: {:?}", self.order)));
        }
        Ok(())
    }

    /// The kernel chains a block evaluates and averages.
    pub fn chains(&self) -> Vec<Vec<KernelId>> {
        let o = self.order;
        let rot = |s: usize| vec![o[s % 3], o[(s + 1) % 3], o[(s + 2) % 3]];
        match self.topology {
            Topology::Serial => vec![o.to_vec()],
            Topology::Parallel => o.iter().map(|k| vec![*k]).collect(),
            Topology::HybridTwo => vec![rot(0), rot(1)],
            Topology::HybridThree => vec![rot(0), rot(1), rot(2)],
            Topology::Asymmetric => vec![vec![KernelId::A, KernelId::R]],
            Topology::Full3d => vec![vec![KernelId::Full]],
        }
    }

    /// Kernel slots the topology uses, in slot order.
    pub fn kernels(&self) -> Vec<KernelId> {
        let mut ids: Vec<KernelId> = self.chains().into_iter().flatten().collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Weights of one block: the kernels its topology uses, each shaped
/// `[kr, ka, kz, C_in, C_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockKernels<T> {
    slots: [Option<Tensor<T>>; 4],
}

/// The three plane kernels of a decomposed block.
pub type DecomposedKernelSet<T> = BlockKernels<T>;

impl<T: Scalar> BlockKernels<T> {
    pub fn empty() -> Self {
        BlockKernels { slots: [None, None, None, None] }
    }

    pub fn decomposed(k_r: Tensor<T>, k_a: Tensor<T>, k_z: Tensor<T>) -> Result<Self> {
        let mut b = Self::empty();
        b.insert(KernelId::R, k_r)?;
        b.insert(KernelId::A, k_a)?;
        b.insert(KernelId::Z, k_z)?;
        Ok(b)
    }

    pub fn full(k: Tensor<T>) -> Result<Self> {
        let mut b = Self::empty();
        b.insert(KernelId::Full, k)?;
        Ok(b)
    }

    /// Builds every kernel `cfg` needs with `init(shape)`.
    pub fn for_config(
        cfg: &PdStackConfig,
        c_in: usize,
        c_out: usize,
        mut init: impl FnMut(&[usize]) -> Tensor<T>,
    ) -> Self {
        let mut b = Self::empty();
        for id in cfg.kernels() {
            let [x, y, z] = id.extents();
            b.slots[id.slot()] = Some(init(&[x, y, z, c_in, c_out]));
        }
        b
    }

    /// Identity kernels (a centered unit tap per channel) for every slot.
    pub fn identity(cfg: &PdStackConfig, channels: usize) -> Self {
        Self::for_config(cfg, channels, channels, |shape| {
            let mut t = Tensor::zeros(shape);
            for c in 0..channels {
                t.set(&[shape[0] / 2, shape[1] / 2, shape[2] / 2, c, c], T::one());
            }
            t
        })
    }

    pub fn insert(&mut self, id: KernelId, k: Tensor<T>) -> Result<()> {
        let e = id.extents();
        if k.rank() != 5 || k.shape()[..3] != e {
            return Err(Error::Dimension { op: "block kernel", lhs: e.to_vec(), rhs: k.shape().to_vec() });
        }
        self.slots[id.slot()] = Some(k);
        Ok(())
    }

    pub fn get(&self, id: KernelId) -> Result<&Tensor<T>> {
        self.slots[id.slot()]
            .as_ref()
            .ok_or_else(|| Error::config(format!("block has no {} kernel", id.name())))
    }

    pub fn get_mut(&mut self, id: KernelId) -> Option<&mut Tensor<T>> {
        self.slots[id.slot()].as_mut()
    }

    /// Present kernels in slot order.
    pub fn iter(&self) -> impl Iterator<Item = (KernelId, &Tensor<T>)> {
        KernelId::ALL.into_iter().zip(&self.slots).filter_map(|(id, s)| s.as_ref().map(|t| (id, t)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (KernelId, &mut Tensor<T>)> {
        KernelId::ALL.into_iter().zip(&mut self.slots).filter_map(|(id, s)| s.as_mut().map(|t| (id, t)))
    }

    /// Zero tensors with this block's shapes.
    pub fn zeros_like(&self) -> Self {
        let mut b = Self::empty();
        for (id, t) in self.iter() {
            b.slots[id.slot()] = Some(Tensor::zeros(t.shape()));
        }
        b
    }

    pub fn num_params(&self) -> usize {
        self.iter().map(|(_, t)| t.len()).sum()
    }

    fn accumulate(&mut self, id: KernelId, g: &Tensor<T>) -> Result<()> {
        match self.slots[id.slot()].as_mut() {
            Some(t) => t.add_assign(g),
            None => {
                self.slots[id.slot()] = Some(g.clone());
                Ok(())
            }
        }
    }

    /// Input and output channel counts, checked for consistency.
    pub fn channels(&self) -> Result<(usize, usize)> {
        let mut dims = None;
        for (_, t) in self.iter() {
            let d = (t.shape()[3], t.shape()[4]);
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::config(format!(
                        "block kernels disagree on channels: {prev:?} vs {d:?}"
                    )))
                }
                _ => {}
            }
        }
        dims.ok_or_else(|| Error::config("block has no kernels"))
    }
}

/// Intermediate values of one block evaluation, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockTape<T> {
    /// Per chain: the input to each kernel followed by that kernel's
    /// pre-activation output.
    chains: Vec<Vec<(Tensor<T>, Tensor<T>)>>,
}

fn check_block<T: Scalar>(x: &Tensor<T>, params: &BlockKernels<T>, cfg: &PdStackConfig) -> Result<()> {
    cfg.validate()?;
    let (c_in, c_out) = params.channels()?;
    let chains = cfg.chains();
    let multi_step = chains.iter().any(|c| c.len() > 1);
    if multi_step && c_in != c_out {
        return Err(Error::config(format!(
            "serial chains need equal widths, got {c_in} -> {c_out}"
        )));
    }
    if x.rank() != 4 || x.shape()[3] != c_in {
        return Err(Error::config(format!(
            "block expects {c_in} input channels, got shape {:?}",
            x.shape()
        )));
    }
    for id in cfg.kernels() {
        params.get(id)?;
    }
    Ok(())
}

pub fn pd_block_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &BlockKernels<T>,
    cfg: &PdStackConfig,
    padding: [Padding; 3],
) -> Result<Tensor<T>> {
    pd_block_forward_taped(x, params, cfg, padding).map(|(y, _)| y)
}

pub fn pd_block_forward_taped<T: Scalar>(
    x: &Tensor<T>,
    params: &BlockKernels<T>,
    cfg: &PdStackConfig,
    padding: [Padding; 3],
) -> Result<(Tensor<T>, BlockTape<T>)> {
    check_block(x, params, cfg)?;
    let chains = cfg.chains();
    let inv = T::lit(1.0 / chains.len() as f64);
    let mut out: Option<Tensor<T>> = None;
    let mut tape = BlockTape { chains: Vec::with_capacity(chains.len()) };
    for chain in &chains {
        let mut steps = Vec::with_capacity(chain.len());
        let mut h = x.clone();
        for &id in chain {
            let pre = conv3d(&h, params.get(id)?, padding)?;
            let next = if cfg.linear { pre.clone() } else { relu(&pre) };
            steps.push((h, pre));
            h = next;
        }
        tape.chains.push(steps);
        match out.as_mut() {
            None => out = Some(h.scale(inv)),
            Some(o) => o.axpy(inv, &h)?,
        }
    }
    Ok((out.expect("at least one chain"), tape))
}

/// Gradients of a block with respect to its input and its kernels.
pub fn pd_block_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &BlockKernels<T>,
    cfg: &PdStackConfig,
    padding: [Padding; 3],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, BlockKernels<T>)> {
    let (_, tape) = pd_block_forward_taped(x, params, cfg, padding)?;
    pd_block_backward_taped(&tape, params, cfg, padding, grad_out)
}

pub fn pd_block_backward_taped<T: Scalar>(
    tape: &BlockTape<T>,
    params: &BlockKernels<T>,
    cfg: &PdStackConfig,
    padding: [Padding; 3],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, BlockKernels<T>)> {
    let chains = cfg.chains();
    let inv = T::lit(1.0 / chains.len() as f64);
    let mut grads = params.zeros_like();
    let mut gx: Option<Tensor<T>> = None;
    for (chain, steps) in chains.iter().zip(&tape.chains) {
        let mut g = grad_out.scale(inv);
        for (&id, (input, pre)) in chain.iter().zip(steps).rev() {
            let gp = if cfg.linear { g } else { relu_backward(pre, &g)? };
            let (gi, gk) = conv3d_backward(input, params.get(id)?, padding, &gp)?;
            grads.accumulate(id, &gk)?;
            g = gi;
        }
        match gx.as_mut() {
            None => gx = Some(g),
            Some(acc) => acc.add_assign(&g)?,
        }
    }
    Ok((gx.expect("at least one chain"), grads))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockStats {
    pub params: usize,
    /// Multiply-accumulates of one forward pass on the given extents.
    pub macs: u64,
}

pub fn block_stats<T: Scalar>(
    params: &BlockKernels<T>,
    cfg: &PdStackConfig,
    extents: [usize; 3],
) -> Result<BlockStats> {
    let mut macs = 0;
    for chain in cfg.chains() {
        for id in chain {
            macs += conv3d_macs(extents, params.get(id)?.shape());
        }
    }
    Ok(BlockStats { params: params.num_params(), macs })
}

/// Spatial extents after each stage of a stride schedule.
pub fn stage_extents(input: [usize; 3], schedule: &[[usize; 3]]) -> Result<Vec<[usize; 3]>> {
    let mut cur = input;
    let mut out = Vec::with_capacity(schedule.len());
    for (s, stride) in schedule.iter().enumerate() {
        for d in 0..3 {
            if stride[d] == 0 || cur[d] % stride[d] != 0 {
                return Err(Error::config(format!(
                    "stage {s}: stride {stride:?} does not divide extents {cur:?}"
                )));
            }
            cur[d] /= stride[d];
        }
        out.push(cur);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BackboneTape<T> {
    blocks: Vec<(BlockTape<T>, Vec<usize>)>,
}

/// Runs `blocks[s]` followed by average pooling with `schedule[s]` for each
/// stage `s`.
pub fn backbone_forward<T: Scalar>(
    x: &Tensor<T>,
    blocks: &[BlockKernels<T>],
    cfg: &PdStackConfig,
    schedule: &[[usize; 3]],
    padding: [Padding; 3],
) -> Result<Tensor<T>> {
    backbone_forward_taped(x, blocks, cfg, schedule, padding).map(|(y, _)| y)
}

pub fn backbone_forward_taped<T: Scalar>(
    x: &Tensor<T>,
    blocks: &[BlockKernels<T>],
    cfg: &PdStackConfig,
    schedule: &[[usize; 3]],
    padding: [Padding; 3],
) -> Result<(Tensor<T>, BackboneTape<T>)> {
    if blocks.len() != schedule.len() {
        return Err(Error::config(format!(
            "{} blocks for a {}-stage schedule",
            blocks.len(),
            schedule.len()
        )));
    }
    if x.rank() != 4 {
        return Err(Error::config(format!("backbone input must be rank 4, got {:?}", x.shape())));
    }
    stage_extents([x.shape()[0], x.shape()[1], x.shape()[2]], schedule)?;
    let mut h = x.clone();
    let mut tape = BackboneTape { blocks: Vec::with_capacity(blocks.len()) };
    for (b, stride) in blocks.iter().zip(schedule) {
        let (y, t) = pd_block_forward_taped(&h, b, cfg, padding)?;
        let shape = y.shape().to_vec();
        h = if *stride == [1, 1, 1] { y } else { avg_pool3d(&y, *stride)? };
        tape.blocks.push((t, shape));
    }
    Ok((h, tape))
}

pub fn backbone_backward_taped<T: Scalar>(
    tape: &BackboneTape<T>,
    blocks: &[BlockKernels<T>],
    cfg: &PdStackConfig,
    schedule: &[[usize; 3]],
    padding: [Padding; 3],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<BlockKernels<T>>)> {
    let mut grads = Vec::with_capacity(blocks.len());
    let mut g = grad_out.clone();
    for ((b, stride), (t, shape)) in blocks.iter().zip(schedule).zip(&tape.blocks).rev() {
        if *stride != [1, 1, 1] {
            g = avg_pool3d_backward(shape, *stride, &g)?;
        }
        let (gi, gk) = pd_block_backward_taped(t, b, cfg, padding, &g)?;
        grads.push(gk);
        g = gi;
    }
    grads.reverse();
    Ok((g, grads))
}

/// Single kernel equivalent to correlating with each of `kernels` in turn
/// (channel dimensions chained). Spatial extents add up as `e1 + e2 - 1`, so
/// the three 3-wide plane kernels compose into a 5×5×5 kernel. Exact for
/// wrapped axes and for zero-padded axes away from the border.
pub fn compose_kernels<T: Scalar>(kernels: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = kernels
        .split_first()
        .ok_or_else(|| Error::config("nothing to compose"))?;
    let mut acc = (*first).clone();
    for k in rest {
        acc = compose_pair(&acc, k)?;
    }
    Ok(acc)
}

fn compose_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 5 || sb.len() != 5 || sa[4] != sb[3] {
        return Err(Error::Dimension { op: "compose_kernels", lhs: sa.to_vec(), rhs: sb.to_vec() });
    }
    let ext = [sa[0] + sb[0] - 1, sa[1] + sb[1] - 1, sa[2] + sb[2] - 1];
    let (ci, mid, co) = (sa[3], sa[4], sb[4]);
    let mut out = Tensor::zeros(&[ext[0], ext[1], ext[2], ci, co]);
    for i0 in 0..sa[0] {
        for i1 in 0..sa[1] {
            for i2 in 0..sa[2] {
                for j0 in 0..sb[0] {
                    for j1 in 0..sb[1] {
                        for j2 in 0..sb[2] {
                            let t = [i0 + j0, i1 + j1, i2 + j2];
                            for c in 0..ci {
                                for o in 0..co {
                                    let mut s = T::zero();
                                    for m in 0..mid {
                                        s += a.get(&[i0, i1, i2, c, m]) * b.get(&[j0, j1, j2, m, o]);
                                    }
                                    let cur = out.get(&[t[0], t[1], t[2], c, o]);
                                    out.set(&[t[0], t[1], t[2], c, o], cur + s);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_layouts() {
        let mut cfg = PdStackConfig::new(Topology::HybridTwo);
        assert_eq!(
            cfg.chains(),
            vec![
                vec![KernelId::R, KernelId::A, KernelId::Z],
                vec![KernelId::A, KernelId::Z, KernelId::R]
            ]
        );
        cfg.topology = Topology::Parallel;
        assert_eq!(cfg.chains().len(), 3);
        cfg.topology = Topology::Asymmetric;
        assert_eq!(cfg.kernels(), vec![KernelId::R, KernelId::A]);
        cfg.topology = Topology::Full3d;
        assert_eq!(cfg.kernels(), vec![KernelId::Full]);
    }

    #[test]
    fn labels_round_trip() {
        for t in [
            Topology::Serial,
            Topology::Parallel,
            Topology::HybridTwo,
            Topology::HybridThree,
            Topology::Asymmetric,
            Topology::Full3d,
        ] {
            assert_eq!(Topology::from_label(t.label()).unwrap(), t);
            let j = serde_json::to_string(&t).unwrap();
            assert_eq!(j, format!("\"{}\"", t.label()));
        }
        assert!(Topology::from_label("e").is_err());
    }

    #[test]
    fn bad_order_is_rejected() {
        let mut cfg = PdStackConfig::new(Topology::Serial);
        cfg.order = [KernelId::R, KernelId::R, KernelId::Z];
        assert!(cfg.validate().is_err());
    }
}
