//! Replayable computation record with lane-vectorised nodes.
//!
//! Every node stores a small vector of lanes (collocation times, batch
//! members, or parameter entries); ops are recorded in topological order as
//! they are evaluated, and one reverse sweep accumulates adjoints into a
//! [`GradientVector`]. Instantiated with `f64` lanes the tape is a plain
//! reverse-mode engine; with [`DualScalar`] lanes the forward pass carries
//! first and second time derivatives and the reverse sweep differentiates
//! the whole Taylor computation, so losses built from `x''` still get exact
//! parameter gradients.

use super::dual::{Lane, UnaryKind};

/// Read-only view of a model's parameter arrays, in their canonical order.
pub trait ParamStore {
    fn n_arrays(&self) -> usize;
    fn array(&self, slot: usize) -> &[f64];
}

impl ParamStore for Vec<Vec<f64>> {
    fn n_arrays(&self) -> usize {
        self.len()
    }
    fn array(&self, slot: usize) -> &[f64] {
        &self[slot]
    }
}

/// Per-array gradients, aligned with the parameter store they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub arrays: Vec<Vec<f64>>,
}

impl GradientVector {
    pub fn zeros_like<S: ParamStore + ?Sized>(store: &S) -> Self {
        GradientVector {
            arrays: (0..store.n_arrays())
                .map(|i| vec![0.0; store.array(i).len()])
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradientVector, c: f64) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.arrays
            .iter()
            .flat_map(|a| a.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.iter().all(|g| g.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy)]
struct ArgRange {
    off: u32,
    len: u32,
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    /// Fixed lanes; no adjoint flow.
    Const,
    /// One whole parameter array as lanes; adjoints land in the gradient.
    ParamLeaf { slot: u32 },
    /// out[l] = b + sum_k w[k] * x_k[l], with scalar weights read from a
    /// parameter array. The workhorse of every dense layer.
    AffineW { xs: ArgRange, w_slot: u32, w_off: u32, b_slot: u32, b_off: u32, has_b: bool },
    /// out[l] = bias + sum_k w_k * x_k[l] with single-lane *node* weights
    /// (hypernetwork-generated layers).
    LinComb { xs: ArgRange, ws: ArgRange, bias_plus_one: u32 },
    Unary { kind: UnaryKind, x: u32 },
    Bin { kind: BinKind, a: u32, b: u32 },
    AddC { x: u32 },
    MulC { x: u32, c: f64 },
    /// Single lane replicated to the output width.
    Bcast { x: u32 },
    /// Contiguous lane window of another node.
    LaneSlice { x: u32, start: u32 },
    /// Elementwise sum of same-width nodes.
    SumN { args: ArgRange },
    Reduce { kind: ReduceKind, x: u32 },
    /// Taylor component (1 or 2) of each lane as a plain value.
    Extract { comp: u8, x: u32 },
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    off: u32,
    len: u32,
}

pub struct Tape<L: Lane> {
    nodes: Vec<Node>,
    vals: Vec<L>,
    args: Vec<u32>,
    scratch: Vec<L>,
}

impl<L: Lane> Default for Tape<L> {
    fn default() -> Self {
        Self::new()
    }
}

impl<L: Lane> Tape<L> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), vals: Vec::new(), args: Vec::new(), scratch: Vec::new() }
    }

    /// Drop all nodes but keep allocations for the next step.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.args.clear();
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn lanes(&self, id: NodeId) -> usize {
        self.nodes[id.0 as usize].len as usize
    }

    pub fn lane_values(&self, id: NodeId) -> &[L] {
        let n = self.nodes[id.0 as usize];
        &self.vals[n.off as usize..(n.off + n.len) as usize]
    }

    /// Value channel of lane 0; the loss readout for scalar nodes.
    pub fn value(&self, id: NodeId) -> f64 {
        self.lane_values(id)[0].value()
    }

    fn push(&mut self, op: Op, len: usize) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, off: self.vals.len() as u32, len: len as u32 });
        self.vals.extend_from_slice(&self.scratch[..len]);
        id
    }

    fn prep(&mut self, len: usize, fill: L) {
        self.scratch.clear();
        self.scratch.resize(len, fill);
    }

    fn push_args(&mut self, ids: &[NodeId]) -> ArgRange {
        let off = self.args.len() as u32;
        self.args.extend(ids.iter().map(|n| n.0));
        ArgRange { off, len: ids.len() as u32 }
    }

    fn node_range(&self, raw: u32) -> (usize, usize) {
        let n = self.nodes[raw as usize];
        (n.off as usize, n.len as usize)
    }

    // -- leaves ------------------------------------------------------------

    pub fn constant(&mut self, lanes: &[L]) -> NodeId {
        self.scratch.clear();
        self.scratch.extend_from_slice(lanes);
        self.push(Op::Const, lanes.len())
    }

    pub fn constant_f64s(&mut self, values: &[f64]) -> NodeId {
        self.scratch.clear();
        self.scratch.extend(values.iter().map(|&v| L::from_f64(v)));
        self.push(Op::Const, values.len())
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant_f64s(&[v])
    }

    pub fn param_leaf<S: ParamStore + ?Sized>(&mut self, store: &S, slot: usize) -> NodeId {
        let arr = store.array(slot);
        self.scratch.clear();
        self.scratch.extend(arr.iter().map(|&v| L::from_f64(v)));
        self.push(Op::ParamLeaf { slot: slot as u32 }, arr.len())
    }

    // -- dense kernels -----------------------------------------------------

    /// `bias + sum_k w[w_off + k] * xs[k]`, weights taken from `store`.
    pub fn affine<S: ParamStore + ?Sized>(
        &mut self,
        store: &S,
        xs: &[NodeId],
        w: (usize, usize),
        b: Option<(usize, usize)>,
    ) -> NodeId {
        debug_assert!(!xs.is_empty());
        let lanes = self.lanes(xs[0]);
        let b0 = b.map(|(s, o)| store.array(s)[o]).unwrap_or(0.0);
        self.prep(lanes, L::from_f64(b0));
        let wslice = &store.array(w.0)[w.1..w.1 + xs.len()];
        for (k, &x) in xs.iter().enumerate() {
            let (xo, xl) = self.node_range(x.0);
            debug_assert_eq!(xl, lanes, "affine input lane mismatch");
            let wk = wslice[k];
            let vals = &self.vals[xo..xo + lanes];
            for (acc, xv) in self.scratch.iter_mut().zip(vals) {
                *acc = acc.add(xv.scale(wk));
            }
        }
        let args = self.push_args(xs);
        let (b_slot, b_off, has_b) = match b {
            Some((s, o)) => (s as u32, o as u32, true),
            None => (0, 0, false),
        };
        self.push(
            Op::AffineW { xs: args, w_slot: w.0 as u32, w_off: w.1 as u32, b_slot, b_off, has_b },
            lanes,
        )
    }

    /// `bias + sum_k ws[k] * xs[k]` where both weights and bias are
    /// single-lane nodes.
    pub fn lin_comb(&mut self, xs: &[NodeId], ws: &[NodeId], bias: Option<NodeId>) -> NodeId {
        debug_assert_eq!(xs.len(), ws.len());
        let lanes = self.lanes(xs[0]);
        let init = match bias {
            Some(b) => {
                debug_assert_eq!(self.lanes(b), 1);
                self.lane_values(b)[0]
            }
            None => L::from_f64(0.0),
        };
        self.prep(lanes, init);
        for (&w, &x) in ws.iter().zip(xs) {
            debug_assert_eq!(self.lanes(w), 1, "lin_comb weights must be single-lane");
            let wv = self.lane_values(w)[0];
            let (xo, _) = self.node_range(x.0);
            let vals = &self.vals[xo..xo + lanes];
            for (acc, xv) in self.scratch.iter_mut().zip(vals) {
                *acc = acc.add(wv.mul(*xv));
            }
        }
        let xs_r = self.push_args(xs);
        let ws_r = self.push_args(ws);
        self.push(
            Op::LinComb { xs: xs_r, ws: ws_r, bias_plus_one: bias.map(|b| b.0 + 1).unwrap_or(0) },
            lanes,
        )
    }

    // -- elementwise -------------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, x: NodeId) -> NodeId {
        let (xo, xl) = self.node_range(x.0);
        self.scratch.clear();
        for i in xo..xo + xl {
            let v = self.vals[i];
            self.scratch.push(v.unary(kind));
        }
        self.push(Op::Unary { kind, x: x.0 }, xl)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn powi(&mut self, x: NodeId, n: i32) -> NodeId {
        self.unary(UnaryKind::Powi(n), x)
    }
    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Neg, x)
    }

    fn bin(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> NodeId {
        let (ao, al) = self.node_range(a.0);
        let (bo, bl) = self.node_range(b.0);
        debug_assert_eq!(al, bl, "binary op lane mismatch");
        self.scratch.clear();
        for i in 0..al {
            let x = self.vals[ao + i];
            let y = self.vals[bo + i];
            self.scratch.push(match kind {
                BinKind::Add => x.add(y),
                BinKind::Sub => x.sub(y),
                BinKind::Mul => x.mul(y),
            });
        }
        self.push(Op::Bin { kind, a: a.0, b: b.0 }, al)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bin(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bin(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bin(BinKind::Mul, a, b)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let r = self.unary(UnaryKind::Recip, b);
        self.mul(a, r)
    }

    pub fn add_c(&mut self, x: NodeId, c: f64) -> NodeId {
        let (xo, xl) = self.node_range(x.0);
        self.scratch.clear();
        for i in xo..xo + xl {
            let v = self.vals[i];
            self.scratch.push(v.shift(c));
        }
        self.push(Op::AddC { x: x.0 }, xl)
    }

    pub fn mul_c(&mut self, x: NodeId, c: f64) -> NodeId {
        let (xo, xl) = self.node_range(x.0);
        self.scratch.clear();
        for i in xo..xo + xl {
            let v = self.vals[i];
            self.scratch.push(v.scale(c));
        }
        self.push(Op::MulC { x: x.0, c }, xl)
    }

    // -- shape -------------------------------------------------------------

    pub fn bcast(&mut self, x: NodeId, lanes: usize) -> NodeId {
        debug_assert_eq!(self.lanes(x), 1);
        let v = self.lane_values(x)[0];
        self.prep(lanes, v);
        self.push(Op::Bcast { x: x.0 }, lanes)
    }

    pub fn lane_slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (xo, xl) = self.node_range(x.0);
        debug_assert!(start + len <= xl);
        self.scratch.clear();
        self.scratch.extend_from_slice(&self.vals[xo + start..xo + start + len]);
        self.push(Op::LaneSlice { x: x.0, start: start as u32 }, len)
    }

    pub fn sum_n(&mut self, ids: &[NodeId]) -> NodeId {
        debug_assert!(!ids.is_empty());
        let lanes = self.lanes(ids[0]);
        self.prep(lanes, L::from_f64(0.0));
        for &x in ids {
            let (xo, xl) = self.node_range(x.0);
            debug_assert_eq!(xl, lanes);
            let vals = &self.vals[xo..xo + lanes];
            for (acc, xv) in self.scratch.iter_mut().zip(vals) {
                *acc = acc.add(*xv);
            }
        }
        let args = self.push_args(ids);
        self.push(Op::SumN { args }, lanes)
    }

    fn reduce(&mut self, kind: ReduceKind, x: NodeId) -> NodeId {
        let (xo, xl) = self.node_range(x.0);
        let mut acc = L::from_f64(0.0);
        for i in xo..xo + xl {
            acc = acc.add(self.vals[i]);
        }
        if let ReduceKind::Mean = kind {
            acc = acc.scale(1.0 / xl as f64);
        }
        self.prep(1, acc);
        self.push(Op::Reduce { kind, x: x.0 }, 1)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.reduce(ReduceKind::Sum, x)
    }
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.reduce(ReduceKind::Mean, x)
    }

    /// First time derivative of each lane as a plain value.
    pub fn extract_d1(&mut self, x: NodeId) -> NodeId {
        self.extract(1, x)
    }
    /// Second time derivative of each lane as a plain value.
    pub fn extract_d2(&mut self, x: NodeId) -> NodeId {
        self.extract(2, x)
    }

    fn extract(&mut self, comp: u8, x: NodeId) -> NodeId {
        let (xo, xl) = self.node_range(x.0);
        self.scratch.clear();
        for i in xo..xo + xl {
            let v = self.vals[i];
            self.scratch.push(L::from_f64(v.component(comp)));
        }
        self.push(Op::Extract { comp, x: x.0 }, xl)
    }

    // -- reverse sweep -----------------------------------------------------

    /// Run one reverse pass. `seeds` are `(node, lane, value-adjoint)`
    /// injections — the loss seed plus any cross-tape adjoints. Parameter
    /// gradients accumulate (+=) into `grads`; the per-node adjoint arena
    /// is returned so callers can read adjoints of leaf nodes.
    pub fn backward<S: ParamStore + ?Sized>(
        &mut self,
        store: &S,
        seeds: &[(NodeId, usize, f64)],
        grads: &mut GradientVector,
    ) -> Vec<L> {
        let mut adj: Vec<L> = vec![L::from_f64(0.0); self.vals.len()];
        for &(id, lane, g) in seeds {
            let n = self.nodes[id.0 as usize];
            debug_assert!((lane as u32) < n.len);
            let slot = n.off as usize + lane;
            adj[slot] = adj[slot].add(L::inject(0, g));
        }
        let zero = L::from_f64(0.0);
        for i in (0..self.nodes.len()).rev() {
            let node = self.nodes[i];
            let (o, l) = (node.off as usize, node.len as usize);
            if adj[o..o + l].iter().all(|a| *a == zero) {
                continue;
            }
            // Copy this node's adjoint out so `adj` can be mutated freely.
            self.scratch.clear();
            self.scratch.extend_from_slice(&adj[o..o + l]);
            let cbar = &self.scratch[..l];
            match node.op {
                Op::Const => {}
                Op::ParamLeaf { slot } => {
                    let g = &mut grads.arrays[slot as usize];
                    for (gi, c) in g.iter_mut().zip(cbar) {
                        *gi += c.adj_value();
                    }
                }
                Op::AffineW { xs, w_slot, w_off, b_slot, b_off, has_b } => {
                    let ws = store.array(w_slot as usize);
                    for k in 0..xs.len as usize {
                        let x_raw = self.args[xs.off as usize + k];
                        let (xo, _) = self.node_range(x_raw);
                        let wk = ws[w_off as usize + k];
                        let mut gw = 0.0;
                        let xvals = &self.vals[xo..xo + l];
                        for ((a, c), xv) in adj[xo..xo + l].iter_mut().zip(cbar).zip(xvals) {
                            *a = a.add(c.scale(wk));
                            gw += L::grad_dot(*c, *xv);
                        }
                        grads.arrays[w_slot as usize][(w_off + k as u32) as usize] += gw;
                    }
                    if has_b {
                        let gb: f64 = cbar.iter().map(|c| c.adj_value()).sum();
                        grads.arrays[b_slot as usize][b_off as usize] += gb;
                    }
                }
                Op::LinComb { xs, ws, bias_plus_one } => {
                    for k in 0..xs.len as usize {
                        let x_raw = self.args[xs.off as usize + k];
                        let w_raw = self.args[ws.off as usize + k];
                        let (xo, _) = self.node_range(x_raw);
                        let (wo, _) = self.node_range(w_raw);
                        let wv = self.vals[wo];
                        let mut wbar = zero;
                        let xvals = &self.vals[xo..xo + l];
                        // Split borrow: the weight adjoint is accumulated
                        // locally and written once.
                        for ((a, c), xv) in adj[xo..xo + l].iter_mut().zip(cbar).zip(xvals) {
                            let (wb, xb) = L::mul_adjoint(wv, *xv, *c);
                            *a = a.add(xb);
                            wbar = wbar.add(wb);
                        }
                        adj[wo] = adj[wo].add(wbar);
                    }
                    if bias_plus_one != 0 {
                        let (bo, _) = self.node_range(bias_plus_one - 1);
                        let mut acc = zero;
                        for c in cbar {
                            acc = acc.add(*c);
                        }
                        adj[bo] = adj[bo].add(acc);
                    }
                }
                Op::Unary { kind, x } => {
                    let (xo, _) = self.node_range(x);
                    let xvals = &self.vals[xo..xo + l];
                    for ((a, c), u) in adj[xo..xo + l].iter_mut().zip(cbar).zip(xvals) {
                        *a = a.add(L::unary_adjoint(kind, *u, *c));
                    }
                }
                Op::Bin { kind, a, b } => {
                    let (ao, _) = self.node_range(a);
                    let (bo, _) = self.node_range(b);
                    match kind {
                        BinKind::Add => {
                            for (x, c) in adj[ao..ao + l].iter_mut().zip(cbar) {
                                *x = x.add(*c);
                            }
                            for (x, c) in adj[bo..bo + l].iter_mut().zip(cbar) {
                                *x = x.add(*c);
                            }
                        }
                        BinKind::Sub => {
                            for (x, c) in adj[ao..ao + l].iter_mut().zip(cbar) {
                                *x = x.add(*c);
                            }
                            for (x, c) in adj[bo..bo + l].iter_mut().zip(cbar) {
                                *x = x.sub(*c);
                            }
                        }
                        BinKind::Mul => {
                            for i2 in 0..l {
                                let (ab, bb) =
                                    L::mul_adjoint(self.vals[ao + i2], self.vals[bo + i2], cbar[i2]);
                                adj[ao + i2] = adj[ao + i2].add(ab);
                                adj[bo + i2] = adj[bo + i2].add(bb);
                            }
                        }
                    }
                }
                Op::AddC { x } => {
                    let (xo, _) = self.node_range(x);
                    for (a, c) in adj[xo..xo + l].iter_mut().zip(cbar) {
                        *a = a.add(*c);
                    }
                }
                Op::MulC { x, c } => {
                    let (xo, _) = self.node_range(x);
                    for (a, cb) in adj[xo..xo + l].iter_mut().zip(cbar) {
                        *a = a.add(cb.scale(c));
                    }
                }
                Op::Bcast { x } => {
                    let (xo, _) = self.node_range(x);
                    let mut acc = zero;
                    for c in cbar {
                        acc = acc.add(*c);
                    }
                    adj[xo] = adj[xo].add(acc);
                }
                Op::LaneSlice { x, start } => {
                    let (xo, _) = self.node_range(x);
                    let base = xo + start as usize;
                    for (a, c) in adj[base..base + l].iter_mut().zip(cbar) {
                        *a = a.add(*c);
                    }
                }
                Op::SumN { args } => {
                    for k in 0..args.len as usize {
                        let x_raw = self.args[args.off as usize + k];
                        let (xo, _) = self.node_range(x_raw);
                        for (a, c) in adj[xo..xo + l].iter_mut().zip(cbar) {
                            *a = a.add(*c);
                        }
                    }
                }
                Op::Reduce { kind, x } => {
                    let (xo, xl) = self.node_range(x);
                    let c = match kind {
                        ReduceKind::Sum => cbar[0],
                        ReduceKind::Mean => cbar[0].scale(1.0 / xl as f64),
                    };
                    for a in adj[xo..xo + xl].iter_mut() {
                        *a = a.add(c);
                    }
                }
                Op::Extract { comp, x } => {
                    let (xo, _) = self.node_range(x);
                    for (a, c) in adj[xo..xo + l].iter_mut().zip(cbar) {
                        *a = a.add(L::inject(comp, c.adj_value()));
                    }
                }
            }
        }
        adj
    }

    /// Adjoint lanes of a node in an arena returned by [`Tape::backward`].
    pub fn adjoint_of<'a>(&self, adj: &'a [L], id: NodeId) -> &'a [L] {
        let n = self.nodes[id.0 as usize];
        &adj[n.off as usize..(n.off + n.len) as usize]
    }
}
