//! Per-step loss graphs and gradients for every method and phase.
//!
//! A step uses up to two tapes: a value tape carrying the encoder, data and
//! metric terms, and a dual tape carrying the physics residual (whose lanes
//! hold time-derivative triples). When the encoder trains jointly, the dual
//! tape treats the latent components as leaves and their adjoints are
//! injected back into the value tape's latent nodes, composing the two
//! reverse sweeps into one exact gradient.

use super::{Method, PhaseTag, TrainConfig, TrainError, TrainItem};
use crate::autodiff::{DualScalar, GradientVector, NodeId, Tape};
use crate::losses::{
    data_loss_on_tape, physics_residual_on_tape, sobolev_loss_on_tape, total_loss,
    triplet_loss_on_tape, LossBreakdown,
};
use crate::neural::{
    encoder_forward, encoder_on_tape, generator_heads_on_tape, hypernet_on_tape,
    parametric_on_tape, target_on_tape, ModelParams,
};
use crate::sim::DuffingParams;
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

pub(crate) struct StepResult {
    pub loss: LossBreakdown,
    pub grads: GradientVector,
    pub degenerate: bool,
    /// True when a degenerate metric-only batch leaves nothing to optimise.
    pub skip_update: bool,
}

pub(crate) struct StepContext {
    method: Method,
    alpha: f64,
    beta: f64,
    margin: f64,
    colloc_per_item: usize,
    t_max: f64,
    duffing: DuffingParams,
    value_tape: Tape<f64>,
    dual_tape: Tape<DualScalar>,
}

pub(crate) fn draw_collocation(rng: &mut ChaCha8Rng, n: usize, t_max: f64) -> Vec<f64> {
    let dist = Uniform::new(0.0, t_max);
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl StepContext {
    pub fn new(cfg: &TrainConfig, duffing: DuffingParams, t_max: f64) -> Self {
        StepContext {
            method: cfg.method,
            alpha: cfg.alpha,
            beta: cfg.beta,
            margin: cfg.margin,
            colloc_per_item: cfg.collocation_per_item,
            t_max,
            duffing,
            value_tape: Tape::new(),
            dual_tape: Tape::new(),
        }
    }

    pub fn compute_step(
        &mut self,
        params: &ModelParams,
        items: &[TrainItem],
        batch: &[usize],
        phase: PhaseTag,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepResult, TrainError> {
        match (self.method, phase) {
            (Method::TapinnAo, PhaseTag::I) => self.metric_only_step(params, items, batch),
            (Method::TapinnAo, PhaseTag::II) => self.frozen_encoder_step(params, items, batch, rng),
            (Method::TapinnAo | Method::TapinnJoint, PhaseTag::Joint) => {
                self.joint_step(params, items, batch, rng)
            }
            (Method::Parametric, _) => self.parametric_step(params, items, batch, rng),
            (Method::Hyperpinn, _) => self.hyperpinn_step(params, items, batch, rng),
            (Method::MultiOutput, _) => self.multi_output_step(params, items, batch, rng),
            (m, p) => Err(TrainError::BadConfig(format!("method {m} cannot run phase {p}"))),
        }
    }

    /// Latent component nodes per batch item from a batched encoder record.
    fn latent_slices(
        tape: &mut Tape<f64>,
        z_nodes: &[NodeId],
        n_items: usize,
    ) -> Vec<Vec<NodeId>> {
        (0..n_items)
            .map(|i| z_nodes.iter().map(|&zj| tape.lane_slice(zj, i, 1)).collect())
            .collect()
    }

    /// Phase I: encoder-only on the metric objective.
    fn metric_only_step(
        &mut self,
        params: &ModelParams,
        items: &[TrainItem],
        batch: &[usize],
    ) -> Result<StepResult, TrainError> {
        let tape = &mut self.value_tape;
        tape.clear();
        let windows: Vec<_> = batch.iter().map(|&i| &items[i].window).collect();
        let labels: Vec<f64> = batch.iter().map(|&i| items[i].f0).collect();
        let z_nodes = encoder_on_tape(tape, params, &windows);
        let latents = Self::latent_slices(tape, &z_nodes, batch.len());
        let mut grads = GradientVector::zeros_like(params);
        match triplet_loss_on_tape(tape, &latents, &labels, self.margin) {
            Some((metric_node, _)) => {
                let metric = tape.value(metric_node);
                tape.backward(params, &[(metric_node, 0, 1.0)], &mut grads);
                let loss = total_loss(0.0, 0.0, metric, self.alpha, self.beta)
                    .map_err(|e| TrainError::BadConfig(e.to_string()))?;
                Ok(StepResult { loss, grads, degenerate: false, skip_update: false })
            }
            None => Ok(StepResult {
                loss: total_loss(0.0, 0.0, 0.0, self.alpha, self.beta).unwrap(),
                grads,
                degenerate: true,
                skip_update: true,
            }),
        }
    }

    /// Data term for one item on the value tape given fixed latent values.
    fn data_term_fixed_z(
        tape: &mut Tape<f64>,
        params: &ModelParams,
        item: &TrainItem,
        z: &[f64],
    ) -> NodeId {
        let t_node = tape.constant_f64s(&item.data_ts);
        let lanes = item.data_ts.len();
        let z_nodes: Vec<NodeId> = z
            .iter()
            .map(|&v| {
                let s = tape.scalar(v);
                tape.bcast(s, lanes)
            })
            .collect();
        let x = generator_heads_on_tape(tape, params, t_node, &z_nodes)[0];
        data_loss_on_tape(tape, x, &item.data_xs)
    }

    /// Physics term for one item on the dual tape; returns the residual node
    /// and the latent leaf nodes (for adjoint readout when z trains).
    fn physics_term(
        tape: &mut Tape<DualScalar>,
        params: &ModelParams,
        z: &[f64],
        f0: f64,
        ts: &[f64],
        duffing: &DuffingParams,
    ) -> (NodeId, Vec<NodeId>) {
        let lanes: Vec<DualScalar> = ts.iter().map(|&t| DualScalar::seed(t)).collect();
        let t_node = tape.constant(&lanes);
        let mut leaves = Vec::with_capacity(z.len());
        let z_nodes: Vec<NodeId> = z
            .iter()
            .map(|&v| {
                let leaf = tape.constant(&[DualScalar::constant(v)]);
                leaves.push(leaf);
                tape.bcast(leaf, ts.len())
            })
            .collect();
        let x = generator_heads_on_tape(tape, params, t_node, &z_nodes)[0];
        let node = physics_residual_on_tape(tape, x, ts, f0, duffing);
        (node, leaves)
    }

    fn mean_over_items(tape_nodes: &[NodeId], tape: &mut Tape<f64>) -> NodeId {
        let s = tape.sum_n(tape_nodes);
        tape.mul_c(s, 1.0 / tape_nodes.len() as f64)
    }

    fn mean_over_items_dual(tape_nodes: &[NodeId], tape: &mut Tape<DualScalar>) -> NodeId {
        let s = tape.sum_n(tape_nodes);
        tape.mul_c(s, 1.0 / tape_nodes.len() as f64)
    }

    /// Phase II: generator-only on data + alpha*physics with z computed by
    /// the frozen encoder outside any tape.
    fn frozen_encoder_step(
        &mut self,
        params: &ModelParams,
        items: &[TrainItem],
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<StepResult, TrainError> {
        let zs: Vec<Vec<f64>> = batch
            .iter()
            .map(|&i| encoder_forward(params, &items[i].window))
            .collect::<Result<_, _>>()?;
        let mut grads = GradientVector::zeros_like(params);

        let vtape = &mut self.value_tape;
        vtape.clear();
        let data_nodes: Vec<NodeId> = batch
            .iter()
            .zip(&zs)
            .map(|(&i, z)| Self::data_term_fixed_z(vtape, params, &items[i], z))
            .collect();
        let l_data = Self::mean_over_items(&data_nodes, vtape);
        let data = vtape.value(l_data);
        vtape.backward(params, &[(l_data, 0, 1.0)], &mut grads);

        let dtape = &mut self.dual_tape;
        dtape.clear();
        let mut phys_nodes = Vec::with_capacity(batch.len());
        for (&i, z) in batch.iter().zip(&zs) {
            let ts = draw_collocation(rng, self.colloc_per_item, self.t_max);
            let (node, _) =
                Self::physics_term(dtape, params, z, items[i].f0, &ts, &self.duffing);
            phys_nodes.push(node);
        }
        let l_phys = Self::mean_over_items_dual(&phys_nodes, dtape);
        let physics = dtape.value(l_phys);
        dtape.backward(params, &[(l_phys, 0, self.alpha)], &mut grads);

        let loss = total_loss(data, physics, 0.0, self.alpha, self.beta)
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        Ok(StepResult { loss, grads, degenerate: false, skip_update: false })
    }

    /// Joint update on the full composite: encoder and generator both train,
    /// with physics adjoints injected into the value tape's latent nodes.
    fn joint_step(
        &mut self,
        params: &ModelParams,
        items: &[TrainItem],
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<StepResult, TrainError> {
        let vtape = &mut self.value_tape;
        vtape.clear();
        let windows: Vec<_> = batch.iter().map(|&i| &items[i].window).collect();
        let labels: Vec<f64> = batch.iter().map(|&i| items[i].f0).collect();
        let z_nodes = encoder_on_tape(vtape, params, &windows);
        let latents = Self::latent_slices(vtape, &z_nodes, batch.len());

        // data terms conditioned on the live latent nodes
        let mut data_nodes = Vec::with_capacity(batch.len());
        for (bi, &i) in batch.iter().enumerate() {
            let item = &items[i];
            let lanes = item.data_ts.len();
            let t_node = vtape.constant_f64s(&item.data_ts);
            let z_b: Vec<NodeId> =
                latents[bi].iter().map(|&zn| vtape.bcast(zn, lanes)).collect();
            let x = generator_heads_on_tape(vtape, params, t_node, &z_b)[0];
            data_nodes.push(data_loss_on_tape(vtape, x, &item.data_xs));
        }
        let l_data = Self::mean_over_items(&data_nodes, vtape);
        let data = vtape.value(l_data);

        let triplet = triplet_loss_on_tape(vtape, &latents, &labels, self.margin);
        let degenerate = triplet.is_none();
        let (value_obj, metric) = match triplet {
            Some((m_node, _)) => {
                let metric = vtape.value(m_node);
                let weighted = vtape.mul_c(m_node, self.beta);
                (vtape.add(l_data, weighted), metric)
            }
            None => (l_data, 0.0),
        };

        // physics on the dual tape with latent leaves
        let z_values: Vec<Vec<f64>> = (0..batch.len())
            .map(|bi| {
                z_nodes
                    .iter()
                    .map(|&zj| vtape.lane_values(zj)[bi])
                    .collect()
            })
            .collect();
        let dtape = &mut self.dual_tape;
        dtape.clear();
        let mut phys_nodes = Vec::with_capacity(batch.len());
        let mut leaf_ids: Vec<Vec<NodeId>> = Vec::with_capacity(batch.len());
        for (bi, &i) in batch.iter().enumerate() {
            let ts = draw_collocation(rng, self.colloc_per_item, self.t_max);
            let (node, leaves) = Self::physics_term(
                dtape,
                params,
                &z_values[bi],
                items[i].f0,
                &ts,
                &self.duffing,
            );
            phys_nodes.push(node);
            leaf_ids.push(leaves);
        }
        let l_phys = Self::mean_over_items_dual(&phys_nodes, dtape);
        let physics = dtape.value(l_phys);

        let mut grads = GradientVector::zeros_like(params);
        let adj = dtape.backward(params, &[(l_phys, 0, self.alpha)], &mut grads);

        let mut seeds: Vec<(NodeId, usize, f64)> = vec![(value_obj, 0, 1.0)];
        for (bi, leaves) in leaf_ids.iter().enumerate() {
            for (j, &leaf) in leaves.iter().enumerate() {
                let zbar = dtape.adjoint_of(&adj, leaf)[0].v;
                if zbar != 0.0 {
                    seeds.push((z_nodes[j], bi, zbar));
                }
            }
        }
        vtape.backward(params, &seeds, &mut grads);

        let loss = total_loss(data, physics, metric, self.alpha, self.beta)
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        Ok(StepResult { loss, grads, degenerate, skip_update: false })
    }

    /// Baseline I: data + alpha*physics on (t, lambda) inputs.
    fn parametric_step(
        &mut self,
        params: &ModelParams,
        items: &[TrainItem],
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<StepResult, TrainError> {
        let mut grads = GradientVector::zeros_like(params);

        let vtape = &mut self.value_tape;
        vtape.clear();
        let mut data_nodes = Vec::with_capacity(batch.len());
        for &i in batch {
            let item = &items[i];
            let t_node = vtape.constant_f64s(&item.data_ts);
            let lam = vtape.scalar(item.f0);
            let lam_b = vtape.bcast(lam, item.data_ts.len());
            let x = parametric_on_tape(vtape, params, t_node, lam_b);
            data_nodes.push(data_loss_on_tape(vtape, x, &item.data_xs));
        }
        let l_data = Self::mean_over_items(&data_nodes, vtape);
        let data = vtape.value(l_data);
        vtape.backward(params, &[(l_data, 0, 1.0)], &mut grads);

        let dtape = &mut self.dual_tape;
        dtape.clear();
        let mut phys_nodes = Vec::with_capacity(batch.len());
        for &i in batch {
            let item = &items[i];
            let ts = draw_collocation(rng, self.colloc_per_item, self.t_max);
            let lanes: Vec<DualScalar> = ts.iter().map(|&t| DualScalar::seed(t)).collect();
            let t_node = dtape.constant(&lanes);
            let lam = dtape.constant(&[DualScalar::constant(item.f0)]);
            let lam_b = dtape.bcast(lam, ts.len());
            let x = parametric_on_tape(dtape, params, t_node, lam_b);
            phys_nodes.push(physics_residual_on_tape(dtape, x, &ts, item.f0, &self.duffing));
        }
        let l_phys = Self::mean_over_items_dual(&phys_nodes, dtape);
        let physics = dtape.value(l_phys);
        dtape.backward(params, &[(l_phys, 0, self.alpha)], &mut grads);

        let loss = total_loss(data, physics, 0.0, self.alpha, self.beta)
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        Ok(StepResult { loss, grads, degenerate: false, skip_update: false })
    }

    /// Baseline II: everything on the dual tape; gradients flow through the
    /// hypernetwork into both the data and physics terms.
    fn hyperpinn_step(
        &mut self,
        params: &ModelParams,
        items: &[TrainItem],
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<StepResult, TrainError> {
        let dtape = &mut self.dual_tape;
        dtape.clear();
        let mut data_nodes = Vec::with_capacity(batch.len());
        let mut phys_nodes = Vec::with_capacity(batch.len());
        for &i in batch {
            let item = &items[i];
            let tw = hypernet_on_tape(dtape, params, item.f0);

            let data_lanes: Vec<DualScalar> =
                item.data_ts.iter().map(|&t| DualScalar::seed(t)).collect();
            let t_data = dtape.constant(&data_lanes);
            let x_data = target_on_tape(dtape, params, &tw, t_data);
            data_nodes.push(data_loss_on_tape(dtape, x_data, &item.data_xs));

            let ts = draw_collocation(rng, self.colloc_per_item, self.t_max);
            let col_lanes: Vec<DualScalar> = ts.iter().map(|&t| DualScalar::seed(t)).collect();
            let t_col = dtape.constant(&col_lanes);
            let x_col = target_on_tape(dtape, params, &tw, t_col);
            phys_nodes.push(physics_residual_on_tape(dtape, x_col, &ts, item.f0, &self.duffing));
        }
        let l_data = Self::mean_over_items_dual(&data_nodes, dtape);
        let l_phys = Self::mean_over_items_dual(&phys_nodes, dtape);
        let data = dtape.value(l_data);
        let physics = dtape.value(l_phys);
        let weighted_phys = dtape.mul_c(l_phys, self.alpha);
        let obj = dtape.add(l_data, weighted_phys);

        let mut grads = GradientVector::zeros_like(params);
        dtape.backward(params, &[(obj, 0, 1.0)], &mut grads);

        let loss = total_loss(data, physics, 0.0, self.alpha, self.beta)
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        Ok(StepResult { loss, grads, degenerate: false, skip_update: false })
    }

    /// Baseline III: standard joint optimisation of Sobolev + alpha*physics.
    /// The derivative head is supervised against v; the physics residual
    /// always uses autodiff derivatives of the x head.
    fn multi_output_step(
        &mut self,
        params: &ModelParams,
        items: &[TrainItem],
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<StepResult, TrainError> {
        let vtape = &mut self.value_tape;
        vtape.clear();
        let windows: Vec<_> = batch.iter().map(|&i| &items[i].window).collect();
        let z_nodes = encoder_on_tape(vtape, params, &windows);
        let latents = Self::latent_slices(vtape, &z_nodes, batch.len());

        let mut sob_nodes = Vec::with_capacity(batch.len());
        for (bi, &i) in batch.iter().enumerate() {
            let item = &items[i];
            let lanes = item.data_ts.len();
            let t_node = vtape.constant_f64s(&item.data_ts);
            let z_b: Vec<NodeId> =
                latents[bi].iter().map(|&zn| vtape.bcast(zn, lanes)).collect();
            let heads = generator_heads_on_tape(vtape, params, t_node, &z_b);
            sob_nodes.push(sobolev_loss_on_tape(
                vtape,
                heads[0],
                heads[1],
                &item.data_xs,
                &item.data_vs,
            ));
        }
        let l_sob = Self::mean_over_items(&sob_nodes, vtape);
        let data = vtape.value(l_sob);

        let z_values: Vec<Vec<f64>> = (0..batch.len())
            .map(|bi| z_nodes.iter().map(|&zj| vtape.lane_values(zj)[bi]).collect())
            .collect();
        let dtape = &mut self.dual_tape;
        dtape.clear();
        let mut phys_nodes = Vec::with_capacity(batch.len());
        let mut leaf_ids = Vec::with_capacity(batch.len());
        for (bi, &i) in batch.iter().enumerate() {
            let ts = draw_collocation(rng, self.colloc_per_item, self.t_max);
            let (node, leaves) = Self::physics_term(
                dtape,
                params,
                &z_values[bi],
                items[i].f0,
                &ts,
                &self.duffing,
            );
            phys_nodes.push(node);
            leaf_ids.push(leaves);
        }
        let l_phys = Self::mean_over_items_dual(&phys_nodes, dtape);
        let physics = dtape.value(l_phys);

        let mut grads = GradientVector::zeros_like(params);
        let adj = dtape.backward(params, &[(l_phys, 0, self.alpha)], &mut grads);
        let mut seeds: Vec<(NodeId, usize, f64)> = vec![(l_sob, 0, 1.0)];
        for (bi, leaves) in leaf_ids.iter().enumerate() {
            for (j, &leaf) in leaves.iter().enumerate() {
                let zbar = dtape.adjoint_of(&adj, leaf)[0].v;
                if zbar != 0.0 {
                    seeds.push((z_nodes[j], bi, zbar));
                }
            }
        }
        vtape.backward(params, &seeds, &mut grads);

        let loss = total_loss(data, physics, 0.0, self.alpha, self.beta)
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        Ok(StepResult { loss, grads, degenerate: false, skip_update: false })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_train_items, Method, PhaseTag, TrainConfig};
    use super::*;
    use crate::autodiff::fd_grad;
    use crate::losses::{data_loss, physics_residual, sobolev_loss, triplet_loss};
    use crate::neural::{
        generator_heads, init_params, target_eval, ConditionedGenerator, Dims, ModelKind,
        ParametricSolution, TargetNet,
    };
    use crate::sim::{generate_dataset, DatasetConfig};
    use rand::SeedableRng;

    fn tiny_cfg(method: Method) -> TrainConfig {
        let mut cfg = TrainConfig::defaults(method, 5);
        cfg.dims = Dims {
            window_len: 4,
            lstm_hidden: 3,
            d_z: 2,
            gen_hidden: 5,
            parametric_hidden: 4,
            hyper_hidden: 3,
            target_hidden: 2,
            t_scale: 4.0,
        };
        cfg.batch_size = 4;
        cfg.collocation_per_item = 3;
        cfg.data_points_per_item = 5;
        cfg
    }

    fn tiny_setup(method: Method) -> (TrainConfig, Vec<TrainItem>, StepContext, DuffingParams) {
        let cfg = tiny_cfg(method);
        let ds_cfg = DatasetConfig {
            per_regime: 2,
            samples_per_trajectory: 40,
            dt: 0.1,
            ..DatasetConfig::default()
        };
        let dataset = generate_dataset(&ds_cfg, 1).unwrap();
        let items = build_train_items(&dataset, &cfg).unwrap();
        let duffing = ds_cfg.params;
        let ctx = StepContext::new(&cfg, duffing, ds_cfg.t_max());
        (cfg, items, ctx, duffing)
    }

    /// Replay the collocation draws compute_step will make for this batch.
    fn replay_collocation(
        rng: &ChaCha8Rng,
        n_items: usize,
        per_item: usize,
        t_max: f64,
    ) -> Vec<Vec<f64>> {
        let mut clone = rng.clone();
        (0..n_items).map(|_| draw_collocation(&mut clone, per_item, t_max)).collect()
    }

    fn with_arrays(proto: &ModelParams, arrs: &[Vec<f64>]) -> ModelParams {
        let mut q = proto.clone();
        for (slot, a) in arrs.iter().enumerate() {
            q.array_mut(slot).copy_from_slice(a);
        }
        q
    }

    fn check_grads(
        grads: &GradientVector,
        fd: &[Vec<f64>],
        slots: &[usize],
        tol_rel: f64,
        tol_abs: f64,
    ) {
        for &slot in slots {
            for i in 0..fd[slot].len() {
                let a = grads.arrays[slot][i];
                let b = fd[slot][i];
                assert!(
                    (a - b).abs() <= tol_rel * a.abs().max(b.abs()) + tol_abs,
                    "slot {slot}[{i}]: tape {a} vs fd {b}"
                );
            }
        }
    }

    #[test]
    fn joint_step_gradient_matches_full_finite_differences() {
        let (cfg, items, mut ctx, duffing) = tiny_setup(Method::TapinnJoint);
        let params = init_params(ModelKind::Tapinn, cfg.seed, &cfg.dims);
        let batch: Vec<usize> = vec![0, 2, 3, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let colloc = replay_collocation(&rng, batch.len(), cfg.collocation_per_item, 4.0);

        let out = ctx.compute_step(&params, &items, &batch, PhaseTag::Joint, &mut rng).unwrap();

        let labels: Vec<f64> = batch.iter().map(|&i| items[i].f0).collect();
        let eval = |arrs: &[Vec<f64>]| {
            let q = with_arrays(&params, arrs);
            let zs: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| encoder_forward(&q, &items[i].window).unwrap())
                .collect();
            let mut data = 0.0;
            let mut phys = 0.0;
            for (bi, &i) in batch.iter().enumerate() {
                let item = &items[i];
                let preds: Vec<f64> = item
                    .data_ts
                    .iter()
                    .map(|&t| generator_heads(&q, t, &zs[bi])[0])
                    .collect();
                data += data_loss(&preds, &item.data_xs).unwrap();
                phys += physics_residual(
                    &ConditionedGenerator { params: &q, z: &zs[bi] },
                    item.f0,
                    &colloc[bi],
                    &duffing,
                )
                .unwrap();
            }
            data /= batch.len() as f64;
            phys /= batch.len() as f64;
            let metric = triplet_loss(&zs, &labels, cfg.margin).unwrap().value;
            data + cfg.alpha * phys + cfg.beta * metric
        };
        let raw: Vec<Vec<f64>> = params.arrays.iter().map(|a| a.data.clone()).collect();
        let plain = eval(&raw);
        assert!(
            (out.loss.total - plain).abs() < 1e-10,
            "loss {} vs plain {plain}",
            out.loss.total
        );
        let fd = fd_grad(&raw, eval, 1e-5);
        let all: Vec<usize> = (0..raw.len()).collect();
        check_grads(&out.grads, &fd, &all, 2e-4, 1e-7);
    }

    #[test]
    fn frozen_step_gradient_matches_and_encoder_grads_are_zero() {
        let (cfg, items, mut ctx, duffing) = tiny_setup(Method::TapinnAo);
        let params = init_params(ModelKind::Tapinn, cfg.seed, &cfg.dims);
        let batch: Vec<usize> = vec![1, 3, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let colloc = replay_collocation(&rng, batch.len(), cfg.collocation_per_item, 4.0);

        let out = ctx.compute_step(&params, &items, &batch, PhaseTag::II, &mut rng).unwrap();

        let enc_slots = params.arrays_with_prefix("enc.");
        let gen_slots = params.arrays_with_prefix("gen.");
        for &slot in &enc_slots {
            assert!(out.grads.arrays[slot].iter().all(|&g| g == 0.0), "frozen encoder slot {slot}");
        }
        // FD over generator arrays only, with z fixed by the frozen encoder
        let zs: Vec<Vec<f64>> = batch
            .iter()
            .map(|&i| encoder_forward(&params, &items[i].window).unwrap())
            .collect();
        let eval = |arrs: &[Vec<f64>]| {
            let q = with_arrays(&params, arrs);
            let mut data = 0.0;
            let mut phys = 0.0;
            for (bi, &i) in batch.iter().enumerate() {
                let item = &items[i];
                let preds: Vec<f64> =
                    item.data_ts.iter().map(|&t| generator_heads(&q, t, &zs[bi])[0]).collect();
                data += data_loss(&preds, &item.data_xs).unwrap();
                phys += physics_residual(
                    &ConditionedGenerator { params: &q, z: &zs[bi] },
                    item.f0,
                    &colloc[bi],
                    &duffing,
                )
                .unwrap();
            }
            data / batch.len() as f64 + cfg.alpha * phys / batch.len() as f64
        };
        let raw: Vec<Vec<f64>> = params.arrays.iter().map(|a| a.data.clone()).collect();
        let fd = fd_grad(&raw, eval, 1e-5);
        check_grads(&out.grads, &fd, &gen_slots, 2e-4, 1e-7);
    }

    #[test]
    fn metric_step_gradient_matches_and_generator_grads_are_zero() {
        let (cfg, items, mut ctx, _) = tiny_setup(Method::TapinnAo);
        let params = init_params(ModelKind::Tapinn, cfg.seed, &cfg.dims);
        let batch: Vec<usize> = vec![0, 1, 2, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let out = ctx.compute_step(&params, &items, &batch, PhaseTag::I, &mut rng).unwrap();

        for &slot in &params.arrays_with_prefix("gen.") {
            assert!(out.grads.arrays[slot].iter().all(|&g| g == 0.0), "generator slot {slot}");
        }
        let labels: Vec<f64> = batch.iter().map(|&i| items[i].f0).collect();
        let eval = |arrs: &[Vec<f64>]| {
            let q = with_arrays(&params, arrs);
            let zs: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| encoder_forward(&q, &items[i].window).unwrap())
                .collect();
            triplet_loss(&zs, &labels, cfg.margin).unwrap().value
        };
        let raw: Vec<Vec<f64>> = params.arrays.iter().map(|a| a.data.clone()).collect();
        assert!((out.loss.metric - eval(&raw)).abs() < 1e-12);
        let fd = fd_grad(&raw, eval, 1e-6);
        check_grads(&out.grads, &fd, &params.arrays_with_prefix("enc."), 2e-4, 1e-7);
    }

    #[test]
    fn parametric_step_gradient_matches() {
        let (cfg, items, mut ctx, duffing) = tiny_setup(Method::Parametric);
        let params = init_params(ModelKind::Parametric, cfg.seed, &cfg.dims);
        let batch: Vec<usize> = vec![0, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let colloc = replay_collocation(&rng, batch.len(), cfg.collocation_per_item, 4.0);
        let out = ctx
            .compute_step(&params, &items, &batch, PhaseTag::Baseline, &mut rng)
            .unwrap();

        let eval = |arrs: &[Vec<f64>]| {
            let q = with_arrays(&params, arrs);
            let mut data = 0.0;
            let mut phys = 0.0;
            for (bi, &i) in batch.iter().enumerate() {
                let item = &items[i];
                let preds: Vec<f64> = item
                    .data_ts
                    .iter()
                    .map(|&t| crate::neural::parametric_forward(&q, t, item.f0).unwrap())
                    .collect();
                data += data_loss(&preds, &item.data_xs).unwrap();
                phys += physics_residual(
                    &ParametricSolution { params: &q, lambda: item.f0 },
                    item.f0,
                    &colloc[bi],
                    &duffing,
                )
                .unwrap();
            }
            (data + cfg.alpha * phys) / batch.len() as f64
        };
        let raw: Vec<Vec<f64>> = params.arrays.iter().map(|a| a.data.clone()).collect();
        assert!((out.loss.total - eval(&raw)).abs() < 1e-10);
        let fd = fd_grad(&raw, eval, 1e-5);
        let all: Vec<usize> = (0..raw.len()).collect();
        check_grads(&out.grads, &fd, &all, 2e-4, 1e-7);
    }

    #[test]
    fn hyperpinn_step_gradient_matches() {
        let (cfg, items, mut ctx, duffing) = tiny_setup(Method::Hyperpinn);
        let params = init_params(ModelKind::Hypernet, cfg.seed, &cfg.dims);
        let batch: Vec<usize> = vec![1, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let colloc = replay_collocation(&rng, batch.len(), cfg.collocation_per_item, 4.0);
        let out = ctx
            .compute_step(&params, &items, &batch, PhaseTag::Baseline, &mut rng)
            .unwrap();

        let eval = |arrs: &[Vec<f64>]| {
            let q = with_arrays(&params, arrs);
            let mut data = 0.0;
            let mut phys = 0.0;
            for (bi, &i) in batch.iter().enumerate() {
                let item = &items[i];
                let w = crate::neural::hypernet_forward(&q, item.f0).unwrap();
                let preds: Vec<f64> =
                    item.data_ts.iter().map(|&t| target_eval(&w, &q.dims, t)).collect();
                data += data_loss(&preds, &item.data_xs).unwrap();
                phys += physics_residual(
                    &TargetNet { weights: &w, dims: &q.dims },
                    item.f0,
                    &colloc[bi],
                    &duffing,
                )
                .unwrap();
            }
            (data + cfg.alpha * phys) / batch.len() as f64
        };
        let raw: Vec<Vec<f64>> = params.arrays.iter().map(|a| a.data.clone()).collect();
        assert!((out.loss.total - eval(&raw)).abs() < 1e-10);
        let fd = fd_grad(&raw, eval, 1e-5);
        let all: Vec<usize> = (0..raw.len()).collect();
        check_grads(&out.grads, &fd, &all, 2e-4, 1e-7);
    }

    #[test]
    fn multi_output_step_gradient_matches() {
        let (cfg, items, mut ctx, duffing) = tiny_setup(Method::MultiOutput);
        let params = init_params(ModelKind::MultiOutput, cfg.seed, &cfg.dims);
        let batch: Vec<usize> = vec![0, 2, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let colloc = replay_collocation(&rng, batch.len(), cfg.collocation_per_item, 4.0);
        let out = ctx
            .compute_step(&params, &items, &batch, PhaseTag::Baseline, &mut rng)
            .unwrap();

        let eval = |arrs: &[Vec<f64>]| {
            let q = with_arrays(&params, arrs);
            let mut sob = 0.0;
            let mut phys = 0.0;
            for (bi, &i) in batch.iter().enumerate() {
                let item = &items[i];
                let z = encoder_forward(&q, &item.window).unwrap();
                let outs: Vec<(f64, f64)> = item
                    .data_ts
                    .iter()
                    .map(|&t| {
                        let h = generator_heads(&q, t, &z);
                        (h[0], h[1])
                    })
                    .collect();
                let tgts: Vec<(f64, f64)> = item
                    .data_xs
                    .iter()
                    .zip(&item.data_vs)
                    .map(|(&x, &v)| (x, v))
                    .collect();
                sob += sobolev_loss(&outs, &tgts).unwrap();
                phys += physics_residual(
                    &ConditionedGenerator { params: &q, z: &z },
                    item.f0,
                    &colloc[bi],
                    &duffing,
                )
                .unwrap();
            }
            (sob + cfg.alpha * phys) / batch.len() as f64
        };
        let raw: Vec<Vec<f64>> = params.arrays.iter().map(|a| a.data.clone()).collect();
        assert!((out.loss.total - eval(&raw)).abs() < 1e-10);
        let fd = fd_grad(&raw, eval, 1e-5);
        let all: Vec<usize> = (0..raw.len()).collect();
        check_grads(&out.grads, &fd, &all, 2e-4, 1e-7);
    }
}
