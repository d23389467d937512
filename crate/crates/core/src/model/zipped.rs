//! The joint multi-task network.
//!
//! Every unit (neuron or channel) of every layer records the set of tasks
//! that use it. A weight entry `(row, col)` exists only when the row's input
//! unit and the column's unit have a task in common; all other entries are
//! stored as exact zeros. A single task's network is obtained by keeping the
//! units it uses, in joint order, which makes inference for one task
//! independent of every other task's parameters.
//!
//! Layer 0 (the input) is shared by all tasks. The last layer holds the
//! concatenated task heads and is never merged.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Activation, Layer, LayerKind, Network, Shape};
use crate::error::{ensure_dim, Error, Result};
use crate::hessian::HessianEstimate;
use crate::linalg::{Matrix, Permutation};
use crate::TaskId;

/// Maximum number of tasks a joint model can hold.
pub const MAX_TASKS: usize = 64;

/// Bit set of task indices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskSet(u64);

impl TaskSet {
    pub const EMPTY: TaskSet = TaskSet(0);

    pub fn single(task: usize) -> Self {
        debug_assert!(task < MAX_TASKS);
        TaskSet(1u64 << task)
    }

    /// Tasks `0..n`.
    pub fn first(n: usize) -> Self {
        if n >= MAX_TASKS {
            TaskSet(u64::MAX)
        } else {
            TaskSet((1u64 << n) - 1)
        }
    }

    pub fn from_bits(bits: u64) -> Self {
        TaskSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, task: usize) -> bool {
        task < MAX_TASKS && self.0 & (1u64 << task) != 0
    }

    pub fn union(self, other: TaskSet) -> TaskSet {
        TaskSet(self.0 | other.0)
    }

    pub fn intersects(self, other: TaskSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_superset_of(self, other: TaskSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..MAX_TASKS).filter(move |&t| self.contains(t))
    }
}

/// Which tasks use a unit, and which original unit of each task it stands for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitInfo {
    pub users: TaskSet,
    /// `(task, original unit index)`, sorted by task.
    pub origins: Vec<(usize, usize)>,
}

impl UnitInfo {
    pub fn single(task: usize, index: usize) -> Self {
        UnitInfo {
            users: TaskSet::single(task),
            origins: vec![(task, index)],
        }
    }

    pub fn origin(&self, task: usize) -> Option<usize> {
        self.origins.iter().find(|(t, _)| *t == task).map(|(_, i)| *i)
    }

    fn merged(a: &UnitInfo, b: &UnitInfo) -> UnitInfo {
        let mut origins: Vec<(usize, usize)> = a.origins.iter().chain(&b.origins).copied().collect();
        origins.sort_unstable();
        UnitInfo {
            users: a.users.union(b.users),
            origins,
        }
    }
}

/// One layer of the joint model.
///
/// Weight rows are grouped by the previous layer's units exactly as in
/// [`Layer`]. For conv layers `in_channels` equals the previous layer's unit
/// count; for residual exits the shortcut indexes units of the block input.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLayer {
    pub kind: LayerKind,
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub mask: Option<Matrix>,
    pub activation: Activation,
    pub units: Vec<UnitInfo>,
}

/// A task's sub-network together with where its parameters live in the joint
/// model.
#[derive(Clone, Debug)]
pub struct TaskView {
    task: usize,
    network: Network,
    /// Joint weight rows used by each layer, in local order.
    rows: Vec<Vec<usize>>,
    /// Joint units (columns) used by each layer, in local order.
    cols: Vec<Vec<usize>>,
}

impl TaskView {
    pub fn task(&self) -> usize {
        self.task
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn rows(&self, layer_index: usize) -> &[usize] {
        &self.rows[layer_index]
    }

    pub fn cols(&self, layer_index: usize) -> &[usize] {
        &self.cols[layer_index]
    }

    /// Reloads weights and biases from the joint model.
    pub(crate) fn refresh(&mut self, zm: &ZippedModel) {
        for (i, layer) in self.network.layers_mut().iter_mut().enumerate() {
            let joint = &zm.layers[i];
            let (w, b, _) = layer.params_mut();
            let cols = &self.cols[i];
            for (a, &r) in self.rows[i].iter().enumerate() {
                let src = joint.weights.row(r);
                for (dst, &c) in w.row_mut(a).iter_mut().zip(cols) {
                    *dst = src[c];
                }
            }
            for (dst, &c) in b.iter_mut().zip(cols) {
                *dst = joint.bias[c];
            }
        }
    }
}

/// Two-task view of a hidden layer split into its five weight blocks.
///
/// Row blocks are expanded by the rows each input unit owns. `hat_a` uses all
/// input units of task A (its specific units then the shared ones, in joint
/// order); `tilde_a` uses only A's specific input units; `shared` only the
/// shared input units. B mirrors A.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedLayer {
    pub shared_count: usize,
    pub specific_a: usize,
    pub specific_b: usize,
    pub hat_a: Matrix,
    pub tilde_a: Matrix,
    pub shared: Matrix,
    pub tilde_b: Matrix,
    pub hat_b: Matrix,
    pub bias_shared: Vec<f64>,
    pub bias_a: Vec<f64>,
    pub bias_b: Vec<f64>,
    /// Original `(index in A, index in B)` of each shared unit.
    pub origins: Vec<(usize, usize)>,
}

/// Several networks merged into one, with per-task inference.
#[derive(Clone, Debug)]
pub struct ZippedModel {
    tasks: Vec<TaskId>,
    task_weights: Vec<f64>,
    task_inputs: Vec<usize>,
    input: Shape,
    input_units: Vec<UnitInfo>,
    layers: Vec<JointLayer>,
    /// `hessians[i][t]`: layer-input Hessian of task `t` for `layers[i]`,
    /// over every joint row of that layer plus the bias coordinate.
    hessians: Vec<Vec<Option<HessianEstimate>>>,
}

impl PartialEq for ZippedModel {
    /// Compares the model itself; cached Hessians are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.tasks == other.tasks
            && self.task_weights == other.task_weights
            && self.task_inputs == other.task_inputs
            && self.input == other.input
            && self.input_units == other.input_units
            && self.layers == other.layers
    }
}

/// Plain-data form of a [`ZippedModel`], used by serializers.
#[derive(Clone, Debug, PartialEq)]
pub struct ZippedParts {
    pub tasks: Vec<TaskId>,
    pub task_weights: Vec<f64>,
    pub task_inputs: Vec<usize>,
    pub input: Shape,
    pub input_units: Vec<UnitInfo>,
    pub layers: Vec<JointLayer>,
}

impl ZippedModel {
    /// A joint model holding a single task.
    pub fn from_network(net: &Network) -> Self {
        let input_units = (0..net.input_shape().units())
            .map(|i| UnitInfo::single(0, i))
            .collect();
        let layers: Vec<JointLayer> = net
            .layers()
            .iter()
            .map(|l| JointLayer {
                kind: l.kind().clone(),
                weights: l.weights().clone(),
                bias: l.bias().to_vec(),
                mask: l.mask().cloned(),
                activation: l.activation(),
                units: (0..l.units()).map(|k| UnitInfo::single(0, k)).collect(),
            })
            .collect();
        let depth = layers.len();
        ZippedModel {
            tasks: vec![net.task().clone()],
            task_weights: vec![1.0],
            task_inputs: vec![net.input_dim()],
            input: net.input_shape(),
            input_units,
            layers,
            hessians: vec![vec![None]; depth],
        }
    }

    /// Joint model of two networks with nothing shared yet.
    pub fn from_networks(a: &Network, b: &Network) -> Result<Self> {
        let mut zm = ZippedModel::from_network(a);
        zm.add_network(b)?;
        Ok(zm)
    }

    /// Appends a network as a new task with no sharing; returns its task index.
    ///
    /// Task weights are reset to be equal. When the flat input sizes differ,
    /// the joint input takes the larger size and the smaller model gets
    /// zero-weight connections from the extra inputs.
    pub fn add_network(&mut self, net: &Network) -> Result<usize> {
        let t = self.tasks.len();
        if t >= MAX_TASKS {
            return Err(Error::InvalidConfig(format!("at most {MAX_TASKS} tasks")));
        }
        if self.tasks.contains(net.task()) {
            return Err(Error::InvalidConfig(format!("duplicate task id {}", net.task())));
        }
        if net.depth() != self.depth() {
            return Err(Error::Incompatible(format!(
                "depth {} vs {}",
                net.depth(),
                self.depth()
            )));
        }
        let (joint_in, pad_net, pad_joint) = match (self.input, net.input_shape()) {
            (Shape::Flat(a), Shape::Flat(b)) => (Shape::Flat(a.max(b)), a.max(b) - b, a.max(b) - a),
            (a, b) if a == b => (a, 0, 0),
            (a, b) => {
                return Err(Error::Incompatible(format!("input shapes {a:?} vs {b:?}")));
            }
        };
        for (i, (jl, nl)) in self.layers.iter().zip(net.layers()).enumerate() {
            let compatible = match (&jl.kind, nl.kind()) {
                (LayerKind::Dense, LayerKind::Dense)
                | (LayerKind::ResidualEntry, LayerKind::ResidualEntry)
                | (LayerKind::ResidualExit { .. }, LayerKind::ResidualExit { .. }) => true,
                (LayerKind::Conv(g1), LayerKind::Conv(g2)) => {
                    g1.kernel == g2.kernel
                        && g1.stride == g2.stride
                        && g1.padding == g2.padding
                        && g1.in_h == g2.in_h
                        && g1.in_w == g2.in_w
                }
                _ => false,
            };
            if !compatible || jl.activation != nl.activation() {
                return Err(Error::Incompatible(format!(
                    "layer {} is {} in the joint model but {} in {}",
                    i + 1,
                    jl.kind.name(),
                    nl.kind().name(),
                    net.task()
                )));
            }
        }

        // Grow the shared input if needed.
        if pad_joint > 0 {
            let all = TaskSet::first(t);
            let old = self.input_units.len();
            for _ in 0..pad_joint {
                self.input_units.push(UnitInfo {
                    users: all,
                    origins: Vec::new(),
                });
            }
            let first = &mut self.layers[0];
            first.weights = pad_rows(&first.weights, pad_joint);
            first.mask = first.mask.as_ref().map(|m| pad_rows(m, pad_joint));
            if first.mask.is_none() {
                // Fictive connections carry no weight: mask them out.
                let mut m = Matrix::from_fn(first.weights.rows(), first.weights.cols(), |_, _| 1.0);
                for r in old..first.weights.rows() {
                    m.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                }
                first.mask = Some(m);
            }
            self.remap_cache_append(0, pad_joint);
            self.input = joint_in;
        }
        for (k, u) in self.input_units.iter_mut().enumerate() {
            u.users = u.users.union(TaskSet::single(t));
            if k < net.input_shape().units() {
                u.origins.push((t, k));
            }
        }

        let shapes = net.shapes();
        let mut prev_old_units = self.input_units.len();
        let mut old_units: Vec<usize> = Vec::with_capacity(self.depth());
        for (i, nl) in net.layers().iter().enumerate() {
            let rpu = nl.rows_per_unit(shapes[i]);
            let jl = &mut self.layers[i];
            let old_cols = jl.units.len();
            old_units.push(old_cols);
            let (w_new, m_new) = if i == 0 {
                let pad = pad_net * rpu;
                let w = pad_rows(nl.weights(), pad);
                let m = match nl.mask() {
                    Some(m) => Some(pad_rows(m, pad)),
                    None if pad > 0 => {
                        let mut m = Matrix::from_fn(w.rows(), w.cols(), |_, _| 1.0);
                        for r in nl.weights().rows()..w.rows() {
                            m.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                        }
                        Some(m)
                    }
                    None => None,
                };
                (w, m)
            } else {
                (nl.weights().clone(), nl.mask().cloned())
            };
            let (weights, mask) = if i == 0 {
                let w = hcat(&jl.weights, &w_new);
                let m = combine_masks(jl.mask.as_ref(), &jl.weights, m_new.as_ref(), &w_new, hcat);
                (w, m)
            } else {
                let w = block_diag(&jl.weights, &w_new);
                let m = combine_masks(jl.mask.as_ref(), &jl.weights, m_new.as_ref(), &w_new, |a, b| {
                    block_diag(a, b)
                });
                (w, m)
            };
            jl.weights = weights;
            jl.mask = mask;
            jl.bias.extend_from_slice(nl.bias());
            jl.units
                .extend((0..nl.units()).map(|k| UnitInfo::single(t, k)));
            match (&mut jl.kind, nl.kind()) {
                (LayerKind::Conv(g), LayerKind::Conv(_)) => {
                    g.in_channels = if i == 0 {
                        self.input_units.len()
                    } else {
                        prev_old_units + shapes[i].units()
                    };
                }
                (LayerKind::ResidualExit { shortcut }, LayerKind::ResidualExit { shortcut: s2 }) => {
                    // Source is the output of layers[i - 2], or the input when i == 1.
                    let offset = if i >= 2 { old_units[i - 2] } else { 0 };
                    shortcut.extend(s2.iter().map(|&s| s + offset));
                }
                _ => {}
            }
            if i > 0 {
                let added_rows = shapes[i].units() * rpu;
                self.remap_cache_append(i, added_rows);
            }
            prev_old_units = old_cols;
        }
        for h in self.hessians.iter_mut() {
            h.push(None);
        }
        self.tasks.push(net.task().clone());
        self.task_inputs.push(net.input_dim());
        let n = self.tasks.len() as f64;
        self.task_weights = vec![1.0 / n; self.tasks.len()];
        self.validate()?;
        Ok(t)
    }

    /// Pads cached Hessians of `layers[i]` with zero coordinates for
    /// `added` new rows appended before the bias coordinate.
    fn remap_cache_append(&mut self, i: usize, added: usize) {
        for est in self.hessians[i].iter_mut().flatten() {
            let dim = est.dim();
            let rows = dim - 1;
            let map: Vec<Option<usize>> = (0..rows)
                .map(Some)
                .chain(core::iter::repeat_n(None, added))
                .chain(core::iter::once(Some(rows)))
                .collect();
            *est = est.remap(&map);
        }
    }

    /// Rebuilds a model from its parts, checking every structural invariant.
    pub fn from_parts(parts: ZippedParts) -> Result<Self> {
        let depth = parts.layers.len();
        let n = parts.tasks.len();
        let zm = ZippedModel {
            tasks: parts.tasks,
            task_weights: parts.task_weights,
            task_inputs: parts.task_inputs,
            input: parts.input,
            input_units: parts.input_units,
            layers: parts.layers,
            hessians: vec![vec![None; n]; depth],
        };
        zm.validate()?;
        Ok(zm)
    }

    pub fn to_parts(&self) -> ZippedParts {
        ZippedParts {
            tasks: self.tasks.clone(),
            task_weights: self.task_weights.clone(),
            task_inputs: self.task_inputs.clone(),
            input: self.input,
            input_units: self.input_units.clone(),
            layers: self.layers.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.tasks.len();
        if n == 0 || n > MAX_TASKS {
            return Err(Error::InvalidNetwork(format!("task count {n} out of range")));
        }
        let unique: BTreeSet<&TaskId> = self.tasks.iter().collect();
        if unique.len() != n {
            return Err(Error::InvalidNetwork("duplicate task ids".into()));
        }
        ensure_dim("task weights", n, self.task_weights.len())?;
        ensure_dim("task input sizes", n, self.task_inputs.len())?;
        if self.task_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidNetwork("task weights must be finite and nonnegative".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidNetwork("no layers".into()));
        }
        ensure_dim("input units", self.input.units(), self.input_units.len())?;
        let all = TaskSet::first(n);
        let check_units = |units: &[UnitInfo]| -> Result<()> {
            for u in units {
                if u.users.is_empty() || !all.is_superset_of(u.users) {
                    return Err(Error::InvalidNetwork("unit with invalid task set".into()));
                }
            }
            Ok(())
        };
        check_units(&self.input_units)?;
        for u in &self.input_units {
            if u.users != all {
                return Err(Error::InvalidNetwork("input units must be shared by all tasks".into()));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            let at = |e: Error| e.at_layer(i + 1);
            check_units(&l.units).map_err(at)?;
            for u in &l.units {
                let tasks: Vec<usize> = u.origins.iter().map(|(t, _)| *t).collect();
                let expected: Vec<usize> = u.users.iter().collect();
                if tasks != expected {
                    return Err(at(Error::InvalidNetwork("unit origins do not match users".into())));
                }
            }
            let prev = self.prev_units(i);
            let rpu = self.rows_per_unit(i);
            ensure_dim("joint weight rows", prev.len() * rpu, l.weights.rows()).map_err(at)?;
            ensure_dim("joint weight cols", l.units.len(), l.weights.cols()).map_err(at)?;
            ensure_dim("joint bias", l.units.len(), l.bias.len()).map_err(at)?;
            if let LayerKind::Conv(g) = &l.kind {
                ensure_dim("conv input channels", prev.len(), g.in_channels).map_err(at)?;
            }
            if let LayerKind::ResidualExit { shortcut } = &l.kind {
                ensure_dim("shortcut map", l.units.len(), shortcut.len()).map_err(at)?;
                let src = self.prev_units(i.saturating_sub(1));
                for (u, &s) in l.units.iter().zip(shortcut) {
                    if i == 0 || s >= src.len() || !src[s].users.is_superset_of(u.users) {
                        return Err(at(Error::InvalidNetwork("bad residual shortcut".into())));
                    }
                }
            }
            if let Some(m) = &l.mask {
                ensure_dim("mask rows", l.weights.rows(), m.rows()).map_err(at)?;
                ensure_dim("mask cols", l.weights.cols(), m.cols()).map_err(at)?;
            }
            for (c, cu) in l.units.iter().enumerate() {
                for (p, pu) in prev.iter().enumerate() {
                    if pu.users.intersects(cu.users) {
                        continue;
                    }
                    for r in p * rpu..(p + 1) * rpu {
                        if l.weights.get(r, c) != 0.0 {
                            return Err(at(Error::InvalidNetwork(
                                "nonzero weight between units with no common task".into(),
                            )));
                        }
                    }
                }
            }
        }
        for u in &self.layers[self.layers.len() - 1].units {
            if u.users.len() != 1 {
                return Err(Error::InvalidNetwork("output units cannot be shared".into()));
            }
        }
        for t in 0..n {
            self.task_view(t)?;
        }
        Ok(())
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_index(&self, task: &TaskId) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t == task)
            .ok_or_else(|| Error::UnknownTask(task.clone()))
    }

    /// Loss weights used for joint retraining and Hessian balancing.
    pub fn task_weights(&self) -> &[f64] {
        &self.task_weights
    }

    pub fn set_task_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        ensure_dim("task weights", self.tasks.len(), weights.len())?;
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("task weights must be finite and nonnegative".into()));
        }
        for (est, w) in self
            .hessians
            .iter_mut()
            .flat_map(|h| h.iter_mut().enumerate())
            .filter_map(|(t, e)| e.as_mut().map(|e| (e, weights[t])))
        {
            est.set_weight(w);
        }
        self.task_weights = weights;
        Ok(())
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    /// Number of layers including the output layer.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[JointLayer] {
        &self.layers
    }

    /// Test hook: direct access to a joint layer.
    #[doc(hidden)]
    pub fn layer_mut(&mut self, index: usize) -> &mut JointLayer {
        &mut self.layers[index]
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [JointLayer] {
        &mut self.layers
    }

    /// Units feeding `layers[i]`.
    pub fn prev_units(&self, i: usize) -> &[UnitInfo] {
        if i == 0 {
            &self.input_units
        } else {
            &self.layers[i - 1].units
        }
    }

    /// Activation shape entering `layers[i]`.
    pub fn input_shape_of(&self, i: usize) -> Shape {
        if i == 0 {
            return self.input;
        }
        let l = &self.layers[i - 1];
        match &l.kind {
            LayerKind::Conv(g) => Shape::Image {
                channels: l.units.len(),
                h: g.out_h(),
                w: g.out_w(),
            },
            _ => Shape::Flat(l.units.len()),
        }
    }

    /// Weight rows owned by each input unit of `layers[i]`.
    pub fn rows_per_unit(&self, i: usize) -> usize {
        match &self.layers[i].kind {
            LayerKind::Conv(g) => g.patch_len(),
            _ => self.input_shape_of(i).spatial(),
        }
    }

    /// Sub-network of task `t` plus the joint positions of its parameters.
    pub fn task_view(&self, t: usize) -> Result<TaskView> {
        if t >= self.tasks.len() {
            return Err(Error::InvalidConfig(format!("task index {t} out of range")));
        }
        let mut rows_all = Vec::with_capacity(self.depth());
        let mut cols_all: Vec<Vec<usize>> = Vec::with_capacity(self.depth());
        let mut layers = Vec::with_capacity(self.depth());
        let input_sel: Vec<usize> = (0..self.input_units.len()).collect();
        for (i, jl) in self.layers.iter().enumerate() {
            let rpu = self.rows_per_unit(i);
            let prev_sel: &[usize] = if i == 0 { &input_sel } else { &cols_all[i - 1] };
            let rows: Vec<usize> = prev_sel
                .iter()
                .flat_map(|&u| u * rpu..(u + 1) * rpu)
                .collect();
            let cols: Vec<usize> = jl
                .units
                .iter()
                .enumerate()
                .filter(|(_, u)| u.users.contains(t))
                .map(|(c, _)| c)
                .collect();
            let weights = jl.weights.select_rows(&rows).select_cols(&cols);
            let bias: Vec<f64> = cols.iter().map(|&c| jl.bias[c]).collect();
            let mask = jl.mask.as_ref().map(|m| m.select_rows(&rows).select_cols(&cols));
            let kind = match &jl.kind {
                LayerKind::Conv(g) => LayerKind::Conv(g.with_in_channels(prev_sel.len())),
                LayerKind::ResidualExit { shortcut } => {
                    let src: &[usize] = if i >= 2 { &cols_all[i - 2] } else { &input_sel };
                    let local = cols
                        .iter()
                        .map(|&c| {
                            src.iter().position(|&s| s == shortcut[c]).ok_or_else(|| {
                                Error::InvalidNetwork("shortcut leaves the task".into())
                            })
                        })
                        .collect::<Result<Vec<usize>>>()?;
                    LayerKind::ResidualExit { shortcut: local }
                }
                k => k.clone(),
            };
            let layer = Layer::new(kind, weights, bias, mask, jl.activation).map_err(|e| e.at_layer(i + 1))?;
            layers.push(layer);
            rows_all.push(rows);
            cols_all.push(cols);
        }
        let network = Network::new(self.tasks[t].clone(), self.input, layers)?;
        Ok(TaskView {
            task: t,
            network,
            rows: rows_all,
            cols: cols_all,
        })
    }

    pub fn task_network(&self, t: usize) -> Result<Network> {
        Ok(self.task_view(t)?.into_network())
    }

    /// Output of one task for one input, using only that task's parameters.
    ///
    /// Inputs shorter than the joint input (a smaller original model) are
    /// zero-padded.
    pub fn infer_task(&self, task: &TaskId, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.task_index(task)?;
        let x = self.pad_input(t, x)?;
        Ok(self.task_network(t)?.forward(&x)?.output)
    }

    /// Batched per-task outputs.
    pub fn predict_task(&self, t: usize, x: &Matrix) -> Result<Matrix> {
        self.task_network(t)?.predict(x)
    }

    fn pad_input(&self, t: usize, x: &[f64]) -> Result<Vec<f64>> {
        let full = self.input.features();
        if x.len() == full {
            return Ok(x.to_vec());
        }
        ensure_dim("task input", self.task_inputs[t], x.len())?;
        let mut v = x.to_vec();
        v.resize(full, 0.0);
        Ok(v)
    }

    /// Units of hidden layer `l` (1-based) used by more than one task.
    pub fn shared_units(&self, l: usize) -> usize {
        self.layers[l - 1].units.iter().filter(|u| u.users.len() > 1).count()
    }

    /// Weights and biases that exist for at least one task.
    pub fn parameter_count(&self) -> usize {
        self.count_entries(false)
    }

    /// Like [`Self::parameter_count`] but only counting unmasked weights.
    pub fn connection_count(&self) -> usize {
        self.count_entries(true)
    }

    fn count_entries(&self, masked: bool) -> usize {
        let mut total = 0;
        for (i, l) in self.layers.iter().enumerate() {
            let prev = self.prev_units(i);
            let rpu = self.rows_per_unit(i);
            for (c, cu) in l.units.iter().enumerate() {
                for (p, pu) in prev.iter().enumerate() {
                    if !pu.users.intersects(cu.users) {
                        continue;
                    }
                    total += match (&l.mask, masked) {
                        (Some(m), true) => (p * rpu..(p + 1) * rpu)
                            .filter(|&r| m.get(r, c) != 0.0)
                            .count(),
                        _ => rpu,
                    };
                }
                total += 1;
            }
        }
        total
    }

    /// Unit order of task `t` at hidden layer `l` (1-based) relative to the
    /// original network: local unit `i` is original unit `map[i]`.
    pub fn task_permutation(&self, l: usize, t: usize) -> Result<Permutation> {
        if l == 0 || l > self.depth() {
            return Err(Error::LayerOutOfRange {
                index: l,
                max: self.depth(),
            });
        }
        let map = self.layers[l - 1]
            .units
            .iter()
            .filter_map(|u| u.origin(t))
            .collect();
        Permutation::new(map)
    }

    /// Five-block view of hidden layer `l` (1-based) for tasks `a` and `b`.
    pub fn shared_layer(&self, l: usize, a: usize, b: usize) -> Result<SharedLayer> {
        if l == 0 || l >= self.depth() {
            return Err(Error::LayerOutOfRange {
                index: l,
                max: self.depth().saturating_sub(1),
            });
        }
        if a >= self.num_tasks() || b >= self.num_tasks() || a == b {
            return Err(Error::InvalidConfig("need two distinct task indices".into()));
        }
        let i = l - 1;
        let jl = &self.layers[i];
        let rpu = self.rows_per_unit(i);
        let prev = self.prev_units(i);
        let both = TaskSet::single(a).union(TaskSet::single(b));
        let expand = |units: Vec<usize>| -> Vec<usize> {
            units.iter().flat_map(|&u| u * rpu..(u + 1) * rpu).collect()
        };
        let pick = |pred: &dyn Fn(TaskSet) -> bool, units: &[UnitInfo]| -> Vec<usize> {
            units
                .iter()
                .enumerate()
                .filter(|(_, u)| pred(u.users))
                .map(|(k, _)| k)
                .collect()
        };
        let is_shared = |s: TaskSet| s.is_superset_of(both);
        let only_a = |s: TaskSet| s.contains(a) && !s.contains(b);
        let only_b = |s: TaskSet| s.contains(b) && !s.contains(a);
        let uses_a = |s: TaskSet| s.contains(a);
        let uses_b = |s: TaskSet| s.contains(b);

        let rows_all_a = expand(pick(&uses_a, prev));
        let rows_all_b = expand(pick(&uses_b, prev));
        let rows_spec_a = expand(pick(&only_a, prev));
        let rows_spec_b = expand(pick(&only_b, prev));
        let rows_shared = expand(pick(&is_shared, prev));
        let cols_shared = pick(&is_shared, &jl.units);
        let cols_a = pick(&only_a, &jl.units);
        let cols_b = pick(&only_b, &jl.units);
        let block = |r: &[usize], c: &[usize]| jl.weights.select_rows(r).select_cols(c);
        let bias = |c: &[usize]| c.iter().map(|&k| jl.bias[k]).collect::<Vec<f64>>();
        let origins = cols_shared
            .iter()
            .map(|&c| {
                let u = &jl.units[c];
                (u.origin(a).unwrap_or(0), u.origin(b).unwrap_or(0))
            })
            .collect();
        Ok(SharedLayer {
            shared_count: cols_shared.len(),
            specific_a: cols_a.len(),
            specific_b: cols_b.len(),
            hat_a: block(&rows_all_a, &cols_a),
            tilde_a: block(&rows_spec_a, &cols_shared),
            shared: block(&rows_shared, &cols_shared),
            tilde_b: block(&rows_spec_b, &cols_shared),
            hat_b: block(&rows_all_b, &cols_b),
            bias_shared: bias(&cols_shared),
            bias_a: bias(&cols_a),
            bias_b: bias(&cols_b),
            origins,
        })
    }

    /// Hessian of task `t` at `layers[i]` kept from the last zipping run.
    pub fn cached_hessian(&self, i: usize, t: usize) -> Option<&HessianEstimate> {
        self.hessians.get(i).and_then(|h| h.get(t)).and_then(Option::as_ref)
    }

    pub(crate) fn store_hessian(&mut self, i: usize, t: usize, est: HessianEstimate) {
        self.hessians[i][t] = Some(est);
    }

    /// Replaces `layers[i]`'s units `a_k` and `b_k` by merged units placed
    /// first, followed by the untouched units in their old order. Rows of
    /// `layers[i + 1]` belonging to a merged pair are summed (their columns
    /// never overlap), shortcuts reading this layer are re-indexed, and
    /// cached Hessians of the next layer are re-expressed in the new order.
    ///
    /// Returns, for each new unit, the old unit it came from (`a` for merged).
    pub(crate) fn apply_merge(&mut self, i: usize, merged: Vec<MergedUnit>) -> Result<Vec<usize>> {
        let old_n = self.layers[i].units.len();
        let mut used = vec![false; old_n];
        for m in &merged {
            if m.a >= old_n || m.b >= old_n || m.a == m.b || used[m.a] || used[m.b] {
                return Err(Error::InvalidConfig("merge pairs must be disjoint".into()));
            }
            used[m.a] = true;
            used[m.b] = true;
        }
        let rest: Vec<usize> = (0..old_n).filter(|&u| !used[u]).collect();
        let new_n = merged.len() + rest.len();
        let mut old_to_new = vec![0usize; old_n];
        for (k, m) in merged.iter().enumerate() {
            old_to_new[m.a] = k;
            old_to_new[m.b] = k;
        }
        for (k, &u) in rest.iter().enumerate() {
            old_to_new[u] = merged.len() + k;
        }
        let origin_of_new: Vec<usize> = merged.iter().map(|m| m.a).chain(rest.iter().copied()).collect();
        // For each task, the old unit whose Hessian coordinates a new unit takes.
        let cache_sources: Vec<Vec<Option<usize>>> = {
            let units = &self.layers[i].units;
            (0..self.tasks.len())
                .map(|t| {
                    merged
                        .iter()
                        .map(|m| {
                            if units[m.a].users.contains(t) {
                                Some(m.a)
                            } else if units[m.b].users.contains(t) {
                                Some(m.b)
                            } else {
                                None
                            }
                        })
                        .chain(rest.iter().map(|&u| units[u].users.contains(t).then_some(u)))
                        .collect()
                })
                .collect()
        };

        {
            let jl = &mut self.layers[i];
            let rows = jl.weights.rows();
            let mut w = Matrix::zeros(rows, new_n);
            let mut mask = jl.mask.as_ref().map(|_| Matrix::zeros(rows, new_n));
            let mut bias = Vec::with_capacity(new_n);
            let mut units = Vec::with_capacity(new_n);
            for (k, m) in merged.iter().enumerate() {
                ensure_dim("merged column", rows, m.column.len())?;
                w.set_column(k, &m.column);
                if let Some(mk) = mask.as_mut() {
                    let col = m.mask.as_ref().ok_or_else(|| {
                        Error::MaskInconsistent("merged unit of a sparse layer without a mask".into())
                    })?;
                    mk.set_column(k, col);
                }
                bias.push(m.bias);
                units.push(UnitInfo::merged(&jl.units[m.a], &jl.units[m.b]));
            }
            for (k, &u) in rest.iter().enumerate() {
                let c = merged.len() + k;
                w.set_column(c, &jl.weights.column(u));
                if let (Some(mk), Some(old)) = (mask.as_mut(), jl.mask.as_ref()) {
                    mk.set_column(c, &old.column(u));
                }
                bias.push(jl.bias[u]);
                units.push(jl.units[u].clone());
            }
            if let LayerKind::ResidualExit { shortcut } = &mut jl.kind {
                for m in &merged {
                    if shortcut[m.a] != shortcut[m.b] {
                        return Err(Error::ResidualPrecondition { layer: i + 1 });
                    }
                }
                *shortcut = origin_of_new.iter().map(|&u| shortcut[u]).collect();
            }
            jl.weights = w;
            jl.mask = mask;
            jl.bias = bias;
            jl.units = units;
        }

        if i + 1 < self.layers.len() {
            let rpu = self.rows_per_unit(i + 1);
            let next = &mut self.layers[i + 1];
            let cols = next.weights.cols();
            let mut w = Matrix::zeros(new_n * rpu, cols);
            let mut mask = next.mask.as_ref().map(|_| Matrix::zeros(new_n * rpu, cols));
            for old in 0..old_n {
                let k = old_to_new[old];
                for o in 0..rpu {
                    let src = next.weights.row(old * rpu + o);
                    for (d, s) in w.row_mut(k * rpu + o).iter_mut().zip(src) {
                        *d += *s;
                    }
                    if let (Some(mk), Some(om)) = (mask.as_mut(), next.mask.as_ref()) {
                        for (d, s) in mk.row_mut(k * rpu + o).iter_mut().zip(om.row(old * rpu + o)) {
                            *d = d.max(*s);
                        }
                    }
                }
            }
            next.weights = w;
            next.mask = mask;
            if let LayerKind::Conv(g) = &mut next.kind {
                g.in_channels = new_n;
            }
            for (t, slot) in self.hessians[i + 1].iter_mut().enumerate() {
                if let Some(est) = slot.as_mut() {
                    let mut map: Vec<Option<usize>> = Vec::with_capacity(new_n * rpu + 1);
                    for src in &cache_sources[t] {
                        for o in 0..rpu {
                            map.push(src.map(|u| u * rpu + o));
                        }
                    }
                    map.push(Some(old_n * rpu));
                    *est = est.remap(&map);
                }
            }
        }
        if i + 2 < self.layers.len() {
            if let LayerKind::ResidualExit { shortcut } = &mut self.layers[i + 2].kind {
                for s in shortcut.iter_mut() {
                    *s = old_to_new[*s];
                }
            }
        }
        Ok(origin_of_new)
    }

}

/// A merged unit ready to be written into the joint model.
#[derive(Clone, Debug)]
pub(crate) struct MergedUnit {
    pub a: usize,
    pub b: usize,
    /// Full incoming column over every joint row of the layer.
    pub column: Vec<f64>,
    pub bias: f64,
    pub mask: Option<Vec<f64>>,
}

fn pad_rows(m: &Matrix, extra: usize) -> Matrix {
    if extra == 0 {
        return m.clone();
    }
    let mut out = Matrix::zeros(m.rows() + extra, m.cols());
    out.as_mut_slice()[..m.rows() * m.cols()].copy_from_slice(m.as_slice());
    out
}

fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows(), b.rows());
    Matrix::from_fn(a.rows(), a.cols() + b.cols(), |r, c| {
        if c < a.cols() {
            a.get(r, c)
        } else {
            b.get(r, c - a.cols())
        }
    })
}

fn block_diag(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows() + b.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        out.row_mut(r)[..a.cols()].copy_from_slice(a.row(r));
    }
    for r in 0..b.rows() {
        out.row_mut(a.rows() + r)[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

fn combine_masks(
    ma: Option<&Matrix>,
    wa: &Matrix,
    mb: Option<&Matrix>,
    wb: &Matrix,
    join: impl Fn(&Matrix, &Matrix) -> Matrix,
) -> Option<Matrix> {
    if ma.is_none() && mb.is_none() {
        return None;
    }
    let ones = |w: &Matrix| Matrix::from_fn(w.rows(), w.cols(), |_, _| 1.0);
    let a = ma.cloned().unwrap_or_else(|| ones(wa));
    let b = mb.cloned().unwrap_or_else(|| ones(wb));
    Some(join(&a, &b))
}
