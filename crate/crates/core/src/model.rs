//! Shared-trunk multi-task network.
//!
//! A model is a convolutional trunk followed by one branch per task. Under
//! selective network augmentation every new task receives its own branch
//! (two conv blocks plus a classifier head) initialized from an existing
//! branch, while the trunk and all earlier branches are frozen. Old tasks
//! therefore compute exactly what they computed before the new task arrived.
//!
//! A branch may instead borrow the body of another branch and own only its
//! classifier head; the distillation baseline grows the network that way.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SenaError};
use crate::layers::{ForwardContext, LayerKind, LayerNode, LayerStack, Padding};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Layer widths of the trunk and of each branch.
///
/// Defaults: 32-filter trunk convs, 64-filter branch convs, 3x3 kernels with
/// same padding, a 512-unit hidden dense layer, dropout 0.25 after each
/// pooling block and 0.5 before the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_size: usize,
    pub trunk_filters: usize,
    pub branch_filters: usize,
    pub kernel: usize,
    pub dense_units: usize,
    pub block_dropout: f32,
    pub head_dropout: f32,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_channels: 3,
            input_size: 32,
            trunk_filters: 32,
            branch_filters: 64,
            kernel: 3,
            dense_units: 512,
            block_dropout: 0.25,
            head_dropout: 0.5,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_channels,
            self.trunk_filters,
            self.branch_filters,
            self.kernel,
            self.dense_units,
        ];
        if dims.contains(&0) {
            return Err(SenaError::InvalidArgument(format!(
                "architecture dimensions must be positive: {self:?}"
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(SenaError::InvalidArgument(format!(
                "same padding needs an odd kernel, got {}",
                self.kernel
            )));
        }
        if self.input_size < 4 {
            return Err(SenaError::InvalidArgument(format!(
                "input size {} too small for two pooling stages",
                self.input_size
            )));
        }
        for rate in [self.block_dropout, self.head_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(SenaError::InvalidArgument(format!(
                    "dropout rate {rate} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_size, self.input_size]
    }

    /// Features entering the hidden dense layer after both pooling stages.
    pub fn flat_features(&self) -> usize {
        let side = self.input_size / 2 / 2;
        self.branch_filters * side * side
    }

    pub fn trunk_param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let t = self.trunk_filters;
        (self.input_channels * k2 * t + t) + (t * k2 * t + t)
    }

    pub fn body_param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let (t, b) = (self.trunk_filters, self.branch_filters);
        (t * k2 * b + b) + (b * k2 * b + b) + (self.flat_features() * self.dense_units + self.dense_units)
    }

    pub fn head_param_count(&self, n_classes: usize) -> usize {
        self.dense_units * n_classes + n_classes
    }

    pub fn branch_param_count(&self, n_classes: usize) -> usize {
        self.body_param_count() + self.head_param_count(n_classes)
    }

    fn build_trunk(&self, rng: &mut Rng) -> Result<LayerStack> {
        let (c, t, k) = (self.input_channels, self.trunk_filters, self.kernel);
        Ok(LayerStack::new(vec![
            LayerNode::conv2d(c, t, k, Padding::Same, rng)?,
            LayerNode::relu(),
            LayerNode::conv2d(t, t, k, Padding::Same, rng)?,
            LayerNode::relu(),
            LayerNode::maxpool2x2(),
            LayerNode::dropout(self.block_dropout)?,
        ]))
    }

    fn build_body(&self, rng: &mut Rng) -> Result<LayerStack> {
        let (t, b, k) = (self.trunk_filters, self.branch_filters, self.kernel);
        Ok(LayerStack::new(vec![
            LayerNode::conv2d(t, b, k, Padding::Same, rng)?,
            LayerNode::relu(),
            LayerNode::conv2d(b, b, k, Padding::Same, rng)?,
            LayerNode::relu(),
            LayerNode::maxpool2x2(),
            LayerNode::dropout(self.block_dropout)?,
            LayerNode::flatten(),
            LayerNode::dense(self.flat_features(), self.dense_units, rng)?,
            LayerNode::relu(),
            LayerNode::dropout(self.head_dropout)?,
        ]))
    }

    fn build_head(&self, n_classes: usize, rng: &mut Rng) -> Result<LayerStack> {
        Ok(LayerStack::new(vec![
            LayerNode::dense(self.dense_units, n_classes, rng)?,
            LayerNode::softmax(),
        ]))
    }
}

/// Where a branch gets its feature layers from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BranchBody {
    Owned(LayerStack),
    /// Reuses the body of the named task's branch.
    Shared(String),
}

impl PartialEq for LayerStack {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.layers().iter().zip(other.layers()).all(|(a, b)| {
                a.spec() == b.spec()
                    && a.is_frozen() == b.is_frozen()
                    && a.params().iter().zip(b.params()).all(|(p, q)| p.bit_eq(q))
            })
    }
}

impl Eq for LayerStack {}

/// Per-task layers: conv blocks and hidden dense (the body) plus the
/// classifier head `[dense(n_classes), softmax]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskBranch {
    task_id: String,
    n_classes: usize,
    body: BranchBody,
    head: LayerStack,
}

impl TaskBranch {
    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn body(&self) -> &BranchBody {
        &self.body
    }

    pub fn owned_body(&self) -> Option<&LayerStack> {
        match &self.body {
            BranchBody::Owned(stack) => Some(stack),
            BranchBody::Shared(_) => None,
        }
    }

    pub fn head(&self) -> &LayerStack {
        &self.head
    }

    /// Layers this branch owns, body first.
    pub fn owned_layers(&self) -> impl Iterator<Item = &LayerNode> {
        self.owned_body()
            .into_iter()
            .flat_map(|s| s.layers())
            .chain(self.head.layers())
    }

    fn owned_layers_mut(&mut self) -> impl Iterator<Item = &mut LayerNode> {
        let body = match &mut self.body {
            BranchBody::Owned(stack) => Some(stack),
            BranchBody::Shared(_) => None,
        };
        body.into_iter()
            .flat_map(|s| s.layers_mut().iter_mut())
            .chain(self.head.layers_mut().iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.owned_layers().map(LayerNode::param_count).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.owned_layers_mut().for_each(|l| l.set_frozen(frozen));
    }

    pub(crate) fn from_parts(
        task_id: String,
        n_classes: usize,
        body: BranchBody,
        head: LayerStack,
    ) -> Self {
        TaskBranch {
            task_id,
            n_classes,
            body,
            head,
        }
    }
}

/// Which stack a layer belongs to, for freeze reports and optimizers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum LayerScope {
    Trunk,
    Body(String),
    Head(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FreezeEntry {
    pub scope: LayerScope,
    pub index: usize,
    pub kind: LayerKind,
    pub frozen: bool,
}

/// Trunk plus an ordered registry of task branches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiTaskModel {
    arch: Architecture,
    trunk: LayerStack,
    branches: IndexMap<String, TaskBranch>,
}

impl Eq for Architecture {}

fn check_n_classes(n_classes: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(SenaError::InvalidArgument(format!(
            "a task needs at least 2 classes, got {n_classes}"
        )));
    }
    Ok(())
}

fn check_task_id(task_id: &str) -> Result<()> {
    if task_id.is_empty() || task_id.len() > u16::MAX as usize {
        return Err(SenaError::InvalidArgument(format!(
            "task id must be 1..=65535 bytes, got {:?}",
            task_id
        )));
    }
    Ok(())
}

impl MultiTaskModel {
    /// Trunk and a single branch, all trainable, freshly initialized.
    pub fn build_isolated(
        arch: Architecture,
        task_id: &str,
        n_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        arch.validate()?;
        check_n_classes(n_classes)?;
        check_task_id(task_id)?;
        let trunk = arch.build_trunk(rng)?;
        let body = arch.build_body(rng)?;
        let head = arch.build_head(n_classes, rng)?;
        let mut branches = IndexMap::new();
        branches.insert(
            task_id.to_string(),
            TaskBranch::from_parts(task_id.to_string(), n_classes, BranchBody::Owned(body), head),
        );
        Ok(MultiTaskModel {
            arch,
            trunk,
            branches,
        })
    }

    pub(crate) fn from_parts(
        arch: Architecture,
        trunk: LayerStack,
        branches: IndexMap<String, TaskBranch>,
    ) -> Result<Self> {
        arch.validate()?;
        for (id, branch) in &branches {
            if let BranchBody::Shared(owner) = &branch.body {
                match branches.get(owner) {
                    Some(b) if matches!(b.body, BranchBody::Owned(_)) => {}
                    _ => {
                        return Err(SenaError::NotFound(format!(
                            "branch {id:?} shares the body of {owner:?}, which has no owned body"
                        )))
                    }
                }
            }
        }
        Ok(MultiTaskModel {
            arch,
            trunk,
            branches,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn trunk(&self) -> &LayerStack {
        &self.trunk
    }

    pub fn branches(&self) -> impl Iterator<Item = &TaskBranch> {
        self.branches.values()
    }

    pub fn branch(&self, task_id: &str) -> Result<&TaskBranch> {
        self.branches
            .get(task_id)
            .ok_or_else(|| SenaError::NotFound(format!("task {task_id:?}")))
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.branches.keys().map(String::as_str).collect()
    }

    pub fn task_count(&self) -> usize {
        self.branches.len()
    }

    pub fn has_task(&self, task_id: &str) -> bool {
        self.branches.contains_key(task_id)
    }

    pub fn n_classes(&self, task_id: &str) -> Result<usize> {
        Ok(self.branch(task_id)?.n_classes)
    }

    pub fn parameter_count(&self) -> usize {
        self.trunk.param_count() + self.branches.values().map(TaskBranch::param_count).sum::<usize>()
    }

    fn check_fresh(&self, task_id: &str, n_classes: usize) -> Result<()> {
        check_task_id(task_id)?;
        check_n_classes(n_classes)?;
        if self.branches.contains_key(task_id) {
            return Err(SenaError::Conflict(format!("task {task_id:?} already exists")));
        }
        Ok(())
    }

    /// Owner of the body that `task_id` runs through.
    fn body_owner<'a>(&'a self, task_id: &'a str) -> Result<&'a str> {
        match &self.branch(task_id)?.body {
            BranchBody::Owned(_) => Ok(task_id),
            BranchBody::Shared(owner) => Ok(owner),
        }
    }

    /// Adds a branch for a new task (selective network augmentation).
    ///
    /// The body (both conv blocks and the hidden dense layer) is copied from
    /// `source`'s branch, or from the most recently added branch when
    /// `source` is `None`. The classifier head is always freshly initialized.
    /// Afterwards the trunk and every earlier branch are frozen and only the
    /// new branch is trainable.
    pub fn add_task(
        &mut self,
        task_id: &str,
        n_classes: usize,
        source: Option<&str>,
        rng: &mut Rng,
    ) -> Result<()> {
        self.check_fresh(task_id, n_classes)?;
        let source = match source {
            Some(s) => s,
            None => self
                .branches
                .keys()
                .last()
                .ok_or_else(|| SenaError::State("model has no tasks".into()))?,
        };
        let owner = self.body_owner(source)?;
        let mut body = self.branches[owner]
            .owned_body()
            .expect("body owners hold owned bodies")
            .clone();
        body.zero_grad();
        body.set_frozen(false);
        let head = self.arch.build_head(n_classes, rng)?;
        self.freeze_all();
        self.branches.insert(
            task_id.to_string(),
            TaskBranch::from_parts(task_id.to_string(), n_classes, BranchBody::Owned(body), head),
        );
        Ok(())
    }

    /// Adds only a classifier head that shares `host`'s body. Everything
    /// except the new head is frozen on return.
    pub fn add_head(
        &mut self,
        task_id: &str,
        n_classes: usize,
        host: &str,
        rng: &mut Rng,
    ) -> Result<()> {
        self.check_fresh(task_id, n_classes)?;
        let owner = self.body_owner(host)?.to_string();
        let head = self.arch.build_head(n_classes, rng)?;
        self.freeze_all();
        self.branches.insert(
            task_id.to_string(),
            TaskBranch::from_parts(task_id.to_string(), n_classes, BranchBody::Shared(owner), head),
        );
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.trunk.set_frozen(true);
        for b in self.branches.values_mut() {
            b.set_frozen(true);
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.trunk.set_frozen(false);
        for b in self.branches.values_mut() {
            b.set_frozen(false);
        }
    }

    pub fn set_trunk_frozen(&mut self, frozen: bool) {
        self.trunk.set_frozen(frozen);
    }

    /// Freezes or unfreezes every layer owned by `task_id`'s branch.
    pub fn set_task_frozen(&mut self, task_id: &str, frozen: bool) -> Result<()> {
        self.branches
            .get_mut(task_id)
            .ok_or_else(|| SenaError::NotFound(format!("task {task_id:?}")))?
            .set_frozen(frozen);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.trunk.zero_grad();
        for b in self.branches.values_mut() {
            b.owned_layers_mut().for_each(LayerNode::zero_grad);
        }
    }

    /// Frozen flag of every layer, trunk first, then branches in task order.
    pub fn freeze_report(&self) -> Vec<FreezeEntry> {
        let mut out = Vec::new();
        let mut push = |scope: LayerScope, stack: &LayerStack| {
            for (index, layer) in stack.layers().iter().enumerate() {
                out.push(FreezeEntry {
                    scope: scope.clone(),
                    index,
                    kind: layer.kind(),
                    frozen: layer.is_frozen(),
                });
            }
        };
        push(LayerScope::Trunk, &self.trunk);
        for (id, branch) in &self.branches {
            if let Some(body) = branch.owned_body() {
                push(LayerScope::Body(id.clone()), body);
            }
            push(LayerScope::Head(id.clone()), &branch.head);
        }
        out
    }

    /// Every layer with its scope, in the same order as [`Self::freeze_report`].
    pub fn layers_mut(&mut self) -> impl Iterator<Item = (LayerScope, &mut LayerNode)> {
        let trunk = self
            .trunk
            .layers_mut()
            .iter_mut()
            .map(|l| (LayerScope::Trunk, l));
        let branches = self.branches.iter_mut().flat_map(|(id, b)| {
            let body = match &mut b.body {
                BranchBody::Owned(s) => Some(s),
                BranchBody::Shared(_) => None,
            };
            let body_layers = body
                .into_iter()
                .flat_map(|s| s.layers_mut().iter_mut())
                .map({
                    let id = id.clone();
                    move |l| (LayerScope::Body(id.clone()), l)
                });
            let head_layers = b
                .head
                .layers_mut()
                .iter_mut()
                .map({
                    let id = id.clone();
                    move |l| (LayerScope::Head(id.clone()), l)
                });
            body_layers.chain(head_layers)
        });
        trunk.chain(branches)
    }

    pub fn layers(&self) -> impl Iterator<Item = (LayerScope, &LayerNode)> {
        let trunk = self.trunk.layers().iter().map(|l| (LayerScope::Trunk, l));
        let branches = self.branches.iter().flat_map(|(id, b)| {
            let body = b.owned_body().into_iter().flat_map(|s| s.layers()).map({
                let id = id.clone();
                move |l| (LayerScope::Body(id.clone()), l)
            });
            let head = b.head.layers().iter().map({
                let id = id.clone();
                move |l| (LayerScope::Head(id.clone()), l)
            });
            body.chain(head)
        });
        trunk.chain(branches)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.arch.input_shape();
        match x.shape() {
            [_, xc, xh, xw] if (*xc, *xh, *xw) == (c, h, w) => Ok(()),
            other => Err(SenaError::Shape(format!(
                "model input must be [N, {c}, {h}, {w}], got {other:?}"
            ))),
        }
    }

    /// Pre-softmax outputs of `task_id` in evaluation mode.
    pub fn logits(&self, task_id: &str, x: &Tensor) -> Result<Tensor> {
        let mut pass = self.forward_heads(&[task_id], x, None)?;
        Ok(pass.logits.swap_remove(0))
    }

    /// Class probabilities of `task_id`: trunk, then that task's branch only.
    /// With `dropout_rng` set the pass runs in training mode.
    pub fn forward_task(&self, task_id: &str, x: &Tensor, dropout_rng: Option<&mut Rng>) -> Result<Tensor> {
        self.branch(task_id)?;
        self.check_input(x)?;
        let mut ctx = make_ctx(dropout_rng.map(|r| r.next_u64()));
        let feats = self.trunk.forward(x, &mut ctx)?;
        let body_out = self.run_body(task_id, &feats, &mut ctx)?;
        self.branches[task_id].head.forward(&body_out, &mut ctx)
    }

    fn run_body(&self, task_id: &str, feats: &Tensor, ctx: &mut ForwardContext) -> Result<Tensor> {
        let owner = self.body_owner(task_id)?;
        self.branches[owner]
            .owned_body()
            .expect("body owners hold owned bodies")
            .forward(feats, ctx)
    }

    /// Forward pass shared by several heads, keeping everything needed for
    /// [`Self::backward_heads`]. The trunk and each distinct body run once.
    pub fn forward_heads(
        &self,
        tasks: &[&str],
        x: &Tensor,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<HeadPass> {
        self.check_input(x)?;
        if tasks.is_empty() {
            return Err(SenaError::InvalidArgument("no tasks requested".into()));
        }
        for t in tasks {
            self.branch(t)?;
        }
        let mut seeds = dropout_rng;
        let mut next_ctx = || make_ctx(seeds.as_mut().map(|r| r.next_u64()));

        let mut trunk_ctx = next_ctx();
        let feats = self.trunk.forward(x, &mut trunk_ctx)?;

        let mut bodies: Vec<BodyPass> = Vec::new();
        let mut heads = Vec::with_capacity(tasks.len());
        let mut logits = Vec::with_capacity(tasks.len());
        for &task in tasks {
            let owner = self.body_owner(task)?;
            let body_idx = match bodies.iter().position(|b| b.owner == owner) {
                Some(i) => i,
                None => {
                    let mut ctx = next_ctx();
                    let out = self.run_body(owner, &feats, &mut ctx)?;
                    bodies.push(BodyPass {
                        owner: owner.to_string(),
                        ctx,
                        output: out,
                    });
                    bodies.len() - 1
                }
            };
            let mut ctx = next_ctx();
            let head = &self.branches[task].head;
            // Stop before the softmax so callers see logits.
            let z = head.forward_range(&bodies[body_idx].output, &mut ctx, head.len() - 1)?;
            logits.push(z);
            heads.push(HeadCtx {
                task: task.to_string(),
                body_idx,
                ctx,
            });
        }
        Ok(HeadPass {
            trunk_ctx,
            bodies,
            heads,
            logits,
        })
    }

    /// Back-propagates per-head logit gradients (same order as the tasks
    /// given to [`Self::forward_heads`]), accumulating into every unfrozen
    /// parameter. Frozen stacks are skipped entirely where possible.
    pub fn backward_heads(&mut self, pass: HeadPass, logit_grads: Vec<Tensor>) -> Result<()> {
        let HeadPass {
            mut trunk_ctx,
            bodies,
            heads,
            logits,
        } = pass;
        if logit_grads.len() != heads.len() {
            return Err(SenaError::InvalidArgument(format!(
                "{} gradients for {} heads",
                logit_grads.len(),
                heads.len()
            )));
        }
        for (g, z) in logit_grads.iter().zip(&logits) {
            g.expect_same_shape(z)?;
        }
        let trunk_trainable = self.trunk.has_trainable();
        let body_trainable: Vec<bool> = bodies
            .iter()
            .map(|b| {
                self.branches[&b.owner]
                    .owned_body()
                    .is_some_and(LayerStack::has_trainable)
            })
            .collect();

        let mut body_grads: Vec<Option<Tensor>> = vec![None; bodies.len()];
        for (mut head, grad) in heads.into_iter().zip(logit_grads) {
            let need = trunk_trainable || body_trainable[head.body_idx];
            let stack = &mut self.branches[&head.task].head;
            if let Some(g) = stack.backward(&mut head.ctx, grad, need)? {
                accumulate(&mut body_grads[head.body_idx], g)?;
            }
        }

        let mut trunk_grad: Option<Tensor> = None;
        for ((mut body, grad), trainable) in bodies.into_iter().zip(body_grads).zip(body_trainable) {
            let Some(grad) = grad else { continue };
            if !trainable && !trunk_trainable {
                continue;
            }
            let stack = match &mut self.branches[&body.owner].body {
                BranchBody::Owned(s) => s,
                BranchBody::Shared(_) => unreachable!("body owners hold owned bodies"),
            };
            if let Some(g) = stack.backward(&mut body.ctx, grad, trunk_trainable)? {
                accumulate(&mut trunk_grad, g)?;
            }
        }
        if let Some(g) = trunk_grad {
            self.trunk.backward(&mut trunk_ctx, g, false)?;
        }
        Ok(())
    }
}

fn make_ctx(seed: Option<u64>) -> ForwardContext {
    match seed {
        Some(s) => ForwardContext::training(Rng::new(s)),
        None => ForwardContext::eval(),
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

struct BodyPass {
    owner: String,
    ctx: ForwardContext,
    output: Tensor,
}

struct HeadCtx {
    task: String,
    body_idx: usize,
    ctx: ForwardContext,
}

/// State of a multi-head forward pass awaiting its backward pass.
pub struct HeadPass {
    trunk_ctx: ForwardContext,
    bodies: Vec<BodyPass>,
    heads: Vec<HeadCtx>,
    logits: Vec<Tensor>,
}

impl HeadPass {
    /// Logits per requested task, in request order.
    pub fn logits(&self) -> &[Tensor] {
        &self.logits
    }
}
