"""Losses, AdamW with cosine-annealed learning rate, supervised and
FixMatch semisupervised training loops, and checkpointing with optimizer
state for bit-exact resumption."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import augment as aug
from . import detect
from . import models as M

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class FocalLossParams:
    gamma: float = 2.0
    alpha: float = 0.25

    def validate(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        return self


@dataclass(frozen=True)
class FixMatchParams:
    confidence: float = 0.95
    unlabeled_weight: float = 1.0
    unlabeled_ratio: int = 3
    cowmix_probability: float = 0.5
    cow_mask: aug.CowMaskParams = field(default_factory=aug.CowMaskParams)

    def validate(self):
        if not 0.5 < self.confidence <= 1:
            raise ValueError("confidence threshold must be in (0.5, 1]")
        if self.unlabeled_weight < 0 or self.unlabeled_ratio < 1:
            raise ValueError("need unlabeled_weight >= 0 and unlabeled_ratio >= 1")
        return self


@dataclass
class OptimState:
    total_steps: int
    lr_max: float = 0.003
    weight_decay: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.05
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def focal_loss_grad(p, y, params=FocalLossParams(), weights=None):
    """Focal loss and its gradient w.r.t. p.

    Per point, with p_t = y*p + (1-y)*(1-p) and alpha_t = y*a + (1-y)*(1-a):
    loss = -alpha_t * (1 - p_t)^gamma * log(p_t), averaged over all points
    (or over weight mass when weights are given; zero mass -> loss 0).
    """
    p = np.asarray(p)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: probabilities {p.shape}, labels {y.shape}")
    g, a = params.gamma, params.alpha
    pc = np.clip(p.astype(np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    yf = y.astype(np.float64)
    pt = yf * pc + (1 - yf) * (1 - pc)
    alpha_t = yf * a + (1 - yf) * (1 - a)
    one_m = 1 - pt
    pointwise = -alpha_t * one_m**g * np.log(pt)
    # d/dp_t, then chain through dp_t/dp = 2y - 1
    if g == 0:
        dl_dpt = -alpha_t / pt
    else:
        dl_dpt = alpha_t * (g * one_m ** (g - 1) * np.log(pt) - one_m**g / pt)
    dl_dp = dl_dpt * (2 * yf - 1)
    if weights is None:
        denom = pointwise.size
        loss = float(pointwise.sum() / denom)
        grad = dl_dp / denom
    else:
        w = np.asarray(weights, dtype=np.float64)
        denom = w.sum()
        if denom == 0:
            return 0.0, np.zeros_like(p, dtype=np.float64)
        loss = float((pointwise * w).sum() / denom)
        grad = dl_dp * w / denom
    return loss, grad


def focal_loss(p, y, params=FocalLossParams(), weights=None):
    return focal_loss_grad(p, y, params, weights)[0]


def cosine_lr(step, state):
    """Linear warmup to lr_max, then cosine decay to 0 at total_steps."""
    total = max(state.total_steps, 1)
    warmup = state.warmup_fraction * total
    if step >= total:
        return 0.0
    if warmup > 0 and step < warmup:
        return state.lr_max * step / warmup
    progress = (step - warmup) / max(total - warmup, 1e-12)
    return state.lr_max * 0.5 * (1.0 + np.cos(np.pi * progress))


def adamw_update(params, state, lr=None):
    """One decoupled-weight-decay Adam step over all parameters."""
    if lr is None:
        lr = cosine_lr(state.step, state)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p in params:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        m = state.m[p.name]
        v = state.v[p.name]
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.value[...] = p.value - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.value)
    return lr


def _stack_batch(samples):
    xics = [s[0] if isinstance(s, tuple) else s for s in samples]
    x = np.stack([x.values for x in xics]).astype(np.float32)
    masks = None
    if samples and isinstance(samples[0], tuple):
        masks = np.stack([np.asarray(s[1], dtype=np.float32) for s in samples])
    return xics, x, masks


def _augment_batch(xics, policy, base_seed):
    if policy is None:
        return xics
    return [aug.apply_policy(x, policy, base_seed + i) for i, x in enumerate(xics)]


def supervised_step(model, labeled_batch, optim, loss_params=FocalLossParams(),
                    weak_policy=None, step_seed=0):
    """Weak-augment, forward, focal loss, backward, AdamW step."""
    if not labeled_batch:
        raise ValueError("labeled batch is empty")
    xics, _, masks = _stack_batch(labeled_batch)
    xics = _augment_batch(xics, weak_policy, step_seed)
    x = np.stack([x.values for x in xics]).astype(np.float32)
    model.set_training(True)
    model.seed_step(step_seed, optim.step)
    model.zero_grad()
    p = model.forward(x)
    loss, dp = focal_loss_grad(p, masks, loss_params)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite supervised loss {loss}")
    model.backward(dp.astype(p.dtype))
    adamw_update(model.parameters(), optim)
    return loss


def pseudo_label(p, confidence):
    """Pointwise pseudo-labels from weak-augmented predictions.

    Returns (labels, weights): label 1 where p >= tau, 0 where p <= 1 - tau,
    weight 0 (excluded) in between.
    """
    p = np.asarray(p)
    labels = (p >= confidence).astype(np.float32)
    included = (p >= confidence) | (p <= 1 - confidence)
    return labels, included.astype(np.float32)


def fixmatch_step(model, labeled_batch, unlabeled_batch, optim,
                  fm_params=FixMatchParams(), loss_params=FocalLossParams(),
                  weak_policy=None, strong_policy=None, step_seed=0):
    """One FixMatch step: supervised focal loss on weak-augmented labeled
    inputs plus a confidence-filtered consistency loss on strong-augmented
    (optionally cowmixed) unlabeled inputs, single optimizer update.

    Pseudo-labels come from the model's weak-augmented predictions; the
    consistency loss is applied to its strong-augmented predictions.
    """
    fm_params.validate()
    if not labeled_batch or not unlabeled_batch:
        raise ValueError("labeled and unlabeled batches must be nonempty")
    weak_policy = weak_policy or aug.AugPolicy(kind="weak")
    strong_policy = strong_policy or aug.AugPolicy(kind="strong")

    # labeled part
    l_xics, _, masks = _stack_batch(labeled_batch)
    l_xics = _augment_batch(l_xics, weak_policy, step_seed)
    xl = np.stack([x.values for x in l_xics]).astype(np.float32)
    model.set_training(True)
    model.seed_step(step_seed, optim.step)
    model.zero_grad()
    pl = model.forward(xl)
    loss_l, dp_l = focal_loss_grad(pl, masks, loss_params)
    model.backward(dp_l.astype(pl.dtype))

    if fm_params.unlabeled_weight == 0:
        if not np.isfinite(loss_l):
            raise FloatingPointError("non-finite labeled loss")
        adamw_update(model.parameters(), optim)
        return loss_l, 0.0

    # pseudo-labels from weak predictions, no gradient
    u_xics = [s[0] if isinstance(s, tuple) else s for s in unlabeled_batch]
    weak_u = _augment_batch(u_xics, weak_policy, step_seed + 10_000)
    model.set_training(False)
    p_weak = model.forward(np.stack([x.values for x in weak_u]).astype(np.float32))
    labels, weights = pseudo_label(p_weak, fm_params.confidence)

    # strong augmentation + cowmix of inputs and pseudo-label masks
    strong_u = _augment_batch(u_xics, strong_policy, step_seed + 20_000)
    rng = np.random.default_rng(step_seed + 30_000)
    n = len(strong_u)
    mixed, mixed_labels, mixed_weights = list(strong_u), labels.copy(), weights.copy()
    if n >= 2:
        for i in range(n):
            if rng.random() < fm_params.cowmix_probability:
                j = (i + 1) % n
                cow = aug.generate_cow_mask(strong_u[i].length, fm_params.cow_mask,
                                            int(rng.integers(0, 2**63)))
                mixed[i] = aug.cowmix(strong_u[i], strong_u[j], cow)
                mixed_labels[i] = aug.cowmix_labels(labels[i], labels[j], cow)
                mixed_weights[i] = aug.cowmix_labels(weights[i], weights[j], cow)

    model.set_training(True)
    xu = np.stack([x.values for x in mixed]).astype(np.float32)
    pu = model.forward(xu)
    loss_u, dp_u = focal_loss_grad(pu, mixed_labels, loss_params, weights=mixed_weights)
    model.backward((fm_params.unlabeled_weight * dp_u).astype(pu.dtype))

    if not (np.isfinite(loss_l) and np.isfinite(loss_u)):
        raise FloatingPointError(f"non-finite loss: labeled {loss_l}, unlabeled {loss_u}")
    adamw_update(model.parameters(), optim)
    return loss_l, loss_u


@dataclass
class TrainConfig:
    mode: str = "supervised"  # supervised | fixmatch
    epochs: int = 30
    batch_size: int = 32
    eval_every: int = 0  # steps between validation evaluations; 0 = once per epoch
    seed: int = 0
    lr_max: float = 0.003
    weight_decay: float = 0.3
    warmup_fraction: float = 0.05
    focal: FocalLossParams = field(default_factory=FocalLossParams)
    fixmatch: FixMatchParams = field(default_factory=FixMatchParams)
    weak_policy: aug.AugPolicy = field(default_factory=lambda: aug.AugPolicy(kind="weak"))
    strong_policy: aug.AugPolicy = field(default_factory=lambda: aug.AugPolicy(kind="strong"))
    eval_theta: float = 0.5


@dataclass
class TrainResult:
    model: "M.Model"
    best_params: dict  # name -> array snapshot of the best-validation model
    best_val_ap: float
    log_rows: list  # (step, lr, loss_l, loss_u, val_ap or None, val_ar or None)

    def restore_best(self):
        for p in self.model.parameters():
            p.value[...] = self.best_params[p.name]
        return self.model


def predict_probs(model, samples, batch_size=64):
    """Eval-mode probabilities keyed by XIC id."""
    model.set_training(False)
    out = {}
    xics = [s[0] if isinstance(s, tuple) else s for s in samples]
    for i in range(0, len(xics), batch_size):
        chunk = xics[i : i + batch_size]
        p = model.forward(np.stack([x.values for x in chunk]).astype(np.float32))
        for x, row in zip(chunk, p):
            out[x.id] = row
    return out


def _validate(model, val_samples, theta):
    probs = predict_probs(model, val_samples)
    truths = {x.id: mask for x, mask in val_samples}
    report = detect.evaluate(probs, truths, theta=theta)
    return report.mean_ap, report.mean_ar


def log_to_csv(log_rows):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["step", "lr", "loss_labeled", "loss_unlabeled", "val_ap", "val_ar"])
    for step, lr, loss_l, loss_u, val_ap, val_ar in log_rows:
        writer.writerow([
            step, f"{lr:.8g}", f"{loss_l:.8g}",
            "" if loss_u is None else f"{loss_u:.8g}",
            "" if val_ap is None else f"{val_ap:.6f}",
            "" if val_ar is None else f"{val_ar:.6f}",
        ])
    return buf.getvalue()


def train(model, train_set, val_set, config, optim=None, start_step=0):
    """Run the configured loop; keeps the best-validation-AP parameter
    snapshot.  Deterministic for a fixed config seed (single-threaded).

    train_set / val_set are Dataset instances; in fixmatch mode the train
    set's unlabeled samples feed the consistency loss.
    """
    labeled = list(train_set.labeled)
    unlabeled = list(train_set.unlabeled)
    if config.mode not in ("supervised", "fixmatch"):
        raise ValueError(f"unknown training mode {config.mode!r}")
    if not labeled:
        raise ValueError("training set has no labeled samples")
    if config.mode == "fixmatch" and not unlabeled:
        raise ValueError("fixmatch mode requires unlabeled samples")

    steps_per_epoch = max(1, (len(labeled) + config.batch_size - 1) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if optim is None:
        optim = OptimState(total_steps=max(total_steps, 1), lr_max=config.lr_max,
                           weight_decay=config.weight_decay,
                           warmup_fraction=config.warmup_fraction)

    mu = config.fixmatch.unlabeled_ratio
    best_ap = -1.0
    best_params = {p.name: p.value.copy() for p in model.parameters()}
    log_rows = []
    eval_every = config.eval_every or steps_per_epoch

    step = start_step
    val_list = list(val_set.labeled)
    start_epoch = start_step // steps_per_epoch
    for epoch in range(start_epoch, config.epochs):
        order = np.random.default_rng((config.seed, epoch)).permutation(len(labeled))
        if unlabeled:
            u_order = np.random.default_rng((config.seed, epoch, 1)).permutation(len(unlabeled))
        for b in range(steps_per_epoch):
            if epoch == start_epoch and b < start_step - start_epoch * steps_per_epoch:
                continue  # resume: skip already-run steps of the partial epoch
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            batch = [labeled[i] for i in idx]
            step_seed = (config.seed * 1_000_003 + step) % (2**31)
            if config.mode == "supervised":
                loss_l = supervised_step(model, batch, optim, config.focal,
                                         config.weak_policy, step_seed)
                loss_u = None
            else:
                u_count = min(len(unlabeled), mu * config.batch_size)
                u_start = (b * u_count) % max(len(unlabeled), 1)
                u_idx = [u_order[(u_start + i) % len(unlabeled)] for i in range(u_count)]
                u_batch = [unlabeled[i] for i in u_idx]
                loss_l, loss_u = fixmatch_step(model, batch, u_batch, optim,
                                               config.fixmatch, config.focal,
                                               config.weak_policy, config.strong_policy,
                                               step_seed)
            step += 1
            val_ap = val_ar = None
            if val_list and (step % eval_every == 0 or step == total_steps):
                val_ap, val_ar = _validate(model, val_list, config.eval_theta)
                if val_ap > best_ap:
                    best_ap = val_ap
                    best_params = {p.name: p.value.copy() for p in model.parameters()}
            lr = cosine_lr(optim.step - 1, optim)
            log_rows.append((step, lr, loss_l, loss_u, val_ap, val_ar))
    if best_ap < 0:  # no validation performed
        best_params = {p.name: p.value.copy() for p in model.parameters()}
        best_ap = 0.0
    return TrainResult(model, best_params, best_ap, log_rows)


def save_checkpoint(model, optim, path, step=0):
    """Model parameters + buffers + optimizer moments in one file."""
    extra = {}
    for name, arr in optim.m.items():
        extra[f"optim.m.{name}"] = arr
    for name, arr in optim.v.items():
        extra[f"optim.v.{name}"] = arr
    meta = {
        "optim": {
            "total_steps": optim.total_steps,
            "lr_max": optim.lr_max,
            "weight_decay": optim.weight_decay,
            "beta1": optim.beta1,
            "beta2": optim.beta2,
            "eps": optim.eps,
            "warmup_fraction": optim.warmup_fraction,
            "step": optim.step,
        }
    }
    M.save_checkpoint(model, path, step=step, extra_tensors=extra or None, metadata=meta)


def load_checkpoint(path):
    """Returns (model, optim, step)."""
    model, meta, extra = M.load_checkpoint(path)
    o = meta.get("optim", {})
    optim = OptimState(
        total_steps=o.get("total_steps", 1), lr_max=o.get("lr_max", 0.003),
        weight_decay=o.get("weight_decay", 0.3), beta1=o.get("beta1", 0.9),
        beta2=o.get("beta2", 0.999), eps=o.get("eps", 1e-8),
        warmup_fraction=o.get("warmup_fraction", 0.05), step=o.get("step", 0),
    )
    for name, arr in extra.items():
        if name.startswith("optim.m."):
            optim.m[name[len("optim.m."):]] = arr.astype(np.float32)
        elif name.startswith("optim.v."):
            optim.v[name[len("optim.v."):]] = arr.astype(np.float32)
    return model, optim, meta.get("step", 0)
