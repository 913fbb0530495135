"""Recovery training of a pruned student against its frozen teacher.

Losses: supervised cross-entropy on response tokens, temperature-softened
logits distillation (forward or reverse KL, scaled by tau^2), and squared-L2
matching of final-block hidden states. All three are averaged over the rows
that predict response tokens. The combined objective is
alpha*sft + beta*logits + gamma*match.

The recovery optimizer is plain SGD with a fixed step size and optional
momentum. Teacher pre-training (`train_teacher`) additionally uses warmup,
cosine decay and gradient clipping; it trains every non-frozen parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import GraphError, ParameterError, Tensor


class TrainingDivergedError(RuntimeError):
    """A training step produced a non-finite loss."""


@dataclass(frozen=True)
class LoraSettings:
    rank: int = 8
    scaling: float = 16.0
    targets: tuple = ("wq", "wv")  # attention q and v projections


@dataclass(frozen=True)
class RecoveryConfig:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0
    tau: float = 2.0
    kd_direction: str = "none"  # "kl" | "rkl" | "none"
    match_layers: tuple = (-1,)  # indices into block outputs, python-style
    scope: str = "projector"  # "projector" | "joint"
    lora: LoraSettings = LoraSettings()
    data_fraction: float = 1.0
    lr: float = 0.05
    steps: int = 300
    batch_size: int = 8
    momentum: float = 0.9
    seed: int = 0
    eval_every: int = 0  # 0: no in-run eval

    def __post_init__(self):
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ParameterError("at least one of alpha/beta/gamma must be positive")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ParameterError("loss coefficients must be nonnegative")
        if self.tau <= 0:
            raise ParameterError("tau must be positive")
        if not (0.0 < self.data_fraction <= 1.0):
            raise ParameterError("data_fraction must be in (0, 1]")
        if self.kd_direction not in ("kl", "rkl", "none"):
            raise ParameterError(f"unknown kd_direction {self.kd_direction!r}")
        if self.beta > 0 and self.kd_direction == "none":
            raise ParameterError("beta > 0 requires a kd_direction")
        if self.scope not in ("projector", "joint"):
            raise ParameterError(f"unknown scope {self.scope!r}")


@dataclass
class LossBreakdown:
    steps: list = field(default_factory=list)

    def record(self, step, l_sft, l_logits, l_match, total, eval_metric=None):
        self.steps.append({"step": step, "l_sft": l_sft, "l_logits": l_logits,
                           "l_match": l_match, "total": total,
                           "eval_metric": eval_metric})

    def lines(self):
        out = []
        for s in self.steps:
            ev = "" if s["eval_metric"] is None else f"\teval={s['eval_metric']:.6f}"
            out.append(f"step={s['step']}\tl_sft={s['l_sft']:.6f}"
                       f"\tl_logits={s['l_logits']:.6f}\tl_match={s['l_match']:.6f}"
                       f"\ttotal={s['total']:.6f}{ev}")
        return out


@dataclass
class LoraAdapter:
    target: str
    a: Tensor  # (rank, d_in)
    b: Tensor  # (d_out, rank), zero-initialized
    scaling: float
    merged: bool = False


# --------------------------------------------------------------------- losses

def sft_loss(student, triplet):
    """Supervised objective: cross-entropy of the response tokens under the student."""
    trace = M.forward(student, triplet, capture=None)
    return M.response_loss(trace, triplet)


def _check_layouts(a, b):
    if a.layout != b.layout:
        raise GraphError(f"trace layouts differ: {a.layout} vs {b.layout}")


def _response_rows(trace, tensor_):
    lo, hi = trace.layout.loss_rows
    return T.slice_rows(tensor_, lo, hi), hi - lo


def kd_logits_loss(student_trace, teacher_trace, tau, direction):
    """Token-averaged divergence between tau-softened response distributions.

    direction "kl" is KL(teacher || student); "rkl" swaps the roles so the
    student concentrates on the teacher's major modes. Scaled by tau^2.
    """
    if direction not in ("kl", "rkl"):
        raise ParameterError(f"unknown kd direction {direction!r}")
    if tau <= 0:
        raise ParameterError("tau must be positive")
    _check_layouts(student_trace, teacher_trace)
    if student_trace.logits.shape != teacher_trace.logits.shape:
        raise GraphError("student and teacher logits have different shapes")
    rows_s, n = _response_rows(student_trace, student_trace.logits)
    lo, hi = teacher_trace.layout.loss_rows
    t_logits = teacher_trace.logits.data[lo:hi] / tau
    t_logits = t_logits - t_logits.max(axis=1, keepdims=True)
    t_logp = t_logits - np.log(np.exp(t_logits).sum(axis=1, keepdims=True))
    t_p = np.exp(t_logp)

    logp_s = T.log_softmax(rows_s, temperature=tau)
    if direction == "kl":
        terms = T.mul(Tensor(t_p), T.sub(Tensor(t_logp), logp_s))
    else:
        p_s = T.exp(logp_s)
        terms = T.mul(p_s, T.sub(logp_s, Tensor(t_logp)))
    return T.scale(T.sum_all(terms), tau * tau / n)


def hidden_match_loss(student_trace, teacher_trace, layers=(-1,)):
    """Mean over response rows of squared L2 distance between block outputs,
    averaged over the matched layers (negative indices count from the end)."""
    _check_layouts(student_trace, teacher_trace)
    s_blocks = [h for h in student_trace.hidden_states[1:] if h is not None]
    t_blocks = [h for h in teacher_trace.hidden_states[1:] if h is not None]
    if not layers:
        raise ParameterError("hidden_match_loss: no layers selected")
    total = None
    for k in layers:
        hs = s_blocks[k]
        ht = t_blocks[k]
        if hs.shape != ht.shape:
            raise GraphError(f"matched hidden states differ in shape: {hs.shape} vs {ht.shape}")
        rows_s, n = _response_rows(student_trace, hs)
        lo, hi = teacher_trace.layout.loss_rows
        diff = T.sub(rows_s, Tensor(ht.data[lo:hi]))
        term = T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / n)
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(layers))


# ----------------------------------------------------------------------- LoRA

def attach_lora(model, settings=LoraSettings(), seed=0):
    """Attach zero-delta adapters to the configured attention projections."""
    if model.lora:
        raise ParameterError("model already has adapters attached")
    rng = np.random.default_rng(seed)
    adapters = []
    for i, layer in enumerate(model.layers):
        for tgt in settings.targets:
            base = getattr(layer, tgt)
            d_out, d_in = base.data.shape
            a = Tensor(rng.standard_normal((settings.rank, d_in)) * 0.02,
                       requires_grad=True)
            b = Tensor(np.zeros((d_out, settings.rank)), requires_grad=True)
            name = f"layers.{i}.attn.{tgt}"
            adapter = LoraAdapter(target=name, a=a, b=b, scaling=settings.scaling)
            model.lora[name] = adapter
            adapters.append(adapter)
    return adapters


def merge_lora(model):
    """Fold scaling*B@A into each base matrix exactly once, then detach."""
    if not model.lora:
        raise ParameterError("no adapters to merge")
    for name, adapter in list(model.lora.items()):
        if adapter.merged:
            raise ParameterError(f"adapter {name} already merged")
        base = model.get_parameter(name)
        base.data = base.data + adapter.scaling * (adapter.b.data @ adapter.a.data)
        adapter.merged = True
    model.lora.clear()


# ------------------------------------------------------------------ optimizer

class Sgd:
    """Plain SGD with optional momentum (velocity is plain accumulation)."""

    def __init__(self, named_params, lr, momentum=0.0):
        self.named_params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self, grad_scale=1.0):
        for n, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad * grad_scale
            if self.momentum:
                v = self.velocity[n]
                v *= self.momentum
                v += g
                g = v
            p.data -= self.lr * g


def subsample(pool, fraction, seed):
    """Seeded, sorted subsample of round(fraction * n) items (at least 1)."""
    if not (0.0 < fraction <= 1.0):
        raise ParameterError("data_fraction must be in (0, 1]")
    n = len(pool)
    k = max(1, int(round(fraction * n)))
    rng = np.random.default_rng(seed)
    idx = sorted(rng.permutation(n)[:k].tolist())
    return [pool[i] for i in idx]


def _trainable_params(student, config, lora_adapters):
    names = set(M.param_partition(student)["projector"])
    chosen = [(n, p) for n, p in student.named_parameters() if n in names]
    for ad in lora_adapters:
        chosen.append((f"{ad.target}.lora_a", ad.a))
        chosen.append((f"{ad.target}.lora_b", ad.b))
    return chosen


def train(student, teacher, pool, config, eval_fn=None):
    """Run recovery training; mutates the student, returns a LossBreakdown.

    The teacher is only consulted (read-only, no tape) when beta or gamma is
    positive. Scope "projector" updates the projector alone; "joint" adds LoRA
    adapters on the attention q/v projections, merged into the base weights on
    completion. Only scope-selected parameters change.
    """
    if not pool:
        raise ParameterError("train: empty data pool")
    for item in pool:
        if len(item.x_r) == 0:
            raise ParameterError("train: item with empty response")
    needs_teacher = config.beta > 0 or config.gamma > 0
    if needs_teacher and teacher is None:
        raise ParameterError("beta/gamma > 0 requires a teacher")

    data = subsample(pool, config.data_fraction, config.seed)
    adapters = []
    if config.scope == "joint":
        adapters = attach_lora(student, config.lora, seed=config.seed)
    params = _trainable_params(student, config, adapters)
    opt = Sgd(params, lr=config.lr, momentum=config.momentum)

    # Freeze out-of-scope tensors for the run so no tape is built for them.
    trainable_ids = {id(p) for _, p in params}
    frozen = []
    for _, p in student.named_parameters():
        if id(p) not in trainable_ids and p.requires_grad:
            p.requires_grad = False
            frozen.append(p)

    capture = "all" if config.gamma > 0 else None
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(data))
    pos = 0
    history = LossBreakdown()
    try:
        for step in range(config.steps):
            if pos + config.batch_size > len(order):
                order = rng.permutation(len(data))
                pos = 0
            idx = order[pos:pos + config.batch_size]
            pos += config.batch_size
            batch = [data[i] for i in idx]

            opt.zero_grad()
            sft_sum = logits_sum = match_sum = None
            for item in batch:
                trace_s = M.forward(student, item, capture=capture)
                if config.alpha > 0:
                    term = M.response_loss(trace_s, item)
                    sft_sum = term if sft_sum is None else T.add(sft_sum, term)
                if needs_teacher:
                    with T.no_grad():
                        trace_t = M.forward(teacher, item,
                                            capture=None if config.gamma == 0 else "all")
                    if config.beta > 0:
                        term = kd_logits_loss(trace_s, trace_t, config.tau,
                                              config.kd_direction)
                        logits_sum = term if logits_sum is None else T.add(logits_sum, term)
                    if config.gamma > 0:
                        term = hidden_match_loss(trace_s, trace_t, config.match_layers)
                        match_sum = term if match_sum is None else T.add(match_sum, term)

            inv = 1.0 / len(batch)
            parts = []
            l_sft = l_logits = l_match = 0.0
            if sft_sum is not None:
                sft_mean = T.scale(sft_sum, inv)
                l_sft = sft_mean.item()
                parts.append(T.scale(sft_mean, config.alpha))
            if logits_sum is not None:
                logits_mean = T.scale(logits_sum, inv)
                l_logits = logits_mean.item()
                parts.append(T.scale(logits_mean, config.beta))
            if match_sum is not None:
                # width-normalized so the three terms share an order of magnitude
                match_mean = T.scale(match_sum, inv / student.config.d_model)
                l_match = match_mean.item()
                parts.append(T.scale(match_mean, config.gamma))
            total = parts[0]
            for part in parts[1:]:
                total = T.add(total, part)
            total_val = total.item()
            if not math.isfinite(total_val):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}: "
                    f"sft={l_sft} logits={l_logits} match={l_match}")
            T.backward(total)
            opt.step()

            metric = None
            if eval_fn is not None and config.eval_every and step % config.eval_every == 0:
                metric = float(eval_fn(student))
            history.record(step, l_sft, l_logits, l_match, total_val, metric)
    finally:
        for p in frozen:
            p.requires_grad = True
    if adapters:
        merge_lora(student)
    return history


# -------------------------------------------------------------- teacher phase

@dataclass(frozen=True)
class TeacherConfig:
    steps: int = 1500
    batch_size: int = 32
    peak_lr: float = 0.15
    warmup: int = 150
    floor_frac: float = 0.05
    momentum: float = 0.9
    clip: float = 1.0
    seed: int = 0


def _cosine_lr(step, cfg):
    if step < cfg.warmup:
        return cfg.peak_lr * (step + 1) / cfg.warmup
    t = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.peak_lr * (cfg.floor_frac + (1 - cfg.floor_frac) * 0.5 * (1 + math.cos(math.pi * t)))


def train_teacher(model, pool, config=TeacherConfig(), eval_fn=None, eval_every=0):
    """Supervised training of every non-frozen parameter (the vision stub
    stays fixed). Warmup + cosine decay + grad-norm clipping for stability."""
    if not pool:
        raise ParameterError("train_teacher: empty data pool")
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    opt = Sgd(params, lr=0.0, momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(pool))
    pos = 0
    history = LossBreakdown()
    for step in range(config.steps):
        opt.lr = _cosine_lr(step, config)
        if pos + config.batch_size > len(order):
            order = rng.permutation(len(pool))
            pos = 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size
        opt.zero_grad()
        total = None
        for i in idx:
            loss = M.response_loss(M.forward(model, pool[i], capture=None), pool[i])
            total = loss if total is None else T.add(total, loss)
        total = T.scale(total, 1.0 / len(idx))
        total_val = total.item()
        if not math.isfinite(total_val):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        T.backward(total)
        gn = math.sqrt(sum(float((p.grad ** 2).sum())
                           for _, p in params if p.grad is not None))
        opt.step(grad_scale=min(1.0, config.clip / gn) if gn > 0 else 1.0)
        metric = None
        if eval_fn is not None and eval_every and step % eval_every == 0:
            metric = float(eval_fn(model))
        history.record(step, total_val, 0.0, 0.0, total_val, metric)
    return history
