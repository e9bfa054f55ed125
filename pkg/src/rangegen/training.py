"""Batch samplers, the training loop, and resumable checkpointing.

Two sampling strategies: mixed-domain batches drawn i.i.d. from the
pooled training set (the default), and the batch-homogeneous baseline
where every mini-batch holds a single domain. Both are pure functions
of (index, batch size, seed, step), which also makes resumption
bit-identical: all randomness is keyed by (seed, step).
"""

import json
import os

import numpy as np

from . import conditioning, diffusion
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import ConfigError, TrainingError
from .forge import sample_prompt
from .geometry import normalize, read_olri
from .optim import AdamW


def _step_rng(seed, step, stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step),
                                                         int(stream)]))


def cdts_batches(index, specs, batch_size, seed, start_step=0):
    """Mixed-domain batch plans: records i.i.d. uniform over the pooled
    train split, prompts drawn per record from the domain pool."""
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    train = index.split("train")
    if not train:
        raise ConfigError("empty train split")
    by_id = {s.id: s for s in specs}
    step = start_step
    while True:
        rng = _step_rng(seed, step, 0)
        picks = rng.integers(0, len(train), size=batch_size)
        plan = []
        for i in picks:
            rel, dom, _ = train[i]
            plan.append((rel, dom, sample_prompt(by_id[dom], "train", rng)))
        yield plan
        step += 1


def homogeneous_batches(index, specs, batch_size, seed, start_step=0):
    """Single-domain batch plans: a uniform domain pick, then records
    uniform within that domain's train split."""
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    train = index.split("train")
    if not train:
        raise ConfigError("empty train split")
    by_dom = {}
    for rec in train:
        by_dom.setdefault(rec[1], []).append(rec)
    domains = sorted(by_dom)
    by_id = {s.id: s for s in specs}
    step = start_step
    while True:
        rng = _step_rng(seed, step, 0)
        dom = domains[int(rng.integers(len(domains)))]
        recs = by_dom[dom]
        picks = rng.integers(0, len(recs), size=batch_size)
        plan = [(recs[i][0], dom, sample_prompt(by_id[dom], "train", rng))
                for i in picks]
        yield plan
        step += 1


SAMPLERS = {"cdts": cdts_batches, "homogeneous": homogeneous_batches}


class ScanCache:
    """Normalized-scan and prompt-embedding cache for the training loop."""

    def __init__(self, data_dir, config):
        self.data_dir = data_dir
        self.config = config
        self.scans = {}
        self.prompts = {}

    def scan(self, rel):
        if rel not in self.scans:
            img = read_olri(os.path.join(self.data_dir, rel))
            self.scans[rel] = normalize(img).astype(np.float32)
        return self.scans[rel]

    def prompt(self, text):
        if text not in self.prompts:
            emb = conditioning.embed_prompt(
                text, self.config.token_count, self.config.cond_dim)
            self.prompts[text] = emb.astype(np.float32)
        return self.prompts[text]


def assemble_batch(plan, cache, dom_to_idx):
    x0 = np.stack([cache.scan(rel) for rel, _, _ in plan])
    zc = np.stack([cache.prompt(prompt) for _, _, prompt in plan])
    dom = np.array([dom_to_idx[d] for _, d, _ in plan], dtype=np.int64)
    return x0, zc, dom


def save_training_checkpoint(path, params, opt, step, seed, extra=None):
    buffers = {name: p.data for name, p in params.items()}
    buffers.update(opt.state_buffers())
    write_checkpoint(path, buffers)
    meta = {"step": step, "seed": seed, "opt_step": opt.step_count,
            "lr": opt.lr, "weight_decay": opt.weight_decay}
    if extra:
        meta.update(extra)
    with open(path + ".meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_training_checkpoint(path, params, opt):
    buffers = read_checkpoint(path)
    with open(path + ".meta.json") as f:
        meta = json.load(f)
    for name, p in params.items():
        if name not in buffers:
            raise ConfigError(f"checkpoint {path} missing buffer {name!r}")
        p.data = buffers[name].astype(p.data.dtype).reshape(p.data.shape)
    opt.load_state_buffers(buffers, meta["opt_step"])
    opt.lr = meta["lr"]
    opt.weight_decay = meta["weight_decay"]
    return meta


def train(params, config, schedule, data_dir, index, specs, steps, seed,
          batch_size=16, lr=1e-4, weight_decay=0.0, sampler="cdts",
          out_dir=None, ckpt_every=100, resume_from=None, grad_clip=None,
          log_every=50, log_fn=None):
    """Run the diffusion training loop; returns (optimizer, loss trace).

    The trace is a list of (step, loss). Checkpoints are written every
    `ckpt_every` steps to out_dir; resuming from one continues the loss
    trace bit-identically because all RNG streams are keyed by step.
    """
    if sampler not in SAMPLERS:
        raise ConfigError(f"unknown sampler {sampler!r}")
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    start_step = 0
    if resume_from is not None:
        meta = load_training_checkpoint(resume_from, params, opt)
        start_step = int(meta["step"])
        seed = int(meta["seed"])
    dom_to_idx = {s.id: i for i, s in enumerate(specs)}
    cache = ScanCache(data_dir, config)
    batches = SAMPLERS[sampler](index, specs, batch_size, seed,
                                start_step=start_step)
    trace = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        trace_path = os.path.join(out_dir, "loss.csv")
        mode = "a" if (resume_from and os.path.exists(trace_path)) else "w"
        trace_f = open(trace_path, mode, newline="\n")
        if mode == "w":
            trace_f.write("step,loss\n")
    else:
        trace_f = None
    try:
        for step in range(start_step, steps):
            plan = next(batches)
            x0, zc, dom = assemble_batch(plan, cache, dom_to_idx)
            rng = _step_rng(seed, step, 1)
            try:
                loss = diffusion.diffusion_loss(
                    params, config, schedule, x0, zc, dom, rng)
            except TrainingError as exc:
                raise TrainingError(
                    f"step {step}: {exc}; batch records "
                    f"{[rel for rel, _, _ in plan]}") from exc
            opt.zero_grad(params)
            loss.backward()
            if grad_clip:
                _clip_grads(params, grad_clip)
            opt.step(params)
            value = float(loss.data)
            trace.append((step, value))
            if trace_f:
                trace_f.write(f"{step},{value:.8e}\n")
            if log_fn and (step % log_every == 0 or step == steps - 1):
                log_fn(step, value)
            if out_dir and ((step + 1) % ckpt_every == 0 or step == steps - 1):
                save_training_checkpoint(
                    os.path.join(out_dir, f"ckpt_{step + 1:07d}.olck"),
                    params, opt, step + 1, seed)
    finally:
        if trace_f:
            trace_f.close()
    return opt, trace


def _clip_grads(params, max_norm):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
