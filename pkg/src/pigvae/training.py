"""Loss assembly, Adam optimizer, the training loop, and checkpoint cadence.

The objective is the negative evidence lower bound realized as Bernoulli
reconstruction terms plus a KL term with linear warmup, extended by the
permutation-entropy penalty on the relaxed permutation matrix and a
cross-entropy loss for the node-count head.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import Graph, PaddedBatch, pad_batch
from .model import (
    ForwardOut,
    ModelConfig,
    full_forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .permutation import entropy_penalty_batched


class NumericError(FloatingPointError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 32
    steps: int = 3000
    seed: int = 0
    beta: float = 0.05  # KL weight after warmup
    kl_warmup_frac: float = 0.2  # fraction of steps to ramp beta 0 -> beta
    lam_entropy: float = 0.1  # permutation-entropy penalty weight
    gamma_count: float = 1.0  # node-count loss weight
    clip_norm: float = 5.0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if min(self.beta, self.lam_entropy, self.gamma_count) < 0:
            raise ValueError("loss weights must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)

    def beta_at(self, step: int) -> float:
        warm = max(1, int(self.kl_warmup_frac * self.steps))
        return self.beta * min(1.0, step / warm)


@dataclass
class LossBreakdown:
    recon_edges: float
    recon_nodes: float
    kl: float
    perm_entropy: float
    count_loss: float
    total: float

    FIELDS = ("recon_edges", "recon_nodes", "kl", "perm_entropy", "count_loss", "total")


def _pair_mask(mask: np.ndarray) -> np.ndarray:
    """Indicator of unordered real-node pairs i<j -> (B, N, N)."""
    n = mask.shape[1]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    return (mask[:, :, None] & mask[:, None, :]) & upper[None]


def reconstruction_loss(
    edge_logits: Tensor, node_logits: Tensor, batch: PaddedBatch
) -> tuple[Tensor, Tensor]:
    """Bernoulli cross-entropies, summed per graph and averaged over the batch.

    Edges: presence logit against the adjacency over unordered real pairs i<j.
    Nodes: per-channel logits against the (0/1) node features of real nodes.
    Padding and the diagonal never contribute.
    """
    if batch.has_embedding_slot:
        raise ValueError("targets must come from the raw batch")
    dt = edge_logits.dtype
    adj = batch.edge_features[:, :, :, 0].astype(dt)
    pair = _pair_mask(batch.mask).astype(dt)
    e = ad.reshape(edge_logits, edge_logits.shape[:3])
    per_edge = ad.sub(ad.softplus(e), ad.mul(e, Tensor(adj)))
    recon_edges = ad.mean(ad.masked_sum(per_edge, pair, axis=(1, 2)))

    target = batch.node_features.astype(dt)
    node_mask = batch.mask.astype(dt)[:, :, None]
    per_node = ad.sub(ad.softplus(node_logits), ad.mul(node_logits, Tensor(target)))
    recon_nodes = ad.mean(ad.masked_sum(per_node, node_mask, axis=(1, 2)))
    return recon_edges, recon_nodes


def kl_loss(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2 I) || N(0, I)) = 0.5 sum(mu^2 + sigma^2 - 1 - log sigma^2)."""
    sig2 = ad.exp(ad.mul(log_sigma, 2.0))
    per = ad.sub(ad.add(ad.mul(mu, mu), sig2), ad.add(ad.mul(log_sigma, 2.0), 1.0))
    return ad.mean(ad.mul(ad.sum_(per, axis=-1), 0.5))


def count_cross_entropy(count_logits: Tensor, sizes: np.ndarray, config: ModelConfig) -> Tensor:
    classes = sizes - config.n_min
    if np.any(classes < 0) or np.any(classes >= config.count_classes):
        raise ValueError("graph sizes outside the node-count head support")
    onehot = np.eye(config.count_classes, dtype=count_logits.dtype)[classes]
    logp = ad.log_softmax(count_logits, axis=-1)
    return ad.mul(ad.mean(ad.sum_(ad.mul(logp, Tensor(onehot)), axis=-1)), -1.0)


def total_loss(
    batch: PaddedBatch,
    params,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: int = 0,
    mode: str = "sample",
    rng=None,
) -> tuple[Tensor, LossBreakdown, ForwardOut]:
    """Assemble the full objective on the tape; returns (total, breakdown, forward)."""
    out = full_forward(batch, params, model_config, mode=mode, rng=rng)
    recon_edges, recon_nodes = reconstruction_loss(out.edge_logits, out.node_logits, batch)
    kl = kl_loss(out.mu, out.log_sigma)
    perm_entropy = ad.mean(entropy_penalty_batched(out.perm))
    count_loss = count_cross_entropy(out.count_logits, batch.sizes, model_config)
    beta = train_config.beta_at(step)
    total = ad.add(
        ad.add(recon_edges, recon_nodes),
        ad.add(
            ad.mul(kl, beta),
            ad.add(
                ad.mul(perm_entropy, train_config.lam_entropy),
                ad.mul(count_loss, train_config.gamma_count),
            ),
        ),
    )
    breakdown = LossBreakdown(
        recon_edges=float(recon_edges.data),
        recon_nodes=float(recon_nodes.data),
        kl=float(kl.data),
        perm_entropy=float(perm_entropy.data),
        count_loss=float(count_loss.data),
        total=float(total.data),
    )
    return total, breakdown, out


# -- optimizer ---------------------------------------------------------------------


class Adam:
    """Adam with global gradient-norm clipping."""

    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=5.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        norm_sq = 0.0
        for g in grads.values():
            norm_sq += float(np.vdot(g, g))
        scale = 1.0
        norm = np.sqrt(norm_sq)
        if self.clip_norm > 0 and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, tensor in params.items():
            g = grads[name] * scale
            if name not in self.m:
                self.m[name] = np.zeros_like(tensor.data)
                self.v[name] = np.zeros_like(tensor.data)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            tensor.data = tensor.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                tensor.dtype
            )

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam_t": np.array(self.t)}
        for k, v in self.m.items():
            out[f"adam_m/{k}"] = v
        for k, v in self.v.items():
            out[f"adam_v/{k}"] = v
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.t = int(arrays["adam_t"])
        self.m = {k[7:]: np.array(v) for k, v in arrays.items() if k.startswith("adam_m/")}
        self.v = {k[7:]: np.array(v) for k, v in arrays.items() if k.startswith("adam_v/")}


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Stateless per-step generator so resumed runs replay the same noise."""
    return np.random.default_rng([seed, step])


def train_step(
    params: dict[str, Tensor],
    batch: PaddedBatch,
    opt: Adam,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: int,
) -> LossBreakdown:
    """One Adam update; deterministic in (params, batch, optimizer state, step)."""
    rng = step_rng(train_config.seed, step)
    with ad.no_finite_checks():
        total, breakdown, _ = total_loss(
            batch, params, model_config, train_config, step=step, mode="sample", rng=rng
        )
        if not np.isfinite(total.data):
            raise NumericError(f"non-finite loss at step {step}: {breakdown}")
        total.backward()
    grads = {}
    for name, tensor in params.items():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor '{name}' at step {step}")
        grads[name] = g
    opt.step(params, grads)
    return breakdown


def batches_for_epoch(
    graphs: list[Graph], batch_size: int, seed: int, epoch: int, use_topo: bool, cap: int
):
    order = np.random.default_rng([seed, 1_000_000 + epoch]).permutation(len(graphs))
    for lo in range(0, len(graphs), batch_size):
        idx = order[lo : lo + batch_size]
        yield pad_batch([graphs[i] for i in idx], use_topo=use_topo, cap=cap)


def fit(
    train_graphs: list[Graph],
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str,
    resume_from: str | None = None,
    log=print,
) -> dict[str, Tensor]:
    """Run the training loop; writes metrics.csv and periodic checkpoints.

    Resuming from a checkpoint written by this function reproduces the exact
    trajectory the uninterrupted run would have taken (stateless per-step RNG
    and per-epoch data order).
    """
    os.makedirs(out_dir, exist_ok=True)
    if resume_from:
        params, model_config, extra = load_checkpoint(resume_from)
        opt = Adam(train_config.lr, clip_norm=train_config.clip_norm)
        opt.load_state_arrays(extra)
        start_step = int(extra["step"])
        metrics_mode = "a"
    else:
        params = init_params(model_config, seed=train_config.seed)
        opt = Adam(train_config.lr, clip_norm=train_config.clip_norm)
        start_step = 0
        metrics_mode = "w"

    metrics_path = os.path.join(out_dir, "metrics.csv")
    steps_per_epoch = max(1, (len(train_graphs) + train_config.batch_size - 1) // train_config.batch_size)

    def checkpoint(path):
        extra = opt.state_arrays()
        extra["step"] = np.array(step + 1)
        save_checkpoint(path, params, model_config, extra)

    with open(metrics_path, metrics_mode, newline="") as fh:
        writer = csv.writer(fh)
        if metrics_mode == "w":
            writer.writerow(("step",) + LossBreakdown.FIELDS)
        t0 = time.time()
        for step in range(start_step, train_config.steps):
            epoch, pos = divmod(step, steps_per_epoch)
            if pos == 0:
                epoch_batches = list(
                    batches_for_epoch(
                        train_graphs,
                        train_config.batch_size,
                        train_config.seed,
                        epoch,
                        model_config.use_topo,
                        model_config.topo_cap,
                    )
                )
            breakdown = train_step(params, epoch_batches[pos], opt, model_config, train_config, step)
            writer.writerow(
                [step] + [f"{getattr(breakdown, f):.6f}" for f in LossBreakdown.FIELDS]
            )
            if (step + 1) % train_config.checkpoint_every == 0:
                checkpoint(os.path.join(out_dir, f"ckpt_{step + 1:07d}.npz"))
            if log and ((step + 1) % 200 == 0 or step == start_step):
                rate = (step + 1 - start_step) / max(time.time() - t0, 1e-9)
                log(
                    f"step {step + 1}/{train_config.steps} "
                    f"total={breakdown.total:.3f} edges={breakdown.recon_edges:.3f} "
                    f"kl={breakdown.kl:.3f} perm_H={breakdown.perm_entropy:.3f} "
                    f"cnt={breakdown.count_loss:.3f} ({rate:.2f} it/s)"
                )
        step = train_config.steps - 1
        checkpoint(os.path.join(out_dir, "final.npz"))
    return params
