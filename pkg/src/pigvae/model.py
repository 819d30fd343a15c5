"""The autoencoder architecture: directed messages, restricted self-attention,
permutation-invariant encoder with an embedding node, SoftSort permuter head,
permutation-equivariant decoder, and a node-count head.

All forward functions are pure in (params, inputs) and run on the autodiff
tape, so the same code path serves training, audits, and gradient checks.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import DataError, PaddedBatch
from .permutation import softsort_matrix

CHECKPOINT_FORMAT = "pigvae-checkpoint"
CHECKPOINT_VERSION = 1

NEG_INF = -1e9


@dataclass
class ModelConfig:
    d_m: int = 64  # message width
    d_z: int = 32  # latent width (must be even)
    heads: int = 4
    l_enc: int = 4
    l_dec: int = 4
    d_v_in: int = 1  # raw node-feature channels
    tau: float = 1.0  # SoftSort temperature (constant; hook for annealing)
    use_topo: bool = False  # append topological-distance edge features
    topo_cap: int = 8
    max_nodes: int = 12  # largest real-node count a batch may carry
    n_min: int = 1  # node-count head support
    n_max: int = 12

    def __post_init__(self):
        if self.d_z % 2 != 0:
            raise ValueError("d_z must be even (paired position embeddings)")
        if self.d_m % self.heads != 0:
            raise ValueError("d_m must be divisible by heads")
        if not (1 <= self.n_min <= self.n_max <= self.max_nodes):
            raise ValueError("need 1 <= n_min <= n_max <= max_nodes")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def d_e_in(self) -> int:
        return 2 + (self.topo_cap if self.use_topo else 0)

    @property
    def d_v_model(self) -> int:
        return self.d_v_in + 1  # + embedding-node type channel

    @property
    def d_e_model(self) -> int:
        return self.d_e_in + 1  # + embedding-edge type channel

    @property
    def d_head(self) -> int:
        return self.d_m // self.heads

    @property
    def d_pe(self) -> int:
        return self.d_z // 2

    @property
    def count_classes(self) -> int:
        return self.n_max - self.n_min + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


# -- parameters -----------------------------------------------------------------


def _glorot(rng, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Glorot-initialized trainable tensors, keyed by stable names."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def lin(name, fan_in, fan_out):
        p[f"{name}_w"] = _glorot(rng, fan_in, fan_out, dtype)
        p[f"{name}_b"] = np.zeros(fan_out, dtype=dtype)

    def block(prefix):
        p[f"{prefix}_ln1_g"] = np.ones(config.d_m, dtype=dtype)
        p[f"{prefix}_ln1_b"] = np.zeros(config.d_m, dtype=dtype)
        for nm in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}_{nm}"] = _glorot(rng, config.d_m, config.d_m, dtype)
        p[f"{prefix}_bo"] = np.zeros(config.d_m, dtype=dtype)
        p[f"{prefix}_ln2_g"] = np.ones(config.d_m, dtype=dtype)
        p[f"{prefix}_ln2_b"] = np.zeros(config.d_m, dtype=dtype)
        lin(f"{prefix}_ff1", config.d_m, 2 * config.d_m)
        lin(f"{prefix}_ff2", 2 * config.d_m, config.d_m)

    lin("enc_msg", 2 * config.d_v_model + config.d_e_model, config.d_m)
    for layer in range(config.l_enc):
        block(f"enc{layer}")
    p["enc_lnf_g"] = np.ones(config.d_m, dtype=dtype)
    p["enc_lnf_b"] = np.zeros(config.d_m, dtype=dtype)
    lin("mu", config.d_m, config.d_z)
    lin("logsig", config.d_m, config.d_z)
    lin("score", config.d_m, 1)
    lin("dec_in", config.d_z, config.d_m)
    for layer in range(config.l_dec):
        block(f"dec{layer}")
    p["dec_lnf_g"] = np.ones(config.d_m, dtype=dtype)
    p["dec_lnf_b"] = np.zeros(config.d_m, dtype=dtype)
    lin("node_out", config.d_m, config.d_v_in)
    lin("edge_out", config.d_m, 1)
    lin("cnt1", config.d_z, config.d_m)
    lin("cnt2", config.d_m, config.count_classes)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def param_dtype(params: dict[str, Tensor]):
    return next(iter(params.values())).dtype


# -- batch preparation ------------------------------------------------------------


def add_embedding_node(batch: PaddedBatch) -> PaddedBatch:
    """Insert the graph-embedding node at slot 0 with its own node/edge type.

    Real-node features shift to slots >= 1; edges to/from the embedding node
    carry a dedicated edge-type channel; padded slots stay zero.
    """
    if batch.has_embedding_slot:
        raise DataError("batch already has an embedding slot")
    b, n = batch.mask.shape
    d_v = batch.node_features.shape[2]
    d_e = batch.edge_features.shape[3]
    node = np.zeros((b, n + 1, d_v + 1), dtype=np.float32)
    node[:, 1:, :d_v] = batch.node_features
    node[:, 0, d_v] = 1.0
    edge = np.zeros((b, n + 1, n + 1, d_e + 1), dtype=np.float32)
    edge[:, 1:, 1:, :d_e] = batch.edge_features
    real = batch.mask.astype(np.float32)
    edge[:, 0, 1:, d_e] = real
    edge[:, 1:, 0, d_e] = real
    mask = np.concatenate([np.ones((b, 1), dtype=bool), batch.mask], axis=1)
    return PaddedBatch(node, edge, mask, batch.sizes.copy(), has_embedding_slot=True)


def _attention_additive_mask(mask: np.ndarray, dtype) -> np.ndarray:
    """(B, 1, 1, 1, N) additive logits masking invalid source nodes."""
    add = np.where(mask, 0.0, NEG_INF).astype(dtype)
    return add[:, None, None, None, :]


# -- network pieces ----------------------------------------------------------------


def build_message_matrix(x: Tensor, e: Tensor, params, prefix: str = "enc_msg") -> Tensor:
    """Directed messages m_ij = relu([x_i || x_j || e_ij] W + b) -> (B, N, N, d_m)."""
    bsz, n, d_v = x.shape
    if e.shape[:3] != (bsz, n, n):
        raise ad.ShapeError(f"edge features {e.shape} do not match nodes {x.shape}")
    xi = ad.broadcast_to(ad.reshape(x, (bsz, n, 1, d_v)), (bsz, n, n, d_v))
    xj = ad.broadcast_to(ad.reshape(x, (bsz, 1, n, d_v)), (bsz, n, n, d_v))
    feats = ad.concat([xi, xj, e], axis=-1)
    return ad.relu(ad.add(ad.matmul(feats, params[f"{prefix}_w"]), params[f"{prefix}_b"]))


def attention_layer(
    m: Tensor,
    params,
    prefix: str,
    heads: int,
    source_mask_add: np.ndarray | None = None,
) -> Tensor:
    """One pre-LN transformer block of restricted message self-attention.

    Each target message m_ij attends over the incoming messages {m_ki} of its
    receiving node i, so the attention tensor is (B, H, N, N, N) rather than
    the full O(n^4) message-to-message matrix.
    """
    bsz, n, _, d_m = m.shape
    dh = d_m // heads
    h = ad.layer_norm(m, params[f"{prefix}_ln1_g"], params[f"{prefix}_ln1_b"])

    def heads_view(t, axes):
        t = ad.reshape(t, (bsz, n, n, heads, dh))
        return ad.transpose(t, axes)

    # q[b,h,i,j,d]; k/v rearranged so source index k is contracted per fixed i
    q = heads_view(ad.matmul(h, params[f"{prefix}_wq"]), (0, 3, 1, 2, 4))
    k = heads_view(ad.matmul(h, params[f"{prefix}_wk"]), (0, 3, 2, 1, 4))
    v = heads_view(ad.matmul(h, params[f"{prefix}_wv"]), (0, 3, 2, 1, 4))
    logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 2, 4, 3))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(logits, axis=-1, additive_mask=source_mask_add)
    ctx = ad.matmul(attn, v)  # (B, H, N, N, dh)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 3, 1, 4)), (bsz, n, n, d_m))
    m = ad.add(m, ad.add(ad.matmul(ctx, params[f"{prefix}_wo"]), params[f"{prefix}_bo"]))

    h2 = ad.layer_norm(m, params[f"{prefix}_ln2_g"], params[f"{prefix}_ln2_b"])
    ff = ad.relu(ad.add(ad.matmul(h2, params[f"{prefix}_ff1_w"]), params[f"{prefix}_ff1_b"]))
    ff = ad.add(ad.matmul(ff, params[f"{prefix}_ff2_w"]), params[f"{prefix}_ff2_b"])
    return ad.add(m, ff)


def _attention_stack(m, params, stack: str, layers: int, heads: int, mask_add):
    for layer in range(layers):
        m = attention_layer(m, params, f"{stack}{layer}", heads, mask_add)
    return m


def encode(batch: PaddedBatch, params, config: ModelConfig):
    """Encoder pass -> (mu, log_sigma, node self-messages for the permuter).

    The batch must already contain the embedding node; no position information
    enters here, which is what makes mu permutation invariant.
    """
    if not batch.has_embedding_slot:
        raise DataError("encode expects a batch with the embedding node")
    dt = param_dtype(params)
    x = Tensor(batch.node_features.astype(dt))
    e = Tensor(batch.edge_features.astype(dt))
    m = build_message_matrix(x, e, params)
    mask_add = _attention_additive_mask(batch.mask, dt)
    m = _attention_stack(m, params, "enc", config.l_enc, config.heads, mask_add)
    m = ad.layer_norm(m, params["enc_lnf_g"], params["enc_lnf_b"])
    diag = ad.diag_part(m)  # (B, N+1, d_m)
    m00 = ad.reshape(ad.take(diag, np.array([0]), axis=1), (batch.batch_size, config.d_m))
    node_msgs = ad.take(diag, np.arange(1, batch.n_max), axis=1)
    mu = ad.add(ad.matmul(m00, params["mu_w"]), params["mu_b"])
    log_sigma = ad.add(ad.matmul(m00, params["logsig_w"]), params["logsig_b"])
    return mu, log_sigma, node_msgs


def permuter_scores(node_msgs: Tensor, params) -> Tensor:
    """One scalar score per real node from its self-message -> (B, N)."""
    s = ad.add(ad.matmul(node_msgs, params["score_w"]), params["score_b"])
    return ad.reshape(s, s.shape[:-1])


def soft_perm_from_scores(scores: Tensor, mask: np.ndarray, tau: float) -> Tensor:
    """Batched SoftSort over real nodes; padded slots are pinned to identity."""
    bsz, n = scores.shape
    dt = scores.dtype
    keep = mask.astype(dt)
    s_masked = ad.add(ad.mul(scores, keep), Tensor(((1.0 - keep) * NEG_INF).astype(dt)))
    both_real = mask[:, :, None] & mask[:, None, :]
    pad_diag = (~mask)[:, :, None] & np.eye(n, dtype=bool)[None, :, :]
    additive = np.where(both_real | pad_diag, 0.0, NEG_INF).astype(dt)
    return softsort_matrix(s_masked, tau, additive_mask=additive)


def sample_latent(mu: Tensor, log_sigma: Tensor, mode: str = "deterministic", rng=None) -> Tensor:
    """z = mu + sigma * eps in ``sample`` mode; z = mu in ``deterministic`` mode."""
    if mode == "deterministic":
        return mu
    if mode != "sample":
        raise ValueError(f"unknown latent mode: {mode}")
    if rng is None:
        raise ValueError("sample mode needs a seeded rng")
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    return ad.add(mu, ad.mul(ad.exp(log_sigma), Tensor(eps)))


def position_embedding(count: int, config: ModelConfig, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embeddings, one row per slot index -> (count, d_z/2)."""
    k = np.arange(config.d_pe, dtype=np.float64)
    freq = 10000.0 ** (-2.0 * k / config.d_z)
    angles = np.arange(count, dtype=np.float64)[:, None] * freq[None, :]
    pe = np.where(k[None, :] % 2 == 0, np.sin(angles), np.cos(angles))
    return pe.astype(dtype)


def decode(z: Tensor, perm, mask: np.ndarray, params, config: ModelConfig):
    """Decode latent ``z`` with node order given by ``perm`` -> (node, edge) logits.

    ``perm`` reorders the position-embedding rows (soft or hard, (N, N) or
    (B, N, N)); edge logits are symmetrized and the diagonal carries no
    meaning.  ``mask`` marks the slots the decoder should attend to.
    """
    bsz = z.shape[0]
    n = mask.shape[1]
    if n > config.max_nodes:
        raise DataError(f"decode got {n} slots but max_nodes={config.max_nodes}")
    dt = param_dtype(params)
    pe = Tensor(position_embedding(n, config, dt))
    if not isinstance(perm, Tensor):
        perm = Tensor(np.asarray(perm, dtype=dt))
    pe_seq = ad.matmul(perm, pe)  # (B, N, d_pe) or (N, d_pe)
    if pe_seq.ndim == 2:
        pe_seq = ad.broadcast_to(ad.reshape(pe_seq, (1, n, config.d_pe)), (bsz, n, config.d_pe))
    pe_i = ad.broadcast_to(
        ad.reshape(pe_seq, (bsz, n, 1, config.d_pe)), (bsz, n, n, config.d_pe)
    )
    pe_j = ad.broadcast_to(
        ad.reshape(pe_seq, (bsz, 1, n, config.d_pe)), (bsz, n, n, config.d_pe)
    )
    pair = ad.concat([pe_i, pe_j], axis=-1)  # (B, N, N, d_z)
    init = ad.add(pair, ad.reshape(z, (bsz, 1, 1, config.d_z)))
    m = ad.relu(ad.add(ad.matmul(init, params["dec_in_w"]), params["dec_in_b"]))
    mask_add = _attention_additive_mask(mask, dt)
    m = _attention_stack(m, params, "dec", config.l_dec, config.heads, mask_add)
    m = ad.layer_norm(m, params["dec_lnf_g"], params["dec_lnf_b"])
    node_logits = ad.add(ad.matmul(ad.diag_part(m), params["node_out_w"]), params["node_out_b"])
    sym = ad.mul(ad.add(m, ad.transpose(m, (0, 2, 1, 3))), 0.5)
    edge_logits = ad.add(ad.matmul(sym, params["edge_out_w"]), params["edge_out_b"])
    return node_logits, edge_logits


def predict_node_count(z: Tensor, params) -> Tensor:
    """Logits over the supported node counts {n_min..n_max} -> (B, K)."""
    h = ad.relu(ad.add(ad.matmul(z, params["cnt1_w"]), params["cnt1_b"]))
    return ad.add(ad.matmul(h, params["cnt2_w"]), params["cnt2_b"])


def count_probabilities(count_logits: Tensor) -> np.ndarray:
    return ad.softmax(count_logits, axis=-1).data


@dataclass
class ForwardOut:
    """Everything one forward pass produces, still on the tape."""

    node_logits: Tensor  # (B, N, d_v)
    edge_logits: Tensor  # (B, N, N, 1)
    count_logits: Tensor  # (B, K)
    mu: Tensor  # (B, d_z)
    log_sigma: Tensor  # (B, d_z)
    z: Tensor  # (B, d_z)
    perm: Tensor  # (B, N, N) soft permutation
    scores: Tensor  # (B, N)


def full_forward(
    batch: PaddedBatch,
    params,
    config: ModelConfig,
    mode: str = "deterministic",
    rng=None,
) -> ForwardOut:
    """Compose embedding node -> encode -> permuter -> SoftSort -> decode."""
    if batch.has_embedding_slot:
        raise DataError("full_forward expects a raw batch (no embedding node)")
    emb = add_embedding_node(batch)
    mu, log_sigma, node_msgs = encode(emb, params, config)
    scores = permuter_scores(node_msgs, params)
    perm = soft_perm_from_scores(scores, batch.mask, config.tau)
    z = sample_latent(mu, log_sigma, mode, rng)
    node_logits, edge_logits = decode(z, perm, batch.mask, params, config)
    count_logits = predict_node_count(z, params)
    return ForwardOut(node_logits, edge_logits, count_logits, mu, log_sigma, z, perm, scores)


# -- checkpointing -----------------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor], config: ModelConfig, extra: dict | None = None):
    """Versioned npz container: config JSON + named float32 parameter arrays."""
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    if extra:
        for k, v in extra.items():
            arrays[f"extra/{k}"] = np.asarray(v)
    header = json.dumps(
        {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": config.to_dict()}
    )
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(header.encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Load (params, config, extra) from :func:`save_checkpoint` output."""
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version")
        config = ModelConfig.from_dict(header["config"])
        params = {}
        extra = {}
        for key in z.files:
            if key.startswith("param/"):
                params[key[6:]] = Tensor(z[key], requires_grad=True, name=key[6:])
            elif key.startswith("extra/"):
                extra[key[6:]] = z[key]
    return params, config, extra
