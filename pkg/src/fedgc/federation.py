"""Round-based federated training with private per-client classifier heads.

Modes:
  fedpe       - federated averaging with each client's head kept private;
                the server aggregates only the shared backbone
  fedgc       - fedpe plus a server-side correction step that walks the
                stacked head matrix down the softmax regularizer gradient
  fedcos      - same correction with the plain cosine (dot-product) regularizer
  fedpe_fixed - heads frozen at initialization; only the backbone trains
  centralized - pooled single-head SGD, the upper-bound baseline

The server stores every client's head between rounds (it receives them for
aggregation anyway); "private" means client-to-client isolation: a client is
only ever sent the backbone and its own columns.

All randomness is derived from (seed, round, client_id), so a run is
bit-reproducible and independent of client execution order.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .losses import LossSpec, batch_loss_and_grad
from .regularizers import RegGrad, StackedEmbeddings, cosine_reg, masked_softmax_reg, softmax_reg

MODES = ("fedpe", "fedgc", "fedcos", "fedpe_fixed", "centralized")


@dataclass
class FederationConfig:
    num_clients: int
    participation: float = 1.0
    lam: float = 20.0
    eta: float = 0.1
    rounds: int = 1
    local_steps: int | None = None  # None = one full epoch over local data
    batch_size: int = 32
    mode: str = "fedpe"
    loss: LossSpec = field(default_factory=LossSpec.softmax)
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    hidden_dim: int = 64
    embedding_dim: int = 32
    correct_all_heads: bool = True  # correction also moves non-participants' stored heads

    def validate(self) -> list[str]:
        problems = []
        if self.num_clients < 1:
            problems.append(f"num_clients must be >= 1, got {self.num_clients}")
        if not 0.0 < self.participation <= 1.0:
            problems.append(f"participation must be in (0, 1], got {self.participation}")
        if self.lam < 0.0:
            problems.append(f"lambda must be >= 0, got {self.lam}")
        if self.mode in ("fedgc", "fedcos") and self.lam == 0.0:
            problems.append(f"mode {self.mode} needs lambda > 0")
        if self.eta <= 0.0:
            problems.append(f"eta must be > 0, got {self.eta}")
        if self.rounds < 0:
            problems.append(f"rounds must be >= 0, got {self.rounds}")
        if self.local_steps is not None and self.local_steps < 0:
            problems.append(f"local_steps must be >= 0, got {self.local_steps}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in MODES:
            problems.append(f"unknown mode {self.mode!r}")
        return problems

    def check(self) -> "FederationConfig":
        problems = self.validate()
        if problems:
            raise ValueError("; ".join(problems))
        return self

    @property
    def clients_per_round(self) -> int:
        return max(1, math.ceil(self.participation * self.num_clients))

    @property
    def normalize_reg(self) -> bool:
        # raw dot products under the softmax loss, normalized columns under margin losses
        return self.loss.normalizes


@dataclass
class ClientState:
    client_id: int
    x: np.ndarray
    y_local: np.ndarray
    head: np.ndarray         # (d, C_k), this client's private class embeddings
    classes: list[int]       # global class ids, local label j <-> classes[j]

    @property
    def n_samples(self) -> int:
        return len(self.y_local)

    @property
    def num_classes(self) -> int:
        return self.head.shape[1]


@dataclass
class ServerState:
    theta: nn.BackboneParams
    embeddings: StackedEmbeddings
    weights: np.ndarray              # p_k = n_k / N over all clients
    round: int
    head_slices: list[slice]         # column range of each client's head
    class_of: np.ndarray             # column -> global class id
    shared_groups: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)

    def column_shared_groups(self) -> list[tuple[int, frozenset[int]]]:
        """Per-column sharing sets for the masked regularizer."""
        out = []
        for cls, group in self.shared_groups:
            for col in np.flatnonzero(self.class_of == cls):
                out.append((int(col), frozenset(group)))
        return out

    def head_of(self, client_id: int) -> np.ndarray:
        return self.embeddings.W[:, self.head_slices[client_id]].copy()


def init_head(num_classes: int, embedding_dim: int, rng: np.random.Generator) -> np.ndarray:
    # columns ~ N(0, 1/d): near-unit norms, near-orthogonal in high dimension
    return rng.normal(0.0, 1.0 / np.sqrt(embedding_dim), size=(embedding_dim, num_classes))


def build_federation(
    client_data, input_dim: int, cfg: FederationConfig, shared_groups=None
) -> tuple[ServerState, list[ClientState]]:
    """Server and client states from partitioned data, all seeded from cfg.seed."""
    theta = nn.init_backbone([input_dim, cfg.hidden_dim, cfg.embedding_dim], cfg.seed)
    clients, heads, client_of, class_of, slices = [], [], [], [], []
    start = 0
    for cd in client_data:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xEB, cd.client_id]))
        head = init_head(len(cd.classes), cfg.embedding_dim, rng)
        clients.append(ClientState(cd.client_id, cd.x, cd.y_local, head.copy(), list(cd.classes)))
        heads.append(head)
        client_of.extend([cd.client_id] * len(cd.classes))
        class_of.extend(cd.classes)
        slices.append(slice(start, start + len(cd.classes)))
        start += len(cd.classes)
    counts = np.array([c.n_samples for c in clients], dtype=np.float64)
    total = counts.sum()
    weights = counts / total if total else np.full(len(clients), 1.0 / max(len(clients), 1))
    server = ServerState(
        theta=theta,
        embeddings=StackedEmbeddings(np.concatenate(heads, axis=1), np.array(client_of)),
        weights=weights,
        round=0,
        head_slices=slices,
        class_of=np.array(class_of),
        shared_groups=list(shared_groups or ()),
    )
    return server, clients


def client_payload(server: ServerState, client_id: int) -> tuple[nn.BackboneParams, np.ndarray]:
    """What the server broadcasts to one client: the backbone and its own head only."""
    return server.theta.copy(), server.head_of(client_id)


def _batch_plan(n: int, cfg: FederationConfig, rng: np.random.Generator):
    """Yield minibatch index arrays: shuffled epochs, last partial batch kept."""
    batches_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    steps = batches_per_epoch if cfg.local_steps is None else cfg.local_steps
    perm = None
    for step in range(steps):
        pos = step % batches_per_epoch
        if pos == 0:
            perm = rng.permutation(n)
        yield perm[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]


def client_update(
    client: ClientState, theta: nn.BackboneParams, cfg: FederationConfig, round_index: int = 0
) -> tuple[nn.BackboneParams, np.ndarray, list[float]] | None:
    """Local minibatch SGD on (backbone, head) against the client's own classes.

    Returns updated copies plus the per-step loss trace, or None for a client
    with no data (skip signal). Deterministic given (seed, round, client_id).
    """
    if client.n_samples == 0:
        return None
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, round_index, client.client_id, 0xC1])
    )
    theta_k = theta.copy()
    head = client.head.copy()
    train_head = cfg.mode != "fedpe_fixed"
    opt = nn.SgdState(cfg.eta, cfg.momentum, cfg.weight_decay)
    trace = []
    for idx in _batch_plan(client.n_samples, cfg, rng):
        xb, yb = client.x[idx], client.y_local[idx]
        feats = nn.forward(theta_k, xb)
        lg = batch_loss_and_grad(cfg.loss, head, feats, yb)
        trace.append(lg.loss)
        grad_layers, _ = nn.backward(theta_k, xb, np.atleast_2d(lg.grad_feature))
        params = theta_k.to_list()
        grads = [g for pair in grad_layers for g in pair]
        if train_head:
            params.append(head)
            grads.append(lg.grad_embeddings)
        new = nn.sgd_step(opt, params, grads)
        if train_head:
            head = new.pop()
        theta_k = nn.BackboneParams.from_list(new, theta_k.activation)
    return theta_k, head, trace


def aggregate_theta(updates: list[tuple[nn.BackboneParams, int]]) -> nn.BackboneParams:
    """Sample-count-weighted average of backbones, renormalized over participants."""
    if not updates:
        raise ValueError("nothing to aggregate")
    total = float(sum(n for _, n in updates))
    if total == 0.0:
        raise ValueError("aggregate weights sum to zero")
    ref = updates[0][0]
    acc = [np.zeros_like(a) for a in ref.to_list()]
    for theta_k, n_k in updates:
        arrays = theta_k.to_list()
        if len(arrays) != len(acc):
            raise ValueError("backbone structure mismatch")
        w = n_k / total
        for a, arr in zip(acc, arrays):
            if a.shape != arr.shape:
                raise ValueError(f"backbone shape mismatch {a.shape} vs {arr.shape}")
            a += w * arr
    return nn.BackboneParams.from_list(acc, ref.activation)


def regularizer_grad(
    emb: StackedEmbeddings, cfg: FederationConfig, shared_groups=None
) -> RegGrad:
    """The configured mode's regularizer over the stacked heads."""
    if cfg.mode == "fedcos":
        return cosine_reg(emb, normalize_columns=cfg.normalize_reg)
    if shared_groups:
        return masked_softmax_reg(emb, shared_groups, normalize_columns=cfg.normalize_reg)
    return softmax_reg(emb, normalize_columns=cfg.normalize_reg)


def correction_step(
    emb: StackedEmbeddings,
    cfg: FederationConfig,
    shared_groups=None,
    column_mask: np.ndarray | None = None,
) -> StackedEmbeddings:
    """One plain gradient step of size lambda * eta on the stacked head matrix."""
    if cfg.mode not in ("fedgc", "fedcos"):
        raise ValueError(f"correction step is only defined for fedgc/fedcos, not {cfg.mode}")
    step = cfg.lam * cfg.eta
    if step == 0.0 or emb.num_clients < 2:
        return emb.copy()
    rg = regularizer_grad(emb, cfg, shared_groups)
    delta = step * rg.grad
    if column_mask is not None:
        delta = delta * column_mask[None, :]
    return replace(emb.copy(), W=emb.W - delta)


def sample_clients(cfg: FederationConfig, rng: np.random.Generator) -> np.ndarray:
    """ceil(participation * K) distinct clients, uniform, in client-index order."""
    picked = rng.permutation(cfg.num_clients)[: cfg.clients_per_round]
    return np.sort(picked)


def run_round(
    server: ServerState,
    clients: list[ClientState],
    cfg: FederationConfig,
    rng: np.random.Generator,
) -> tuple[ServerState, float]:
    """One communication round; returns the new server state and mean local loss.

    Samples clients, broadcasts (backbone, own head), collects updates,
    averages the backbone, restacks the heads, and applies the correction
    step in fedgc/fedcos mode. Reduction is in client-index order.
    """
    sampled = sample_clients(cfg, rng)
    new_w = server.embeddings.W.copy()
    updates, losses = [], []
    for k in sampled:
        theta_b, head_b = client_payload(server, int(k))
        cs = replace(clients[k], head=head_b)
        result = client_update(cs, theta_b, cfg, server.round)
        if result is None:
            continue
        theta_k, head_k, trace = result
        updates.append((theta_k, clients[k].n_samples))
        if cfg.mode != "fedpe_fixed":
            new_w[:, server.head_slices[k]] = head_k
        if trace:
            losses.append(float(np.mean(trace)))

    theta = aggregate_theta(updates) if updates else server.theta.copy()
    emb = StackedEmbeddings(new_w, server.embeddings.client_of.copy(), server.embeddings.anchor_mask)
    new_server = replace(server, theta=theta, embeddings=emb, round=server.round + 1)

    if server.shared_groups:
        new_server = merge_shared_identities(new_server, server.shared_groups)
    if cfg.mode in ("fedgc", "fedcos"):
        mask = None
        if not cfg.correct_all_heads:
            mask = np.zeros(emb.num_columns)
            for k in sampled:
                mask[server.head_slices[k]] = 1.0
        new_server = replace(
            new_server,
            embeddings=correction_step(
                new_server.embeddings, cfg, new_server.column_shared_groups(), mask
            ),
        )
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return new_server, mean_loss


def merge_shared_identities(server: ServerState, groups) -> ServerState:
    """Average every shared identity's columns across its client group."""
    w = server.embeddings.W.copy()
    for cls, group in groups:
        cols = [
            int(c)
            for c in np.flatnonzero(server.class_of == cls)
            if server.embeddings.client_of[c] in group
        ]
        held_by = {int(server.embeddings.client_of[c]) for c in cols}
        missing = set(group) - held_by
        if missing:
            raise ValueError(f"class {cls}: clients {sorted(missing)} hold no column for it")
        if len(cols) < 2:
            continue
        mean = w[:, cols].mean(axis=1)
        for c in cols:
            w[:, c] = mean
    emb = StackedEmbeddings(w, server.embeddings.client_of.copy(), server.embeddings.anchor_mask)
    return replace(server, embeddings=emb)


def combined_objective(server: ServerState, clients: list[ClientState], cfg: FederationConfig) -> float:
    """Weighted mean of client empirical losses plus lambda times the regularizer.

    Evaluation only; the training loop never differentiates this directly.
    """
    total = 0.0
    for cl in clients:
        if cl.n_samples == 0:
            continue
        feats = nn.forward(server.theta, cl.x)
        head = server.embeddings.W[:, server.head_slices[cl.client_id]]
        lg = batch_loss_and_grad(cfg.loss, head, feats, cl.y_local)
        total += float(server.weights[cl.client_id]) * lg.loss
    if cfg.lam > 0.0 and cfg.mode in ("fedgc", "fedcos"):
        rg = regularizer_grad(server.embeddings, cfg, server.column_shared_groups())
        total += cfg.lam * rg.value
    return total


def centralized_train(
    x: np.ndarray,
    y: np.ndarray,
    num_classes: int,
    cfg: FederationConfig,
    on_round=None,
) -> tuple[nn.BackboneParams, np.ndarray]:
    """Pooled minibatch SGD with one global head; the upper-bound baseline.

    Momentum persists across rounds (one round = one epoch unless
    local_steps says otherwise). on_round(round, theta, head, mean_loss) is
    called after every round when given.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    theta = nn.init_backbone([x.shape[1], cfg.hidden_dim, cfg.embedding_dim], cfg.seed)
    rng0 = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xCE, 0]))
    head = init_head(num_classes, cfg.embedding_dim, rng0)
    opt = nn.SgdState(cfg.eta, cfg.momentum, cfg.weight_decay)
    for r in range(cfg.rounds):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, r, 0xCE]))
        trace = []
        for idx in _batch_plan(len(y), cfg, rng):
            xb, yb = x[idx], y[idx]
            feats = nn.forward(theta, xb)
            lg = batch_loss_and_grad(cfg.loss, head, feats, yb)
            trace.append(lg.loss)
            grad_layers, _ = nn.backward(theta, xb, np.atleast_2d(lg.grad_feature))
            grads = [g for pair in grad_layers for g in pair] + [lg.grad_embeddings]
            new = nn.sgd_step(opt, theta.to_list() + [head], grads)
            head = new.pop()
            theta = nn.BackboneParams.from_list(new, theta.activation)
        if on_round is not None:
            on_round(r, theta, head, float(np.mean(trace)) if trace else float("nan"))
    return theta, head


def save_checkpoint(server: ServerState, clients: list[ClientState], path) -> None:
    """Checkpoint directory: manifest.json plus one tensor section per parameter set."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "round": server.round,
        "activation": server.theta.activation,
        "clients": [
            {
                "id": cl.client_id,
                "num_classes": cl.num_classes,
                "classes": [int(c) for c in cl.classes],
                "n_samples": cl.n_samples,
            }
            for cl in clients
        ],
        "shared_groups": [[cls, list(group)] for cls, group in server.shared_groups],
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    nn.write_tensors(os.path.join(path, "backbone.fgc"), server.theta.to_list())
    for cl in clients:
        nn.write_tensors(
            os.path.join(path, f"head_{cl.client_id:03d}.fgc"),
            [server.embeddings.W[:, server.head_slices[cl.client_id]]],
        )


def load_checkpoint(path) -> tuple[nn.BackboneParams, dict[int, np.ndarray], dict]:
    """Read back a checkpoint: (backbone, heads by client id, manifest)."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    theta = nn.BackboneParams.from_list(
        nn.read_tensors(os.path.join(path, "backbone.fgc")), manifest["activation"]
    )
    heads = {}
    for entry in manifest["clients"]:
        cid = entry["id"]
        (head,) = nn.read_tensors(os.path.join(path, f"head_{cid:03d}.fgc"))
        heads[cid] = head
    return theta, heads, manifest
