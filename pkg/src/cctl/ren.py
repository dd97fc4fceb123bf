"""Contrastive auxiliary loss over cross-domain embeddings of the same entity.

The loss is ``cos(id_s, id_t) - cos(seq_s, seq_t)`` averaged over pairs: same-entity ID
embeddings are pushed apart while the pooled behaviour sequences are pulled together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import Batch, EmbeddingTables, pool_backward, pool_batch
from .numerics import GradientBundle, ShapeError

NORM_FLOOR = 1e-12


@dataclass
class RenPair:
    key: int
    v_id_s: np.ndarray
    v_id_t: np.ndarray
    v_seq_s: np.ndarray
    v_seq_t: np.ndarray


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise cosine and its gradients w.r.t. both arguments (zero where a norm vanishes)."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na >= NORM_FLOOR) & (nb >= NORM_FLOOR)
    na_s = np.where(ok, na, 1.0)[:, None]
    nb_s = np.where(ok, nb, 1.0)[:, None]
    cos = np.where(ok, np.sum(a * b, axis=1) / (na_s[:, 0] * nb_s[:, 0]), 0.0)
    da = b / (na_s * nb_s) - cos[:, None] * a / na_s ** 2
    db = a / (na_s * nb_s) - cos[:, None] * b / nb_s ** 2
    da[~ok] = 0.0
    db[~ok] = 0.0
    return cos, da, db


def ren_loss(pairs: list[RenPair]) -> float:
    if not pairs:
        return 0.0
    return float(np.mean([cosine_sim(p.v_id_s, p.v_id_t) - cosine_sim(p.v_seq_s, p.v_seq_t) for p in pairs]))


def ren_loss_and_grads(id_s, id_t, seq_s, seq_t):
    """Batched loss over P pairs (rows) with gradients for all four (P, d) inputs.

    ``id_s``/``id_t`` may hold more rows than the sequence arrays when extra ID pairs (items)
    participate in the similarity-minimising term.
    """
    n_id, n_seq = len(id_s), len(seq_s)
    loss = 0.0
    grads = {}
    if n_id:
        c, ga, gb = cosine_rows(id_s, id_t)
        loss += c.mean()
        grads["id_s"], grads["id_t"] = ga / n_id, gb / n_id
    if n_seq:
        c, ga, gb = cosine_rows(seq_s, seq_t)
        loss -= c.mean()
        grads["seq_s"], grads["seq_t"] = -ga / n_seq, -gb / n_seq
    return float(loss), grads


def _first_occurrence(keys: np.ndarray) -> dict[int, int]:
    out = {}
    for i, k in enumerate(keys.tolist()):
        if k >= 0 and k not in out:
            out[k] = i
    return out


def join_batches(target_keys: np.ndarray, source_keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (target, source) of entities present in both batches, ordered by key."""
    t = _first_occurrence(target_keys)
    s = _first_occurrence(source_keys)
    common = sorted(set(t) & set(s))
    return np.array([t[k] for k in common], dtype=np.int64), np.array([s[k] for k in common], dtype=np.int64)


def batch_ren(target: EmbeddingTables, source: EmbeddingTables, target_batch: Batch, source_batch: Batch,
              bundle: GradientBundle | None = None, scale: float = 1.0, item_pairs: bool = False,
              target_prefix: str = "emb.target.", source_prefix: str = "emb.source.") -> tuple[float, int]:
    """REN loss over batch-local overlapping users; adds ``scale * grad`` to ``bundle``.

    Returns (loss, number of user pairs). No overlap gives (0.0, 0) and no gradient.
    """
    ts, ss = target.schema, source.schema
    it, is_ = join_batches(target_batch.user_key, source_batch.user_key)
    uid_t = target_batch.ids[it, ts.index(ts.user_id_field)]
    uid_s = source_batch.ids[is_, ss.index(ss.user_id_field)]
    rows_t = [(ts.user_id_field, uid_t)]
    rows_s = [(ss.user_id_field, uid_s)]
    if item_pairs:
        jt, js = join_batches(target_batch.item_key, source_batch.item_key)
        rows_t.append((ts.item_id_field, target_batch.ids[jt, ts.index(ts.item_id_field)]))
        rows_s.append((ss.item_id_field, source_batch.ids[js, ss.index(ss.item_id_field)]))
    if sum(len(r) for _, r in rows_t) == 0:
        return 0.0, 0
    id_t = np.concatenate([target.tables[f][r] for f, r in rows_t])
    id_s = np.concatenate([source.tables[f][r] for f, r in rows_s])
    tb, sb = target_batch.take(it), source_batch.take(is_)
    seq_t = pool_batch(target.seq_table, tb, ts.embed_dim)
    seq_s = pool_batch(source.seq_table, sb, ss.embed_dim)
    loss, g = ren_loss_and_grads(id_s, id_t, seq_s, seq_t)
    if bundle is not None:
        start = 0
        for (ft, rt), (fs, rs) in zip(rows_t, rows_s):
            stop = start + len(rt)
            if len(rt):
                bundle.add_rows(target_prefix + ft, rt, scale * g["id_t"][start:stop])
                bundle.add_rows(source_prefix + fs, rs, scale * g["id_s"][start:stop])
            start = stop
        if len(it):
            if ts.sequence is not None:
                pool_backward(bundle, target_prefix + ts.sequence.item_field, tb, scale * g["seq_t"])
            if ss.sequence is not None:
                pool_backward(bundle, source_prefix + ss.sequence.item_field, sb, scale * g["seq_s"])
    return loss, len(it)
