"""Synthetic two-domain CTR data, CSV persistence, and deterministic batching.

The generator draws a latent vector per raw user and item (shared entities keep the same
latent in both domains) and labels clicks with a logistic model whose interaction matrix is
domain specific::

    logit_d = scale * u' W_d i / sqrt(L) + additive + context_d[c] + bias_d
    W_t = rownorm(M),  W_s = rownorm((1 - shift) * M + shift * R)

so ``domain_shift=0`` makes both domains share one click concept and ``domain_shift=1``
makes them independent. Behaviour sequences hold a user's most recent clicked items in the
same domain, taken from the noiseless clicks; ``source_label_noise`` corrupts only the
source labels that the towers are trained on.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .features import Batch, FeatureSchema, Field, SequenceField
from .numerics import component_rng, sigmoid

SEQ_COLUMN = "behavior_seq"
LABEL_COLUMN = "label"
SIDECAR = "dataset.json"


@dataclass
class SynthConfig:
    n_users_source: int = 2000
    n_users_target: int = 1000
    n_items_source: int = 1000
    n_items_target: int = 500
    user_overlap: float = 0.5
    item_overlap: float = 0.5
    latent_dim: int = 8
    n_user_segments: int = 10
    n_item_categories: int = 10
    n_contexts: int = 4
    segment_strength: float = 0.95
    domain_shift: float = 0.0
    source_label_noise: float = 0.0
    samples_source: int = 100_000
    samples_target: int = 20_000
    extra_target_test: int = 0
    seq_max_len: int = 10
    interaction_scale: float = 3.0
    additive_scale: float = 0.0
    context_scale: float = 0.5
    bias_source: float = -1.5
    bias_target: float = -1.5
    test_fraction: float = 0.1
    split: str = "random"
    source_extra_fields: int = 0
    embed_dim: int = 8
    seed: int = 0

    def validate(self) -> None:
        for name in ("user_overlap", "item_overlap", "domain_shift", "source_label_noise", "segment_strength"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        for name in ("n_users_source", "n_users_target", "n_items_source", "n_items_target", "latent_dim",
                     "n_user_segments", "n_item_categories", "n_contexts", "samples_source", "samples_target"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.split not in ("random", "time"):
            raise ValueError(f"split must be 'random' or 'time', got {self.split!r}")
        if self.shared_users > self.n_users_source:
            raise ValueError(f"user overlap needs {self.shared_users} shared users but the source has "
                             f"{self.n_users_source}")
        if self.shared_items > self.n_items_source:
            raise ValueError(f"item overlap needs {self.shared_items} shared items but the source has "
                             f"{self.n_items_source}")

    @property
    def shared_users(self) -> int:
        return int(round(self.user_overlap * self.n_users_target))

    @property
    def shared_items(self) -> int:
        return int(round(self.item_overlap * self.n_items_target))


@dataclass
class Dataset:
    """Schemas, per-(domain, split) partitions, and the cross-domain entity maps.

    ``user_map``/``item_map`` rows are ``(raw_key, source_id, target_id)`` for entities present
    in both domains.
    """

    source_schema: FeatureSchema
    target_schema: FeatureSchema
    parts: dict
    user_map: np.ndarray
    item_map: np.ndarray
    meta: dict = field(default_factory=dict)
    world: object = None

    def part(self, domain: str, split: str) -> Batch:
        return self.parts[(domain, split)]

    def schema(self, domain: str) -> FeatureSchema:
        return self.source_schema if domain == "source" else self.target_schema

    def samples(self, domain: str, split: str):
        part = self.part(domain, split)
        return [part.sample(i) for i in range(len(part))]


# --------------------------------------------------------------------------- generator


def _rownorm(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def build_schemas(cfg: SynthConfig) -> tuple[FeatureSchema, FeatureSchema]:
    def fields(n_users, n_items, extra):
        out = [Field("user_id", n_users + 1, "user"), Field("user_segment", cfg.n_user_segments + 1, "user")]
        out += [Field(f"src_extra_{j}", 6, "user") for j in range(extra)]
        out += [Field("item_id", n_items + 1, "item"), Field("item_category", cfg.n_item_categories + 1, "item"),
                Field("context", cfg.n_contexts + 1, "context")]
        return tuple(out)

    seq = SequenceField(SEQ_COLUMN, "item_id", cfg.seq_max_len)
    src = FeatureSchema("source", fields(cfg.n_users_source, cfg.n_items_source, cfg.source_extra_fields),
                        cfg.embed_dim, seq)
    tgt = FeatureSchema("target", fields(cfg.n_users_target, cfg.n_items_target, 0), cfg.embed_dim, seq)
    return src, tgt


class SyntheticWorld:
    """Ground truth shared by both domains: latents, segments, per-domain click models."""

    def __init__(self, cfg: SynthConfig):
        cfg.validate()
        self.cfg = cfg
        L = cfg.latent_dim
        seed = cfg.seed
        su, si = cfg.shared_users, cfg.shared_items
        self.n_raw_users = cfg.n_users_target + cfg.n_users_source - su
        self.n_raw_items = cfg.n_items_target + cfg.n_items_source - si
        # raw keys [0, n_target) belong to the target; the first `shared` of them also to the source
        self.raw_users = {
            "target": np.arange(cfg.n_users_target),
            "source": np.concatenate([np.arange(su), np.arange(cfg.n_users_target, self.n_raw_users)]),
        }
        self.raw_items = {
            "target": np.arange(cfg.n_items_target),
            "source": np.concatenate([np.arange(si), np.arange(cfg.n_items_target, self.n_raw_items)]),
        }
        rng = component_rng(seed, "synth/latents")
        a = cfg.segment_strength
        self.user_segment = rng.integers(0, cfg.n_user_segments, self.n_raw_users)
        self.item_category = rng.integers(0, cfg.n_item_categories, self.n_raw_items)
        user_centroids = rng.normal(size=(cfg.n_user_segments, L))
        item_centroids = rng.normal(size=(cfg.n_item_categories, L))
        self.user_latent = np.sqrt(a) * user_centroids[self.user_segment] + np.sqrt(1 - a) * rng.normal(
            size=(self.n_raw_users, L))
        self.item_latent = np.sqrt(a) * item_centroids[self.item_category] + np.sqrt(1 - a) * rng.normal(
            size=(self.n_raw_items, L))
        self.user_bias = rng.normal(size=self.n_raw_users)
        self.item_bias = rng.normal(size=self.n_raw_items)

        rng = component_rng(seed, "synth/concepts")
        m = rng.normal(size=(L, L))
        r = rng.normal(size=(L, L))
        self.W = {"target": _rownorm(m), "source": _rownorm((1.0 - cfg.domain_shift) * m + cfg.domain_shift * r)}
        ctx = rng.normal(size=cfg.n_contexts)
        ctx_rand = rng.normal(size=cfg.n_contexts)
        ctx_t = ctx - ctx.mean()
        ctx_s = (1.0 - cfg.domain_shift) * ctx + cfg.domain_shift * ctx_rand
        self.context_effect = {"target": cfg.context_scale * ctx_t,
                               "source": cfg.context_scale * (ctx_s - ctx_s.mean())}
        self.bias = {"target": cfg.bias_target, "source": cfg.bias_source}

        rng = component_rng(seed, "synth/ids")
        self.user_id = {}
        self.item_id = {}
        for d in ("source", "target"):
            self.user_id[d] = self._assign(rng, self.raw_users[d], self.n_raw_users)
            self.item_id[d] = self._assign(rng, self.raw_items[d], self.n_raw_items)

    @staticmethod
    def _assign(rng, keys, n_raw) -> np.ndarray:
        """raw key -> per-domain id in [1, len(keys)]; 0 for keys absent from the domain."""
        out = np.zeros(n_raw, dtype=np.int64)
        out[keys] = rng.permutation(len(keys)) + 1
        return out

    def logit(self, domain: str, raw_user, raw_item, context) -> np.ndarray:
        cfg = self.cfg
        u = self.user_latent[raw_user]
        i = self.item_latent[raw_item]
        inter = np.einsum("nj,jk,nk->n", u, self.W[domain], i) / np.sqrt(cfg.latent_dim)
        additive = (self.user_bias[raw_user] + self.item_bias[raw_item]) / np.sqrt(2.0)
        return (cfg.interaction_scale * inter + cfg.additive_scale * additive
                + self.context_effect[domain][context] + self.bias[domain])

    def click_prob(self, domain: str, raw_user, raw_item, context) -> np.ndarray:
        return sigmoid(self.logit(domain, np.atleast_1d(raw_user), np.atleast_1d(raw_item), np.atleast_1d(context)))

    def overlap_maps(self) -> tuple[np.ndarray, np.ndarray]:
        su, si = self.cfg.shared_users, self.cfg.shared_items
        users = np.arange(su)
        items = np.arange(si)
        user_map = np.stack([users, self.user_id["source"][users], self.user_id["target"][users]], axis=1)
        item_map = np.stack([items, self.item_id["source"][items], self.item_id["target"][items]], axis=1)
        return user_map.reshape(-1, 3), item_map.reshape(-1, 3)


def _draw_domain(world: SyntheticWorld, domain: str, n: int, rng: np.random.Generator):
    cfg = world.cfg
    users = world.raw_users[domain][rng.integers(0, len(world.raw_users[domain]), n)]
    items = world.raw_items[domain][rng.integers(0, len(world.raw_items[domain]), n)]
    ctx = rng.integers(0, cfg.n_contexts, n)
    prob = world.click_prob(domain, users, items, ctx)
    clean = (rng.random(n) < prob).astype(np.float64)
    return users, items, ctx, prob, clean


def _sequences(user_ids: np.ndarray, item_ids: np.ndarray, clicks: np.ndarray, max_len: int):
    """For each sample, the user's most recent clicked items strictly before it."""
    n = len(user_ids)
    seq = np.full((n, max_len), -1, dtype=np.int64)
    seq_len = np.zeros(n, dtype=np.int64)
    if max_len == 0:
        return seq, seq_len
    history: dict[int, deque] = {}
    for k, (u, it, c) in enumerate(zip(user_ids.tolist(), item_ids.tolist(), clicks.tolist())):
        h = history.get(u)
        if h:
            seq[k, :len(h)] = h
            seq_len[k] = len(h)
        if c:
            if h is None:
                h = history[u] = deque(maxlen=max_len)
            h.append(it)
    return seq, seq_len


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    world = SyntheticWorld(cfg)
    src_schema, tgt_schema = build_schemas(cfg)
    user_map, item_map = world.overlap_maps()
    shared_u = np.zeros(world.n_raw_users, dtype=bool)
    shared_u[user_map[:, 0]] = True
    shared_i = np.zeros(world.n_raw_items, dtype=bool)
    shared_i[item_map[:, 0]] = True

    parts, meta = {}, {"clean_source_labels": None}
    for domain, n, extra in (("source", cfg.samples_source, 0), ("target", cfg.samples_target, cfg.extra_target_test)):
        rng = component_rng(cfg.seed, f"synth/samples/{domain}")
        users, items, ctx, prob, clean = _draw_domain(world, domain, n + extra, rng)
        labels = clean.copy()
        if domain == "source" and cfg.source_label_noise > 0:
            flip = component_rng(cfg.seed, "synth/noise").choice(n, int(round(cfg.source_label_noise * n)),
                                                                 replace=False)
            labels[flip] = 1.0 - labels[flip]
        if domain == "source":
            meta["clean_source_labels"] = clean[:n]
        uid = world.user_id[domain][users]
        iid = world.item_id[domain][items]
        seq, seq_len = _sequences(uid, iid, clean, cfg.seq_max_len)
        cols = [uid, world.user_segment[users] + 1]
        cols += [component_rng(cfg.seed, f"synth/extra/{j}").integers(1, 6, n + extra)
                 for j in range(cfg.source_extra_fields if domain == "source" else 0)]
        cols += [iid, world.item_category[items] + 1, ctx + 1]
        ids = np.stack(cols, axis=1).astype(np.int64)
        full = Batch(domain, ids, seq, seq_len, labels,
                     np.where(shared_u[users], users, -1).astype(np.int64),
                     np.where(shared_i[items], items, -1).astype(np.int64))
        meta[f"{domain}_click_prob"] = prob
        main = np.arange(n)
        n_test = int(round(cfg.test_fraction * n))
        if cfg.split == "time":
            test_idx = main[n - n_test:]
        else:
            test_idx = np.sort(component_rng(cfg.seed, f"synth/split/{domain}").choice(n, n_test, replace=False))
        is_test = np.zeros(n + extra, dtype=bool)
        is_test[test_idx] = True
        is_test[n:] = True
        parts[(domain, "train")] = full.take(np.nonzero(~is_test)[0])
        parts[(domain, "test")] = full.take(np.nonzero(is_test)[0])
        meta[f"{domain}_test_index"] = np.nonzero(is_test)[0]
    return Dataset(src_schema, tgt_schema, parts, user_map, item_map, meta, world)


# --------------------------------------------------------------------------- CSV


class CsvFormatError(ValueError):
    pass


_TOKEN = re.compile(r"^\s*[^\d\s-]*(-?\d+)\s*$")


def _parse_id(token: str, vocab: int) -> int:
    m = _TOKEN.match(token)
    if not m:
        return 0
    v = int(m.group(1))
    return v if 0 <= v < vocab else 0


def csv_header(schema: FeatureSchema) -> list[str]:
    seq = schema.sequence.name if schema.sequence else SEQ_COLUMN
    return schema.field_names + [seq, LABEL_COLUMN]


def write_csv(path, part: Batch, schema: FeatureSchema) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header(schema))
        for i in range(len(part)):
            seq = "|".join(str(v) for v in part.seq[i, :part.seq_len[i]])
            w.writerow([*(int(v) for v in part.ids[i]), seq, int(part.labels[i])])


def load_csv(path, schema: FeatureSchema) -> Batch:
    """Parse one partition. Columns: schema fields in order, behaviour sequence, label.

    Unknown or out-of-vocabulary ids map to the reserved id 0. A leading non-numeric prefix
    (``u7``, ``ctx1``) is stripped.
    """
    n_fields = len(schema.fields)
    vocabs = [f.vocab_size for f in schema.fields]
    seq_vocab = schema.get(schema.sequence.item_field).vocab_size if schema.sequence else 1
    max_len = schema.max_len
    rows, seqs, labels = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return Batch.empty(schema)
        if len(header) != n_fields + 2:
            raise CsvFormatError(f"{path}:1: expected {n_fields + 2} columns, header has {len(header)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != n_fields + 2:
                raise CsvFormatError(f"{path}:{lineno}: expected {n_fields + 2} columns, got {len(rec)}")
            label = rec[-1].strip()
            if label not in ("0", "1"):
                raise CsvFormatError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            rows.append([_parse_id(tok, v) for tok, v in zip(rec[:n_fields], vocabs)])
            raw_seq = rec[n_fields].strip()
            seq = [_parse_id(t, seq_vocab) for t in raw_seq.split("|")] if raw_seq else []
            seqs.append(seq[max(0, len(seq) - max_len):] if max_len else [])
            labels.append(float(label))
    n = len(rows)
    if n == 0:
        return Batch.empty(schema)
    seq_arr = np.full((n, max_len), -1, dtype=np.int64)
    seq_len = np.zeros(n, dtype=np.int64)
    for i, s in enumerate(seqs):
        seq_arr[i, :len(s)] = s
        seq_len[i] = len(s)
    return Batch(schema.domain, np.array(rows, dtype=np.int64).reshape(n, n_fields), seq_arr, seq_len,
                 np.array(labels))


def _attach_keys(part: Batch, schema: FeatureSchema, user_map: np.ndarray, item_map: np.ndarray) -> None:
    col = 1 if schema.domain == "source" else 2
    for keys_attr, fname, mapping in (("user_key", schema.user_id_field, user_map),
                                      ("item_key", schema.item_id_field, item_map)):
        lookup = np.full(schema.get(fname).vocab_size, -1, dtype=np.int64)
        if len(mapping):
            lookup[mapping[:, col]] = mapping[:, 0]
        setattr(part, keys_attr, lookup[part.ids[:, schema.index(fname)]])


def save_dataset(dataset: Dataset, out_dir, synth: SynthConfig | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for (domain, split), part in sorted(dataset.parts.items()):
        name = f"{domain}_{split}.csv"
        write_csv(out / name, part, dataset.schema(domain))
        files[f"{domain}/{split}"] = name
    sidecar = {
        "source_schema": dataset.source_schema.to_dict(),
        "target_schema": dataset.target_schema.to_dict(),
        "user_map": dataset.user_map.tolist(),
        "item_map": dataset.item_map.tolist(),
        "files": files,
        "synth_config": dataclasses.asdict(synth) if synth is not None else None,
    }
    (out / SIDECAR).write_text(json.dumps(sidecar, indent=2))
    return out


def load_dataset(path) -> Dataset:
    """Read a directory written by ``save_dataset`` (or hand-assembled with the same sidecar)."""
    root = Path(path)
    if root.is_file():
        root = root.parent
    side = json.loads((root / SIDECAR).read_text())
    src = FeatureSchema.from_dict(side["source_schema"])
    tgt = FeatureSchema.from_dict(side["target_schema"])
    user_map = np.array(side.get("user_map", []), dtype=np.int64).reshape(-1, 3)
    item_map = np.array(side.get("item_map", []), dtype=np.int64).reshape(-1, 3)
    parts = {}
    for key, name in side["files"].items():
        domain, split = key.split("/")
        schema = src if domain == "source" else tgt
        part = load_csv(root / name, schema)
        _attach_keys(part, schema, user_map, item_map)
        parts[(domain, split)] = part
    for domain, schema in (("source", src), ("target", tgt)):
        for split in ("train", "test"):
            parts.setdefault((domain, split), Batch.empty(schema))
    return Dataset(src, tgt, parts, user_map, item_map, {"synth_config": side.get("synth_config")})


# --------------------------------------------------------------------------- batching


def epoch_batches(part: Batch, batch_size: int, seed: int, epoch: int, name: str) -> Iterator[Batch]:
    """Seeded shuffle of one partition, cut into batches; the last batch may be short."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    order = component_rng(seed, f"batches/{name}/{epoch}").permutation(len(part))
    for start in range(0, len(part), batch_size):
        yield part.take(order[start:start + batch_size])


def make_batches(dataset: Dataset, batch_size: int, seed: int, split: str = "train", domain: str = "target",
                 epoch: int = 0) -> list[Batch]:
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    return list(epoch_batches(dataset.part(domain, split), batch_size, seed, epoch, f"{domain}/{split}"))


class BatchStream:
    """Endless stream over a partition, reshuffled at every pass."""

    def __init__(self, part: Batch, batch_size: int, seed: int, name: str):
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        self.part = part
        self.batch_size = batch_size
        self.seed = seed
        self.name = name
        self.epoch = 0
        self._it = iter(())

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        if len(self.part) == 0:
            raise StopIteration
        while True:
            try:
                return next(self._it)
            except StopIteration:
                self._it = epoch_batches(self.part, self.batch_size, self.seed, self.epoch, self.name)
                self.epoch += 1
