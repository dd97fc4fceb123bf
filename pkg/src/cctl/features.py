"""Feature schemas, per-domain embedding tables, and the user/item/context/seq token layout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import GradientBundle, ShapeError, component_rng

GROUPS = ("user", "item", "context")
TOKENS = GROUPS + ("seq",)
DOMAINS = ("source", "target")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    name: str
    vocab_size: int
    group: str

    def __post_init__(self):
        if self.group not in GROUPS:
            raise SchemaError(f"field {self.name!r}: unknown token group {self.group!r}")
        if self.vocab_size < 1:
            raise SchemaError(f"field {self.name!r}: vocab_size must be positive")


@dataclass(frozen=True)
class SequenceField:
    name: str
    item_field: str
    max_len: int


@dataclass(frozen=True)
class FeatureSchema:
    """Field layout of one domain. Vocab sizes include the reserved OOV id 0."""

    domain: str
    fields: tuple
    embed_dim: int = 8
    sequence: SequenceField | None = None
    user_id_field: str = "user_id"
    item_id_field: str = "item_id"

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        if self.domain not in DOMAINS:
            raise SchemaError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.embed_dim <= 0:
            raise SchemaError("embed_dim must be positive")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in {names}")
        if self.sequence is not None:
            if self.sequence.item_field not in names:
                raise SchemaError(f"sequence field aliases unknown item field {self.sequence.item_field!r}")
            if self.sequence.max_len < 0:
                raise SchemaError("sequence max_len must be >= 0")

    @property
    def field_names(self) -> list[str]:
        return [f.name for f in self.fields]

    def index(self, name: str) -> int:
        return self.field_names.index(name)

    def get(self, name: str) -> Field:
        return self.fields[self.index(name)]

    def group_fields(self, group: str) -> list[int]:
        return [i for i, f in enumerate(self.fields) if f.group == group]

    def group_width(self, group: str) -> int:
        if group == "seq":
            return self.embed_dim
        return len(self.group_fields(group)) * self.embed_dim

    @property
    def input_width(self) -> int:
        return sum(self.group_width(g) for g in TOKENS)

    def offsets(self) -> dict[str, slice]:
        """Slice of each token inside the concatenated tower input."""
        out, start = {}, 0
        for g in TOKENS:
            w = self.group_width(g)
            out[g] = slice(start, start + w)
            start += w
        return out

    @property
    def order(self) -> list[int]:
        """Field indices in concatenation order (grouped, schema order within a group)."""
        return [i for g in GROUPS for i in self.group_fields(g)]

    @property
    def max_len(self) -> int:
        return self.sequence.max_len if self.sequence else 0

    def same_layout(self, other: "FeatureSchema") -> bool:
        """True when both schemas declare the same fields, groups, and dimension."""
        return (
            [(f.name, f.group) for f in self.fields] == [(f.name, f.group) for f in other.fields]
            and self.embed_dim == other.embed_dim
        )

    def with_domain(self, domain: str) -> "FeatureSchema":
        return FeatureSchema(domain, self.fields, self.embed_dim, self.sequence, self.user_id_field, self.item_id_field)

    def with_embed_dim(self, dim: int) -> "FeatureSchema":
        return FeatureSchema(self.domain, self.fields, dim, self.sequence, self.user_id_field, self.item_id_field)

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "embed_dim": self.embed_dim,
            "fields": [{"name": f.name, "vocab_size": f.vocab_size, "group": f.group} for f in self.fields],
            "sequence": None if self.sequence is None else {
                "name": self.sequence.name, "item_field": self.sequence.item_field, "max_len": self.sequence.max_len,
            },
            "user_id_field": self.user_id_field,
            "item_id_field": self.item_id_field,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        seq = d.get("sequence")
        return cls(
            domain=d["domain"],
            fields=tuple(Field(f["name"], int(f["vocab_size"]), f["group"]) for f in d["fields"]),
            embed_dim=int(d.get("embed_dim", 8)),
            sequence=None if seq is None else SequenceField(seq["name"], seq["item_field"], int(seq["max_len"])),
            user_id_field=d.get("user_id_field", "user_id"),
            item_id_field=d.get("item_id_field", "item_id"),
        )


@dataclass
class Sample:
    domain: str
    feature_ids: tuple
    sequence_ids: tuple = ()
    label: int = 0


@dataclass
class TokenVectors:
    user: np.ndarray
    item: np.ndarray
    context: np.ndarray
    seq: np.ndarray

    def __getitem__(self, token: str) -> np.ndarray:
        return getattr(self, token)


class EmbeddingTables:
    """One table per field of a domain. The sequence pools rows of the item-id table."""

    def __init__(self, schema: FeatureSchema, tables: dict[str, np.ndarray]):
        for f in schema.fields:
            t = tables.get(f.name)
            if t is None or t.shape != (f.vocab_size, schema.embed_dim):
                raise ShapeError(f"table {f.name!r} must have shape {(f.vocab_size, schema.embed_dim)}")
        self.schema = schema
        self.tables = {f.name: np.ascontiguousarray(tables[f.name], dtype=np.float64) for f in schema.fields}
        self.version = 0

    @classmethod
    def init(cls, schema: FeatureSchema, seed: int, prefix: str, scale: float = 0.01) -> "EmbeddingTables":
        tables = {}
        for f in schema.fields:
            rng = component_rng(seed, f"{prefix}/{f.name}")
            tables[f.name] = rng.uniform(-scale, scale, size=(f.vocab_size, schema.embed_dim))
        return cls(schema, tables)

    @classmethod
    def zeros(cls, schema: FeatureSchema) -> "EmbeddingTables":
        return cls(schema, {f.name: np.zeros((f.vocab_size, schema.embed_dim)) for f in schema.fields})

    @property
    def seq_table(self) -> np.ndarray | None:
        seq = self.schema.sequence
        return None if seq is None else self.tables[seq.item_field]

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + name: t for name, t in self.tables.items()}

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "EmbeddingTables":
        return EmbeddingTables(self.schema, {k: v.copy() for k, v in self.tables.items()})

    def copy_from(self, other: "EmbeddingTables") -> None:
        for name, t in self.tables.items():
            np.copyto(t, other.tables[name])
        self.bump()


# --------------------------------------------------------------------------- single sample


def _check_id(schema: FeatureSchema, name: str, idx: int) -> None:
    vocab = schema.get(name).vocab_size
    if not 0 <= idx < vocab:
        raise IndexError(f"id {idx} out of range for field {name!r} (vocab {vocab})")


def pool_sequence(table: np.ndarray, ids: Sequence[int]) -> np.ndarray:
    """Mean of the embedding rows of ``ids``; zeros for an empty sequence."""
    ids = np.asarray(list(ids), dtype=np.int64)
    if len(ids) == 0:
        return np.zeros(table.shape[1])
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise IndexError(f"sequence id out of range (table has {table.shape[0]} rows)")
    return table[ids].sum(axis=0) / len(ids)


def embed_sample(tables: EmbeddingTables, schema: FeatureSchema, sample: Sample) -> TokenVectors:
    if len(sample.feature_ids) != len(schema.fields):
        raise SchemaError(f"sample has {len(sample.feature_ids)} ids, schema has {len(schema.fields)} fields")
    parts = {}
    for g in GROUPS:
        rows = []
        for i in schema.group_fields(g):
            name = schema.fields[i].name
            _check_id(schema, name, sample.feature_ids[i])
            rows.append(tables.tables[name][sample.feature_ids[i]])
        parts[g] = np.concatenate(rows) if rows else np.zeros(0)
    seq_ids = list(sample.sequence_ids)
    if schema.sequence is None:
        seq = np.zeros(schema.embed_dim)
    else:
        seq_ids = seq_ids[max(0, len(seq_ids) - schema.sequence.max_len):] if schema.sequence.max_len else []
        for s in seq_ids:
            _check_id(schema, schema.sequence.item_field, s)
        seq = pool_sequence(tables.seq_table, seq_ids)
    return TokenVectors(parts["user"], parts["item"], parts["context"], seq)


def concat_tokens(tokens: TokenVectors) -> np.ndarray:
    """user || item || context || seq."""
    return np.concatenate([tokens.user, tokens.item, tokens.context, tokens.seq])


# --------------------------------------------------------------------------- batches


@dataclass
class Batch:
    """Columnar batch of samples from one domain.

    ``seq`` is right-padded with -1; ``user_key``/``item_key`` are raw join keys (-1 when the
    entity exists in one domain only).
    """

    domain: str
    ids: np.ndarray
    seq: np.ndarray
    seq_len: np.ndarray
    labels: np.ndarray
    user_key: np.ndarray = field(default=None)
    item_key: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.labels)
        if self.user_key is None:
            self.user_key = np.full(n, -1, dtype=np.int64)
        if self.item_key is None:
            self.item_key = np.full(n, -1, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Batch":
        return Batch(self.domain, self.ids[idx], self.seq[idx], self.seq_len[idx], self.labels[idx],
                     self.user_key[idx], self.item_key[idx])

    def sample(self, i: int) -> Sample:
        return Sample(self.domain, tuple(int(v) for v in self.ids[i]),
                      tuple(int(v) for v in self.seq[i, :self.seq_len[i]]), int(self.labels[i]))

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], max_len: int, domain: str | None = None) -> "Batch":
        n = len(samples)
        nf = len(samples[0].feature_ids) if n else 0
        ids = np.array([s.feature_ids for s in samples], dtype=np.int64).reshape(n, nf)
        seq = np.full((n, max_len), -1, dtype=np.int64)
        seq_len = np.zeros(n, dtype=np.int64)
        for i, s in enumerate(samples):
            tail = list(s.sequence_ids)[max(0, len(s.sequence_ids) - max_len):] if max_len else []
            seq[i, :len(tail)] = tail
            seq_len[i] = len(tail)
        labels = np.array([s.label for s in samples], dtype=np.float64)
        return cls(domain or (samples[0].domain if n else "target"), ids, seq, seq_len, labels)

    @classmethod
    def empty(cls, schema: FeatureSchema) -> "Batch":
        return cls(schema.domain, np.zeros((0, len(schema.fields)), dtype=np.int64),
                   np.zeros((0, schema.max_len), dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))


def validate_batch(schema: FeatureSchema, batch: Batch) -> None:
    if batch.ids.shape[1] != len(schema.fields):
        raise SchemaError(f"batch has {batch.ids.shape[1]} id columns, schema has {len(schema.fields)} fields")
    for i, f in enumerate(schema.fields):
        col = batch.ids[:, i]
        if len(col) and (col.min() < 0 or col.max() >= f.vocab_size):
            raise IndexError(f"id out of range for field {f.name!r} (vocab {f.vocab_size})")
    if schema.sequence is not None and batch.seq.size:
        vocab = schema.get(schema.sequence.item_field).vocab_size
        if batch.seq.max() >= vocab:
            raise IndexError(f"sequence id out of range for field {schema.sequence.item_field!r}")


def pool_batch(table: np.ndarray | None, batch: Batch, dim: int) -> np.ndarray:
    n = len(batch)
    if table is None or batch.seq.shape[1] == 0:
        return np.zeros((n, dim))
    mask = batch.seq >= 0
    gathered = table[np.where(mask, batch.seq, 0)] * mask[..., None]
    return gathered.sum(axis=1) / np.maximum(batch.seq_len, 1)[:, None]


def embed_groups(tables: EmbeddingTables, batch: Batch) -> dict[str, np.ndarray]:
    """Per-token matrices (n, width) for a batch."""
    schema = tables.schema
    n = len(batch)
    out = {}
    for g in GROUPS:
        cols = [tables.tables[schema.fields[i].name][batch.ids[:, i]] for i in schema.group_fields(g)]
        out[g] = np.concatenate(cols, axis=1) if cols else np.zeros((n, 0))
    out["seq"] = pool_batch(tables.seq_table, batch, schema.embed_dim)
    return out


def embed_batch(tables: EmbeddingTables, batch: Batch) -> np.ndarray:
    groups = embed_groups(tables, batch)
    return np.concatenate([groups[g] for g in TOKENS], axis=1)


def pool_backward(bundle: GradientBundle, name: str, batch: Batch, grad_seq: np.ndarray) -> None:
    if batch.seq.shape[1] == 0:
        return
    mask = batch.seq >= 0
    scaled = grad_seq / np.maximum(batch.seq_len, 1)[:, None]
    owner = np.nonzero(mask)[0]
    bundle.add_rows(name, batch.seq[mask], scaled[owner])


def embed_backward(tables: EmbeddingTables, batch: Batch, grad_tokens: dict[str, np.ndarray],
                   bundle: GradientBundle, prefix: str) -> None:
    """Scatter per-token gradients back onto the touched embedding rows."""
    schema = tables.schema
    d = schema.embed_dim
    for g in GROUPS:
        grad = grad_tokens[g]
        for j, i in enumerate(schema.group_fields(g)):
            bundle.add_rows(prefix + schema.fields[i].name, batch.ids[:, i], grad[:, j * d:(j + 1) * d])
    if schema.sequence is not None:
        pool_backward(bundle, prefix + schema.sequence.item_field, batch, grad_tokens["seq"])


def split_tokens(schema: FeatureSchema, x: np.ndarray) -> dict[str, np.ndarray]:
    offs = schema.offsets()
    return {g: x[:, offs[g]] for g in TOKENS}
