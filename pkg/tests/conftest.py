import numpy as np
import pytest

from cctl.config import ExperimentConfig
from cctl.data import SynthConfig, generate_synthetic
from cctl.features import Batch, FeatureSchema, Field, SequenceField


def make_schema(domain="target", users=7, items=6, contexts=3, dim=3, max_len=4, extra=0):
    fields = [Field("user_id", users, "user"), Field("user_segment", 4, "user")]
    fields += [Field(f"src_extra_{j}", 5, "user") for j in range(extra)]
    fields += [Field("item_id", items, "item"), Field("item_category", 3, "item"), Field("context", contexts, "context")]
    return FeatureSchema(domain, tuple(fields), dim, SequenceField("behavior_seq", "item_id", max_len))


def random_batch(schema, n, rng, keys=None):
    ids = np.stack([rng.integers(0, f.vocab_size, n) for f in schema.fields], axis=1)
    vocab = schema.get("item_id").vocab_size
    seq = np.full((n, schema.max_len), -1, dtype=np.int64)
    seq_len = rng.integers(0, schema.max_len + 1, n)
    for i, k in enumerate(seq_len):
        seq[i, :k] = rng.integers(0, vocab, k)
    labels = rng.integers(0, 2, n).astype(float)
    user_key = np.asarray(keys, dtype=np.int64) if keys is not None else None
    return Batch(schema.domain, ids.astype(np.int64), seq, seq_len.astype(np.int64), labels, user_key)


TINY_SYNTH = dict(n_users_source=60, n_users_target=40, n_items_source=50, n_items_target=30,
                  samples_source=1500, samples_target=800, latent_dim=4, seq_max_len=5)


def tiny_config(**changes) -> ExperimentConfig:
    base = ExperimentConfig(seeds=[0])
    base.data.synthetic = SynthConfig(**TINY_SYNTH)
    base.model.tower_widths = [16, 8, 1]
    base.model.selector_widths = [8, 1]
    base.model.san_hidden = [4]
    base.train.epochs = 2
    base.train.batch_size_target = 32
    base.train.batch_size_source = 32
    base.cctl.sync_interval = 10
    base.cctl.update_interval = 5
    return base.replace(**changes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(SynthConfig(**TINY_SYNTH))


# Acceptance criteria append "(label, passed, detail)" here; the lines are printed after the run.
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{label}: {'PASS' if passed else 'FAIL'}  {detail}")
