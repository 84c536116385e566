import numpy as np
import pytest

from tppflow.models import KINDS, ModelKind, build_model
from tppflow.seqdata import EventSequence, PaddedBatch, pad_batch


def make_model(kind: str, horizon: float = 10.0, seed: int = 0, noise: float = 0.4,
               rate_init: float = 1.0, n_knots: int = 8, block_size: int = 4,
               n_blocks: int = 2):
    """Identity model with Gaussian-perturbed parameters (any vector is valid).

    Block slices are perturbed more gently: they act multiplicatively in
    logit space, where float64 sigmoids run out of precision near +-30, so
    wild random blocks would destroy invertibility that trained models keep.
    """
    model = build_model(ModelKind(kind, horizon, n_knots=n_knots, block_size=block_size,
                                  n_blocks=n_blocks, rate_init=rate_init))
    if noise:
        rng = np.random.default_rng(seed)
        model.params.values += rng.normal(0.0, noise, model.params.size)
        for name in model.params.names:
            if name.startswith("b"):
                sl = model.params.slices[name]
                model.params.values[sl] *= 0.4
    return model


def random_batch(rng, batch_size: int, horizon: float = 10.0, min_events: int = 5,
                 max_events: int = 25) -> PaddedBatch:
    """Padded batch with per-row uniform event counts."""
    seqs = []
    for _ in range(batch_size):
        n = int(rng.integers(min_events, max_events + 1))
        seqs.append(EventSequence(np.sort(rng.uniform(0, horizon, n)), horizon))
    return pad_batch(seqs)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ALL_KINDS = KINDS
