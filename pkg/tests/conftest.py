import numpy as np
import pytest

from vqapc.model import (
    ModelConfig,
    VqApcModel,
    apc_forward,
    sample_gumbel,
)


def tiny_config(vq_layers=(), **kwargs):
    defaults = dict(
        input_dim=3, num_layers=2, hidden_dim=4, vq_layers=vq_layers,
        codebook_size=5, shift=1, tau=0.1,
    )
    defaults.update(kwargs)
    return ModelConfig(**defaults)


def tiny_model(vq_layers=(), seed=0, dtype=np.float64, **kwargs):
    return VqApcModel(tiny_config(vq_layers, **kwargs), seed=seed, dtype=dtype)


def frozen_noise_away_from_ties(model, x, scale=6.0, seed=0, min_pmax=1 - 1e-8):
    """Frozen Gumbel noise for every VQ layer, rejection-sampled so no
    timestep sits near an argmax tie (where the hard and soft paths
    genuinely diverge, analogous to the L1 kink exclusion)."""
    B = 1 if np.asarray(x).ndim == 2 else np.asarray(x).shape[0]
    T = np.asarray(x).shape[-2]
    V = model.config.codebook_size
    for attempt in range(500):
        rng = np.random.default_rng([seed, attempt])
        noise = {
            layer: scale * sample_gumbel(rng, (B, T, V), dtype=np.float64)
            for layer in model.quantizers
        }
        trace = apc_forward(x, model, mode="train", noise=noise)
        if all(p.data.max(axis=-1).min() > min_pmax for p in trace.probs.values()):
            return noise
    raise AssertionError("could not find tie-free Gumbel noise")


@pytest.fixture(scope="session")
def synth_corpus():
    from vqapc.synthetic import SynthConfig, generate_corpus

    return generate_corpus(SynthConfig(seed=0))
