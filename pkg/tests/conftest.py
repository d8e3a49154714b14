import numpy as np
import pytest

from stylediff.config import config_from_dict
from stylediff.encoders import Vocabulary
from stylediff.synthdata import GeneratorConfig, dataset_vocab_tokens, synthesize_example


def tiny_config_dict(**extra):
    doc = {
        "seed": 11,
        "schedule": {"timesteps": 20, "beta_start": 1e-3, "beta_end": 0.2},
        "encoder": {
            "text_len": 8,
            "width": 16,
            "heads": 4,
            "text_layers": 1,
            "style_layers": 1,
            "patch_size": 4,
            "patch_stride": 2,
        },
        "denoiser": {
            "image_size": 8,
            "base_width": 8,
            "channel_mults": [1, 2],
            "res_blocks": 1,
            "attn_levels": [1],
            "heads": 4,
            "time_width": 16,
            "cond_width": 16,
            "groups": 4,
        },
        "data": {"n_train": 24, "n_test": 8, "image_size": 8, "patch_size": 4},
        "sampler": {"kind": "ddim", "steps": 5},
        "train": {
            "backbone_iters": 30,
            "style_iters": 20,
            "backbone_batch": 4,
            "style_batch": 4,
            "backbone_lr": 1e-3,
            "style_lr": 1e-3,
        },
        "eval": {"n_images": 8, "scorer_iters": 40, "scorer_batch": 8, "ablation_images": 2, "ablation_steps": 3},
    }
    for key, value in extra.items():
        section, _, leaf = key.partition(".")
        if leaf:
            doc.setdefault(section, {})[leaf] = value
        else:
            doc[key] = value
    return doc


@pytest.fixture(scope="session")
def tiny_config():
    return config_from_dict(tiny_config_dict())


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    gen = GeneratorConfig(
        image_size=tiny_config.data.image_size, patch_size=tiny_config.data.patch_size
    )
    n = tiny_config.data.n_train + tiny_config.data.n_test
    examples = [synthesize_example(gen, seed) for seed in range(n)]
    vocab = Vocabulary(dataset_vocab_tokens(gen))
    train = examples[: tiny_config.data.n_train]
    test = examples[tiny_config.data.n_train :]
    return train, test, vocab
