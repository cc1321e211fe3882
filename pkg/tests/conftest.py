import numpy as np
import pytest
import torch

from collabdiff import nnkit
from collabdiff.collab import CollabEnsemble, Collaborator, attach_diffusers
from collabdiff.diffcore import make_linear_schedule
from collabdiff.unimodal import EpsModel, ModelConfig

SMALL = ModelConfig(resolution=16, base_channels=8)


def randomize_head(module: torch.nn.Module, seed: int, std: float = 0.1) -> None:
    """Give a zero-initialized output layer random weights so predictions are non-trivial."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.unet.out.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * std)


def make_ensemble(modalities=("mask", "attribute"), diffusers=True, seed=0, head_std=0.1):
    models = []
    for i, m in enumerate(modalities):
        model = nnkit.seeded_init(lambda m=m: EpsModel(m, SMALL), seed + i)
        randomize_head(model, seed + 10 + i)
        model.eval()
        models.append(model)
    ens = CollabEnsemble([Collaborator(m) for m in models], make_linear_schedule())
    if diffusers:
        attach_diffusers(ens, 4, seed + 20)
        for k, c in enumerate(ens.collaborators):
            randomize_head(c.diffuser, seed + 30 + k, std=head_std)
            c.diffuser.eval()
    return ens


def conditions(n=2, seed=0):
    from collabdiff.diffcore import RngStream
    from collabdiff.toyface import generate_dataset

    ds = generate_dataset(n, 16, RngStream(seed))
    return {"mask": ds.masks, "attribute": ds.attributes}


@pytest.fixture
def ensemble():
    return make_ensemble()


def pytest_configure(config):
    np.set_printoptions(precision=4, suppress=True)


@pytest.fixture(scope="session")
def fast_run(tmp_path_factory):
    """One end-to-end fast-profile experiment shared by the acceptance and post-training checks.

    Set ``COLLAB_FAST_RUN_DIR`` to keep the artifacts somewhere other than pytest's temp dir.
    """
    import os
    import time

    from collabdiff.evalcli.config import fast_profile
    from collabdiff.evalcli.experiment import run_experiment

    out = os.environ.get("COLLAB_FAST_RUN_DIR") or tmp_path_factory.mktemp("fast_run")
    t0 = time.time()
    result = run_experiment(fast_profile(), out)
    result.wall_seconds = time.time() - t0
    return result
