import numpy as np
import pytest

from viapt.backbone import ViTConfig, init_backbone
from viapt.numerics import RngState
from viapt.prompt_engine import PromptConfig
from viapt.training import build_model


@pytest.fixture(scope="session")
def tiny_vit():
    # k = 4 tokens on a 2x2 grid so instance prompts are legal
    return ViTConfig(image_side=8, patch_side=4, embed_dim=8, layers=3, heads=2,
                     mlp_ratio=2, classes=3)


@pytest.fixture(scope="session")
def desk_vit():
    return ViTConfig()


@pytest.fixture()
def tiny_backbone(tiny_vit):
    bb = init_backbone(tiny_vit, RngState(11).derive("backbone"), dtype=np.float64)
    bb.freeze()
    return bb


@pytest.fixture()
def tiny_backbone_f32(tiny_vit):
    bb = init_backbone(tiny_vit, RngState(11).derive("backbone"), dtype=np.float32)
    bb.freeze()
    return bb


def make_tiny_model(vit, backbone, mode="viapt", lam=2, m=2, seed=5):
    pcfg = PromptConfig(tokens=4, instance_tokens=lam, retained_dims=m, mode=mode)
    dtype = backbone.patch_w.data.dtype
    return build_model(vit, pcfg, RngState(seed).derive("init"), backbone, dtype=dtype)


@pytest.fixture()
def tiny_model(tiny_vit, tiny_backbone):
    return make_tiny_model(tiny_vit, tiny_backbone)
