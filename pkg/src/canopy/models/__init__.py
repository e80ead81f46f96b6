from .kpconv import (KPConvConfig, KPCNN, kernel_influence, kpconv_apply, rigid_kernel_points)
from .senet import SENetConfig, SENet, SEBottleneck, senet_input, se_block_forward, senet50_forward
from .pointnet import PointNetConfig, PointNet, pointnet_forward
from .config import config_to_text, config_from_text

MODEL_KINDS = {"minkowski": (SENet, SENetConfig), "kpconv": (KPCNN, KPConvConfig),
               "pointnet": (PointNet, PointNetConfig)}
CONFIG_CLASSES = {cls.__name__: cls for _, cls in MODEL_KINDS.values()}


def build_model(kind, config=None, seed=0):
    try:
        model_cls, cfg_cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}") from None
    return model_cls(config or cfg_cls(), seed=seed)


def tiny_config(kind, width=8):
    return MODEL_KINDS[kind][1].tiny(width)


def forward_clouds(model, clouds):
    """Run any of the three models on a list of normalised clouds -> (B, 2) Tensor."""
    if isinstance(model, SENet):
        return model(senet_input(clouds, model.config.grid_m))
    return model(clouds)
