"""Saving and loading model parameters as DSAV files."""

from __future__ import annotations

import numpy as np

from . import formats
from .tensor import Tensor
from .vit import ViTConfig, param_shapes


def encode_model(params: dict[str, Tensor], cfg: ViTConfig, meta: dict | None = None) -> bytes:
    config = {"vit": cfg.to_dict()}
    if meta:
        config["meta"] = meta
    return formats.encode_checkpoint({k: v.data for k, v in params.items()}, config)


def decode_model(buf: bytes, what: str = "checkpoint") -> tuple[dict[str, Tensor], ViTConfig, dict]:
    tensors, config = formats.decode_checkpoint(buf, what)
    if "vit" not in config:
        raise formats.FormatError(f"{what}: config has no 'vit' section")
    cfg = ViTConfig.from_dict(config["vit"])
    expected = param_shapes(cfg)
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise formats.FormatError(f"{what}: tensor names do not match config (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise formats.FormatError(f"{what}: {name} has shape {tensors[name].shape}, expected {shape}")
    params = {name: Tensor(tensors[name], requires_grad=True) for name in expected}
    return params, cfg, config.get("meta", {})


def save_model(path, params: dict[str, Tensor], cfg: ViTConfig, meta: dict | None = None) -> None:
    formats.write_bytes(path, encode_model(params, cfg, meta))


def load_model(path) -> tuple[dict[str, Tensor], ViTConfig, dict]:
    return decode_model(formats.read_bytes(path), what=str(path))


def round_to_f32(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """The parameters as a saved-and-reloaded checkpoint would hold them."""
    return {k: Tensor(v.data.astype(np.float32).astype(np.float64), requires_grad=v.requires_grad)
            for k, v in params.items()}
