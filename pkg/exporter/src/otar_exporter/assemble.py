"""Rebuild a runnable model with factored convolution pipelines.

CP factors become a four-stage pipeline (1x1 channel contraction, two
per-rank one-dimensional spatial convolutions, 1x1 expansion); TT cores
become a three-stage pipeline (1x1, full kH x kW at the bond ranks, 1x1).
Both reproduce the dense convolution of the reconstructed kernel; the
original layer's stride, padding, and bias carry over.
"""

import numpy as np
import torch
import torch.nn as nn

from . import otar


class MissingFactorError(KeyError):
    """The compressed archive lacks a tensor the mapping requires."""


def _to_param(array):
    return nn.Parameter(torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32)))


def _cp_pipeline(mats, conv):
    vo, vc, vh, vw = mats
    rank = vo.shape[1]
    o, c = vo.shape[0], vc.shape[0]
    k1, k2 = vh.shape[0], vw.shape[0]
    sh, sw = conv.stride
    ph, pw = conv.padding
    stage1 = nn.Conv2d(c, rank, 1, bias=False)
    stage2 = nn.Conv2d(rank, rank, (k1, 1), stride=(sh, 1), padding=(ph, 0),
                       groups=rank, bias=False)
    stage3 = nn.Conv2d(rank, rank, (1, k2), stride=(1, sw), padding=(0, pw),
                       groups=rank, bias=False)
    stage4 = nn.Conv2d(rank, o, 1, bias=conv.bias is not None)
    stage1.weight = _to_param(vc.T[:, :, None, None])
    stage2.weight = _to_param(vh.T[:, None, :, None])
    stage3.weight = _to_param(vw.T[:, None, None, :])
    stage4.weight = _to_param(vo[:, :, None, None])
    if conv.bias is not None:
        stage4.bias = nn.Parameter(conv.bias.detach().clone())
    return nn.Sequential(stage1, stage2, stage3, stage4)


def _tt_pipeline(cores, conv):
    g1, g2, g3 = cores  # (O,R1), (R1,kH,kW,R2), (C,R2)
    o, r1 = g1.shape
    c, r2 = g3.shape
    k1, k2 = g2.shape[1], g2.shape[2]
    stage1 = nn.Conv2d(c, r2, 1, bias=False)
    stage2 = nn.Conv2d(r2, r1, (k1, k2), stride=conv.stride,
                       padding=conv.padding, bias=False)
    stage3 = nn.Conv2d(r1, o, 1, bias=conv.bias is not None)
    stage1.weight = _to_param(g3.T[:, :, None, None])
    stage2.weight = _to_param(g2.transpose(0, 3, 1, 2))
    stage3.weight = _to_param(g1[:, :, None, None])
    if conv.bias is not None:
        stage3.bias = nn.Parameter(conv.bias.detach().clone())
    return nn.Sequential(stage1, stage2, stage3)


def _get_module(model, path):
    module = model
    for part in path.split("."):
        module = getattr(module, part)
    return module


def _set_module(model, path, replacement):
    parts = path.split(".")
    parent = model
    for part in parts[:-1]:
        parent = getattr(parent, part)
    setattr(parent, parts[-1], replacement)


def assemble_model(model, compressed_path, mapping):
    """Replace every mapped conv with its factored pipeline, in place.

    The archive must follow the compressed naming convention
    `layer{i}.factor{n}` (CP) or `layer{i}.core{k}` (TT), with `i` the
    layer's index in the mapping order.
    """
    tensors = otar.load(compressed_path)
    for i, layer in enumerate(mapping["layers"]):
        path = layer["module_path"]
        conv = _get_module(model, path)
        if not isinstance(conv, nn.Conv2d):
            raise ValueError(f"{path} is not a Conv2d (got {type(conv).__name__})")
        cp_names = [f"layer{i}.factor{n}" for n in range(4)]
        tt_names = [f"layer{i}.core{k}" for k in range(3)]
        if all(name in tensors for name in cp_names):
            mats = [tensors[name] for name in cp_names]
            dims = (mats[0].shape[0], mats[1].shape[0],
                    mats[2].shape[0], mats[3].shape[0])
            if list(dims) != list(layer["shape"]):
                raise ValueError(
                    f"layer {path}: factors shaped for {dims}, "
                    f"checkpoint kernel is {tuple(layer['shape'])}")
            pipeline = _cp_pipeline(mats, conv)
        elif all(name in tensors for name in tt_names):
            cores = [tensors[name] for name in tt_names]
            dims = (cores[0].shape[0], cores[2].shape[0],
                    cores[1].shape[1], cores[1].shape[2])
            if list(dims) != list(layer["shape"]):
                raise ValueError(
                    f"layer {path}: cores shaped for {dims}, "
                    f"checkpoint kernel is {tuple(layer['shape'])}")
            pipeline = _tt_pipeline(cores, conv)
        else:
            raise MissingFactorError(
                f"compressed archive has no factors for layer {i} ({path})")
        _set_module(model, path, pipeline)
    return model
