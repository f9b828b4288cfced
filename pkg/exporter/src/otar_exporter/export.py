"""Export conv weights from a torch model into an `.otar` archive."""

import json

import torch
import torch.nn as nn

from . import otar

MAPPING_FORMAT = "comprank-mapping"


def discover_conv_layers(model):
    """(module_path, module) pairs for exportable Conv2d layers, plus a list
    of skipped layers with reasons."""
    exportable = []
    skipped = []
    for path, module in model.named_modules():
        if not isinstance(module, nn.Conv2d):
            continue
        if module.groups != 1:
            skipped.append((path, f"grouped convolution (groups={module.groups})"))
        elif module.dilation != (1, 1):
            skipped.append((path, f"dilated convolution (dilation={module.dilation})"))
        else:
            exportable.append((path, module))
    return exportable, skipped


def export_model(model, archive_path, mapping_path):
    """Write every plain conv weight as float32 in (O, C, kH, kW) order.

    Returns (mapping dict, list of (path, reason) skipped layers).
    """
    exportable, skipped = discover_conv_layers(model)
    tensors = []
    layers = []
    for path, module in exportable:
        name = f"{path}.weight"
        weight = module.weight.detach().cpu().numpy()
        tensors.append((name, weight))
        layers.append({
            "archive_name": name,
            "module_path": path,
            "shape": list(weight.shape),
        })
    otar.save(archive_path, tensors)
    mapping = {
        "format": MAPPING_FORMAT,
        "version": 1,
        "layers": layers,
        "skipped": [{"module_path": p, "reason": r} for p, r in skipped],
    }
    with open(mapping_path, "w", encoding="utf-8") as fh:
        json.dump(mapping, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return mapping, skipped


def export_checkpoint(checkpoint_path, arch, archive_path, mapping_path,
                      **arch_kwargs):
    """Load a state-dict checkpoint into a registered architecture and
    export its conv weights."""
    from .models import build
    model = build(arch, **arch_kwargs)
    state = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, *export_model(model, archive_path, mapping_path)


def read_mapping(mapping_path):
    with open(mapping_path, "r", encoding="utf-8") as fh:
        mapping = json.load(fh)
    if mapping.get("format") != MAPPING_FORMAT:
        raise ValueError(f"{mapping_path}: not a {MAPPING_FORMAT} file")
    return mapping
