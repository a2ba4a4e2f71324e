"""Weight archive IO.

An archive is a flat mapping of dotted parameter names to tensors plus a
manifest dict (preset name, channel width, optionally the full model
config). Files carry the format tag "rtaformer-weights-v1" and loading
refuses anything else.
"""

import torch

from .exceptions import ConfigurationError

WEIGHT_FORMAT_TAG = "rtaformer-weights-v1"


def save_weight_archive(path, tensors, manifest):
    payload = {
        "format": WEIGHT_FORMAT_TAG,
        "manifest": dict(manifest),
        "tensors": {k: v.detach().cpu() for k, v in tensors.items()},
    }
    torch.save(payload, path)


def load_weight_archive(path):
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != WEIGHT_FORMAT_TAG:
        raise ConfigurationError(
            f"{path}: not a {WEIGHT_FORMAT_TAG} archive "
            f"(format={payload.get('format') if isinstance(payload, dict) else type(payload)})"
        )
    return payload["manifest"], payload["tensors"]
