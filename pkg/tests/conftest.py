import pytest
import torch

from rtaformer.backbone import BackbonePreset, StageConfig


def finite_difference_gradient(f, x, step=1e-4):
    """Central-difference gradient of scalar-valued f w.r.t. tensor x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def assert_gradient_matches(f, x, rel_tol, step=1e-4):
    """Autograd gradient of f at x vs central differences, max-norm relative."""
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    analytic = x.grad.detach().clone()
    with torch.no_grad():
        numeric = finite_difference_gradient(f, x.detach().clone(), step=step)
    scale = max(numeric.abs().max().item(), 1e-8)
    err = (analytic - numeric).abs().max().item() / scale
    assert err <= rel_tol, f"gradient mismatch: rel err {err:.3e} > {rel_tol}"
    return err


def micro_preset(name="MICRO"):
    """Smallest legal preset for randomized block sweeps."""
    dims = (8, 8, 8, 16)
    heads = (1, 2, 4, 8)
    stages = tuple(
        StageConfig(d, h, 1, sr, 4 if i == 0 else 2, 2)
        for i, (d, h, sr) in enumerate(zip(dims, heads, (4, 2, 2, 1)))
    )
    return BackbonePreset(name, stages, rta_embed_dims=dims)


@pytest.fixture(scope="session")
def toy_samples():
    from rtaformer.data import make_toy_set

    return make_toy_set(4, 64, seed=7)


@pytest.fixture(scope="session")
def tiny_model():
    from rtaformer.model import ModelConfig, build

    return build(ModelConfig(preset="TINY", variant="hfs+rta", image_size=64), seed=3)
