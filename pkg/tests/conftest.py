import numpy as np
import pytest
import torch

from hst.config import DecoderConfig, EncoderConfig, ModelConfig, SsmConfig, TrainConfig

torch.set_num_threads(1)

FD_STEP = 1e-4
FD_RTOL = 1e-4


def central_fd(f, tensor: torch.Tensor, step: float = FD_STEP) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``tensor`` (perturbed in place)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = float(f())
        flat[i] = orig - step
        down = float(f())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    """Norm-wise relative error, guarded for all-zero gradients."""
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def check_grads(f, params: dict[str, torch.Tensor], rtol: float = FD_RTOL) -> dict[str, float]:
    for p in params.values():
        p.grad = None
    f().backward()
    errs = {}
    with torch.no_grad():
        for name, p in params.items():
            fd = central_fd(f, p)
            errs[name] = rel_err(p.grad, fd)
    bad = {k: v for k, v in errs.items() if v > rtol}
    assert not bad, f"gradient mismatch: {bad}"
    return errs


def small_model_config(backend: str = "SelectiveSSM", hidden: int = 8, window: int = 8, rois: int = 4,
                       **quant) -> ModelConfig:
    from hst.config import QuantizerConfig
    return ModelConfig(
        n_rois=rois, window=window,
        encoder=EncoderConfig(layers=1, heads=2, ff_mult=2),
        ssm=SsmConfig(backend=backend, hidden=hidden, layers=2),
        quantizer=QuantizerConfig(**{"state_codes": 4, "transition_codes": 4, **quant}),
        decoder=DecoderConfig(layers=1, heads=2, ff_mult=2),
    )


@pytest.fixture
def tiny_cfg() -> TrainConfig:
    return TrainConfig(phase1_steps=5, phase2_epochs=2, batch_size=4, seed=0, model=small_model_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
