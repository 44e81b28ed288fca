import torch


def make_rng(seed=0):
    return torch.Generator().manual_seed(seed)


def randomize(module, seed=0, scale=0.5):
    """Overwrite every parameter with U(-scale, scale) float64 values."""
    module.double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * scale)
    return module


def rand(*shape, seed=0):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 2 - 1
