import numpy as np
import torch


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def fd_gradcheck(loss_fn, params, n_entries=12, h=1e-6, seed=0):
    """Compare autograd against central differences on a random subset of
    parameter entries. Returns the relative error of the gathered vectors."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    g = np.random.default_rng(seed)
    analytic, numeric = [], []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            idx = g.choice(flat.numel(), size=min(n_entries, flat.numel()), replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
                analytic.append(p.grad.view(-1)[i].item())
    return rel_err(analytic, numeric), np.asarray(analytic)


def tiny_model_config(**kw):
    from promptseg3d.model import ModelConfig

    base = dict(c=8, k=4, d_t=16, d_k=8, text_width=16, image_widths=(4, 8, 8), label_widths=(4, 8),
                denoiser_widths=(8, 16), time_dim=16)
    base.update(kw)
    return ModelConfig(**base)
