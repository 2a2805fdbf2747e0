"""Shared builders for the gradient and invariant tests."""

import copy

import numpy as np

from synseg import autodiff as ad
from synseg.fss import ModelConfig, SynSegModel, build_synergy_pair, decode_activation, film_fuse, project
from synseg.mccl import LossWeights, image_losses, weighted_total


def tiny_model(seed: int, channels: int = 8, text_dim: int = 8, dtype=np.float64, jitter: float = 0.3):
    """1-block decoder at C_v = d = 8, every tensor (FiLM heads included) perturbed off its init."""
    model = SynSegModel(channels, text_dim, ModelConfig(depth=1, heads=2, ffn_mult=2, seed=seed, head_std=2.0))
    r = np.random.default_rng(seed + 1000)
    for p in model.parameters():
        p.data = (p.data + jitter * r.standard_normal(p.shape)).astype(dtype)
        p.grad = np.zeros_like(p.data)
    return model


def float64_twin(model):
    twin = copy.deepcopy(model)
    return twin.astype(np.float64)


def tiny_inputs(seed: int, n_cats: int = 2, grid: int = 2, channels: int = 8, text_dim: int = 8, dtype=np.float64):
    r = np.random.default_rng(seed + 2000)
    tokens = r.standard_normal((grid * grid, channels)).astype(dtype)
    text = r.standard_normal((n_cats, text_dim)).astype(dtype)
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    return tokens, text


def forward_terms(model, tokens, text, grid: int = 2):
    cond = film_fuse(ad.Tensor(tokens), ad.Tensor(text), model.film)
    maps = decode_activation(cond, model.decoder, (grid, grid))
    pair = build_synergy_pair(maps.activation, project(cond, model.projector))
    return image_losses(pair.foreground, pair.background, text)


def total_of(model, tokens, text, weights=LossWeights(), term=None, grid: int = 2):
    terms = forward_terms(model, tokens, text, grid)
    return terms[term] if term else weighted_total(terms, weights)


MODULES = ("film", "decoder", "projector")
FUNCS = ("align", "cont", "back", "sep", "total")


def all_losses(model, tokens, text, weights=LossWeights(), grid: int = 2):
    terms = forward_terms(model, tokens, text, grid)
    return {**terms, "total": weighted_total(terms, weights)}


def module_grad_errors(model, losses_fn, eps: float = 1e-3, reference=None):
    """Norm-wise relative error of backward() vs central differences, per loss and per module.

    ``losses_fn()`` returns a dict of scalar losses; one finite-difference
    sweep over every trainable coordinate serves all of them. With
    ``reference=(ref_model, ref_losses_fn)`` the differences are taken on that
    copy (e.g. a float64 twin of a float32 model) instead.
    """
    names = [n for n, p in model.named_parameters() if p.trainable]
    params = dict(model.named_parameters())
    analytic = {}
    for key in losses_fn():
        model.zero_grad()
        ad.backward(losses_fn()[key])
        analytic[key] = {n: params[n].grad.copy() for n in names}
    if reference is not None:
        model, losses_fn = reference
        params = dict(model.named_parameters())
    numeric = {key: {} for key in analytic}
    for n in names:
        p = params[n]
        flat = p.data.reshape(-1)
        grads = {key: np.zeros(flat.size) for key in analytic}
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = {k: v.item() for k, v in losses_fn().items()}
            flat[i] = orig - eps
            down = {k: v.item() for k, v in losses_fn().items()}
            flat[i] = orig
            for key in grads:
                grads[key][i] = (up[key] - down[key]) / (2 * eps)
        for key in grads:
            numeric[key][n] = grads[key].reshape(p.shape)
    errors = {}
    for key in analytic:
        for m in MODULES:
            members = [n for n in names if n.startswith(m + ".")]
            a = np.concatenate([analytic[key][n].ravel() for n in members])
            b = np.concatenate([numeric[key][n].ravel() for n in members])
            errors[(key, m)] = ad.relative_error(a, b)
    return errors, analytic


def clip_margin(model, tokens, text, grid: int = 2) -> float:
    """Distance of the nearest loss cosine to a clip bound (diagonals excluded).

    Central differences are meaningless where a perturbation can carry a
    cosine across the clamp, so gradient checks skip such instances.
    """
    cond = film_fuse(ad.Tensor(tokens), ad.Tensor(text), model.film)
    maps = decode_activation(cond, model.decoder, (grid, grid))
    pair = build_synergy_pair(maps.activation, project(cond, model.projector))
    F, Fb, T = (ad.Tensor(x.data if hasattr(x, "data") else x) for x in (pair.foreground, pair.background, text))
    cos = [ad.cosine_rows(F, T).data, ad.cosine_rows(F, Fb).data]
    off = ~np.eye(F.shape[0], dtype=bool)
    cos += [ad.cosine_matrix(F, F).data[off], ad.cosine_matrix(Fb, Fb).data[off]]
    c = np.concatenate([x.ravel() for x in cos])
    return float(np.min(np.minimum(np.abs(c - ad.COS_MIN), np.abs(c - ad.COS_MAX))))


KINK_MARGIN = 1e-3  # same order as the finite-difference step
