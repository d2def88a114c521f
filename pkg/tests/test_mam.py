import math
import warnings

import numpy as np
import pytest
import torch

from utils import numgrad
from utils.errors import ContractError, DimensionError, ParameterError
from utils.layers import init_parameters
from utils.mam import (
    MaskedAudioModel,
    MaskSpec,
    RelativePositionBias,
    apply_mask,
    batch_masks,
    info_nce_loss,
    masked_total_loss,
    pretrain,
    prototype_bce_loss,
    prototype_probabilities,
    sample_block_mask,
)
from utils.run_config import ContextConfig, EncoderConfig, MamLossConfig, MaskConfig, PretrainConfig

CFG = MamLossConfig(tau=0.1, leaky_slope=0.01)


def _node(values):
    return numgrad.as_node(values)


def _vector_with_cosine(sim):
    """Unit vector in 2-D whose cosine with [1, 0] is ``sim``."""
    return [sim, math.sqrt(1 - sim ** 2)]


@pytest.mark.parametrize("sim, expected", [(0.5, 0.5), (1.0, 0.9999546), (0.0, 4.5398e-5)])
def test_prototype_probability_values(sim, expected):
    p = prototype_probabilities(_node([_vector_with_cosine(sim)]), _node([[1.0, 0.0]]), CFG)
    assert p.item() == pytest.approx(expected, rel=1e-4)


def test_prototype_bce_at_half_probability():
    total, terms = prototype_bce_loss(_node([_vector_with_cosine(0.5)]), _node([[1.0, 0.0]]), _node([[1.0]]), CFG)
    assert total.item() == pytest.approx(math.log(2), abs=1e-4)
    assert terms.shape == (1, 1)


def test_prototype_bce_rejects_labels_outside_unit_interval():
    with pytest.raises(ContractError):
        prototype_bce_loss(_node([[1.0, 0.0]]), _node([[1.0, 0.0]]), _node([[1.5]]), CFG)


def test_info_nce_matches_log_softmax():
    rng = np.random.default_rng(0)
    pred, means = _node(rng.normal(size=(5, 4))), _node(rng.normal(size=(3, 4)))
    gamma = _node(rng.dirichlet(np.ones(3), size=5))
    loss = info_nce_loss(pred, means, gamma, CFG)
    logits = numgrad.pairwise_cosine(pred, means) / CFG.tau
    expected = -torch.log_softmax(logits, dim=-1)[torch.arange(5), gamma.argmax(dim=-1)]
    assert torch.allclose(loss, expected, atol=1e-10)


def test_block_mask_coverage_statistics():
    rng = np.random.default_rng(0)
    target = math.ceil(0.75 * 200)
    fractions = []
    for _ in range(1000):
        spec = sample_block_mask(rng, 200, 0.75, 10)
        assert target <= len(spec.masked_indices) <= target + 9
        assert np.all(np.diff(spec.masked_indices) > 0)
        assert all(0 <= start < end <= 200 for start, end in spec.blocks)
        fractions.append(spec.fraction)
    assert 0.75 <= np.mean(fractions) < 0.8


def test_block_mask_edge_cases():
    assert sample_block_mask(np.random.default_rng(0), 10, 1.0, 3).fraction == 1.0
    short = sample_block_mask(np.random.default_rng(0), 4, 0.5, 4)
    assert len(short.masked_indices) >= 2
    with pytest.raises(ParameterError):
        sample_block_mask(np.random.default_rng(0), 10, 0.0, 3)
    with pytest.raises(ParameterError):
        sample_block_mask(np.random.default_rng(0), 10, 0.5, 11)


def test_apply_mask_replaces_only_masked_frames():
    latent = _node(np.arange(12.0).reshape(4, 3))
    token = _node([-1.0, -1.0, -1.0])
    spec = MaskSpec(4, np.array([1, 3]))
    out = apply_mask(latent, spec, token)
    assert torch.equal(out[0], latent[0]) and torch.equal(out[2], latent[2])
    assert torch.equal(out[1], token) and torch.equal(out[3], token)
    with pytest.raises(ContractError):
        apply_mask(latent, MaskSpec(5, np.array([1])), token)
    with pytest.raises(ContractError):
        apply_mask(latent, np.zeros(3, dtype=bool), token)


def test_relative_position_bias_is_shift_invariant():
    rel = RelativePositionBias(2, 3)
    with torch.no_grad():
        rel.table.copy_(torch.arange(14, dtype=numgrad.DTYPE).reshape(2, 7))
    bias = rel(6)
    assert bias.shape == (2, 6, 6)
    assert bias[0, 1, 0] == bias[0, 4, 3]
    assert bias[1, 5, 0] == bias[1, 4, 0]  # distances beyond 3 share the edge entry


def _batch(seed=0, batch=2, frames=6, dim=4, k=3):
    rng = np.random.default_rng(seed)
    return (
        _node(rng.normal(size=(batch, frames, dim))),
        _node(rng.dirichlet(np.ones(k), size=(batch, frames))),
        _node(rng.normal(size=(k, dim))),
    )


def test_masked_loss_ignores_unmasked_predictions():
    pred, gamma, means = _batch()
    masks = np.zeros((2, 6), dtype=bool)
    masks[0, 1:3] = masks[1, 4] = True
    base = masked_total_loss(pred, masks, gamma, means, CFG)
    altered = pred.clone()
    altered[0, 0] = 0.0
    altered[1, 5] = 7.0
    assert masked_total_loss(altered, masks, gamma, means, CFG).total.item() == base.total.item()
    assert base.masked_frames == 3 and base.n_terms == 9
    assert base.mean.item() == pytest.approx(base.total.item() / 9)


def test_prototype_perturbation_moves_one_column():
    pred, gamma, means = _batch(1)
    _, before = prototype_bce_loss(pred[0], means, gamma[0], CFG)
    moved = means.clone()
    moved[1] += 0.3
    _, after = prototype_bce_loss(pred[0], moved, gamma[0], CFG)
    changed = ~torch.isclose(before, after, rtol=0, atol=0)
    assert changed[:, 1].all()
    assert not changed[:, [0, 2]].any()


def test_duplicate_clip_doubles_total():
    pred, gamma, means = _batch(2, batch=1)
    masks = np.ones((1, 6), dtype=bool)
    single = masked_total_loss(pred, masks, gamma, means, CFG).total
    double = masked_total_loss(torch.cat([pred, pred]), np.ones((2, 6), dtype=bool),
                               torch.cat([gamma, gamma]), means, CFG).total
    assert double.item() == pytest.approx(2 * single.item(), rel=1e-12)


def test_masked_loss_errors():
    pred, gamma, means = _batch()
    with pytest.raises(ContractError):
        masked_total_loss(pred, np.zeros((2, 6), dtype=bool), gamma, means, CFG)
    with pytest.raises(DimensionError):
        masked_total_loss(pred, np.ones((2, 5), dtype=bool), gamma, means, CFG)


def test_masked_loss_info_nce_mean_per_frame():
    pred, gamma, means = _batch(3)
    masks = np.ones((2, 6), dtype=bool)
    loss = masked_total_loss(pred, masks, gamma, means, MamLossConfig(loss_kind="info_nce"))
    assert loss.n_terms == 12


def test_batch_masks_disabled_supervises_every_frame():
    masks = batch_masks(0, (1, 0), [0, 1, 2], 20, MaskConfig(enabled=False))
    assert masks.shape == (3, 20) and masks.all()
    enabled = batch_masks(0, (1, 0), [0, 1], 20, MaskConfig(ratio=0.5, block=4))
    assert np.array_equal(enabled, batch_masks(0, (1, 0), [0, 1], 20, MaskConfig(ratio=0.5, block=4)))


def _tiny_model(predictor_dim=None):
    encoder = EncoderConfig(n_freq=8, conv_channels=[4], d_model=8, n_transformer_blocks=1, n_heads=2, n_bands=2,
                            time_downsample=4, embed_dim=8, max_time_patches=16)
    model = MaskedAudioModel(encoder, ContextConfig(n_blocks=1, n_heads=2, max_distance=8), predictor_dim)
    init_parameters(model, torch.Generator().manual_seed(0))
    return model


def test_masked_model_forward_shapes():
    model = _tiny_model(predictor_dim=5)
    features = numgrad.as_node(np.random.default_rng(0).normal(size=(2, 8, 12)))
    masks = np.zeros((2, 12), dtype=bool)
    masks[:, :4] = True
    assert model(features, masks).shape == (2, 12, 5)
    assert model(features).shape == (2, 12, 5)
    names = [g["name"] for g in model.parameter_groups(1e-3, 1e-4)]
    assert names == ["transformer", "rest"]


@pytest.mark.parametrize("enabled", [True, False])
def test_pretrain_updates_parameters_and_logs(tmp_path, enabled):
    model = _tiny_model()
    rng = np.random.default_rng(0)
    clips = [(f"c{i}", rng.normal(size=(8, 12))) for i in range(3)]
    labels = {clip_id: rng.dirichlet(np.ones(3), size=12) for clip_id, _ in clips}
    means = rng.normal(size=(3, 8))
    optimizer = numgrad.make_adamw(model.parameter_groups(1e-2, 1e-3))
    before = model.predictor.linear.weight.detach().clone()
    history = pretrain(model, clips, labels, means, optimizer, PretrainConfig(epochs=2, batch_size=2),
                       MaskConfig(enabled=enabled, ratio=0.5, block=3), CFG, seed=0,
                       log_path=str(tmp_path / "log.csv"))
    assert list(history["epoch"]) == [0, 1]
    assert np.isfinite(history["loss_mean"]).all()
    assert not torch.equal(before, model.predictor.linear.weight)
    assert (tmp_path / "log.csv").exists()
    if not enabled:
        assert (history["masked_frames"] == 36).all()


def test_pretrain_rejects_prototype_width_mismatch():
    model = _tiny_model()
    optimizer = numgrad.make_adamw(model.parameter_groups(1e-2, 1e-3))
    with pytest.raises(DimensionError):
        pretrain(model, [("c", np.zeros((8, 12)))], {"c": np.full((12, 2), 0.5)}, np.ones((2, 5)), optimizer,
                 PretrainConfig(epochs=1), MaskConfig(), CFG, seed=0)


SIMS = np.linspace(-0.95, 0.95, 39)


@pytest.mark.parametrize("target, direction", [(1.0, -1), (0.0, 1)])
def test_prototype_bce_monotone_in_similarity(target, direction):
    pred = _node([_vector_with_cosine(s) for s in SIMS])
    total, _ = prototype_bce_loss(pred, _node([[1.0, 0.0]]), _node(np.full((len(SIMS), 1), target)), CFG)
    steps = np.diff(total.numpy())
    assert (direction * steps > 0).all()


def test_info_nce_invariant_to_common_similarity_shift():
    base = np.array([0.1, 0.3, -0.2, 0.05])
    pred = _node([[1.0, 0.0]])
    gamma = _node([[0.1, 0.6, 0.2, 0.1]])
    losses = []
    for shift in (0.0, 0.4):
        means = _node([_vector_with_cosine(s + shift) for s in base])
        losses.append(info_nce_loss(pred, means, gamma, CFG).item())
    assert losses[1] == pytest.approx(losses[0], abs=1e-12)


def test_masked_loss_minimum_is_label_entropy():
    pred, _, means = _batch(5)
    masks = np.ones((2, 6), dtype=bool)
    masks[1, :2] = False
    gamma = prototype_probabilities(pred, means, CFG).detach()
    loss = masked_total_loss(pred, masks, gamma, means, CFG)
    g = gamma.numpy()[masks]
    entropy = -(g * np.log(g) + (1 - g) * np.log(1 - g)).sum()
    assert loss.total.item() == pytest.approx(entropy, rel=1e-12)
    moved = masked_total_loss(pred + 0.5, masks, gamma, means, CFG)
    assert moved.total.item() > loss.total.item()


@pytest.mark.parametrize("masked", [True, False])
def test_mask_token_gradient_only_when_frames_masked(masked):
    model = _tiny_model(predictor_dim=5)
    features = numgrad.as_node(np.random.default_rng(1).normal(size=(2, 8, 12)))
    masks = np.zeros((2, 12), dtype=bool)
    if masked:
        masks[0, 3:7] = True
    weights = numgrad.as_node(np.random.default_rng(2).normal(size=(2, 12, 5)))
    numgrad.backward((model(features, masks) * weights).sum())
    grad = model.mask_token.grad
    has_gradient = grad is not None and bool(grad.abs().sum() > 0)
    assert has_gradient == masked


def test_context_network_and_predictor_gradients():
    model = _tiny_model(predictor_dim=5)
    rng = np.random.default_rng(3)
    latent = numgrad.as_node(rng.normal(size=(6, 8)), requires_grad=True)
    assert torch.autograd.gradcheck(model.context_forward, (latent,), eps=1e-5, atol=1e-8, rtol=1e-4)
    context = numgrad.as_node(rng.normal(size=(6, 8)), requires_grad=True)
    assert torch.autograd.gradcheck(model.predict, (context,), eps=1e-5, atol=1e-8, rtol=1e-4)

    names = ["context.rel_bias.0.table", "context.blocks.0.attn.q_proj.weight"]
    params = dict(model.named_parameters())
    inputs = tuple(params[n].detach().clone().requires_grad_(True) for n in names)

    def run(*values):
        overrides = {name[len("context."):]: value for name, value in zip(names, values)}
        return torch.func.functional_call(model.context, overrides, (latent.detach(),))

    assert torch.autograd.gradcheck(run, inputs, eps=1e-5, atol=1e-8, rtol=1e-4)


def test_pretrain_loss_falls_without_grad_scalar_warnings():
    model = _tiny_model()
    rng = np.random.default_rng(4)
    clips = [(f"c{i}", rng.normal(size=(8, 12))) for i in range(3)]
    labels = {clip_id: np.tile(rng.dirichlet(np.full(3, 0.3)), (12, 1)) for clip_id, _ in clips}
    means = rng.normal(size=(3, 8))
    optimizer = numgrad.make_adamw(model.parameter_groups(1e-2, 1e-3))
    with warnings.catch_warnings():
        warnings.filterwarnings("error", message=".*requires_grad.*")
        history = pretrain(model, clips, labels, means, optimizer, PretrainConfig(epochs=30, batch_size=2),
                           MaskConfig(ratio=0.5, block=3), CFG, seed=0)
    losses = history["loss_mean"].to_numpy()
    assert losses[-1] <= 0.8 * losses[0]
