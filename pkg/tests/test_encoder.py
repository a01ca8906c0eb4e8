import math

import numpy as np
import pytest
import torch

from gblum.encoder import (
    POOLINGS,
    BehaviorEncoder,
    ModelConfig,
    NonFiniteLossError,
    alibi_bias,
    alibi_bias_tensor,
    alibi_slopes,
    cosine_matrix,
    cosine_similarity,
    loss_and_gradients,
    pool,
    pool_tensor,
)
from gblum.objectives import mbp_loss, ucl_loss


def tiny_config(**kw):
    base = dict(num_layers=1, hidden_dim=8, num_heads=2, ffn_dim=16, vocab_size=11, max_train_len=6)
    base.update(kw)
    return ModelConfig(**base)


# -- ALiBi --------------------------------------------------------------------

def test_alibi_row_example():
    assert alibi_bias(4, 0, 4)[2].tolist() == [-1.0, -0.5, 0.0, -0.5]


def test_alibi_single_token():
    assert alibi_bias(1, 0, 1).tolist() == [[0.0]]


def test_slopes_are_geometric():
    assert alibi_slopes(4) == [0.5, 0.25, 0.125, 0.0625]
    s = alibi_slopes(12)
    assert all(s[h] == 2 * s[h + 1] for h in range(11))


@pytest.mark.parametrize("length", [1, 4, 64])
@pytest.mark.parametrize("heads", [1, 4, 8])
def test_alibi_exact_formula(length, heads):
    i, j = np.meshgrid(np.arange(length), np.arange(length), indexing="ij")
    t = alibi_bias_tensor(length, heads, torch.float64).numpy()
    for h in range(heads):
        b = alibi_bias(length, h, heads)
        assert np.array_equal(b, -(2.0 ** -(h + 1)) * np.abs(i - j))
        assert np.array_equal(b, b.T)
        assert np.all(np.diag(b) == 0) and np.all(b <= 0)
        assert np.array_equal(t[h], b)
        # monotone in distance along the first row
        assert np.all(np.diff(b[0]) <= 0)


def test_alibi_head_out_of_range():
    with pytest.raises(ValueError):
        alibi_bias(4, 4, 4)


# -- configuration ------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(hidden_dim=10, num_heads=4).validate()
    with pytest.raises(ValueError):
        ModelConfig(positional_mode="rotary").validate()
    with pytest.raises(ValueError):
        ModelConfig(attention_mode="sideways").validate()
    assert ModelConfig().use_alibi
    assert not ModelConfig(positional_mode="learned_absolute").use_alibi


def test_parameter_inventory():
    m = BehaviorEncoder(ModelConfig())
    names = dict(m.named_parameters())
    assert names["embed.weight"].shape == (123, 64)
    assert "pos_embed" not in names
    assert names["head.weight"].shape == (123, 64)
    learned = BehaviorEncoder(ModelConfig(positional_mode="learned_absolute"))
    assert dict(learned.named_parameters())["pos_embed"].shape == (32, 64)


# -- forward ------------------------------------------------------------------

def test_forward_shape_and_finite():
    m = BehaviorEncoder(ModelConfig())
    out = m(torch.randint(0, 120, (3, 17)))
    assert out.shape == (3, 17, 64)
    assert torch.isfinite(out).all()
    assert m.logits(out).shape == (3, 17, 123)


def test_forward_is_deterministic():
    x = torch.randint(0, 120, (2, 20), generator=torch.Generator().manual_seed(0))
    a = BehaviorEncoder(ModelConfig(), seed=5)(x)
    b = BehaviorEncoder(ModelConfig(), seed=5)(x)
    assert torch.equal(a, b)


def test_permutation_equivariance_without_positions():
    m = BehaviorEncoder(tiny_config(positional_mode="none"), dtype=torch.float64)
    x = torch.tensor([[1, 4, 2, 9, 0, 3]])
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    assert torch.allclose(m(x)[:, perm], m(x[:, perm]), atol=1e-12)


def test_out_of_vocab_names_position():
    m = BehaviorEncoder(tiny_config())
    with pytest.raises(ValueError, match="row 0, position 2"):
        m(torch.tensor([[1, 2, 11, 3]]))


def test_alibi_accepts_long_inputs_learned_rejects():
    m = BehaviorEncoder(ModelConfig(max_train_len=32))
    assert m(torch.zeros(1, 1024, dtype=torch.long)).shape == (1, 1024, 64)
    with pytest.raises(ValueError, match="exceeds"):
        m(torch.zeros(1, 1025, dtype=torch.long))
    learned = BehaviorEncoder(ModelConfig(max_train_len=32, positional_mode="learned_absolute"))
    learned(torch.zeros(1, 32, dtype=torch.long))
    with pytest.raises(ValueError, match="exceeds"):
        learned(torch.zeros(1, 33, dtype=torch.long))


@pytest.mark.parametrize("mode", ["alibi", "learned_absolute", "none"])
@pytest.mark.parametrize("dtype,tol", [(torch.float64, 1e-6), (torch.float32, 1e-5)])
def test_pad_invariance(mode, dtype, tol):
    # float32 differs only by reduction-order rounding between the two shapes
    m = BehaviorEncoder(ModelConfig(positional_mode=mode), dtype=dtype)
    x = torch.randint(0, 120, (1, 12), generator=torch.Generator().manual_seed(2))
    padded = torch.cat([x, torch.full((1, 7), 120)], dim=1)
    mask = torch.arange(19)[None] < 12
    assert (m(x)[0] - m(padded, mask)[0, :12]).abs().max() < tol


def test_causal_ignores_future():
    m = BehaviorEncoder(tiny_config(attention_mode="causal"), dtype=torch.float64)
    x = torch.tensor([[1, 2, 3, 4, 5, 6]])
    y = x.clone()
    y[0, 4:] = torch.tensor([9, 0])
    assert torch.allclose(m(x)[0, :4], m(y)[0, :4], atol=1e-12)
    assert not torch.allclose(m(x)[0, 4:], m(y)[0, 4:])


def test_init_scale():
    m = BehaviorEncoder(ModelConfig(hidden_dim=64), seed=0)
    w = m.embed.weight.detach()
    assert abs(w.var().item() - 1 / 64) < 0.002
    assert torch.equal(m.final_norm.weight, torch.ones(64))


# -- pooling ------------------------------------------------------------------

def test_single_token_pools_to_itself():
    v = np.array([[0.3, -1.2, 2.0]])
    for s in POOLINGS:
        emb = pool(v, strategy=s)
        assert np.allclose(emb.vector, v[0]) and emb.pooling == s


def test_mean_of_opposites_is_zero():
    v = np.array([[1.0, -2.0], [-1.0, 2.0]])
    assert np.allclose(pool(v, strategy="mean").vector, 0)


def test_weighted_mean_hand_arithmetic():
    v = np.array([[1.0, 0.0], [0.0, 3.0], [2.0, 1.0]])
    expected = (v[0] + 2 * v[1] + 3 * v[2]) / 6
    assert np.allclose(pool(v, strategy="weighted_mean").vector, expected, atol=1e-15)
    expected_max = np.max(v * (np.array([1, 2, 3])[:, None] / 6), axis=0)
    assert np.allclose(pool(v, strategy="weighted_max").vector, expected_max, atol=1e-15)


def test_masked_pooling_ignores_padding():
    v = np.array([[1.0, 5.0], [3.0, -1.0], [100.0, 100.0]])
    mask = [True, True, False]
    assert np.allclose(pool(v, mask, "mean").vector, [2.0, 2.0])
    assert np.allclose(pool(v, mask, "max").vector, [3.0, 5.0])
    assert np.allclose(pool(v, mask, "weighted_mean").vector, (v[0] + 2 * v[1]) / 3)


def test_all_masked_rejected():
    with pytest.raises(ValueError, match="all masked"):
        pool(np.ones((2, 3)), [False, False])


def test_batched_pool_matches_single():
    h = torch.randn(2, 5, 4, dtype=torch.float64)
    mask = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)
    for s in POOLINGS:
        out = pool_tensor(h, mask, s)
        assert torch.allclose(out[0], torch.as_tensor(pool(h[0, :3].numpy(), strategy=s).vector))


# -- cosine -------------------------------------------------------------------

def test_cosine_examples():
    x = np.array([0.2, -0.7, 1.1])
    assert cosine_similarity(x, x) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2, 3], [4, 5, 6]) == pytest.approx(0.974631846, abs=1e-9)


def test_cosine_zero_norm_rejected():
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 2])
    with pytest.raises(ValueError):
        cosine_matrix(np.zeros((1, 2)))


def test_cosine_matrix_agrees():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((3, 5)), rng.standard_normal((4, 5))
    m = cosine_matrix(x, y)
    assert m[2, 1] == pytest.approx(cosine_similarity(x[2], y[1]))


# -- gradients ----------------------------------------------------------------

def _fixture_terms(seed=0):
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randint(0, 8, (4, 6), generator=g)
    rows = torch.tensor([0, 1, 2, 3, 0])
    cols = torch.tensor([1, 3, 0, 5, 4])
    targets = tokens[rows, cols].clone()
    inputs = tokens.clone()
    inputs[rows, cols] = 9

    def terms(model):
        h = model(inputs)
        return {
            "mbp": mbp_loss(model.logits(h[rows, cols]), targets),
            "ucl": ucl_loss(h.mean(dim=1), 0.5),
        }

    return terms


def finite_difference_errors(model, terms, step=1e-5):
    _, grads, _ = loss_and_gradients(model, terms)
    errors = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            fd = torch.zeros_like(p)
            flat, fd_flat = p.view(-1), fd.view(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + step
                up = sum(terms(model).values()).item()
                flat[k] = old - step
                down = sum(terms(model).values()).item()
                flat[k] = old
                fd_flat[k] = (up - down) / (2 * step)
            g = grads[name]
            errors[name] = ((g - fd).norm() / max(g.norm(), fd.norm(), 1e-12)).item()
    return errors


def test_gradients_match_finite_differences():
    model = BehaviorEncoder(tiny_config(), seed=3, dtype=torch.float64)
    errors = finite_difference_errors(model, _fixture_terms())
    assert max(errors.values()) < 1e-4, errors


def test_zero_signal_gives_zero_gradient():
    model = BehaviorEncoder(tiny_config(), dtype=torch.float64)
    x = torch.tensor([[1, 2, 3]])
    _, grads, _ = loss_and_gradients(model, lambda m: {"const": m(x).sum() * 0.0})
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_doubling_weight_doubles_gradient():
    model = BehaviorEncoder(tiny_config(), dtype=torch.float64)
    terms = _fixture_terms()
    _, g1, _ = loss_and_gradients(model, terms, {"mbp": 1.0, "ucl": 0.0})
    _, g2, _ = loss_and_gradients(model, terms, {"mbp": 2.0, "ucl": 0.0})
    for name in g1:
        assert torch.allclose(g2[name], 2 * g1[name], atol=1e-12)


def test_gradients_are_additive_over_terms():
    model = BehaviorEncoder(tiny_config(), dtype=torch.float64)
    terms = _fixture_terms()
    total, g, values = loss_and_gradients(model, terms)
    _, gm, _ = loss_and_gradients(model, terms, {"mbp": 1.0, "ucl": 0.0})
    _, gu, _ = loss_and_gradients(model, terms, {"mbp": 0.0, "ucl": 1.0})
    assert total == pytest.approx(values["mbp"] + values["ucl"], abs=1e-12)
    for name in g:
        assert torch.allclose(g[name], gm[name] + gu[name], atol=1e-12)


def test_non_finite_term_is_named():
    model = BehaviorEncoder(tiny_config())
    with pytest.raises(NonFiniteLossError, match="'ucl'"):
        loss_and_gradients(model, lambda m: {"mbp": torch.tensor(1.0), "ucl": torch.tensor(math.inf)})
