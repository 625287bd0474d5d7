import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from clear_scvd.objectives import (
    LossConfig,
    LossError,
    classification_loss,
    clamp_probability,
    contrastive_loss,
    mlm_loss,
    total_cl_loss,
)

f64 = dict(dtype=torch.float64)
vectors = st.lists(st.floats(-50, 50), min_size=3, max_size=3)


def ce_oracle(logits, targets):
    total = 0.0
    for row, t in zip(logits, targets):
        m = max(row)
        log_z = m + math.log(sum(math.exp(x - m) for x in row))
        total += log_z - row[t]
    return total / len(targets)


class TestMlmLoss:
    def test_perfect_prediction(self):
        logits = torch.full((3, 5), -1e4, **f64)
        targets = torch.tensor([0, 2, 4])
        logits[torch.arange(3), targets] = 1e4
        assert mlm_loss(logits, targets).item() == 0.0

    def test_uniform(self):
        for v in (4, 37, 1000):
            loss = mlm_loss(torch.zeros(6, v, **f64), torch.randint(v, (6,))).item()
            assert abs(loss - math.log(v)) <= 1e-6 * math.log(v)

    def test_oracle(self):
        gen = torch.Generator().manual_seed(0)
        logits = torch.randn(7, 11, generator=gen, **f64) * 3
        targets = torch.randint(11, (7,), generator=gen)
        expected = ce_oracle(logits.tolist(), targets.tolist())
        assert abs(mlm_loss(logits, targets).item() - expected) <= 1e-6 * expected

    def test_empty_mask(self):
        with pytest.raises(LossError):
            mlm_loss(torch.zeros(0, 5), torch.zeros(0, dtype=torch.long))


class TestContrastiveLoss:
    def test_identical_similar(self):
        v = torch.tensor([0.3, -1.2], **f64)
        assert contrastive_loss(v, v.clone(), 1, margin=1.0).item() == 0.0

    def test_hand_value(self):
        loss = contrastive_loss(torch.tensor([0.0, 0.0], **f64), torch.tensor([3.0, 4.0], **f64), 0, margin=6.0)
        assert abs(loss.item() - 1.0) <= 1e-9

    def test_similar_pair_is_squared_distance(self):
        loss = contrastive_loss(torch.tensor([0.0, 0.0], **f64), torch.tensor([3.0, 4.0], **f64), 1, margin=6.0)
        assert abs(loss.item() - 25.0) <= 1e-9

    def test_beyond_margin(self):
        loss = contrastive_loss(torch.tensor([0.0, 0.0], **f64), torch.tensor([3.0, 4.0], **f64), 0, margin=5.0)
        assert loss.item() == 0.0

    def test_batch_mean(self):
        a = torch.tensor([[0.0, 0.0], [1.0, 1.0]], **f64)
        b = torch.tensor([[3.0, 4.0], [1.0, 1.0]], **f64)
        loss = contrastive_loss(a, b, torch.tensor([0.0, 0.0], **f64), margin=6.0)
        assert abs(loss.item() - (1.0 + 36.0) / 2) <= 1e-9

    def test_gradient_finite_at_zero_distance(self):
        a = torch.zeros(3, requires_grad=True, **f64)
        b = torch.zeros(3, **f64)
        contrastive_loss(a, b, 0, margin=1.0).backward()
        assert torch.isfinite(a.grad).all()

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            contrastive_loss(torch.zeros(2), torch.zeros(3), 1)

    @given(vectors, vectors, st.sampled_from([0, 1]), st.floats(0.1, 20))
    def test_symmetric_and_non_negative(self, a, b, label, margin):
        a, b = torch.tensor(a, **f64), torch.tensor(b, **f64)
        ab = contrastive_loss(a, b, label, margin).item()
        ba = contrastive_loss(b, a, label, margin).item()
        assert ab >= 0 and abs(ab - ba) <= 1e-9 * max(1.0, ab)

    @given(vectors, vectors, st.floats(0.1, 20))
    def test_matches_scalar_formula(self, a, b, margin):
        d = math.dist(a, b)
        ta, tb = torch.tensor(a, **f64), torch.tensor(b, **f64)
        assert abs(contrastive_loss(ta, tb, 1, margin).item() - d * d) <= 1e-9 * max(1.0, d * d)
        assert abs(contrastive_loss(ta, tb, 0, margin).item() - max(0.0, margin - d) ** 2) <= 1e-9 * max(1.0, margin**2)


class TestTotal:
    def test_paper_weights(self):
        assert abs(total_cl_loss(2.0, 3.0, LossConfig(lambda_cl=1.0, lambda_mlm=0.1)) - 2.3) <= 1e-12

    def test_no_mlm(self):
        assert total_cl_loss(2.0, 3.0, LossConfig(lambda_mlm=0.0)) == 2.0

    def test_all_off(self):
        assert total_cl_loss(2.0, 3.0, LossConfig(lambda_cl=0.0, lambda_mlm=0.0)) == 0.0

    @pytest.mark.parametrize("kwargs", [dict(margin=0.0), dict(margin=-1.0), dict(lambda_cl=-0.1), dict(lambda_mlm=-1)])
    def test_config_validation(self, kwargs):
        with pytest.raises(LossError):
            LossConfig(**kwargs)


class TestClassificationLoss:
    def test_half(self):
        for y in (0.0, 1.0):
            loss = classification_loss(torch.tensor([0.5], **f64), torch.tensor([y], **f64))
            assert abs(loss.item() - math.log(2)) <= 1e-9

    def test_confident_wrong(self):
        loss = classification_loss(torch.tensor([0.9], **f64), torch.tensor([0.0], **f64))
        assert abs(loss.item() + math.log(0.1)) <= 1e-9
        assert abs(loss.item() - 2.302585) <= 1e-6

    def test_approaches_zero(self):
        loss = classification_loss(torch.tensor([1 - 1e-12], **f64), torch.tensor([1.0], **f64))
        assert loss.item() < 1e-11

    def test_rejects_boundary(self):
        with pytest.raises(LossError):
            classification_loss(torch.tensor([1.0]), torch.tensor([1.0]))
        with pytest.raises(LossError):
            classification_loss(torch.tensor([0.0]), torch.tensor([0.0]))

    def test_clamp_keeps_loss_finite(self):
        p = clamp_probability(torch.tensor([0.0, 1.0], **f64))
        loss = classification_loss(p, torch.tensor([1.0, 0.0], **f64))
        assert math.isfinite(loss.item())

    @given(st.floats(1e-6, 1 - 1e-6), st.sampled_from([0.0, 1.0]))
    def test_oracle(self, p, y):
        expected = -(y * math.log(p) + (1 - y) * math.log(1 - p))
        got = classification_loss(torch.tensor([p], **f64), torch.tensor([y], **f64)).item()
        assert abs(got - expected) <= 1e-9 * max(1.0, expected)
