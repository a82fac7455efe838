import numpy as np
import pytest
import torch

from director.diffcore import ContractViolation
from director.worldmodel import ModelState, ReplaySequence, WorldModel, gaussian_kl


def small_model(**kw):
    args = dict(action_dim=3, image_size=16, deter=12, stoch=4, layers=1, units=16)
    args.update(kw)
    return WorldModel(**args)


def random_batch(b=2, t=5, size=16, actions=3, seed=0):
    rng = np.random.default_rng(seed)
    first = np.zeros((b, t), bool)
    first[:, 0] = True
    return ReplaySequence(
        image=rng.integers(0, 256, (b, t, size, size, 3), dtype=np.uint8),
        action=np.eye(actions, dtype=np.float32)[rng.integers(actions, size=(b, t))],
        reward=rng.random((b, t)).astype(np.float32),
        is_first=first,
    )


def test_kl_identities():
    m, s = torch.randn(5), torch.rand(5) + 0.1
    assert torch.allclose(gaussian_kl(m, s, m, s), torch.zeros(5))
    kl = gaussian_kl(torch.ones(3), torch.ones(3), torch.zeros(3), torch.ones(3))
    assert torch.allclose(kl, torch.full((3,), 0.5))


def test_kl_matches_monte_carlo():
    gen = torch.Generator().manual_seed(3)
    mp, sp = torch.tensor([0.3, -1.0, 2.0]), torch.tensor([0.5, 1.5, 0.8])
    mq, sq = torch.tensor([0.0, 0.5, 1.0]), torch.tensor([1.0, 1.0, 2.0])
    closed = gaussian_kl(mp, sp, mq, sq).sum()
    p, q = torch.distributions.Normal(mp.double(), sp.double()), torch.distributions.Normal(
        mq.double(), sq.double())
    x = mp.double() + sp.double() * torch.randn(100_000, 3, generator=gen, dtype=torch.float64)
    mc = (p.log_prob(x) - q.log_prob(x)).sum(-1).mean()
    assert abs(mc.item() - closed.item()) / closed.item() < 0.01


def test_kl_nonnegative_on_loss():
    _, post, m = small_model().loss(random_batch())
    assert m["kl"] >= 0


def test_observe_single_step_shape():
    wm = small_model()
    data = random_batch(t=1).tensors()
    post, prior = wm.observe(data["image"], data["action"], data["is_first"])
    assert post.features.shape == (2, 1, wm.feature_dim)
    assert prior.deter.shape == (2, 1, 12)


def test_is_first_ignores_initial_state():
    wm = small_model()
    data = random_batch().tensors()
    other = ModelState(*(torch.randn(2, d) for d in (12, 4, 4, 4)))
    a, _ = wm.observe(data["image"], data["action"], data["is_first"], sample=False)
    b, _ = wm.observe(data["image"], data["action"], data["is_first"], initial=other,
                      initial_action=torch.ones(2, 3), sample=False)
    assert torch.equal(a.features, b.features)


def test_observe_is_deterministic_under_seed():
    wm = small_model()
    data = random_batch().tensors()
    torch.manual_seed(5)
    a, _ = wm.observe(data["image"], data["action"], data["is_first"])
    torch.manual_seed(5)
    b, _ = wm.observe(data["image"], data["action"], data["is_first"])
    assert torch.equal(a.features, b.features)


def test_imagine_chain_and_std_floor():
    wm = small_model()
    state = wm.initial(3)
    states = []
    for _ in range(16):
        state = wm.imagine_step(state, torch.eye(3)[torch.tensor([0, 1, 2])])
        states.append(state)
        assert state.features.shape == (3, wm.feature_dim)
        assert bool((state.std >= 0.1).all())
    assert len(states) == 16


def test_imagine_rejects_wrong_action_width():
    with pytest.raises(ContractViolation):
        small_model().imagine_step(small_model().initial(1), torch.zeros(1, 5))


def test_decoder_output_shape():
    wm = small_model()
    assert wm.decode_obs(torch.randn(4, wm.feature_dim)).shape == (4, 16, 16, 3)
    assert wm.predict_reward(torch.randn(4, wm.feature_dim)).shape == (4,)


def test_misaligned_sequence_rejected():
    b = random_batch()
    with pytest.raises(ContractViolation):
        ReplaySequence(b.image[:, :3], b.action, b.reward, b.is_first)


def test_reward_loss_masks_episode_starts():
    wm = small_model()
    batch = random_batch(b=1, t=4)
    wm.reward_head.head.bias.data.fill_(100.0)
    base = wm.loss(batch)[2]["reward_loss"]
    # Rewards on rows whose successor starts a new episode must not matter.
    batch.is_first[0, 2] = True
    batch.reward[0, 1] = 1e6
    torch.manual_seed(0)
    assert wm.loss(batch)[2]["reward_loss"] <= base
    batch.reward[0, 3] = 1e6  # last row has no successor
    torch.manual_seed(0)
    assert wm.loss(batch)[2]["reward_loss"] <= base
