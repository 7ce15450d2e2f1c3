import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mirage.agent import ActorCritic, ema_update, lambda_returns, return_scale
from mirage.config import AgentConfig, WorldModelConfig
from mirage.numerics import RngStreams, grad_check


def nstep_mixture_oracle(r, c, v, gamma, lam):
    """Independent lambda-return implementation via the n-step mixture.

    G_t = (1 - lam) * sum_{n=1}^{m-1} lam^(n-1) G_t^(n) + lam^(m-1) G_t^(m),
    with G_t^(n) the n-step bootstrapped return and m the steps remaining.
    Pure numpy, no recursion shared with the implementation under test.
    """
    r, c, v = (np.asarray(x, dtype=np.float64) for x in (r, c, v))
    L = len(r)
    out = np.empty(L + 1)
    out[L] = v[L]
    for t in range(L):
        m = L - t
        nstep = np.empty(m)
        for n in range(1, m + 1):
            acc, disc = 0.0, 1.0
            for k in range(n):
                acc += disc * r[t + k]
                disc *= gamma * c[t + k]
            nstep[n - 1] = acc + disc * v[t + n]
        g = (1 - lam) * sum(lam ** (n - 1) * nstep[n - 1] for n in range(1, m))
        g += lam ** (m - 1) * nstep[m - 1]
        out[t] = g
    return out


def percentile_range_oracle(values):
    """Sorted-array percentile with linear interpolation, by hand."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = len(x)

    def pct(q):
        pos = q / 100.0 * (n - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, n - 1)
        frac = pos - lo
        return x[lo] * (1 - frac) + x[hi] * frac

    return pct(95.0) - pct(5.0)


class TestLambdaReturns:
    def test_boundary_is_last_value(self):
        r = torch.rand(4, 5)
        c = torch.ones(4, 5)
        v = torch.rand(4, 6)
        g = lambda_returns(r, c, v, 0.985, 0.95)
        assert torch.equal(g[:, -1], v[:, -1])

    def test_terminated_everywhere_returns_rewards(self):
        r = torch.rand(3, 7)
        c = torch.zeros(3, 7)
        v = torch.rand(3, 8) * 100
        g = lambda_returns(r, c, v, 0.985, 0.95)
        assert torch.allclose(g[:, :-1], r)

    def test_documented_example(self):
        # r=[1,0], c=[1,1], v=[0,0,10] under the default discounting.
        g = lambda_returns(torch.tensor([[1.0, 0.0]]), torch.tensor([[1.0, 1.0]]),
                           torch.tensor([[0.0, 0.0, 10.0]]), 0.985, 0.95)
        oracle = nstep_mixture_oracle([1.0, 0.0], [1.0, 1.0], [0.0, 0.0, 10.0], 0.985, 0.95)
        assert np.allclose(g[0].numpy(), oracle, atol=1e-6)
        assert np.allclose(oracle, [10.21716875, 9.85, 10.0], atol=1e-4)

    def test_matches_unrolled_oracle_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            L = int(rng.integers(1, 17))
            gamma = float(rng.uniform(0.8, 1.0))
            lam = float(rng.uniform(0.0, 1.0))
            r = rng.normal(size=L)
            c = rng.choice([0.0, 1.0, 0.5, 0.97], size=L)
            v = rng.normal(size=L + 1) * 10
            ours = lambda_returns(torch.tensor(r).unsqueeze(0), torch.tensor(c).unsqueeze(0),
                                  torch.tensor(v).unsqueeze(0), gamma, lam)[0].numpy()
            oracle = nstep_mixture_oracle(r, c, v, gamma, lam)
            assert np.abs(ours - oracle).max() < 1e-6

    @given(st.integers(min_value=1, max_value=16), st.integers(min_value=0, max_value=2 ** 32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_hypothesis_against_oracle(self, L, seed):
        rng = np.random.default_rng(seed)
        r = rng.normal(size=L)
        c = rng.uniform(0, 1, size=L)
        v = rng.normal(size=L + 1)
        ours = lambda_returns(torch.tensor(r).unsqueeze(0), torch.tensor(c).unsqueeze(0),
                              torch.tensor(v).unsqueeze(0), 0.985, 0.95)[0].numpy()
        assert np.abs(ours - nstep_mixture_oracle(r, c, v, 0.985, 0.95)).max() < 1e-6

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            lambda_returns(torch.rand(2, 5), torch.rand(2, 5), torch.rand(2, 5), 0.9, 0.9)


class TestReturnScale:
    def test_degenerate_batch_gives_zero(self):
        s = return_scale(torch.full((4, 8), 3.25))
        assert s.item() == 0.0
        assert torch.clamp(s, min=1.0).item() == 1.0  # divisor regime

    def test_uniform_grid_range_is_90(self):
        g = torch.linspace(0, 100, 101)
        s = return_scale(g)
        assert s.item() == pytest.approx(90.0, abs=1e-5)
        assert percentile_range_oracle(g.numpy()) == pytest.approx(90.0, abs=1e-9)

    def test_matches_oracle_on_random_batches(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            values = rng.normal(size=(8, int(rng.integers(2, 40)))) * rng.uniform(0.1, 50)
            ours = return_scale(torch.tensor(values)).item()
            assert ours == pytest.approx(percentile_range_oracle(values), rel=1e-9, abs=1e-9)

    def test_positive_homogeneity(self):
        g = torch.randn(6, 10, dtype=torch.float64)
        k = 3.7
        assert return_scale(k * g).item() == pytest.approx(k * return_scale(g).item(), rel=1e-9)


class TestEmaUpdate:
    def _pair(self):
        wm = WorldModelConfig(image_size=8, channels_base=4, categories=4, classes=4,
                              feature_dim=16, layers=1, heads=2, train_context=4,
                              inference_context=8)
        agent = ActorCritic(wm, AgentConfig(hidden_dim=16))
        agent.init_parameters(RngStreams(seed=0))
        return agent

    def test_basic_arithmetic(self):
        a = torch.nn.Linear(1, 1, bias=False)
        b = torch.nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            a.weight.fill_(1.0)
            b.weight.fill_(0.0)
        ema_update(a, b, 0.98)
        assert b.weight.item() == pytest.approx(0.02)

    def test_fixed_point(self):
        agent = self._pair()
        before = {k: v.clone() for k, v in agent.critic_ema.state_dict().items()}
        agent.update_ema()  # critic == ema at init
        for k, v in agent.critic_ema.state_dict().items():
            assert torch.allclose(v, before[k])

    def test_geometric_convergence(self):
        a = torch.nn.Linear(1, 1, bias=False)
        b = torch.nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            a.weight.fill_(1.0)
            b.weight.fill_(0.0)
        gaps = []
        for _ in range(5):
            ema_update(a, b, 0.98)
            gaps.append(1.0 - b.weight.item())
        ratios = [gaps[i + 1] / gaps[i] for i in range(4)]
        assert all(r == pytest.approx(0.98, abs=1e-6) for r in ratios)


@pytest.fixture
def small_agent():
    wm = WorldModelConfig(image_size=8, channels_base=4, categories=4, classes=4,
                          feature_dim=16, layers=1, heads=2, train_context=4,
                          inference_context=8)
    agent = ActorCritic(wm, AgentConfig(hidden_dim=32))
    agent.init_parameters(RngStreams(seed=2))
    return agent


def widen_init(module: torch.nn.Module, seed: int = 0) -> None:
    """Re-init for finite-difference tests.

    Hidden layers get large weights so pre-activations sit far from ReLU
    kinks and gradients rise above the FD noise floor.  Wide *bucket* output
    layers instead get compact weights: spread-out logits over 255 buckets
    push remote-bucket softmax tails (and hence their weight gradients)
    below what central differences can resolve.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        linears = [m for m in module.modules() if isinstance(m, torch.nn.Linear)]
        for layer in linears:
            wide_output = layer.out_features >= 64
            layer.weight.normal_(0.0, 0.02 if wide_output else 0.3, generator=gen)
            layer.bias.uniform_(-0.2, 0.2, generator=gen)


class TestActorLoss:
    def test_zero_advantage_reduces_to_entropy_term(self, small_agent):
        states = torch.randn(6, 4, small_agent.state_width)
        actions = torch.randint(0, 4, (6, 4))
        g = torch.randn(6, 4)
        loss, entropy = small_agent.actor_loss(states, actions, g, g.clone(), scale=5.0)
        assert loss.item() == pytest.approx(-small_agent.cfg.entropy_coef * entropy.item(), rel=1e-5)

    def test_uniform_policy_entropy_is_log_a(self, small_agent):
        with torch.no_grad():
            for layer in small_agent.policy:
                if isinstance(layer, torch.nn.Linear):
                    layer.weight.zero_()
                    layer.bias.zero_()
        states = torch.randn(3, 5, small_agent.state_width)
        actions = torch.randint(0, 4, (3, 5))
        g = torch.zeros(3, 5)
        loss, entropy = small_agent.actor_loss(states, actions, g, g, scale=1.0)
        assert entropy.item() == pytest.approx(math.log(4.0), abs=1e-6)
        assert loss.item() == pytest.approx(-small_agent.cfg.entropy_coef * math.log(4.0), rel=1e-5)

    def test_no_gradient_into_critic_or_targets(self, small_agent):
        states = torch.randn(4, 3, small_agent.state_width)
        actions = torch.randint(0, 4, (4, 3))
        values = small_agent.value(states)          # graph into the critic
        returns = values * 1.5 + torch.randn(4, 3)  # graph into the critic too
        loss, _ = small_agent.actor_loss(states, actions, returns, values, scale=2.0)
        grads = torch.autograd.grad(loss, list(small_agent.critic.parameters()), allow_unused=True)
        assert all(g is None or torch.all(g == 0) for g in grads)

    def test_scaling_invariance_of_gradient(self, small_agent):
        states = torch.randn(5, 6, small_agent.state_width)
        actions = torch.randint(0, 4, (5, 6))
        g = torch.randn(5, 6) * 10
        v = torch.randn(5, 6) * 10
        s = return_scale(g)
        assert s > 1.0
        k = 4.0
        loss_a, _ = small_agent.actor_loss(states, actions, g, v, s)
        grads_a = torch.autograd.grad(loss_a, list(small_agent.policy.parameters()))
        loss_b, _ = small_agent.actor_loss(states, actions, k * g, k * v, return_scale(k * g))
        grads_b = torch.autograd.grad(loss_b, list(small_agent.policy.parameters()))
        for ga, gb in zip(grads_a, grads_b):
            assert torch.allclose(ga, gb, atol=1e-6)

    def test_gradient_check(self, small_agent):
        agent = small_agent.double()
        widen_init(agent.policy, seed=11)
        gen = torch.Generator().manual_seed(7)
        states = torch.randn(2, 3, agent.state_width, dtype=torch.float64, generator=gen)
        actions = torch.randint(0, 4, (2, 3), generator=gen)
        returns = torch.randn(2, 3, dtype=torch.float64, generator=gen)
        values = torch.randn(2, 3, dtype=torch.float64, generator=gen)

        def loss_fn():
            loss, _ = agent.actor_loss(states, actions, returns, values, scale=2.0)
            return loss

        err = grad_check(loss_fn, list(agent.policy.parameters()))
        assert err < 1e-3

    def test_higher_entropy_coefficient_raises_post_update_entropy(self):
        wm = WorldModelConfig(image_size=8, channels_base=4, categories=4, classes=4,
                              feature_dim=16, layers=1, heads=2, train_context=4,
                              inference_context=8)
        results = {}
        gen = torch.Generator().manual_seed(9)
        states = torch.randn(16, 8, 16 + 16, generator=gen)  # both-mode width
        actions = torch.randint(0, 4, (16, 8), generator=gen)
        returns = torch.randn(16, 8, generator=gen)
        values = torch.zeros(16, 8)
        for coef in (3e-4, 3e-1):
            agent = ActorCritic(wm, AgentConfig(hidden_dim=32, entropy_coef=coef))
            agent.init_parameters(RngStreams(seed=4))
            opt = torch.optim.Adam(agent.policy.parameters(), lr=5e-3)
            for _ in range(120):
                loss, _ = agent.actor_loss(states, actions, returns, values, scale=1.0)
                opt.zero_grad()
                loss.backward()
                opt.step()
            logits = agent.policy_logits(states)
            logp = torch.log_softmax(logits, dim=-1)
            results[coef] = float(-(logp.exp() * logp).sum(-1).mean())
        assert results[3e-1] > results[3e-4]


class TestCriticLoss:
    def test_matched_targets_minimize_loss(self, small_agent):
        # Zero weights, bias = log target distribution: the critic softmax
        # equals the two-hot target for G = 0 (one-hot on the middle bucket),
        # and the EMA copy decodes to the same scalar.
        agent = small_agent
        g = torch.zeros(2, 3)
        target = agent.grid.encode(torch.tensor(0.0))
        with torch.no_grad():
            for layer in list(agent.critic) + list(agent.critic_ema):
                if isinstance(layer, torch.nn.Linear):
                    layer.weight.zero_()
                    layer.bias.zero_()
            agent.critic[-1].bias.copy_(target.clamp_min(1e-30).log())
            agent.critic_ema[-1].bias.copy_(target.clamp_min(1e-30).log())
        states = torch.randn(2, 3, agent.state_width)
        loss = agent.critic_loss(states, g)
        assert loss.item() == pytest.approx(0.0, abs=1e-4)

    def test_ema_receives_no_gradient(self, small_agent):
        states = torch.randn(3, 4, small_agent.state_width)
        loss = small_agent.critic_loss(states, torch.randn(3, 4))
        assert all(not p.requires_grad for p in small_agent.critic_ema.parameters())
        loss.backward()
        assert all(p.grad is None for p in small_agent.critic_ema.parameters())

    def test_gradient_check(self, small_agent):
        agent = small_agent.double()
        widen_init(agent.critic, seed=12)
        agent.grid = agent.grid.to(torch.float64)
        gen = torch.Generator().manual_seed(7)
        states = torch.randn(2, 3, agent.state_width, dtype=torch.float64, generator=gen)
        returns = torch.randn(2, 3, dtype=torch.float64, generator=gen) * 3
        # Precondition: every ReLU pre-activation clears the FD window, so
        # central differences never step across a kink.
        x = states
        for layer in agent.critic[:-1]:
            x = layer(x)
            if isinstance(layer, torch.nn.Linear):
                assert x.abs().min().item() > 1e-3
        err = grad_check(lambda: agent.critic_loss(states, returns),
                         list(agent.critic.parameters()))
        assert err < 1e-3


class TestStateModes:
    @pytest.mark.parametrize("mode,width", [("both", 16 + 16), ("latent", 16), ("hidden", 16)])
    def test_state_widths(self, mode, width):
        wm = WorldModelConfig(image_size=8, channels_base=4, categories=4, classes=4,
                              feature_dim=16, layers=1, heads=2, train_context=4,
                              inference_context=8)
        agent = ActorCritic(wm, AgentConfig(hidden_dim=16, state_mode=mode))
        assert agent.state_width == width
        z = torch.rand(5, 4, 4)
        h = torch.rand(5, 16)
        assert agent.build_state(z, h).shape == (5, width)

    def test_latent_mode_blocks_hidden_gradient(self):
        wm = WorldModelConfig(image_size=8, channels_base=4, categories=4, classes=4,
                              feature_dim=16, layers=1, heads=2, train_context=4,
                              inference_context=8)
        agent = ActorCritic(wm, AgentConfig(hidden_dim=16, state_mode="latent"))
        agent.init_parameters(RngStreams(seed=0))
        z = torch.rand(5, 4, 4, requires_grad=True)
        h = torch.rand(5, 16, requires_grad=True)
        state = agent.build_state(z, h)
        loss = agent.policy_logits(state).sum()
        gz, gh = torch.autograd.grad(loss, [z, h], allow_unused=True)
        assert gz is not None and gz.abs().sum() > 0
        assert gh is None or torch.all(gh == 0)
